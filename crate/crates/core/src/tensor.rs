//! Dense image planes and the numerical kernels built on them.
//!
//! Everything here is generic over the scalar type through [`Scalar`];
//! the rest of the crate instantiates these kernels at `f64` via the
//! [`Image`](crate::Image) alias.

use crate::error::{contract, Result};
use num_traits::{Float, NumAssign};
use std::fmt::Debug;
use std::iter::Sum;

/// Scalar types the kernels operate on.
///
/// Implemented automatically for any floating-point type satisfying the
/// bounds (in practice `f32` and `f64`).
pub trait Scalar: Float + NumAssign + Sum + Send + Sync + Debug + 'static {}
impl<T: Float + NumAssign + Sum + Send + Sync + Debug + 'static> Scalar for T {}

/// A dense `channels x height x width` grid of scalars.
///
/// Storage is channel-planar: each channel is a contiguous row-major
/// `height x width` plane, so `data[(c*H + y)*W + x]` addresses channel
/// `c`, row `y`, column `x`. Images, feature maps and response maps all
/// use this one type.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane<T> {
    data: Vec<T>,
    height: usize,
    width: usize,
    channels: usize,
}

impl<T: Scalar> ImagePlane<T> {
    /// Builds a plane from raw channel-planar data, validating shape and
    /// finiteness.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(contract(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(contract(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(contract("image contains non-finite values".to_string()));
        }
        Ok(Self {
            data,
            height,
            width,
            channels,
        })
    }

    /// Constructs without the O(n) finiteness scan. For internal use by
    /// kernels whose outputs are finite by construction.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            data,
            height,
            width,
            channels,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::from_raw(height, width, channels, vec![T::zero(); height * width * channels])
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self::from_raw(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a plane by evaluating `f(channel, row, col)` at every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_raw(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// A contiguous row of one channel plane.
    #[inline]
    pub fn row(&self, c: usize, y: usize) -> &[T] {
        let start = (c * self.height + y) * self.width;
        &self.data[start..start + self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, y: usize) -> &mut [T] {
        let start = (c * self.height + y) * self.width;
        &mut self.data[start..start + self.width]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    /// Argmax over a single-channel plane, lowest row-major index winning
    /// ties. Returns `(row, col)`.
    pub fn argmax_cell(&self) -> (usize, usize) {
        debug_assert_eq!(self.channels, 1);
        let mut best = 0usize;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Crops to the top-left `new_height x new_width` region of every channel.
    pub fn crop_top_left(&self, new_height: usize, new_width: usize) -> Self {
        assert!(new_height <= self.height && new_width <= self.width);
        let mut out = Self::zeros(new_height, new_width, self.channels);
        for c in 0..self.channels {
            for y in 0..new_height {
                out.row_mut(c, y).copy_from_slice(&self.row(c, y)[..new_width]);
            }
        }
        out
    }

    /// Extracts the `size x size` window with top-left corner `(top, left)`,
    /// keeping all channels.
    pub fn window(&self, top: usize, left: usize, size: usize) -> Self {
        assert!(top + size <= self.height && left + size <= self.width);
        let mut out = Self::zeros(size, size, self.channels);
        for c in 0..self.channels {
            for y in 0..size {
                out.row_mut(c, y)
                    .copy_from_slice(&self.row(c, top + y)[left..left + size]);
            }
        }
        out
    }
}

/// A bank of convolution filters: `out_maps x in_maps x k_h x k_w` weights
/// plus one bias per output map.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub out_maps: usize,
    pub in_maps: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl<T: Scalar> KernelStack<T> {
    pub fn zeros(out_maps: usize, in_maps: usize, k_h: usize, k_w: usize) -> Self {
        Self {
            weights: vec![T::zero(); out_maps * in_maps * k_h * k_w],
            bias: vec![T::zero(); out_maps],
            out_maps,
            in_maps,
            k_h,
            k_w,
        }
    }

    #[inline]
    pub fn weight_idx(&self, m: usize, c: usize, dy: usize, dx: usize) -> usize {
        ((m * self.in_maps + c) * self.k_h + dy) * self.k_w + dx
    }

    #[inline]
    pub fn weight(&self, m: usize, c: usize, dy: usize, dx: usize) -> T {
        self.weights[self.weight_idx(m, c, dy, dx)]
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }
}

/// Flat input indices of the winning cell of every pooling window,
/// recorded for gradient routing.
#[derive(Debug, Clone)]
pub struct ArgmaxRecord {
    pub winners: Vec<usize>,
    pub out_height: usize,
    pub out_width: usize,
    pub channels: usize,
}

/// Valid-mode 2D cross-correlation of a multi-channel input with a filter
/// bank.
///
/// `out[m][y][x] = bias[m] + sum over (c, dy, dx) of
/// weight[m][c][dy][dx] * input[c][y*stride + dy][x*stride + dx]`.
/// The kernel is applied in cross-correlation orientation (no index
/// reversal); learned filters absorb the orientation.
pub fn conv2d_valid<T: Scalar>(
    input: &ImagePlane<T>,
    kernels: &KernelStack<T>,
    stride: usize,
) -> Result<ImagePlane<T>> {
    if stride == 0 {
        return Err(contract("conv2d_valid: stride must be >= 1"));
    }
    if input.channels() != kernels.in_maps {
        return Err(contract(format!(
            "conv2d_valid: input has {} channels but kernels expect {} \
             (input {}x{}x{}, kernels {}x{}x{}x{})",
            input.channels(),
            kernels.in_maps,
            input.channels(),
            input.height(),
            input.width(),
            kernels.out_maps,
            kernels.in_maps,
            kernels.k_h,
            kernels.k_w,
        )));
    }
    if input.height() < kernels.k_h || input.width() < kernels.k_w {
        return Err(contract(format!(
            "conv2d_valid: input {}x{} smaller than kernel {}x{}",
            input.height(),
            input.width(),
            kernels.k_h,
            kernels.k_w
        )));
    }
    let out_h = (input.height() - kernels.k_h) / stride + 1;
    let out_w = (input.width() - kernels.k_w) / stride + 1;
    let mut out = ImagePlane::zeros(out_h, out_w, kernels.out_maps);

    for m in 0..kernels.out_maps {
        let b = kernels.bias[m];
        for y in 0..out_h {
            out.row_mut(m, y).fill(b);
        }
        for c in 0..kernels.in_maps {
            for dy in 0..kernels.k_h {
                for dx in 0..kernels.k_w {
                    let w = kernels.weight(m, c, dy, dx);
                    if stride == 1 {
                        // Contiguous accumulation: out_row += w * in_row[dx..].
                        for y in 0..out_h {
                            let in_row = &input.row(c, y + dy)[dx..dx + out_w];
                            let out_row = out.row_mut(m, y);
                            for (o, &i) in out_row.iter_mut().zip(in_row) {
                                *o += w * i;
                            }
                        }
                    } else {
                        for y in 0..out_h {
                            let in_row = input.row(c, y * stride + dy);
                            let out_row = out.row_mut(m, y);
                            for (x, o) in out_row.iter_mut().enumerate() {
                                *o += w * in_row[x * stride + dx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Same-size true convolution of a single-channel map with an
/// origin-centered prior.
///
/// `out(x) = sum over y of prior(x - y) * a(y)`, i.e. the prior is
/// index-reversed relative to cross-correlation, so a prior cell at offset
/// `(dy, dx)` from its center pushes mass from `a(y, x)` to
/// `out(y + dy, x + dx)`. Taps that fall outside `a` contribute zero.
pub fn conv2d_same_centered<T: Scalar>(
    a: &ImagePlane<T>,
    prior: &ImagePlane<T>,
) -> Result<ImagePlane<T>> {
    if a.channels() != 1 || prior.channels() != 1 {
        return Err(contract(format!(
            "conv2d_same_centered: both arguments must be single-channel, got {} and {}",
            a.channels(),
            prior.channels()
        )));
    }
    if prior.height() % 2 == 0 || prior.width() % 2 == 0 {
        return Err(contract(format!(
            "conv2d_same_centered: prior must have odd dimensions, got {}x{}",
            prior.height(),
            prior.width()
        )));
    }
    let (h, w) = (a.height() as isize, a.width() as isize);
    let ry = (prior.height() / 2) as isize;
    let rx = (prior.width() / 2) as isize;
    let mut out = ImagePlane::zeros(a.height(), a.width(), 1);

    // out(r, c) = sum over (dy, dx) of prior(center + (dy, dx)) * a(r - dy, c - dx)
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            let p = prior.get(0, (ry + dy) as usize, (rx + dx) as usize);
            if p == T::zero() || dx.abs() >= w {
                continue;
            }
            // Destination columns [c_lo, c_hi] read source columns shifted by -dx.
            let c_lo = dx.max(0) as usize;
            let c_hi = ((w - 1 + dx).min(w - 1)) as usize;
            let src_start = (-dx).max(0) as usize;
            let len = c_hi + 1 - c_lo;
            let r_lo = dy.max(0);
            let r_hi = (h - 1 + dy).min(h - 1);
            for r in r_lo..=r_hi {
                let src = &a.row(0, (r - dy) as usize)[src_start..src_start + len];
                let dst = &mut out.row_mut(0, r as usize)[c_lo..=c_hi];
                for (o, &i) in dst.iter_mut().zip(src) {
                    *o += p * i;
                }
            }
        }
    }
    Ok(out)
}

/// Max pooling with edge-replication padding for remainders.
///
/// Sides not divisible by `window` are padded by replicating the last
/// row/column before pooling. Winners are recorded as flat indices into the
/// unpadded input (replicated cells resolve to their source cell); ties go
/// to the lowest row-major index.
pub fn maxpool<T: Scalar>(
    input: &ImagePlane<T>,
    window: usize,
) -> Result<(ImagePlane<T>, ArgmaxRecord)> {
    if window == 0 {
        return Err(contract("maxpool: window must be >= 1"));
    }
    let out_h = input.height().div_ceil(window);
    let out_w = input.width().div_ceil(window);
    let mut out = ImagePlane::zeros(out_h, out_w, input.channels());
    let mut winners = vec![0usize; out_h * out_w * input.channels()];

    for c in 0..input.channels() {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best_v = T::neg_infinity();
                let mut best_i = usize::MAX;
                for wy in 0..window {
                    let y = (oy * window + wy).min(input.height() - 1);
                    for wx in 0..window {
                        let x = (ox * window + wx).min(input.width() - 1);
                        let i = input.idx(c, y, x);
                        let v = input.data()[i];
                        // Strict comparison plus lowest-index preference on ties;
                        // clamped (replicated) cells re-visit their source index,
                        // which never beats its own first visit.
                        if v > best_v || (v == best_v && i < best_i) {
                            best_v = v;
                            best_i = i;
                        }
                    }
                }
                out.set(c, oy, ox, best_v);
                winners[(c * out_h + oy) * out_w + ox] = best_i;
            }
        }
    }
    Ok((
        out,
        ArgmaxRecord {
            winners,
            out_height: out_h,
            out_width: out_w,
            channels: input.channels(),
        },
    ))
}

/// Replicates every cell into a `factor x factor` block.
pub fn upsample_nearest<T: Scalar>(input: &ImagePlane<T>, factor: usize) -> ImagePlane<T> {
    assert!(factor >= 1, "upsample_nearest: factor must be >= 1");
    if factor == 1 {
        return input.clone();
    }
    let (h, w) = (input.height() * factor, input.width() * factor);
    let mut out = ImagePlane::zeros(h, w, input.channels());
    for c in 0..input.channels() {
        for y in 0..h {
            let src = input.row(c, y / factor);
            let dst = out.row_mut(c, y);
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / factor];
            }
        }
    }
    out
}

/// Bilinear resample to an explicit output size, sampling with the
/// center-aligned convention and clamping at the borders.
pub fn resize_bilinear<T: Scalar>(
    input: &ImagePlane<T>,
    out_height: usize,
    out_width: usize,
) -> ImagePlane<T> {
    assert!(out_height >= 1 && out_width >= 1);
    let half = T::from(0.5).unwrap();
    let sy = T::from(input.height()).unwrap() / T::from(out_height).unwrap();
    let sx = T::from(input.width()).unwrap() / T::from(out_width).unwrap();
    let mut out = ImagePlane::zeros(out_height, out_width, input.channels());

    // Precompute per-axis source coordinates and weights.
    let mut ys = Vec::with_capacity(out_height);
    for y in 0..out_height {
        ys.push(source_coord(y, sy, half, input.height()));
    }
    let mut xs = Vec::with_capacity(out_width);
    for x in 0..out_width {
        xs.push(source_coord(x, sx, half, input.width()));
    }

    for c in 0..input.channels() {
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row0 = input.row(c, y0);
            let row1 = input.row(c, y1);
            let dst = out.row_mut(c, y);
            for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&xs) {
                let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                *d = top + fy * (bot - top);
            }
        }
    }
    out
}

/// Maps an output index to clamped source indices and an interpolation
/// fraction for one axis.
fn source_coord<T: Scalar>(out_i: usize, scale: T, half: T, in_len: usize) -> (usize, usize, T) {
    let src = (T::from(out_i).unwrap() + half) * scale - half;
    let src = src.max(T::zero());
    let i0 = src.floor();
    let frac = src - i0;
    let i0 = (i0.to_usize().unwrap()).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    type P = ImagePlane<f64>;

    fn ramp(h: usize, w: usize) -> P {
        P::from_fn(h, w, 1, |_, y, x| (y * w + x) as f64)
    }

    /// Brute-force cross-correlation oracle, written independently of the
    /// production kernel.
    fn conv_valid_oracle(input: &P, k: &KernelStack<f64>, stride: usize) -> P {
        let oh = (input.height() - k.k_h) / stride + 1;
        let ow = (input.width() - k.k_w) / stride + 1;
        let mut out = P::zeros(oh, ow, k.out_maps);
        for m in 0..k.out_maps {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = k.bias[m];
                    for c in 0..k.in_maps {
                        for dy in 0..k.k_h {
                            for dx in 0..k.k_w {
                                acc += k.weight(m, c, dy, dx)
                                    * input.get(c, y * stride + dy, x * stride + dx);
                            }
                        }
                    }
                    out.set(m, y, x, acc);
                }
            }
        }
        out
    }

    /// Brute-force true-convolution oracle.
    fn conv_same_oracle(a: &P, prior: &P) -> P {
        let ry = (prior.height() / 2) as isize;
        let rx = (prior.width() / 2) as isize;
        let mut out = P::zeros(a.height(), a.width(), 1);
        for r in 0..a.height() as isize {
            for c in 0..a.width() as isize {
                let mut acc = 0.0;
                for y in 0..a.height() as isize {
                    for x in 0..a.width() as isize {
                        let dy = r - y;
                        let dx = c - x;
                        if dy.abs() <= ry && dx.abs() <= rx {
                            acc += prior.get(0, (ry + dy) as usize, (rx + dx) as usize)
                                * a.get(0, y as usize, x as usize);
                        }
                    }
                }
                out.set(0, r as usize, c as usize, acc);
            }
        }
        out
    }

    fn max_rel_diff(a: &P, b: &P) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| {
                let scale = x.abs().max(y.abs()).max(1.0);
                (x - y).abs() / scale
            })
            .fold(0.0, f64::max)
    }

    struct Lcg(u64);
    impl Lcg {
        fn next_f64(&mut self) -> f64 {
            self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((self.0 >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_plane(rng: &mut Lcg, h: usize, w: usize, c: usize) -> P {
        P::from_fn(h, w, c, |_, _, _| rng.next_f64())
    }

    fn random_kernels(rng: &mut Lcg, om: usize, im: usize, kh: usize, kw: usize) -> KernelStack<f64> {
        let mut k = KernelStack::zeros(om, im, kh, kw);
        for w in k.weights.iter_mut() {
            *w = rng.next_f64();
        }
        for b in k.bias.iter_mut() {
            *b = rng.next_f64();
        }
        k
    }

    #[test]
    fn conv_valid_identity_scale() {
        let input = P::filled(3, 3, 1, 1.0);
        let mut k = KernelStack::zeros(1, 1, 1, 1);
        k.weights[0] = 2.0;
        let out = conv2d_valid(&input, &k, 1).unwrap();
        assert_eq!(out.height(), 3);
        assert_eq!(out.width(), 3);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_valid_identity_kernel_is_identity() {
        let mut rng = Lcg(7);
        let input = random_plane(&mut rng, 6, 5, 1);
        let mut k = KernelStack::zeros(1, 1, 1, 1);
        k.weights[0] = 1.0;
        let out = conv2d_valid(&input, &k, 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_valid_averaging_center() {
        let input = ramp(5, 5);
        let mut k = KernelStack::zeros(1, 1, 3, 3);
        k.weights.fill(1.0 / 9.0);
        let out = conv2d_valid(&input, &k, 1).unwrap();
        // Center output cell (1,1) covers input rows 1..3, cols 1..3.
        let mut mean = 0.0;
        for y in 1..4 {
            for x in 1..4 {
                mean += input.get(0, y, x) / 9.0;
            }
        }
        assert!((out.get(0, 1, 1) - mean).abs() < 1e-12);
    }

    #[test]
    fn conv_valid_zero_kernel_gives_bias() {
        let mut rng = Lcg(3);
        let input = random_plane(&mut rng, 7, 7, 2);
        let mut k = KernelStack::zeros(3, 2, 3, 3);
        k.bias = vec![0.5, -1.25, 2.0];
        let out = conv2d_valid(&input, &k, 1).unwrap();
        for m in 0..3 {
            for y in 0..out.height() {
                for x in 0..out.width() {
                    assert_eq!(out.get(m, y, x), k.bias[m]);
                }
            }
        }
    }

    #[test]
    fn conv_valid_shape_mismatch_reports_both_shapes() {
        let input = P::zeros(8, 8, 2);
        let k = KernelStack::<f64>::zeros(1, 3, 3, 3);
        let err = conv2d_valid(&input, &k, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2"), "{msg}");
        assert!(msg.contains("3"), "{msg}");
    }

    #[test]
    fn conv_valid_matches_oracle_many_random_instances() {
        let mut rng = Lcg(99);
        for trial in 0..120 {
            let h = 3 + (trial % 5);
            let w = 3 + (trial % 7);
            let kh = 1 + (trial % 3);
            let kw = 1 + ((trial / 2) % 3);
            let im = 1 + (trial % 2);
            let om = 1 + (trial % 3);
            let stride = 1 + (trial % 2);
            if h < kh || w < kw {
                continue;
            }
            let input = random_plane(&mut rng, h, w, im);
            let k = random_kernels(&mut rng, om, im, kh, kw);
            let fast = conv2d_valid(&input, &k, stride).unwrap();
            let slow = conv_valid_oracle(&input, &k, stride);
            assert!(max_rel_diff(&fast, &slow) < 1e-10, "trial {trial}");
        }
    }

    #[test]
    fn conv_same_delta_prior_is_identity() {
        let mut rng = Lcg(11);
        let a = random_plane(&mut rng, 6, 7, 1);
        let mut prior = P::zeros(5, 5, 1);
        prior.set(0, 2, 2, 1.0);
        let out = conv2d_same_centered(&a, &prior).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn conv_same_delta_input_translates_prior() {
        let mut rng = Lcg(13);
        let prior = random_plane(&mut rng, 3, 3, 1);
        let mut a = P::zeros(9, 9, 1);
        a.set(0, 4, 6, 1.0);
        let out = conv2d_same_centered(&a, &prior).unwrap();
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let v = out.get(0, (4 + dy) as usize, (6 + dx) as usize);
                let p = prior.get(0, (1 + dy) as usize, (1 + dx) as usize);
                assert_eq!(v, p);
            }
        }
    }

    #[test]
    fn conv_same_matches_oracle() {
        let mut rng = Lcg(17);
        for _ in 0..100 {
            let a = random_plane(&mut rng, 9, 9, 1);
            let prior = random_plane(&mut rng, 5, 5, 1);
            let fast = conv2d_same_centered(&a, &prior).unwrap();
            let slow = conv_same_oracle(&a, &prior);
            assert!(max_rel_diff(&fast, &slow) < 1e-10);
        }
    }

    #[test]
    fn conv_same_rejects_even_prior() {
        let a = P::zeros(4, 4, 1);
        let prior = P::zeros(2, 3, 1);
        assert!(conv2d_same_centered(&a, &prior).is_err());
    }

    #[test]
    fn conv_same_is_bilinear() {
        let mut rng = Lcg(23);
        for _ in 0..30 {
            let a = random_plane(&mut rng, 7, 6, 1);
            let b = random_plane(&mut rng, 7, 6, 1);
            let p = random_plane(&mut rng, 3, 5, 1);
            let alpha = 1.7;
            let beta = -0.4;
            let mixed = P::from_raw(
                7,
                6,
                1,
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| alpha * x + beta * y)
                    .collect(),
            );
            let lhs = conv2d_same_centered(&mixed, &p).unwrap();
            let fa = conv2d_same_centered(&a, &p).unwrap();
            let fb = conv2d_same_centered(&b, &p).unwrap();
            let rhs = P::from_raw(
                7,
                6,
                1,
                fa.data()
                    .iter()
                    .zip(fb.data())
                    .map(|(x, y)| alpha * x + beta * y)
                    .collect(),
            );
            assert!(max_rel_diff(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn conv_same_mass_bound_and_interior_equality() {
        let mut rng = Lcg(29);
        // Nonnegative a and prior: total output mass never exceeds the product.
        for _ in 0..30 {
            let a = random_plane(&mut rng, 8, 8, 1).map(f64::abs);
            let p = random_plane(&mut rng, 3, 3, 1).map(f64::abs);
            let out = conv2d_same_centered(&a, &p).unwrap();
            assert!(out.sum() <= a.sum() * p.sum() + 1e-9);
        }
        // Mass supported away from the borders: equality.
        let mut a = P::zeros(9, 9, 1);
        a.set(0, 4, 4, 2.0);
        a.set(0, 3, 5, 1.0);
        let p = random_plane(&mut rng, 3, 3, 1).map(f64::abs);
        let out = conv2d_same_centered(&a, &p).unwrap();
        assert!((out.sum() - a.sum() * p.sum()).abs() < 1e-12);
    }

    #[test]
    fn maxpool_single_window() {
        let input = P::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, rec) = maxpool(&input, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(rec.winners, vec![3]);
    }

    #[test]
    fn maxpool_constant_ties_break_row_major() {
        let input = P::filled(4, 4, 1, 5.0);
        let (out, rec) = maxpool(&input, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 5.0));
        assert_eq!(rec.winners, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_matches_oracle() {
        let mut rng = Lcg(31);
        for _ in 0..100 {
            let input = random_plane(&mut rng, 8, 8, 2);
            let (out, _) = maxpool(&input, 2).unwrap();
            for c in 0..2 {
                for oy in 0..4 {
                    for ox in 0..4 {
                        let mut m = f64::NEG_INFINITY;
                        for wy in 0..2 {
                            for wx in 0..2 {
                                m = m.max(input.get(c, oy * 2 + wy, ox * 2 + wx));
                            }
                        }
                        assert_eq!(out.get(c, oy, ox), m);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_replication_padding_keeps_edge_peaks() {
        // 3x3 input pooled at window 2: bottom-right regions replicate edges.
        let input = ramp(3, 3);
        let (out, rec) = maxpool(&input, 2).unwrap();
        assert_eq!(out.height(), 2);
        assert_eq!(out.width(), 2);
        assert_eq!(out.get(0, 1, 1), 8.0);
        // Winner of the padded window resolves to the real corner cell.
        assert_eq!(rec.winners[3], 8);
    }

    #[test]
    fn maxpool_never_exceeds_input_max_and_sum_bound() {
        let mut rng = Lcg(37);
        for _ in 0..50 {
            let input = random_plane(&mut rng, 6, 6, 1).map(f64::abs);
            let (out, _) = maxpool(&input, 2).unwrap();
            assert!(out.max_value() <= input.max_value());
            assert!(out.sum() <= input.sum() + 1e-12);
        }
    }

    #[test]
    fn upsample_basic_and_identity() {
        let input = P::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let out = upsample_nearest(&input, 2);
        assert_eq!(out.height(), 2);
        assert_eq!(out.width(), 4);
        assert_eq!(out.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let same = upsample_nearest(&input, 1);
        assert_eq!(same.data(), input.data());
    }

    #[test]
    fn upsample_then_pool_recovers_original() {
        let mut rng = Lcg(41);
        for factor in [2usize, 3] {
            let input = random_plane(&mut rng, 4, 5, 2);
            let up = upsample_nearest(&input, factor);
            let (down, _) = maxpool(&up, factor).unwrap();
            assert_eq!(down.data(), input.data());
        }
    }

    #[test]
    fn resize_identity_is_exact() {
        let mut rng = Lcg(43);
        let input = random_plane(&mut rng, 10, 12, 3);
        let out = resize_bilinear(&input, 10, 12);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn resize_preserves_mean_of_smooth_image() {
        let input = P::from_fn(40, 40, 1, |_, y, x| {
            0.5 + 0.3 * ((y as f64) / 40.0) + 0.2 * ((x as f64) / 40.0)
        });
        let out = resize_bilinear(&input, 20, 20);
        let mean_in = input.sum() / (40.0 * 40.0);
        let mean_out = out.sum() / (20.0 * 20.0);
        assert!((mean_in - mean_out).abs() / mean_in < 0.02);
    }

    #[test]
    fn image_plane_rejects_bad_shapes_and_nan() {
        assert!(P::new(0, 3, 1, vec![]).is_err());
        assert!(P::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(P::new(1, 2, 1, vec![0.0, f64::NAN]).is_err());
    }
}
