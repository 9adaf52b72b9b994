//! The per-part binary detector network: LCN preprocessing, three
//! convolution stages with ReLU and two rounds of 2x2 max pooling, three
//! fully-connected stages, and a single logistic output unit.
//!
//! The same parameters run in two modes: `forward_patch` classifies one
//! input patch, `forward_full` slides the detector over a whole image by
//! convolving the learned filters and applying the fully-connected stages
//! as 1x1-equivalent convolutions. Cell `(r, c)` of the full-image output
//! equals `forward_patch` on the window whose top-left corner is
//! `(stride*r, stride*c)`, exactly.

use crate::error::{contract, Error, Result};
use crate::tensor::{conv2d_valid, maxpool, ArgmaxRecord};
use crate::{Image, Kernels, Pixel};
use rand::Rng;

/// Local contrast normalization window radius (9x9 window).
pub const LCN_RADIUS: usize = 4;
/// Gaussian sigma of the LCN window.
pub const LCN_SIGMA: f64 = 2.0;

/// One convolution stage: filter geometry plus the pooling window applied
/// after it (1 = no pooling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStageSpec {
    pub maps: usize,
    pub kernel: usize,
    pub pool: usize,
}

/// Network geometry: input patch size, channel count, three conv stages and
/// three fully-connected widths (the last must be 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub patch: usize,
    pub in_channels: usize,
    pub conv: [ConvStageSpec; 3],
    pub fc: [usize; 3],
}

impl Architecture {
    /// The default detector: 16/32/64 maps of 5x5 filters, fc 512/256/1.
    pub fn standard() -> Self {
        Self {
            patch: 64,
            in_channels: 3,
            conv: [
                ConvStageSpec { maps: 16, kernel: 5, pool: 2 },
                ConvStageSpec { maps: 32, kernel: 5, pool: 2 },
                ConvStageSpec { maps: 64, kernel: 5, pool: 1 },
            ],
            fc: [512, 256, 1],
        }
    }

    /// A tiny 8x8-patch variant with 2 maps per layer, small enough for
    /// finite-difference gradient checking.
    pub fn reduced() -> Self {
        Self {
            patch: 8,
            in_channels: 3,
            conv: [
                ConvStageSpec { maps: 2, kernel: 3, pool: 2 },
                ConvStageSpec { maps: 2, kernel: 2, pool: 2 },
                ConvStageSpec { maps: 2, kernel: 1, pool: 1 },
            ],
            fc: [4, 3, 1],
        }
    }

    /// Same pooling layout as [`Architecture::standard`] with custom map
    /// counts, kernel sizes and fully-connected widths.
    pub fn custom(
        patch: usize,
        in_channels: usize,
        maps: [usize; 3],
        kernels: [usize; 3],
        fc_hidden: [usize; 2],
    ) -> Self {
        Self {
            patch,
            in_channels,
            conv: [
                ConvStageSpec { maps: maps[0], kernel: kernels[0], pool: 2 },
                ConvStageSpec { maps: maps[1], kernel: kernels[1], pool: 2 },
                ConvStageSpec { maps: maps[2], kernel: kernels[2], pool: 1 },
            ],
            fc: [fc_hidden[0], fc_hidden[1], 1],
        }
    }

    /// Total spatial downsampling between input and the sliding-window
    /// grid (the product of the pooling windows).
    pub fn stride(&self) -> usize {
        self.conv.iter().map(|s| s.pool).product()
    }

    /// Side length of the conv-stack output grid for one patch.
    pub fn conv_grid_side(&self) -> usize {
        self.patch_chain().expect("validated architecture")
    }

    /// Flattened length of the conv-stack output for one patch (the first
    /// fully-connected stage's input size).
    pub fn fc_input_len(&self) -> usize {
        let g = self.conv_grid_side();
        self.conv[2].maps * g * g
    }

    fn patch_chain(&self) -> Result<usize> {
        let mut side = self.patch;
        for (i, st) in self.conv.iter().enumerate() {
            if side < st.kernel {
                return Err(contract(format!(
                    "architecture: stage {i} input side {side} smaller than kernel {}",
                    st.kernel
                )));
            }
            side = side - st.kernel + 1;
            if st.pool > 1 {
                if side % st.pool != 0 {
                    return Err(contract(format!(
                        "architecture: stage {i} pre-pool side {side} not divisible by {} \
                         (sliding-window equivalence requires exact pooling in patch mode)",
                        st.pool
                    )));
                }
                side /= st.pool;
            }
        }
        if side == 0 {
            return Err(contract("architecture: conv stack collapses to zero size"));
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.patch == 0 {
            return Err(contract("architecture: patch and channels must be positive"));
        }
        if self.conv[0].pool != 2 || self.conv[1].pool != 2 || self.conv[2].pool != 1 {
            return Err(contract(
                "architecture: exactly the first two conv stages pool by 2, the third does not",
            ));
        }
        if self.fc[2] != 1 {
            return Err(contract("architecture: final fc stage must have 1 output"));
        }
        if self.conv.iter().any(|s| s.maps == 0 || s.kernel == 0) || self.fc.iter().any(|&n| n == 0)
        {
            return Err(contract("architecture: zero-sized stage"));
        }
        self.patch_chain()?;
        Ok(())
    }

    /// Number of sliding-window cells along one axis of a full image of the
    /// given extent.
    pub fn cells_along(&self, image_extent: usize) -> Result<usize> {
        if image_extent < self.patch {
            return Err(contract(format!(
                "image extent {image_extent} smaller than patch size {}",
                self.patch
            )));
        }
        Ok((image_extent - self.patch) / self.stride() + 1)
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut in_maps = self.in_channels;
        for st in &self.conv {
            n += st.maps * in_maps * st.kernel * st.kernel + st.maps;
            in_maps = st.maps;
        }
        let mut fan_in = self.fc_input_len();
        for &out in &self.fc {
            n += out * fan_in + out;
            fan_in = out;
        }
        n
    }
}

/// One fully-connected stage: `out x in` row-major weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub weights: Vec<Pixel>,
    pub bias: Vec<Pixel>,
    pub in_size: usize,
    pub out_size: usize,
}

impl FcLayer {
    pub fn zeros(in_size: usize, out_size: usize) -> Self {
        Self {
            weights: vec![0.0; in_size * out_size],
            bias: vec![0.0; out_size],
            in_size,
            out_size,
        }
    }

    fn matvec(&self, x: &[Pixel]) -> Vec<Pixel> {
        debug_assert_eq!(x.len(), self.in_size);
        let mut out = Vec::with_capacity(self.out_size);
        for i in 0..self.out_size {
            let row = &self.weights[i * self.in_size..(i + 1) * self.in_size];
            let dot: Pixel = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out.push(self.bias[i] + dot);
        }
        out
    }
}

/// All learnable weights and biases of one part detector.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    pub conv: Vec<Kernels>,
    pub fc: Vec<FcLayer>,
}

/// Gradients with the same block structure as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub conv: Vec<Kernels>,
    pub fc: Vec<FcLayer>,
}

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut conv = Vec::new();
        let mut in_maps = arch.in_channels;
        for st in &arch.conv {
            conv.push(Kernels::zeros(st.maps, in_maps, st.kernel, st.kernel));
            in_maps = st.maps;
        }
        let mut fc = Vec::new();
        let mut fan_in = arch.fc_input_len();
        for &out in &arch.fc {
            fc.push(FcLayer::zeros(fan_in, out));
            fan_in = out;
        }
        Ok(Self {
            arch: arch.clone(),
            conv,
            fc,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Parameter tensors in canonical block order: conv weights/bias per
    /// stage, then fc weights/bias per stage.
    pub fn blocks(&self) -> Vec<&[Pixel]> {
        let mut v: Vec<&[Pixel]> = Vec::with_capacity(12);
        for k in &self.conv {
            v.push(&k.weights);
            v.push(&k.bias);
        }
        for f in &self.fc {
            v.push(&f.weights);
            v.push(&f.bias);
        }
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [Pixel]> {
        let mut v: Vec<&mut [Pixel]> = Vec::with_capacity(12);
        for k in &mut self.conv {
            v.push(&mut k.weights);
            v.push(&mut k.bias);
        }
        for f in &mut self.fc {
            v.push(&mut f.weights);
            v.push(&mut f.bias);
        }
        v
    }
}

impl GradientSet {
    pub fn zeros(arch: &Architecture) -> Self {
        let p = NetworkParams::zeros(arch).expect("validated architecture");
        Self {
            conv: p.conv,
            fc: p.fc,
        }
    }

    pub fn blocks(&self) -> Vec<&[Pixel]> {
        let mut v: Vec<&[Pixel]> = Vec::with_capacity(12);
        for k in &self.conv {
            v.push(&k.weights);
            v.push(&k.bias);
        }
        for f in &self.fc {
            v.push(&f.weights);
            v.push(&f.bias);
        }
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [Pixel]> {
        let mut v: Vec<&mut [Pixel]> = Vec::with_capacity(12);
        for k in &mut self.conv {
            v.push(&mut k.weights);
            v.push(&mut k.bias);
        }
        for f in &mut self.fc {
            v.push(&mut f.weights);
            v.push(&mut f.bias);
        }
        v
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: Pixel) {
        for block in self.blocks_mut() {
            for x in block {
                *x *= factor;
            }
        }
    }
}

/// Per-joint spatial probability grid with the metadata mapping grid cells
/// back to original-image pixels.
#[derive(Debug, Clone)]
pub struct ResponseMap {
    /// Single-channel plane of probabilities.
    pub probs: Image,
    /// Ratio applied to the source image before detection (scaled / original).
    pub scale: f64,
    /// Scaled-image pixel position (row, col) of grid cell (0, 0): the
    /// center of the first sliding window.
    pub origin_offset: (f64, f64),
    /// Grid pitch in scaled-image pixels (the network's total downsampling).
    pub stride_in_pixels: usize,
}

impl ResponseMap {
    /// Original-image pixel position `(x, y)` of grid cell `(r, c)`.
    pub fn cell_to_original(&self, r: usize, c: usize) -> (f64, f64) {
        let y = (self.origin_offset.0 + (r * self.stride_in_pixels) as f64) / self.scale;
        let x = (self.origin_offset.1 + (c * self.stride_in_pixels) as f64) / self.scale;
        (x, y)
    }

    pub fn same_grid(&self, other: &ResponseMap) -> bool {
        self.probs.height() == other.probs.height()
            && self.probs.width() == other.probs.width()
            && self.scale == other.scale
            && self.origin_offset == other.origin_offset
            && self.stride_in_pixels == other.stride_in_pixels
    }
}

/// Per-layer activations and pooling winners recorded during a forward
/// pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub patch: Image,
    /// Post-ReLU output of each conv stage (before pooling).
    pub conv_relu: Vec<Image>,
    /// Pooled output and winner record for stages that pool.
    pub pool: Vec<Option<(Image, ArgmaxRecord)>>,
    /// Input vector of each fc stage, after any dropout mask.
    pub fc_in: Vec<Vec<Pixel>>,
    /// Post-ReLU outputs of fc stages 1 and 2, and the raw logit of stage 3.
    pub fc_act: Vec<Vec<Pixel>>,
    /// Dropout masks (scale factors) applied to each fc input, if any.
    pub masks: Option<[Vec<Pixel>; 3]>,
    pub prob: Pixel,
}

impl ForwardTrace {
    pub fn logit(&self) -> Pixel {
        self.fc_act[2][0]
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: Pixel) -> Pixel {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy between `sigmoid(logit)` and a {0,1} target,
/// computed from the logit for stability.
pub fn bce_loss(logit: Pixel, target: Pixel) -> Pixel {
    logit.max(0.0) - logit * target + (1.0 + (-logit.abs()).exp()).ln()
}

fn relu_inplace(plane: &mut Image) {
    for v in plane.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// The subtractive half of LCN: removes the 9x9 Gaussian-weighted local
/// mean, pooled across channels, with window weights renormalized at the
/// borders so constant shifts cancel exactly everywhere.
pub fn lcn_subtractive(image: &Image) -> Result<Image> {
    let win = 2 * LCN_RADIUS + 1;
    if image.height() < win || image.width() < win {
        return Err(contract(format!(
            "lcn: image {}x{} smaller than the {win}x{win} window",
            image.height(),
            image.width()
        )));
    }
    let g = gaussian_taps(LCN_RADIUS, LCN_SIGMA);
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let row_mass = boundary_mass(&g, h);
    let col_mass = boundary_mass(&g, w);
    let inv_c = 1.0 / c as f64;

    // Pre-shift by one reference value so constant images cancel exactly
    // instead of leaving rounding residue for the divisive stage to amplify.
    let reference = image.data()[0];
    let image = &image.map(|v| v - reference);
    let blurred = separable_blur(image, &g);
    let mut centered = image.clone();
    for y in 0..h {
        for x in 0..w {
            let mut m = 0.0;
            for bc in 0..c {
                m += blurred.get(bc, y, x);
            }
            m *= inv_c / (row_mass[y] * col_mass[x]);
            for ch in 0..c {
                let i = centered.idx(ch, y, x);
                centered.data_mut()[i] -= m;
            }
        }
    }
    Ok(centered)
}

/// Local contrast normalization: a 9x9 Gaussian-weighted subtractive stage
/// followed by a 9x9 divisive stage.
///
/// The divisor is the local weighted standard deviation floored at its
/// image-wide mean, which keeps flat regions from blowing up; an all-flat
/// image comes out all zero.
pub fn lcn(image: &Image) -> Result<Image> {
    let centered = lcn_subtractive(image)?;
    let g = gaussian_taps(LCN_RADIUS, LCN_SIGMA);
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let row_mass = boundary_mass(&g, h);
    let col_mass = boundary_mass(&g, w);
    let inv_c = 1.0 / c as f64;

    let squared = centered.map(|v| v * v);
    let blurred_sq = separable_blur(&squared, &g);
    let mut sigma = Image::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let mut s2 = 0.0;
            for bc in 0..c {
                s2 += blurred_sq.get(bc, y, x);
            }
            s2 *= inv_c / (row_mass[y] * col_mass[x]);
            sigma.set(0, y, x, s2.max(0.0).sqrt());
        }
    }
    let mean_sigma = sigma.sum() / (h * w) as f64;

    let mut out = centered;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let denom = sigma.get(0, y, x).max(mean_sigma);
                let i = out.idx(ch, y, x);
                if denom > 0.0 {
                    out.data_mut()[i] /= denom;
                } else {
                    out.data_mut()[i] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

fn gaussian_taps(radius: usize, sigma: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    for v in &mut g {
        *v /= s;
    }
    g
}

/// In-bounds tap mass per position along one axis (for border
/// renormalization).
fn boundary_mass(g: &[f64], len: usize) -> Vec<f64> {
    let radius = g.len() / 2;
    (0..len)
        .map(|i| {
            let mut m = 0.0;
            for (t, &gv) in g.iter().enumerate() {
                let j = i as isize + t as isize - radius as isize;
                if j >= 0 && (j as usize) < len {
                    m += gv;
                }
            }
            m
        })
        .collect()
}

/// Separable zero-padded Gaussian blur of every channel.
fn separable_blur(image: &Image, g: &[f64]) -> Image {
    let radius = (g.len() / 2) as isize;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut horiz = Image::zeros(h, w, c);
    for ch in 0..c {
        for y in 0..h {
            let src = image.row(ch, y);
            let dst = horiz.row_mut(ch, y);
            for (x, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (t, &gv) in g.iter().enumerate() {
                    let j = x as isize + t as isize - radius;
                    if j >= 0 && (j as usize) < w {
                        acc += gv * src[j as usize];
                    }
                }
                *d = acc;
            }
        }
    }
    let mut out = Image::zeros(h, w, c);
    for ch in 0..c {
        for y in 0..h {
            let lo = (y as isize - radius).max(0) as usize;
            let hi = ((y as isize + radius) as usize).min(h - 1);
            for yy in lo..=hi {
                let gv = g[(yy as isize - y as isize + radius) as usize];
                let src = horiz.row(ch, yy);
                let dst = out.row_mut(ch, y);
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += gv * s;
                }
            }
        }
    }
    out
}

/// Runs the conv stack (conv + ReLU + optional pooling per stage) on any
/// input, recording what the backward pass needs.
fn conv_stack(
    params: &NetworkParams,
    input: &Image,
) -> Result<(Image, Vec<Image>, Vec<Option<(Image, ArgmaxRecord)>>)> {
    let mut x = input.clone();
    let mut conv_relu = Vec::with_capacity(3);
    let mut pools = Vec::with_capacity(3);
    for (stage, kernels) in params.conv.iter().enumerate() {
        let mut convd = conv2d_valid(&x, kernels, 1)?;
        relu_inplace(&mut convd);
        conv_relu.push(convd.clone());
        let pool_win = params.arch.conv[stage].pool;
        if pool_win > 1 {
            let (pooled, rec) = maxpool(&convd, pool_win)?;
            x = pooled.clone();
            pools.push(Some((pooled, rec)));
        } else {
            x = convd;
            pools.push(None);
        }
    }
    Ok((x, conv_relu, pools))
}

/// Forward pass on one patch with optional dropout masks on the input of
/// each fully-connected stage. Masks hold per-unit scale factors
/// (0 for dropped units, `1/(1-rate)` for survivors).
pub fn forward_with_masks(
    params: &NetworkParams,
    patch: &Image,
    masks: Option<&[Vec<Pixel>; 3]>,
) -> Result<(Pixel, ForwardTrace)> {
    let arch = &params.arch;
    if patch.height() != arch.patch || patch.width() != arch.patch {
        return Err(contract(format!(
            "forward_patch: expected {0}x{0} patch, got {1}x{2}",
            arch.patch,
            patch.height(),
            patch.width()
        )));
    }
    if patch.channels() != arch.in_channels {
        return Err(contract(format!(
            "forward_patch: expected {} channels, got {}",
            arch.in_channels,
            patch.channels()
        )));
    }

    let (top, conv_relu, pools) = conv_stack(params, patch)?;
    let mut x = top.into_data();
    let mut fc_in = Vec::with_capacity(3);
    let mut fc_act = Vec::with_capacity(3);
    for (i, layer) in params.fc.iter().enumerate() {
        if let Some(m) = masks {
            if m[i].len() != x.len() {
                return Err(contract(format!(
                    "dropout mask {i} has {} entries, fc input has {}",
                    m[i].len(),
                    x.len()
                )));
            }
            for (v, f) in x.iter_mut().zip(&m[i]) {
                *v *= f;
            }
        }
        fc_in.push(x.clone());
        let mut z = layer.matvec(&x);
        if i < 2 {
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        fc_act.push(z.clone());
        x = z;
    }
    let prob = sigmoid(fc_act[2][0]);
    let trace = ForwardTrace {
        patch: patch.clone(),
        conv_relu,
        pool: pools,
        fc_in,
        fc_act,
        masks: masks.cloned(),
        prob,
    };
    Ok((prob, trace))
}

/// Inference-mode forward pass on one patch (no dropout).
pub fn forward_patch(params: &NetworkParams, patch: &Image) -> Result<(Pixel, ForwardTrace)> {
    forward_with_masks(params, patch, None)
}

/// Gradient of a valid-mode stride-1 cross-correlation with respect to its
/// kernels and optionally its input.
fn conv_backward(
    input: &Image,
    kernels: &Kernels,
    d_out: &Image,
    want_input_grad: bool,
) -> (Kernels, Option<Image>) {
    let out_h = d_out.height();
    let out_w = d_out.width();
    let mut dk = Kernels::zeros(kernels.out_maps, kernels.in_maps, kernels.k_h, kernels.k_w);
    let mut d_in = if want_input_grad {
        Some(Image::zeros(input.height(), input.width(), input.channels()))
    } else {
        None
    };

    for m in 0..kernels.out_maps {
        let mut db = 0.0;
        for y in 0..out_h {
            db += d_out.row(m, y).iter().sum::<Pixel>();
        }
        dk.bias[m] = db;
        for c in 0..kernels.in_maps {
            for dy in 0..kernels.k_h {
                for dx in 0..kernels.k_w {
                    let mut acc = 0.0;
                    for y in 0..out_h {
                        let dr = d_out.row(m, y);
                        let ir = &input.row(c, y + dy)[dx..dx + out_w];
                        acc += dr.iter().zip(ir).map(|(a, b)| a * b).sum::<Pixel>();
                    }
                    let wi = dk.weight_idx(m, c, dy, dx);
                    dk.weights[wi] = acc;
                    if let Some(di) = d_in.as_mut() {
                        let wv = kernels.weight(m, c, dy, dx);
                        if wv != 0.0 {
                            for y in 0..out_h {
                                let start = di.idx(c, y + dy, dx);
                                let src = d_out.row(m, y);
                                let dst = &mut di.data_mut()[start..start + out_w];
                                for (o, &s) in dst.iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dk, d_in)
}

/// Routes pooled-cell gradients back to the recorded winner cells.
fn pool_backward(d_pooled: &Image, rec: &ArgmaxRecord, input_shape: (usize, usize, usize)) -> Image {
    let (h, w, c) = input_shape;
    let mut d_in = Image::zeros(h, w, c);
    for (i, &winner) in rec.winners.iter().enumerate() {
        d_in.data_mut()[winner] += d_pooled.data()[i];
    }
    d_in
}

/// Analytic gradient of the binary cross-entropy loss with respect to every
/// parameter, for the example recorded in `trace`.
pub fn backward(params: &NetworkParams, trace: &ForwardTrace, target: Pixel) -> Result<GradientSet> {
    let arch = &params.arch;
    if trace.conv_relu.len() != 3 || trace.fc_in.len() != 3 {
        return Err(contract("backward: trace does not match a 3+3 stage network"));
    }
    if trace.fc_in[0].len() != params.fc[0].in_size {
        return Err(contract(format!(
            "backward: trace fc input length {} does not match params ({})",
            trace.fc_in[0].len(),
            params.fc[0].in_size
        )));
    }
    let mut grads = GradientSet::zeros(arch);

    // d loss / d logit for BCE through the logistic output.
    let mut dz = vec![trace.prob - target];
    // Fully-connected stages, last to first.
    let mut d_input_vec: Vec<Pixel> = Vec::new();
    for i in (0..3).rev() {
        let layer = &params.fc[i];
        let x = &trace.fc_in[i];
        for (r, &dzi) in dz.iter().enumerate() {
            grads.fc[i].bias[r] = dzi;
            let wrow = &mut grads.fc[i].weights[r * layer.in_size..(r + 1) * layer.in_size];
            for (wg, &xv) in wrow.iter_mut().zip(x) {
                *wg = dzi * xv;
            }
        }
        // Gradient with respect to the (masked) stage input.
        d_input_vec = vec![0.0; layer.in_size];
        for (r, &dzi) in dz.iter().enumerate() {
            if dzi == 0.0 {
                continue;
            }
            let wrow = &layer.weights[r * layer.in_size..(r + 1) * layer.in_size];
            for (d, &wv) in d_input_vec.iter_mut().zip(wrow) {
                *d += dzi * wv;
            }
        }
        if let Some(masks) = &trace.masks {
            for (d, &f) in d_input_vec.iter_mut().zip(&masks[i]) {
                *d *= f;
            }
        }
        if i > 0 {
            // Gate through the previous stage's ReLU (zero gradient at 0).
            dz = d_input_vec
                .iter()
                .zip(&trace.fc_act[i - 1])
                .map(|(&d, &a)| if a > 0.0 { d } else { 0.0 })
                .collect();
        }
    }

    // Reshape the flat gradient into the conv-stack output plane.
    let top_shape = if arch.conv[2].pool > 1 {
        let (p, _) = trace.pool[2].as_ref().expect("pooled stage has record");
        (p.height(), p.width(), p.channels())
    } else {
        let cr = &trace.conv_relu[2];
        (cr.height(), cr.width(), cr.channels())
    };
    let mut d_stage_out = Image::new(top_shape.0, top_shape.1, top_shape.2, d_input_vec)
        .map_err(|_| contract("backward: fc gradient does not match conv output shape"))?;

    // Conv stages, last to first.
    for stage in (0..3).rev() {
        if arch.conv[stage].pool > 1 {
            let (_, rec) = trace.pool[stage].as_ref().expect("pooled stage has record");
            let cr = &trace.conv_relu[stage];
            d_stage_out = pool_backward(&d_stage_out, rec, (cr.height(), cr.width(), cr.channels()));
        }
        // ReLU gate on the conv output.
        {
            let cr = &trace.conv_relu[stage];
            for (d, &a) in d_stage_out.data_mut().iter_mut().zip(cr.data()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let stage_input: &Image = if stage == 0 {
            &trace.patch
        } else if arch.conv[stage - 1].pool > 1 {
            &trace.pool[stage - 1].as_ref().expect("pooled").0
        } else {
            &trace.conv_relu[stage - 1]
        };
        let (dk, d_in) = conv_backward(stage_input, &params.conv[stage], &d_stage_out, stage > 0);
        grads.conv[stage] = dk;
        if let Some(d_in) = d_in {
            d_stage_out = d_in;
        }
    }
    Ok(grads)
}

/// Applies the detector to a whole (LCN-processed) image: the conv stack
/// runs once over the full extent and the fully-connected stages run as
/// convolutions over the resulting grid. Cell `(r, c)` equals
/// `forward_patch` on the window with top-left `(stride*r, stride*c)`.
pub fn forward_full(params: &NetworkParams, image: &Image, scale: f64) -> Result<ResponseMap> {
    let arch = &params.arch;
    if image.height() < arch.patch || image.width() < arch.patch {
        return Err(contract(format!(
            "forward_full: image {}x{} smaller than patch {}",
            image.height(),
            image.width(),
            arch.patch
        )));
    }
    if image.channels() != arch.in_channels {
        return Err(contract(format!(
            "forward_full: expected {} channels, got {}",
            arch.in_channels,
            image.channels()
        )));
    }
    let cells_h = arch.cells_along(image.height())?;
    let cells_w = arch.cells_along(image.width())?;

    let (mut x, _, _) = conv_stack(params, image)?;

    // fc1 applies the patch-footprint kernel over the grid; its row-major
    // weight layout matches the channel-planar flatten order exactly.
    let g = arch.conv_grid_side();
    for (i, layer) in params.fc.iter().enumerate() {
        let (k_side, in_maps) = if i == 0 {
            (g, arch.conv[2].maps)
        } else {
            (1, params.fc[i - 1].out_size)
        };
        debug_assert_eq!(layer.in_size, in_maps * k_side * k_side);
        let kernels = Kernels {
            weights: layer.weights.clone(),
            bias: layer.bias.clone(),
            out_maps: layer.out_size,
            in_maps,
            k_h: k_side,
            k_w: k_side,
        };
        x = conv2d_valid(&x, &kernels, 1)?;
        if i < 2 {
            relu_inplace(&mut x);
        }
    }

    // Replication padding inside pooling can add trailing cells that do not
    // correspond to complete windows; crop to the exact window count.
    debug_assert!(x.height() >= cells_h && x.width() >= cells_w);
    let mut probs = x.crop_top_left(cells_h, cells_w);
    for v in probs.data_mut() {
        *v = sigmoid(*v);
    }
    let half = (arch.patch / 2) as f64;
    Ok(ResponseMap {
        probs,
        scale,
        origin_offset: (half, half),
        stride_in_pixels: arch.stride(),
    })
}

/// Glorot-uniform initialization: weights uniform in
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero. Deterministic given the
/// generator state.
pub fn init_params(rng: &mut impl Rng, arch: &Architecture) -> Result<NetworkParams> {
    let mut params = NetworkParams::zeros(arch)?;
    for k in params.conv.iter_mut() {
        let fan_in = k.in_maps * k.k_h * k.k_w;
        let fan_out = k.out_maps * k.k_h * k.k_w;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in k.weights.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
    }
    for f in params.fc.iter_mut() {
        let bound = (6.0 / (f.in_size + f.out_size) as f64).sqrt();
        for w in f.weights.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
    }
    Ok(params)
}

const CHECKPOINT_MAGIC: [u8; 8] = *b"PGCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters: magic, version, architecture header, then all
/// parameter blocks as little-endian doubles. Round-trips bitwise.
pub fn save_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let arch = params.arch();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let push_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    push_u32(&mut out, arch.patch);
    push_u32(&mut out, arch.in_channels);
    for st in &arch.conv {
        push_u32(&mut out, st.maps);
        push_u32(&mut out, st.kernel);
        push_u32(&mut out, st.pool);
    }
    for &n in &arch.fc {
        push_u32(&mut out, n);
    }
    out.extend_from_slice(&(arch.param_count() as u64).to_le_bytes());
    for block in params.blocks() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                kind: self.kind,
                needed: self.pos + n,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Deserializes a checkpoint. When `expected` is given, the stored
/// architecture must match it exactly.
pub fn load_checkpoint(bytes: &[u8], expected: Option<&Architecture>) -> Result<NetworkParams> {
    let mut r = ByteReader {
        bytes,
        pos: 0,
        kind: "checkpoint",
    };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "checkpoint",
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let patch = r.u32()? as usize;
    let in_channels = r.u32()? as usize;
    let mut conv = [ConvStageSpec { maps: 0, kernel: 0, pool: 0 }; 3];
    for st in &mut conv {
        st.maps = r.u32()? as usize;
        st.kernel = r.u32()? as usize;
        st.pool = r.u32()? as usize;
    }
    let mut fc = [0usize; 3];
    for f in &mut fc {
        *f = r.u32()? as usize;
    }
    let arch = Architecture {
        patch,
        in_channels,
        conv,
        fc,
    };
    arch.validate()
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    if let Some(exp) = expected {
        if *exp != arch {
            return Err(Error::ArchMismatch(format!(
                "checkpoint holds {arch:?}, expected {exp:?}"
            )));
        }
    }
    let declared = r.u64()? as usize;
    if declared != arch.param_count() {
        return Err(Error::ArchMismatch(format!(
            "checkpoint declares {declared} parameters, architecture needs {}",
            arch.param_count()
        )));
    }
    let mut params = NetworkParams::zeros(&arch)?;
    for block in params.blocks_mut() {
        for v in block.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}
