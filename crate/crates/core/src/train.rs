//! Mini-batch SGD with Nesterov momentum, RMSPROP gradient scaling, L2
//! regularization, and inverted dropout on the fully-connected inputs.
//!
//! The RMSPROP-scaled gradient feeds the Nesterov update (scale, then
//! momentum). Gradient accumulation over a mini-batch is a fixed-order
//! reduction over fixed-size chunks, so results are bitwise identical
//! regardless of how many workers execute the chunks.

use crate::error::{contract, data_err, Result};
use crate::net::{
    backward, bce_loss, forward_patch, forward_with_masks, init_params, Architecture, GradientSet,
    NetworkParams,
};
use crate::{Image, Pixel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Examples per chunk in the batch-gradient reduction. Fixed so the
/// summation tree does not depend on the worker count.
const REDUCTION_CHUNK: usize = 8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub l2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            rms_decay: 0.99,
            rms_epsilon: 1e-8,
            l2: 1e-4,
            dropout: 0.5,
            batch_size: 64,
            epochs: 30,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(data_err("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(data_err("momentum must be in [0, 1)"));
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return Err(data_err("rms decay must be in (0, 1)"));
        }
        if !(self.rms_epsilon > 0.0) {
            return Err(data_err("rms epsilon must be > 0"));
        }
        if self.l2 < 0.0 {
            return Err(data_err("l2 coefficient must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(data_err("dropout rate must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(data_err("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(data_err("validation fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Velocity and mean-square accumulators, one per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<Pixel>>,
    pub mean_square: Vec<Vec<Pixel>>,
}

impl OptimizerState {
    pub fn new(arch: &Architecture) -> Self {
        let template = GradientSet::zeros(arch);
        let blocks: Vec<Vec<Pixel>> = template.blocks().into_iter().map(|b| b.to_vec()).collect();
        Self {
            velocity: blocks.clone(),
            mean_square: blocks,
        }
    }
}

/// One optimizer step on a flat parameter slice:
/// ```text
/// g   <- grad + l2 * theta
/// ms  <- rho * ms + (1 - rho) * g^2
/// gs  <- g / sqrt(ms + eps)
/// v   <- mu * v - eta * gs
/// th  <- th + mu * v - eta * gs
/// ```
pub fn step_slice(
    theta: &mut [Pixel],
    grad: &[Pixel],
    velocity: &mut [Pixel],
    mean_square: &mut [Pixel],
    cfg: &TrainConfig,
) {
    let rho = cfg.rms_decay;
    let mu = cfg.momentum;
    let eta = cfg.learning_rate;
    for i in 0..theta.len() {
        let g = grad[i] + cfg.l2 * theta[i];
        mean_square[i] = rho * mean_square[i] + (1.0 - rho) * g * g;
        let scaled = g / (mean_square[i] + cfg.rms_epsilon).sqrt();
        velocity[i] = mu * velocity[i] - eta * scaled;
        theta[i] += mu * velocity[i] - eta * scaled;
    }
}

/// Applies one optimizer step to every parameter block.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &GradientSet,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let grad_blocks = grads.blocks();
    let param_blocks = params.blocks_mut();
    if grad_blocks.len() != param_blocks.len() {
        return Err(contract("sgd_step: gradient/parameter block count mismatch"));
    }
    for (i, (theta, grad)) in param_blocks.into_iter().zip(grad_blocks).enumerate() {
        if theta.len() != grad.len()
            || theta.len() != state.velocity[i].len()
            || theta.len() != state.mean_square[i].len()
        {
            return Err(contract(format!(
                "sgd_step: block {i} shape mismatch (theta {}, grad {}, state {}/{})",
                theta.len(),
                grad.len(),
                state.velocity[i].len(),
                state.mean_square[i].len()
            )));
        }
        step_slice(theta, grad, &mut state.velocity[i], &mut state.mean_square[i], cfg);
    }
    Ok(())
}

/// Inverted dropout: each unit is zeroed with probability `rate`,
/// survivors are scaled by `1/(1-rate)` so inference needs no rescaling.
/// Returns the masked activations and the mask of scale factors.
pub fn apply_dropout(
    activations: &[Pixel],
    rate: f64,
    rng: &mut impl Rng,
) -> (Vec<Pixel>, Vec<Pixel>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if rate == 0.0 {
        return (activations.to_vec(), vec![1.0; activations.len()]);
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<Pixel> = (0..activations.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
        .collect();
    let masked = activations.iter().zip(&mask).map(|(a, m)| a * m).collect();
    (masked, mask)
}

fn dropout_masks(arch: &Architecture, rate: f64, rng: &mut impl Rng) -> [Vec<Pixel>; 3] {
    let sizes = [arch.fc_input_len(), arch.fc[0], arch.fc[1]];
    let keep_scale = 1.0 / (1.0 - rate);
    sizes.map(|n| {
        (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect()
    })
}

/// SplitMix64-style mixing for derived per-example seeds.
fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(c.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub type TrainLog = Vec<EpochStats>;

/// Renders the log as line-delimited text: one
/// `epoch=E trainLoss=L valLoss=V valAcc=A` record per line.
pub fn log_to_text(log: &TrainLog) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&format!(
            "epoch={} trainLoss={} valLoss={} valAcc={}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_acc
        ));
    }
    out
}

pub fn log_from_text(text: &str) -> Result<TrainLog> {
    let mut log = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| data_err(format!("train log line {}: bad token {tok}", ln + 1)))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .ok_or_else(|| data_err(format!("train log line {}: missing {k}", ln + 1)))?
                .parse::<f64>()
                .map_err(|e| data_err(format!("train log line {}: {k}: {e}", ln + 1)))
        };
        log.push(EpochStats {
            epoch: get("epoch")? as usize,
            train_loss: get("trainLoss")?,
            val_loss: get("valLoss")?,
            val_acc: get("valAcc")?,
        });
    }
    Ok(log)
}

/// Loss and gradient of one example, with dropout masks drawn from a
/// derived per-example seed so the result is independent of scheduling.
fn example_loss_grad(
    params: &NetworkParams,
    patch: &Image,
    label: Pixel,
    dropout: f64,
    example_seed: u64,
) -> Result<(f64, GradientSet)> {
    let masks = if dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed);
        Some(dropout_masks(params.arch(), dropout, &mut rng))
    } else {
        None
    };
    let (_, trace) = forward_with_masks(params, patch, masks.as_ref())?;
    let loss = bce_loss(trace.logit(), label);
    let grads = backward(params, &trace, label)?;
    Ok((loss, grads))
}

/// Mean loss and mean gradient over a batch. Parallel over fixed-size
/// chunks; each chunk sums its examples in index order and the chunk sums
/// are folded in chunk order.
fn batch_gradient(
    params: &NetworkParams,
    patches: &[Image],
    labels: &[Pixel],
    indices: &[usize],
    dropout: f64,
    seed_base: u64,
) -> Result<(f64, GradientSet)> {
    let chunks: Vec<&[usize]> = indices.chunks(REDUCTION_CHUNK).collect();
    let partials: Vec<Result<(f64, GradientSet)>> = chunks
        .par_iter()
        .enumerate()
        .map(|(chunk_no, chunk)| {
            let mut acc: Option<GradientSet> = None;
            let mut loss_sum = 0.0;
            for (k, &idx) in chunk.iter().enumerate() {
                let position = chunk_no * REDUCTION_CHUNK + k;
                let seed = mix_seed(seed_base, position as u64, idx as u64);
                let (loss, grads) =
                    example_loss_grad(params, &patches[idx], labels[idx], dropout, seed)?;
                loss_sum += loss;
                match acc.as_mut() {
                    Some(a) => a.add_assign(&grads),
                    None => acc = Some(grads),
                }
            }
            Ok((loss_sum, acc.expect("non-empty chunk")))
        })
        .collect();

    let mut total = GradientSet::zeros(params.arch());
    let mut loss_sum = 0.0;
    for partial in partials {
        let (l, g) = partial?;
        loss_sum += l;
        total.add_assign(&g);
    }
    let n = indices.len() as f64;
    total.scale(1.0 / n);
    Ok((loss_sum / n, total))
}

fn evaluate(params: &NetworkParams, patches: &[Image], labels: &[Pixel], idx: &[usize]) -> (f64, f64) {
    if idx.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let results: Vec<(f64, bool)> = idx
        .par_iter()
        .map(|&i| {
            let (prob, trace) = forward_patch(params, &patches[i]).expect("validated shapes");
            let loss = bce_loss(trace.logit(), labels[i]);
            let correct = (prob >= 0.5) == (labels[i] >= 0.5);
            (loss, correct)
        })
        .collect();
    let loss: f64 = results.iter().map(|r| r.0).sum::<f64>() / idx.len() as f64;
    let acc = results.iter().filter(|r| r.1).count() as f64 / idx.len() as f64;
    (loss, acc)
}

/// Trains one part detector from labeled patches.
///
/// Shuffles per epoch with a seeded generator, holds out a validation
/// fraction, logs per-epoch train loss / validation loss / validation
/// accuracy, and returns the parameters of the epoch with the best
/// validation loss. Validation passes never apply dropout.
pub fn train(
    arch: &Architecture,
    patches: &[Image],
    labels: &[Pixel],
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainLog)> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(data_err("train: empty dataset"));
    }
    if patches.len() != labels.len() {
        return Err(contract(format!(
            "train: {} patches but {} labels",
            patches.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params0 = init_params(&mut rng, arch)?;

    let n = patches.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    let val_n = if cfg.val_fraction > 0.0 && n > 1 {
        ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let val_idx: Vec<usize> = order[..val_n].to_vec();
    let mut train_idx: Vec<usize> = order[val_n..].to_vec();
    if cfg.batch_size > train_idx.len() {
        return Err(data_err(format!(
            "train: batch size {} exceeds the {} training examples left after the validation split",
            cfg.batch_size,
            train_idx.len()
        )));
    }

    let mut params = params0.clone();
    let mut state = OptimizerState::new(arch);
    let mut log = TrainLog::new();
    let mut best: Option<(f64, NetworkParams)> = None;

    for epoch in 1..=cfg.epochs {
        shuffle(&mut train_idx, &mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, batch) in train_idx.chunks(cfg.batch_size).enumerate() {
            let seed_base = mix_seed(cfg.seed, epoch as u64, batch_no as u64);
            let (batch_loss, grads) =
                batch_gradient(&params, patches, labels, batch, cfg.dropout, seed_base)?;
            loss_sum += batch_loss * batch.len() as f64;
            seen += batch.len();
            sgd_step(&mut params, &grads, &mut state, cfg)?;
        }
        let train_loss = loss_sum / seen as f64;
        let (val_loss, val_acc) = evaluate(&params, patches, labels, &val_idx);
        log.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });
        if !val_idx.is_empty() {
            let better = match &best {
                Some((b, _)) => val_loss < *b,
                None => true,
            };
            if better {
                best = Some((val_loss, params.clone()));
            }
        }
    }

    let chosen = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok((chosen, log))
}

/// Fisher-Yates with the trainer's seeded generator.
fn shuffle(items: &mut [usize], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
