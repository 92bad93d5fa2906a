//! L1 training loop: random paired crops, dihedral augmentation, Adam with step decay.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamState, GradTape};
use crate::error::{Error, Result};
use crate::imaging::dihedral;
use crate::network::{model_forward, HiMambaConfig, ModelWeights};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub iters: usize,
    /// Side of the square LR crop; rounded down to a multiple of the region size.
    pub lr_patch: usize,
    pub batch: usize,
    pub base_lr: f64,
    /// Fractions of `iters` at which the learning rate halves.
    pub milestone_fractions: Vec<f64>,
    pub seed: u64,
    /// Apply a random flip/rotation to every crop.
    pub augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { iters: 1000, lr_patch: 64, batch: 8, base_lr: 2e-4, milestone_fractions: vec![0.5, 0.8, 0.9, 0.95], seed: 0, augment: true }
    }
}

/// Piecewise-constant learning rate, halved at each milestone.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
}

impl Schedule {
    pub fn from_fractions(base_lr: f64, total_iters: usize, fractions: &[f64]) -> Self {
        let milestones = fractions.iter().map(|f| (f * total_iters as f64).round() as usize).collect();
        Self { base_lr, milestones }
    }

    /// Rate for the zero-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let halvings = self.milestones.iter().filter(|&&m| m <= iter).count();
        self.base_lr * 0.5f64.powi(halvings as i32)
    }
}

/// An aligned LR/HR image pair, `[3, h, w]` and `[3, scale * h, scale * w]`.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub lr: Tensor,
    pub hr: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub curve: Vec<LossPoint>,
}

/// L1 loss of the model on one pair and its gradient for every parameter, in
/// [`ModelWeights::params`] order.
pub fn loss_and_grads(weights: &ModelWeights, lr: &Tensor, hr: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = GradTape::new();
    let vars = weights.try_map(&mut |_, t| Ok(tape.leaf(t.clone())))?;
    let x = tape.leaf(lr.clone());
    let target = tape.leaf(hr.clone());
    let pred = model_forward(&mut tape, &vars, &x)?;
    let loss = tape.l1_loss(pred, target)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss, 1.0)?;
    let per_param = vars.params().into_iter().zip(weights.params()).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect();
    Ok((value, per_param))
}

fn sample_crop(rng: &mut ChaCha8Rng, pair: &TrainPair, patch: usize, scale: usize, augment: bool) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = pair.lr.dims3()?;
    let y = rng.gen_range(0..=h - patch);
    let x = rng.gen_range(0..=w - patch);
    let t = if augment { rng.gen_range(0..8) } else { 0 };
    let lr = tensor::crop_at(&pair.lr, y, x, patch, patch)?;
    let hr = tensor::crop_at(&pair.hr, y * scale, x * scale, patch * scale, patch * scale)?;
    Ok((dihedral(&lr, t)?, dihedral(&hr, t)?))
}

fn check_dataset(data: &[TrainPair], config: &HiMambaConfig, patch: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for (i, p) in data.iter().enumerate() {
        let (_, h, w) = p.lr.dims3()?;
        if p.hr.shape() != [3, h * config.scale, w * config.scale] {
            return Err(Error::Input(format!("pair {i}: HR {:?} is not {}x LR {:?}", p.hr.shape(), config.scale, p.lr.shape())));
        }
        if h < patch || w < patch {
            return Err(Error::Input(format!("pair {i}: LR {w}x{h} smaller than patch {patch}")));
        }
    }
    Ok(())
}

/// Trains freshly initialized weights.
pub fn train(config: &HiMambaConfig, data: &[TrainPair], opts: &TrainOptions) -> Result<TrainOutcome> {
    train_weights(ModelWeights::init(config, opts.seed)?, data, opts)
}

/// Trains starting from `weights`. Samples in a batch run in parallel; their gradients are
/// summed in batch order so results do not depend on the thread count.
pub fn train_weights(mut weights: ModelWeights, data: &[TrainPair], opts: &TrainOptions) -> Result<TrainOutcome> {
    let config = weights.config.clone();
    let n = config.region_size;
    let patch = opts.lr_patch / n * n;
    if patch == 0 || opts.batch == 0 {
        return Err(Error::Parameter(format!("patch {} and batch {} must be positive multiples", opts.lr_patch, opts.batch)));
    }
    check_dataset(data, &config, patch)?;
    let schedule = Schedule::from_fractions(opts.base_lr, opts.iters, &opts.milestone_fractions);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_da7a);
    let mut params: Vec<Tensor> = weights.params().into_iter().cloned().collect();
    let mut adam = AdamState::new(&params);
    let mut curve = Vec::with_capacity(opts.iters);
    for iter in 0..opts.iters {
        let crops = (0..opts.batch)
            .map(|_| {
                let idx = rng.gen_range(0..data.len());
                sample_crop(&mut rng, &data[idx], patch, config.scale, opts.augment)
            })
            .collect::<Result<Vec<_>>>()?;
        let results = crops.par_iter().map(|(lr, hr)| loss_and_grads(&weights, lr, hr)).collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / opts.batch as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        for (l, g) in &results {
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
            }
        }
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        let lr = schedule.lr_at(iter);
        curve.push(LossPoint { iter, lr, loss: loss * inv });
        adam_step(&mut params, &grads, &mut adam, lr)?;
        weights = ModelWeights::from_params(&config, params.clone())?;
    }
    Ok(TrainOutcome { weights, curve })
}

/// Writes `iteration,lr,loss` rows.
pub fn write_loss_csv(curve: &[LossPoint], out: &mut impl Write) -> Result<()> {
    writeln!(out, "iteration,lr,loss")?;
    for p in curve {
        writeln!(out, "{},{:e},{:.9}", p.iter, p.lr, p.loss)?;
    }
    Ok(())
}

pub fn save_loss_csv(curve: &[LossPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_loss_csv(curve, &mut f)?;
    f.flush()?;
    Ok(())
}
