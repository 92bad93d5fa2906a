//! Procedurally generated RGB textures for training and evaluating at desk scale.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grad::TrainPair;
use crate::imaging::degrade;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    Grating,
    Checker,
    Disks,
    Gradient,
}

fn sample_pattern(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let pattern = [Pattern::Grating, Pattern::Checker, Pattern::Disks, Pattern::Gradient][rng.gen_range(0..4)];
    let (hf, wf) = (h as f64, w as f64);
    match pattern {
        Pattern::Grating => {
            let theta = rng.gen_range(0.0..TAU);
            let period = rng.gen_range(3.0..12.0);
            let phase = rng.gen_range(0.0..TAU);
            let (c, s) = (theta.cos(), theta.sin());
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    0.5 + 0.5 * ((c * x + s * y) * TAU / period + phase).sin()
                })
                .collect()
        }
        Pattern::Checker => {
            let cell = rng.gen_range(3..10);
            let (oy, ox) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            (0..h * w).map(|i| (((i / w + oy) / cell + (i % w + ox) / cell) % 2) as f64).collect()
        }
        Pattern::Disks => {
            let mut out = vec![rng.gen_range(0.0..1.0); h * w];
            for _ in 0..rng.gen_range(3..9) {
                let (cy, cx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
                let r = rng.gen_range(3.0..hf.min(wf) / 3.0);
                let v = rng.gen_range(0.0..1.0);
                for (i, o) in out.iter_mut().enumerate() {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    if (y - cy).powi(2) + (x - cx).powi(2) <= r * r {
                        *o = v;
                    }
                }
            }
            out
        }
        Pattern::Gradient => {
            let (gy, gx) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            (0..h * w).map(|i| (0.5 + 0.5 * (gy * (i / w) as f64 / hf + gx * (i % w) as f64 / wf)).clamp(0.0, 1.0)).collect()
        }
    }
}

/// One `[3, h, w]` texture: two random patterns blended, each channel with its own tint.
pub fn synthetic_texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let a = sample_pattern(rng, h, w);
    let b = sample_pattern(rng, h, w);
    let mix = rng.gen_range(0.2..0.8);
    let tints: Vec<(f64, f64)> = (0..3).map(|_| (rng.gen_range(0.4..1.0), rng.gen_range(0.0..0.3))).collect();
    let plane = h * w;
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let v = mix * a[p] + (1.0 - mix) * b[p];
        let (gain, bias) = tints[c];
        // 8-bit quantized like a loaded PNG.
        ((bias + gain * v).clamp(0.0, 1.0) * 255.0).round() / 255.0
    })
}

/// `count` seeded HR textures of `size x size`.
pub fn synthetic_set(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_texture(&mut rng, size, size)).collect()
}

/// Pairs each HR image with its bicubic downsampling.
pub fn make_pairs(hr: &[Tensor], scale: usize) -> Result<Vec<TrainPair>> {
    hr.iter().map(|h| Ok(TrainPair { lr: degrade(h, scale)?, hr: h.clone() })).collect()
}
