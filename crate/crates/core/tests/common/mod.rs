#![allow(dead_code)]

use himamba_core::grad::check::{check_gradients, FdReport, FD_EPS};
use himamba_core::grad::{GradTape, Var};
use himamba_core::{DirectionOrder, HiMambaConfig, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small valid configuration with every structural knob randomized.
pub fn random_config(rng: &mut impl Rng) -> HiMambaConfig {
    let channels = 2 * rng.gen_range(1..=4);
    let cycle_len = rng.gen_range(1..=4);
    HiMambaConfig {
        scale: rng.gen_range(2..=4),
        channels,
        region_channels: rng.gen_range(1..=channels),
        region_size: [1, 2, 4][rng.gen_range(0..3)],
        blocks_per_group: rng.gen_range(1..=3),
        groups: rng.gen_range(1..=2),
        expansion: [1.0, 2.0][rng.gen_range(0..2)],
        state_size: rng.gen_range(1..=6),
        ffn_hidden: rng.gen_range(1..=8),
        dir_cycle: (0..cycle_len).map(|_| DirectionOrder::ALL[rng.gen_range(0..4)]).collect(),
    }
}

pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Differentiates `sum(build(inputs) * probe)` for a fixed random probe.
pub fn fd<F>(inputs: Vec<Tensor>, max_coords: Option<usize>, build: F) -> FdReport
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let run = |ts: &[Tensor], probe: Option<&Tensor>| -> Result<(GradTape, Var, Vec<Var>, Tensor)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let probe = match probe {
            Some(p) => p.clone(),
            None => rand_t(&mut ChaCha8Rng::seed_from_u64(99), tape.value(out).shape(), -1.0, 1.0),
        };
        let loss = tape.dot(out, probe.clone())?;
        Ok((tape, loss, vars, probe))
    };
    let (tape, loss, vars, probe) = run(&inputs, None).unwrap();
    assert!(tape.replay().unwrap(), "replay not bit-exact");
    let grads = tape.backward(loss, 1.0).unwrap();
    let analytic: Vec<Tensor> = vars.iter().zip(&inputs).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect();
    let f = |ts: &[Tensor]| -> Result<f64> {
        let (tape, loss, _, _) = run(ts, Some(&probe))?;
        tape.value(loss).item()
    };
    check_gradients(&inputs, &analytic, f, FD_EPS, max_coords, 5).unwrap()
}

