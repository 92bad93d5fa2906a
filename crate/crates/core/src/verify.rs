//! Self-checks runnable from the command line. Each check is a reduced-size version of
//! the oracle and invariant suites in the test tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::Eager;
use crate::grad::check::{check_gradients, FD_EPS};
use crate::grad::{selective_scan_backward, GradTape};
use crate::imaging::{psnr, self_ensemble, ssim, NearestUpscaler, Upscaler};
use crate::network::{count_flops, count_params, himamba_forward, model_forward, HiMambaConfig, ModelWeights};
use crate::parallel::with_threads;
use crate::scan::{
    discretize_zoh, flatten_direction, lti_apply, lti_kernel, selective_scan, selective_scan_chunked, unflatten_direction,
    DirectionOrder, SelectiveParams,
};
use crate::serialize::{from_bytes, to_bytes};
use crate::tensor::{self, ConvSpec, Tensor};

pub type CheckResult = std::result::Result<(), String>;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> CheckResult,
}

pub fn checks() -> Vec<Check> {
    vec![
        Check { name: "scan-lti", run: scan_lti },
        Check { name: "scan-chunked", run: scan_chunked },
        Check { name: "directions", run: directions },
        Check { name: "residual-identity", run: residual_identity },
        Check { name: "cost-neutrality", run: cost_neutrality },
        Check { name: "serialization", run: serialization },
        Check { name: "metrics", run: metrics },
        Check { name: "gradients", run: gradients },
        Check { name: "determinism", run: determinism },
    ]
}

/// Runs every check whose name contains `filter`, returning `(name, result)` pairs.
pub fn run_checks(filter: Option<&str>) -> Vec<(&'static str, CheckResult)> {
    checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| (c.name, (c.run)()))
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> CheckResult {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn small_config() -> HiMambaConfig {
    HiMambaConfig { channels: 4, region_channels: 2, region_size: 2, blocks_per_group: 2, groups: 1, state_size: 3, ffn_hidden: 4, ..HiMambaConfig::tiny() }
}

fn random_lti(rng: &mut ChaCha8Rng) -> Result<(Tensor, SelectiveParams), crate::Error> {
    let (l, d, n) = (rng.gen_range(1..=64), rng.gen_range(1..=4), rng.gen_range(1..=8));
    let a_log = uniform(rng, &[d, n], -1.0, 1.0);
    let dt: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..0.5)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = SelectiveParams::new(
        a_log,
        Tensor::from_fn([l, d], |i| dt[i % d]),
        Tensor::from_fn([l, n], |i| b[i % n]),
        Tensor::from_fn([l, n], |i| c[i % n]),
        uniform(rng, &[d], -1.0, 1.0),
    )?;
    Ok((uniform(rng, &[l, d], -1.0, 1.0), p))
}

fn scan_lti() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (u, p) = random_lti(&mut rng).map_err(err)?;
        let (l, d, n) = p.dims();
        let y = selective_scan(&u, &p).map_err(err)?;
        for ch in 0..d {
            let mut a_bar = Vec::with_capacity(n);
            let mut b_bar = Vec::with_capacity(n);
            for j in 0..n {
                let (ab, bb) = discretize_zoh(p.delta.data()[ch], -p.a_log.data()[ch * n + j].exp(), p.b_seq.data()[j]).map_err(err)?;
                a_bar.push(ab);
                b_bar.push(bb);
            }
            let k = lti_kernel(&a_bar, &b_bar, &p.c_seq.data()[..n], l).map_err(err)?;
            let uc = Tensor::from_fn([l], |k| u.data()[k * d + ch]);
            let yc = lti_apply(&uc, &k, p.d_skip.data()[ch]).map_err(err)?;
            for k in 0..l {
                let (a, b) = (y.data()[k * d + ch], yc.data()[k]);
                ensure((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0), || format!("step {k}: {a} vs {b}"))?;
            }
        }
    }
    Ok(())
}

fn scan_chunked() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (u, p) = random_lti(&mut rng).map_err(err)?;
    let full = selective_scan(&u, &p).map_err(err)?;
    for chunk in [1, 3, 16] {
        ensure(selective_scan_chunked(&u, &p, chunk).map_err(err)? == full, || format!("chunk {chunk} differs"))?;
    }
    Ok(())
}

fn directions() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9));
        let x = uniform(&mut rng, &[c, h, w], -1.0, 1.0);
        for dir in DirectionOrder::ALL {
            let back = unflatten_direction(&flatten_direction(&x, dir).map_err(err)?, dir, h, w).map_err(err)?;
            ensure(back == x, || format!("{dir} not a bijection at {c}x{h}x{w}"))?;
        }
        let hseq = flatten_direction(&x, DirectionOrder::H).map_err(err)?;
        let rh = flatten_direction(&x, DirectionOrder::RH).map_err(err)?;
        let rows: Vec<&[f64]> = hseq.data().chunks(c).rev().collect();
        ensure(rows.concat() == rh.data(), || "RH is not reversed H".into())?;
        let v = flatten_direction(&x, DirectionOrder::V).map_err(err)?;
        ensure(v == flatten_direction(&x.transpose_hw().map_err(err)?, DirectionOrder::H).map_err(err)?, || "V is not H of the transpose".into())?;
    }
    Ok(())
}

fn residual_identity() -> CheckResult {
    let cfg = small_config();
    let mut w = ModelWeights::init(&cfg, 4).map_err(err)?;
    w.zero_deep_path();
    let img = uniform(&mut ChaCha8Rng::seed_from_u64(4), &[3, 8, 8], 0.0, 1.0);
    let out = model_forward(&mut Eager::new(), &w, &img).map_err(err)?;
    let f_l = tensor::conv2d(&img, &w.head_w, Some(&w.head_b), ConvSpec::same(3)).map_err(err)?;
    let merged = f_l.add(&f_l).map_err(err)?;
    let r = tensor::conv2d(&merged, &w.recon_w, Some(&w.recon_b), ConvSpec::same(3)).map_err(err)?;
    ensure(out == tensor::pixel_shuffle(&r, cfg.scale).map_err(err)?, || "deep path is not the identity".into())
}

fn cost_neutrality() -> CheckResult {
    let base = HiMambaConfig::tiny();
    let single = HiMambaConfig { dir_cycle: vec![DirectionOrder::H; 4], ..base.clone() };
    ensure(count_params(&base).map_err(err)? == count_params(&single).map_err(err)?, || "params differ".into())?;
    ensure(count_flops(&base, 64, 64).map_err(err)? == count_flops(&single, 64, 64).map_err(err)?, || "flops differ".into())
}

fn serialization() -> CheckResult {
    for seed in 0..3 {
        let cfg = small_config();
        let w = ModelWeights::init(&cfg, seed).map_err(err)?;
        let bytes = to_bytes(&w);
        let again = to_bytes(&from_bytes(&bytes).map_err(err)?);
        ensure(bytes == again, || "save/load/save not byte-identical".into())?;
        ensure(count_params(&cfg).map_err(err)? == w.num_elements() as u64, || "param count mismatch".into())?;
    }
    Ok(())
}

fn metrics() -> CheckResult {
    let a = uniform(&mut ChaCha8Rng::seed_from_u64(5), &[1, 16, 16], 0.0, 0.9);
    let p = psnr(&a, &a.map(|v| v + 1.0 / 255.0), 2).map_err(err)?;
    ensure((p - 48.1308).abs() < 1e-3, || format!("psnr {p}"))?;
    ensure(ssim(&a, &a, 0).map_err(err)? == 1.0, || "ssim(a, a) != 1".into())?;
    let img = uniform(&mut ChaCha8Rng::seed_from_u64(6), &[3, 6, 9], 0.0, 1.0);
    let nn = NearestUpscaler { scale: 2 };
    ensure(self_ensemble(&img, &nn).map_err(err)? == nn.upscale(&img).map_err(err)?, || "ensemble differs from single pass".into())
}

fn gradients() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (l, d, n) = (6, 2, 3);
    let u = uniform(&mut rng, &[l, d], -1.0, 1.0);
    let inputs = vec![
        u,
        uniform(&mut rng, &[l, d], 0.05, 1.0),
        uniform(&mut rng, &[d, n], -1.0, 1.0),
        uniform(&mut rng, &[l, n], -1.0, 1.0),
        uniform(&mut rng, &[l, n], -1.0, 1.0),
        uniform(&mut rng, &[d], -1.0, 1.0),
    ];
    let weights = uniform(&mut rng, &[l, d], -1.0, 1.0);
    let params = |t: &[Tensor]| SelectiveParams::new(t[2].clone(), t[1].clone(), t[3].clone(), t[4].clone(), t[5].clone());
    let g = selective_scan_backward(&inputs[0], &params(&inputs).map_err(err)?, &weights).map_err(err)?;
    let analytic = [g.u, g.delta, g.a_log, g.b_seq, g.c_seq, g.d_skip];
    let f = |t: &[Tensor]| -> crate::Result<f64> {
        let y = selective_scan(&t[0], &params(t)?)?;
        Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let report = check_gradients(&inputs, &analytic, f, FD_EPS, None, 0).map_err(err)?;
    ensure(report.passed(1e-5), || format!("scan: {report:?}"))?;

    let cfg = small_config();
    let w = ModelWeights::init(&cfg, 8).map_err(err)?;
    let img = uniform(&mut rng, &[3, 4, 4], 0.0, 1.0);
    let probe = uniform(&mut rng, &[3, 8, 8], -1.0, 1.0);
    let mut tape = GradTape::new();
    let vars = w.try_map(&mut |_, t| Ok(tape.leaf(t.clone()))).map_err(err)?;
    let x = tape.leaf(img.clone());
    let y = model_forward(&mut tape, &vars, &x).map_err(err)?;
    let loss = tape.dot(y, probe.clone()).map_err(err)?;
    let grads = tape.backward(loss, 1.0).map_err(err)?;
    let params: Vec<Tensor> = w.params().into_iter().cloned().collect();
    let analytic: Vec<Tensor> = vars.params().iter().zip(&params).map(|(v, p)| grads.get_or_zeros(**v, p.shape())).collect();
    let f = |t: &[Tensor]| -> crate::Result<f64> {
        let m = ModelWeights::from_params(&cfg, t.to_vec())?;
        let y = model_forward(&mut Eager::new(), &m, &img)?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };
    let report = check_gradients(&params, &analytic, f, FD_EPS, Some(2), 9).map_err(err)?;
    ensure(report.passed(1e-5), || format!("model: {report:?}"))
}

fn determinism() -> CheckResult {
    let cfg = HiMambaConfig::tiny();
    let w = ModelWeights::init(&cfg, 10).map_err(err)?;
    let img = uniform(&mut ChaCha8Rng::seed_from_u64(10), &[3, 24, 24], 0.0, 1.0);
    let one = with_threads(1, || himamba_forward(&img, &w)).map_err(err)?.map_err(err)?;
    let four = with_threads(4, || himamba_forward(&img, &w)).map_err(err)?.map_err(err)?;
    ensure(one == four, || "outputs differ between 1 and 4 threads".into())
}
