//! The network evaluated by a naive nested-`Vec` reference that shares no code with the
//! library kernels: explicit index loops, ZOH via `exp_m1`, scan orders built from
//! coordinates.

use himamba_core::backend::Eager;
use himamba_core::blocks::{hmb_forward, ssm_branch, HmbDims, HmbWeights, SsmBranchWeights, LN_EPS};
use himamba_core::network::{himamba_forward, HiMambaConfig, ModelWeights};
use himamba_core::{DirectionOrder, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Img = Vec<Vec<Vec<f64>>>;

const TOL: f64 = 1e-10;

fn to_img(t: &Tensor) -> Img {
    let s = t.shape();
    (0..s[0]).map(|c| (0..s[1]).map(|y| (0..s[2]).map(|x| t.data()[(c * s[1] + y) * s[2] + x]).collect()).collect()).collect()
}

fn dims(x: &Img) -> (usize, usize, usize) {
    (x.len(), x[0].len(), x[0][0].len())
}

fn zeros(c: usize, h: usize, w: usize) -> Img {
    vec![vec![vec![0.0; w]; h]; c]
}

fn at4(t: &Tensor, a: usize, b: usize, c: usize, d: usize) -> f64 {
    let s = t.shape();
    t.data()[((a * s[1] + b) * s[2] + c) * s[3] + d]
}

fn at2(t: &Tensor, a: usize, b: usize) -> f64 {
    t.data()[a * t.shape()[1] + b]
}

/// Cross-correlation with zero padding.
fn conv(x: &Img, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> Img {
    let (cin, h, wd) = dims(x);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let cout_g = cout / groups;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    assert_eq!(cin, cin_g * groups);
    let mut out = zeros(cout, ho, wo);
    for o in 0..cout {
        let g = o / cout_g;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for ci in 0..cin_g {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += at4(w, o, ci, ky, kx) * x[g * cin_g + ci][iy as usize][ix as usize];
                            }
                        }
                    }
                }
                out[o][oy][ox] = acc;
            }
        }
    }
    out
}

fn pointwise(x: &Img, w: &Tensor) -> Img {
    let (_, h, wd) = dims(x);
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let mut out = zeros(cout, h, wd);
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                out[o][y][xx] = (0..cin).map(|i| at2(w, o, i) * x[i][y][xx]).sum();
            }
        }
    }
    out
}

fn layernorm(x: &Img, g: &Tensor, b: &Tensor) -> Img {
    let (c, h, w) = dims(x);
    let mut out = zeros(c, h, w);
    for y in 0..h {
        for xx in 0..w {
            let mean = (0..c).map(|i| x[i][y][xx]).sum::<f64>() / c as f64;
            let var = (0..c).map(|i| (x[i][y][xx] - mean).powi(2)).sum::<f64>() / c as f64;
            for i in 0..c {
                out[i][y][xx] = (x[i][y][xx] - mean) / (var + LN_EPS).sqrt() * g.data()[i] + b.data()[i];
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn map(x: &Img, f: impl Fn(f64) -> f64) -> Img {
    x.iter().map(|p| p.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()).collect()
}

fn zip(a: &Img, b: &Img, f: impl Fn(f64, f64) -> f64) -> Img {
    a.iter().zip(b).map(|(p, q)| p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(&u, &v)| f(u, v)).collect()).collect()).collect()
}

fn visit_order(dir: DirectionOrder, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    match dir {
        DirectionOrder::H | DirectionOrder::RH => {
            for y in 0..h {
                for x in 0..w {
                    coords.push((y, x));
                }
            }
        }
        DirectionOrder::V | DirectionOrder::RV => {
            for x in 0..w {
                for y in 0..h {
                    coords.push((y, x));
                }
            }
        }
    }
    if matches!(dir, DirectionOrder::RH | DirectionOrder::RV) {
        coords.reverse();
    }
    coords
}

fn branch(x: &Img, w: &SsmBranchWeights, dir: DirectionOrder) -> Img {
    let (_, h, wd) = dims(x);
    let d = w.in_x.shape()[0];
    let n = w.a_log.shape()[1];
    let xp = pointwise(x, &w.in_x);
    let xa = map(&conv(&xp, &w.dw, Some(&w.dw_bias), 1, 1, d), |v| v * sigmoid(v));
    let order = visit_order(dir, h, wd);
    let mut y = zeros(d, h, wd);
    let mut state = vec![vec![0.0; n]; d];
    for &(py, px) in &order {
        let u: Vec<f64> = (0..d).map(|ch| xa[ch][py][px]).collect();
        let proj = |m: &Tensor, row: usize| (0..d).map(|i| at2(m, row, i) * u[i]).sum::<f64>();
        let bv: Vec<f64> = (0..n).map(|j| proj(&w.w_b, j)).collect();
        let cv: Vec<f64> = (0..n).map(|j| proj(&w.w_c, j)).collect();
        for ch in 0..d {
            let pre = proj(&w.w_delta, ch) + w.b_delta.data()[ch];
            let dt = pre.exp().ln_1p();
            let mut acc = 0.0;
            for j in 0..n {
                let a = -at2(&w.a_log, ch, j).exp();
                let b_bar = (dt * a).exp_m1() / a * bv[j];
                state[ch][j] = (dt * a).exp() * state[ch][j] + b_bar * u[ch];
                acc += cv[j] * state[ch][j];
            }
            y[ch][py][px] = acc + w.d_skip.data()[ch] * u[ch];
        }
    }
    let b1 = layernorm(&y, &w.norm.gamma, &w.norm.beta);
    let b2 = map(&pointwise(x, &w.in_z), |v| v * sigmoid(v));
    pointwise(&zip(&b1, &b2, |a, b| a * b), &w.out)
}

fn hmb(il: &Img, ir: &Img, w: &HmbWeights, n: usize) -> (Img, Img) {
    let fl = branch(&layernorm(il, &w.ln1.gamma, &w.ln1.beta), &w.lssm, w.dir);
    let fr = branch(&layernorm(ir, &w.ln1r.gamma, &w.ln1r.beta), &w.rssm, w.dir);
    let (c, h, wd) = dims(il);
    let mut f = zeros(c, h, wd);
    for ch in 0..c {
        let sf = w.s_f.data()[ch].clamp(0.0, 1.0);
        for y in 0..h {
            for x in 0..wd {
                f[ch][y][x] = sf * fl[ch][y][x] + (1.0 - sf) * fr[ch][y / n][x / n] + w.s1.data()[ch] * il[ch][y][x];
            }
        }
    }
    let g = &w.gffn;
    let e = conv(&layernorm(&f, &g.norm.gamma, &g.norm.beta), &g.w1, Some(&g.b1), 1, 0, 1);
    let half = e.len() / 2;
    let gated = zip(&e[..half].to_vec(), &e[half..].to_vec(), |a, b| a * b);
    let out = conv(&gated, &g.w2, Some(&g.b2), 1, 0, 1);
    let mut next = zeros(c, h, wd);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..wd {
                next[ch][y][x] = out[ch][y][x] + w.s2.data()[ch] * f[ch][y][x];
            }
        }
    }
    (next, pointwise(&fr, &w.carry))
}

fn reflect(i: usize, len: usize) -> usize {
    // Mirror without repeating the edge: len, len+1, ... map to len-2, len-3, ...
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

fn model(img: &Img, w: &ModelWeights) -> Img {
    let cfg = &w.config;
    let (_, h, wd) = dims(img);
    let n = cfg.region_size;
    let (ph, pw) = (h.div_ceil(n) * n, wd.div_ceil(n) * n);
    let padded: Img = img.iter().map(|p| (0..ph).map(|y| (0..pw).map(|x| p[reflect(y, h)][reflect(x, wd)]).collect()).collect()).collect();
    let fl = conv(&padded, &w.head_w, Some(&w.head_b), 1, 1, 1);
    let mut fd = fl.clone();
    for g in &w.groups {
        let mut fr = conv(&fd, &g.region_w, Some(&g.region_b), n, 0, 1);
        let mut f = fd.clone();
        for b in &g.hmbs {
            (f, fr) = hmb(&f, &fr, b, n);
        }
        fd = zip(&conv(&f, &g.refine_w, Some(&g.refine_b), 1, 1, 1), &fd, |a, b| a + b);
    }
    let r = conv(&zip(&fl, &fd, |a, b| a + b), &w.recon_w, Some(&w.recon_b), 1, 1, 1);
    let s = cfg.scale;
    let mut out = zeros(3, s * h, s * wd);
    for c in 0..3 {
        for y in 0..s * h {
            for x in 0..s * wd {
                out[c][y][x] = r[c * s * s + (y % s) * s + x % s][y / s][x / s];
            }
        }
    }
    out
}

fn assert_close(actual: &Tensor, expected: &Img) {
    let got = to_img(actual);
    assert_eq!(dims(&got), dims(expected));
    let mut worst = 0.0f64;
    for (p, q) in got.iter().zip(expected) {
        for (r, s) in p.iter().zip(q) {
            for (a, b) in r.iter().zip(s) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    assert!(worst < TOL, "max deviation {worst:e}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Non-default affine and scale values so no term is trivially 0 or 1.
fn perturb(w: &mut HmbWeights, rng: &mut ChaCha8Rng) {
    for t in [&mut w.ln1.gamma, &mut w.ln1r.beta, &mut w.lssm.norm.gamma, &mut w.rssm.dw_bias, &mut w.s1, &mut w.s2, &mut w.gffn.b1, &mut w.lssm.d_skip] {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    w.s_f.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..1.2));
}

#[test]
fn ssm_branch_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dir in DirectionOrder::ALL {
        let w = SsmBranchWeights::init(&mut rng, 3, 5, 6, 4);
        let x = rand_tensor(&mut rng, &[3, 5, 7]);
        let y = ssm_branch(&mut Eager::new(), &x, &w, dir).unwrap();
        assert_close(&y, &branch(&to_img(&x), &w, dir));
    }
}

#[test]
fn hmb_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = HmbDims { channels: 6, region_channels: 3, local_inner: 12, region_inner: 6, state: 4, ffn_hidden: 8 };
    for dir in DirectionOrder::ALL {
        let mut w = HmbWeights::init(&mut rng, d, dir);
        perturb(&mut w, &mut rng);
        let il = rand_tensor(&mut rng, &[6, 6, 4]);
        let ir = rand_tensor(&mut rng, &[3, 3, 2]);
        let (nl, nr) = hmb_forward(&mut Eager::new(), &il, &ir, &w, 2).unwrap();
        let (el, er) = hmb(&to_img(&il), &to_img(&ir), &w, 2);
        assert_close(&nl, &el);
        assert_close(&nr, &er);
    }
}

#[test]
fn model_matches_reference_with_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = HiMambaConfig { channels: 6, region_channels: 3, region_size: 4, blocks_per_group: 2, groups: 2, state_size: 3, ffn_hidden: 6, scale: 3, ..HiMambaConfig::tiny() };
    let mut w = ModelWeights::init(&cfg, 5).unwrap();
    for g in &mut w.groups {
        g.refine_b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        for b in &mut g.hmbs {
            perturb(b, &mut rng);
        }
    }
    for (h, wd) in [(8, 8), (9, 11)] {
        let img = Tensor::from_fn([3, h, wd], |_| rng.gen_range(0.0..1.0));
        let y = himamba_forward(&img, &w).unwrap();
        assert_eq!(y.shape(), &[3, 3 * h, 3 * wd]);
        assert_close(&y, &model(&to_img(&img), &w));
    }
}
