//! Hand-derived vector-Jacobian products for every tape primitive.

use rayon::prelude::*;

use crate::error::Result;
use crate::scan::{scan_channel, zoh_phi, zoh_phi_deriv, SelectiveParams};
use crate::tensor::{self, for_each_chunk, split_axis, Axis, ConvGeom, ConvSpec, Tensor};

/// Returns `(dx, dw, db)` for `y = linear_axis(x, w, b, axis)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &Tensor, axis: Axis) -> Result<(Tensor, Tensor, Tensor)> {
    let (cout, cin) = w.dims2()?;
    let wt = Tensor::from_fn([cin, cout], |k| w.data()[(k % cout) * cin + k / cout]);
    let gx = tensor::linear_axis(gy, &wt, None, axis)?;

    let ax = axis.index(x.rank());
    let (outer, _, inner) = split_axis(x.shape(), ax);
    let (xd, gd) = (x.data(), gy.data());
    let mut gw = vec![0.0; cout * cin];
    for_each_chunk(&mut gw, cin, outer * inner * cout * cin, |o, row| {
        for blk in 0..outer {
            let g = &gd[(blk * cout + o) * inner..][..inner];
            for (i, acc) in row.iter_mut().enumerate() {
                let xs = &xd[(blk * cin + i) * inner..][..inner];
                *acc += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    });
    let mut gb = vec![0.0; cout];
    for blk in 0..outer {
        for (o, acc) in gb.iter_mut().enumerate() {
            *acc += gd[(blk * cout + o) * inner..][..inner].iter().sum::<f64>();
        }
    }
    Ok((gx, Tensor::new([cout, cin], gw)?, Tensor::new([cout], gb)?))
}

/// Returns `(dx, dw, db)` for `y = conv2d(x, w, b, spec)`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, gy: &Tensor, spec: ConvSpec) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let s = spec.stride;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;

    let mut gx = vec![0.0; g.cin * plane_in];
    for_each_chunk(&mut gx, plane_in, g.macs(), |c, dst| {
        let group = c / g.cin_g;
        let ci = c % g.cin_g;
        for o in group * g.cout_g..(group + 1) * g.cout_g {
            let go = &gd[o * plane_out..][..plane_out];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = wd[((o * g.cin_g + ci) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = g.valid_range(kx, g.w, g.wo);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - spec.pad;
                        for ox in x0..x1 {
                            dst[iy * g.w + ox * s + kx - spec.pad] += wv * go[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    });

    let ksize = g.cin_g * g.kh * g.kw;
    let mut gw = vec![0.0; g.cout * ksize];
    for_each_chunk(&mut gw, ksize, g.macs(), |o, dst| {
        let group = o / g.cout_g;
        let go = &gd[o * plane_out..][..plane_out];
        for ci in 0..g.cin_g {
            let src = &xd[(group * g.cin_g + ci) * plane_in..][..plane_in];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let (x0, x1) = g.valid_range(kx, g.w, g.wo);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - spec.pad;
                        for ox in x0..x1 {
                            acc += go[oy * g.wo + ox] * src[iy * g.w + ox * s + kx - spec.pad];
                        }
                    }
                    dst[(ci * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    let gb = (0..g.cout).map(|o| gd[o * plane_out..][..plane_out].iter().sum()).collect();
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(w.shape().to_vec(), gw)?, Tensor::new([g.cout], gb)?))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward(x: &Tensor, gamma: &Tensor, gy: &Tensor, eps: f64, axis: Axis) -> Result<(Tensor, Tensor, Tensor)> {
    let ax = axis.index(x.rank());
    let (outer, c, inner) = split_axis(x.shape(), ax);
    let stats = tensor::layernorm_stats(x, eps, axis);
    let (xd, gd, gam) = (x.data(), gy.data(), gamma.data());
    let mut gx = vec![0.0; x.numel()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let idx = |blk: usize, ch: usize, p: usize| (blk * c + ch) * inner + p;
    for blk in 0..outer {
        for p in 0..inner {
            let (mean, std) = stats[blk * inner + p];
            let (mut m1, mut m2) = (0.0, 0.0);
            for ch in 0..c {
                let i = idx(blk, ch, p);
                let xhat = (xd[i] - mean) / std;
                let gxhat = gd[i] * gam[ch];
                m1 += gxhat;
                m2 += gxhat * xhat;
                ggamma[ch] += gd[i] * xhat;
                gbeta[ch] += gd[i];
            }
            m1 /= c as f64;
            m2 /= c as f64;
            for ch in 0..c {
                let i = idx(blk, ch, p);
                let xhat = (xd[i] - mean) / std;
                gx[i] = (gd[i] * gam[ch] - m1 - xhat * m2) / std;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new([c], ggamma)?, Tensor::new([c], gbeta)?))
}

pub fn silu_backward(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
    x.zip_map(gy, |x, g| {
        let s = tensor::sigmoid_scalar(x);
        g * s * (1.0 + x * (1.0 - s))
    })
}

pub fn softplus_backward(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
    x.zip_map(gy, |x, g| g * tensor::sigmoid_scalar(x))
}

/// Returns `(dx, ds)` for `y = scale_channels(x, s)`.
pub fn scale_channels_backward(x: &Tensor, s: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor)> {
    let gx = tensor::scale_channels(gy, s)?;
    let inner = x.numel() / s.numel();
    let gs = x
        .data()
        .chunks(inner)
        .zip(gy.data().chunks(inner))
        .map(|(xs, gs)| xs.iter().zip(gs).map(|(a, b)| a * b).sum())
        .collect();
    Ok((gx, Tensor::new(s.shape().to_vec(), gs)?))
}

/// Places `gy` back into a zero tensor of `full_shape` at channels `[start, start + len)`.
pub fn slice_channels_backward(full_shape: &[usize], start: usize, gy: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(full_shape.to_vec());
    let inner = out.numel() / full_shape[0];
    out.data_mut()[start * inner..start * inner + gy.numel()].copy_from_slice(gy.data());
    Ok(out)
}

/// Gradients of a selective scan with respect to every input.
#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub u: Tensor,
    pub delta: Tensor,
    pub a_log: Tensor,
    pub b_seq: Tensor,
    pub c_seq: Tensor,
    pub d_skip: Tensor,
}

struct ChannelGrads {
    u: Vec<f64>,
    delta: Vec<f64>,
    a_log: Vec<f64>,
    b_seq: Vec<f64>,
    c_seq: Vec<f64>,
    d_skip: f64,
}

/// Reverse recurrence in O(L * D * N). States are recomputed per channel from the
/// saved inputs.
pub fn selective_scan_backward(u: &Tensor, p: &SelectiveParams, gy: &Tensor) -> Result<ScanGrads> {
    let (l, d, n) = p.dims();
    let channel = |ch: usize| -> ChannelGrads {
        let mut states = vec![0.0; (l + 1) * n];
        scan_channel(u.data(), p, ch, |k, j, _, _, _, h| states[(k + 1) * n + j] = h);
        let a: Vec<f64> = p.a_log.data()[ch * n..(ch + 1) * n].iter().map(|v| -v.exp()).collect();
        let (delta, bs, cs, ud, gd) = (p.delta.data(), p.b_seq.data(), p.c_seq.data(), u.data(), gy.data());
        let skip = p.d_skip.data()[ch];
        let mut g = ChannelGrads {
            u: vec![0.0; l],
            delta: vec![0.0; l],
            a_log: vec![0.0; n],
            b_seq: vec![0.0; l * n],
            c_seq: vec![0.0; l * n],
            d_skip: 0.0,
        };
        let mut ga = vec![0.0; n];
        let mut gh = vec![0.0; n];
        for k in (0..l).rev() {
            let gyk = gd[k * d + ch];
            let uk = ud[k * d + ch];
            let dt = delta[k * d + ch];
            g.d_skip += gyk * uk;
            let mut gu = gyk * skip;
            let mut gdt = 0.0;
            for j in 0..n {
                let h_k = states[(k + 1) * n + j];
                let h_prev = states[k * n + j];
                g.c_seq[k * n + j] += gyk * h_k;
                let ghk = gh[j] + gyk * cs[k * n + j];
                let x = dt * a[j];
                let a_bar = x.exp();
                let phi = zoh_phi(x);
                let dphi = zoh_phi_deriv(x);
                let b = bs[k * n + j];
                let b_bar = phi * dt * b;
                let g_abar = ghk * h_prev;
                let g_bbar = ghk * uk;
                gu += ghk * b_bar;
                gdt += g_abar * a_bar * a[j] + g_bbar * (dphi * x + phi) * b;
                ga[j] += g_abar * a_bar * dt + g_bbar * dphi * dt * dt * b;
                g.b_seq[k * n + j] += g_bbar * phi * dt;
                gh[j] = ghk * a_bar;
            }
            g.u[k] = gu;
            g.delta[k] = gdt;
        }
        for j in 0..n {
            g.a_log[j] = ga[j] * a[j];
        }
        g
    };
    let per: Vec<ChannelGrads> = if l * d * n >= 1 << 12 {
        (0..d).into_par_iter().map(channel).collect()
    } else {
        (0..d).map(channel).collect()
    };

    let mut gu = vec![0.0; l * d];
    let mut gdelta = vec![0.0; l * d];
    let mut ga = Vec::with_capacity(d * n);
    let mut gb = vec![0.0; l * n];
    let mut gc = vec![0.0; l * n];
    let mut gdskip = Vec::with_capacity(d);
    for (ch, cg) in per.iter().enumerate() {
        for k in 0..l {
            gu[k * d + ch] = cg.u[k];
            gdelta[k * d + ch] = cg.delta[k];
        }
        ga.extend_from_slice(&cg.a_log);
        gb.iter_mut().zip(&cg.b_seq).for_each(|(a, b)| *a += b);
        gc.iter_mut().zip(&cg.c_seq).for_each(|(a, b)| *a += b);
        gdskip.push(cg.d_skip);
    }
    Ok(ScanGrads {
        u: Tensor::new([l, d], gu)?,
        delta: Tensor::new([l, d], gdelta)?,
        a_log: Tensor::new([d, n], ga)?,
        b_seq: Tensor::new([l, n], gb)?,
        c_seq: Tensor::new([l, n], gc)?,
        d_skip: Tensor::new([d], gdskip)?,
    })
}
