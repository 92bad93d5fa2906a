use crate::backend::Backend;
use crate::error::{dim_err, Error, Result};
use crate::scan::{self, DirectionOrder, SelectiveParams};
use crate::tensor::{self, Axis, ConvSpec, Tensor};

use super::adjoint;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var>, axis: Axis },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64, axis: Axis },
    Silu(Var),
    Softplus(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels { x: Var, s: Var },
    Clamp01(Var),
    OneMinus(Var),
    RepeatBlocks { x: Var, n: usize },
    PixelShuffle { x: Var, r: usize },
    Flatten { x: Var, dir: DirectionOrder },
    Unflatten { x: Var, dir: DirectionOrder, h: usize, w: usize },
    SliceChannels { x: Var, start: usize, len: usize },
    Scan { u: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var },
    L1Loss { pred: Var, target: Var },
    /// `sum(x * weights)` with constant weights.
    Dot { x: Var, weights: Tensor },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive applications in execution order for reverse-mode differentiation.
///
/// Record order is a topological order, so [`GradTape::backward`] walks nodes by
/// descending index and accumulates each adjoint into its inputs in that fixed order.
#[derive(Clone, Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => {
            acc.expect_same_shape(&g)?;
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn scan_params(&self, delta: Var, a_log: Var, b: Var, c: Var, d: Var) -> Result<SelectiveParams> {
        SelectiveParams::new(self.val(a_log).clone(), self.val(delta).clone(), self.val(b).clone(), self.val(c).clone(), self.val(d).clone())
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |x: &Var| self.val(*x);
        match op {
            Op::Leaf => Err(Error::Internal("leaf has no forward rule".into())),
            Op::Linear { x, w, b, axis } => tensor::linear_axis(v(x), v(w), b.as_ref().map(v), *axis),
            Op::Conv2d { x, w, b, spec } => tensor::conv2d(v(x), v(w), b.as_ref().map(v), *spec),
            Op::LayerNorm { x, gamma, beta, eps, axis } => tensor::layernorm_axis(v(x), v(gamma), v(beta), *eps, *axis),
            Op::Silu(x) => Ok(tensor::silu(v(x))),
            Op::Softplus(x) => Ok(tensor::softplus(v(x))),
            Op::Add(a, b) => v(a).add(v(b)),
            Op::Mul(a, b) => v(a).mul(v(b)),
            Op::ScaleChannels { x, s } => tensor::scale_channels(v(x), v(s)),
            Op::Clamp01(x) => Ok(v(x).map(|t| t.clamp(0.0, 1.0))),
            Op::OneMinus(x) => Ok(v(x).map(|t| 1.0 - t)),
            Op::RepeatBlocks { x, n } => tensor::repeat_blocks(v(x), *n),
            Op::PixelShuffle { x, r } => tensor::pixel_shuffle(v(x), *r),
            Op::Flatten { x, dir } => scan::flatten_direction(v(x), *dir),
            Op::Unflatten { x, dir, h, w } => scan::unflatten_direction(v(x), *dir, *h, *w),
            Op::SliceChannels { x, start, len } => tensor::slice_channels(v(x), *start, *len),
            Op::Scan { u, delta, a_log, b, c, d } => scan::selective_scan(v(u), &self.scan_params(*delta, *a_log, *b, *c, *d)?),
            Op::L1Loss { pred, target } => Ok(Tensor::scalar(super::l1_loss(v(pred), v(target))?)),
            Op::Dot { x, weights } => {
                v(x).expect_same_shape(weights)?;
                Ok(Tensor::scalar(v(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()))
            }
            Op::Sum(x) => Ok(Tensor::scalar(v(x).sum())),
        }
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Mean absolute error between `pred` and `target`.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.record(Op::L1Loss { pred, target })
    }

    /// `sum(x * weights)` for constant `weights`.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        self.record(Op::Dot { x, weights })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    /// Recomputes every recorded op from its inputs and checks the results are
    /// bit-identical to the recorded values.
    pub fn replay(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let again = self.eval(&node.op)?;
            if again.shape() != node.value.shape()
                || again.data().iter().zip(node.value.data()).any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse pass from a scalar `loss`, seeded with `loss_grad`.
    pub fn backward(&self, loss: Var, loss_grad: f64) -> Result<Gradients> {
        if self.val(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.val(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(self.val(loss).shape().to_vec(), vec![loss_grad])?);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(&self.nodes[i].op, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let v = |x: &Var| self.val(*x);
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b, axis } => {
                let (gx, gw, gb) = adjoint::linear_backward(v(x), v(w), gy, *axis)?;
                accumulate(grads, *x, gx)?;
                accumulate(grads, *w, gw)?;
                if let Some(b) = b {
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let (gx, gw, gb) = adjoint::conv2d_backward(v(x), v(w), gy, *spec)?;
                accumulate(grads, *x, gx)?;
                accumulate(grads, *w, gw)?;
                if let Some(b) = b {
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::LayerNorm { x, gamma, beta, eps, axis } => {
                let (gx, gg, gb) = adjoint::layernorm_backward(v(x), v(gamma), gy, *eps, *axis)?;
                accumulate(grads, *x, gx)?;
                accumulate(grads, *gamma, gg)?;
                accumulate(grads, *beta, gb)?;
            }
            Op::Silu(x) => accumulate(grads, *x, adjoint::silu_backward(v(x), gy)?)?,
            Op::Softplus(x) => accumulate(grads, *x, adjoint::softplus_backward(v(x), gy)?)?,
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.clone())?;
                accumulate(grads, *b, gy.clone())?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, gy.mul(v(b))?)?;
                accumulate(grads, *b, gy.mul(v(a))?)?;
            }
            Op::ScaleChannels { x, s } => {
                let (gx, gs) = adjoint::scale_channels_backward(v(x), v(s), gy)?;
                accumulate(grads, *x, gx)?;
                accumulate(grads, *s, gs)?;
            }
            Op::Clamp01(x) => {
                let g = v(x).zip_map(gy, |t, g| if (0.0..=1.0).contains(&t) { g } else { 0.0 })?;
                accumulate(grads, *x, g)?;
            }
            Op::OneMinus(x) => accumulate(grads, *x, gy.scale(-1.0))?,
            Op::RepeatBlocks { x, n } => accumulate(grads, *x, tensor::block_sum(gy, *n)?)?,
            Op::PixelShuffle { x, r } => accumulate(grads, *x, tensor::pixel_unshuffle(gy, *r)?)?,
            Op::Flatten { x, dir } => {
                let (_, h, w) = v(x).dims3()?;
                accumulate(grads, *x, scan::unflatten_direction(gy, *dir, h, w)?)?;
            }
            Op::Unflatten { x, dir, .. } => accumulate(grads, *x, scan::flatten_direction(gy, *dir)?)?,
            Op::SliceChannels { x, start, .. } => {
                accumulate(grads, *x, adjoint::slice_channels_backward(v(x).shape(), *start, gy)?)?;
            }
            Op::Scan { u, delta, a_log, b, c, d } => {
                let p = self.scan_params(*delta, *a_log, *b, *c, *d)?;
                let g = adjoint::selective_scan_backward(v(u), &p, gy)?;
                accumulate(grads, *u, g.u)?;
                accumulate(grads, *delta, g.delta)?;
                accumulate(grads, *a_log, g.a_log)?;
                accumulate(grads, *b, g.b_seq)?;
                accumulate(grads, *c, g.c_seq)?;
                accumulate(grads, *d, g.d_skip)?;
            }
            Op::L1Loss { pred, target } => {
                let scale = gy.item()? / v(pred).numel() as f64;
                let g = v(pred).zip_map(v(target), |p, t| scale * l1_sign(p - t))?;
                accumulate(grads, *target, g.scale(-1.0))?;
                accumulate(grads, *pred, g)?;
            }
            Op::Dot { x, weights } => accumulate(grads, *x, weights.scale(gy.item()?))?,
            Op::Sum(x) => accumulate(grads, *x, Tensor::full(v(x).shape().to_vec(), gy.item()?))?,
        }
        Ok(())
    }
}

/// Subgradient of `|r|` with 0 at ties.
fn l1_sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Backend for GradTape {
    type Value = Var;

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>, axis: Axis) -> Result<Var> {
        self.record(Op::Linear { x: *x, w: *w, b: b.copied(), axis })
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, spec: ConvSpec) -> Result<Var> {
        self.record(Op::Conv2d { x: *x, w: *w, b: b.copied(), spec })
    }

    fn layernorm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64, axis: Axis) -> Result<Var> {
        self.record(Op::LayerNorm { x: *x, gamma: *gamma, beta: *beta, eps, axis })
    }

    fn silu(&mut self, x: &Var) -> Result<Var> {
        self.record(Op::Silu(*x))
    }

    fn softplus(&mut self, x: &Var) -> Result<Var> {
        self.record(Op::Softplus(*x))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Add(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record(Op::Mul(*a, *b))
    }

    fn scale_channels(&mut self, x: &Var, s: &Var) -> Result<Var> {
        self.record(Op::ScaleChannels { x: *x, s: *s })
    }

    fn clamp01(&mut self, x: &Var) -> Result<Var> {
        self.record(Op::Clamp01(*x))
    }

    fn one_minus(&mut self, x: &Var) -> Result<Var> {
        self.record(Op::OneMinus(*x))
    }

    fn repeat_blocks(&mut self, x: &Var, n: usize) -> Result<Var> {
        self.record(Op::RepeatBlocks { x: *x, n })
    }

    fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        self.record(Op::PixelShuffle { x: *x, r })
    }

    fn flatten_direction(&mut self, x: &Var, dir: DirectionOrder) -> Result<Var> {
        self.record(Op::Flatten { x: *x, dir })
    }

    fn unflatten_direction(&mut self, x: &Var, dir: DirectionOrder, h: usize, w: usize) -> Result<Var> {
        self.record(Op::Unflatten { x: *x, dir, h, w })
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceChannels { x: *x, start, len })
    }

    fn selective_scan(&mut self, u: &Var, delta: &Var, a_log: &Var, b_seq: &Var, c_seq: &Var, d_skip: &Var) -> Result<Var> {
        if self.val(*u).dims2()?.1 != self.val(*a_log).dims2()?.0 {
            return Err(dim_err!("scan: u and a_log disagree on channel count"));
        }
        self.record(Op::Scan { u: *u, delta: *delta, a_log: *a_log, b: *b_seq, c: *c_seq, d: *d_skip })
    }
}
