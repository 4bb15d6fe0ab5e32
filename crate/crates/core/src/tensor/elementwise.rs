use super::{check_axis, numel, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Silu,
    Gelu,
    Relu,
    Square,
    Sqrt,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Gelu => gelu(x),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Square => x * x,
            UnaryOp::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryOp::Gelu => gelu_grad(x),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Sqrt => 0.5 / y,
        }
    }
}

/// Trailing-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position with the matching flat offsets into a and b.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        // advance odometer over the leading axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn same_shape_backward(op: BinaryOp, g: &[f64], a: &[f64], b: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let ga = needs[0].then(|| match op {
        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
        BinaryOp::Mul => g.iter().zip(b).map(|(g, b)| g * b).collect(),
        BinaryOp::Div => g.iter().zip(b).map(|(g, b)| g / b).collect(),
    });
    let gb = needs[1].then(|| match op {
        BinaryOp::Add => g.to_vec(),
        BinaryOp::Sub => g.iter().map(|g| -g).collect(),
        BinaryOp::Mul => g.iter().zip(a).map(|(g, a)| g * a).collect(),
        BinaryOp::Div => g.iter().zip(a).zip(b).map(|((g, a), b)| -g * a / (b * b)).collect(),
    });
    vec![ga, gb]
}

impl Tensor {
    pub fn binary(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let n = numel(&out_shape);
        let a = self.clone();
        let b = other.clone();
        let mut data = vec![0.0; n];
        let same = self.shape() == other.shape();
        let (sa, sb) = (
            broadcast_strides(self.shape(), &out_shape),
            broadcast_strides(other.shape(), &out_shape),
        );
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        if same {
            for ((o, x), y) in data.iter_mut().zip(a.data()).zip(b.data()) {
                *o = f(*x, *y);
            }
        } else {
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
        }
        let shape_c = out_shape.clone();
        Ok(Tensor::from_op(out_shape, data, vec![a.clone(), b.clone()], move |ctx| {
            let (ad, bd) = (a.data(), b.data());
            if same {
                return same_shape_backward(op, ctx.grad, ad, bd, ctx.needs);
            }
            let mut ga = ctx.needs[0].then(|| vec![0.0; ad.len()]);
            let mut gb = ctx.needs[1].then(|| vec![0.0; bd.len()]);
            for_each_broadcast(&shape_c, &sa, &sb, |o, ia, ib| {
                let g = ctx.grad[o];
                let (da, db) = match op {
                    BinaryOp::Add => (g, g),
                    BinaryOp::Sub => (g, -g),
                    BinaryOp::Mul => (g * bd[ib], g * ad[ia]),
                    BinaryOp::Div => (g / bd[ib], -g * ad[ia] / (bd[ib] * bd[ib])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryOp::Div)
    }

    pub fn unary(&self, op: UnaryOp) -> Tensor {
        let x = self.clone();
        let data: Vec<f64> = self.data().iter().map(|&v| op.apply(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![x.clone()], move |ctx| {
            let g = x
                .data()
                .iter()
                .zip(ctx.out)
                .zip(ctx.grad)
                .map(|((&xi, &yi), &gi)| gi * op.derivative(xi, yi))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryOp::Neg)
    }
    pub fn exp(&self) -> Tensor {
        self.unary(UnaryOp::Exp)
    }
    pub fn ln(&self) -> Tensor {
        self.unary(UnaryOp::Log)
    }
    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryOp::Tanh)
    }
    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnaryOp::Sigmoid)
    }
    pub fn softplus(&self) -> Tensor {
        self.unary(UnaryOp::Softplus)
    }
    pub fn silu(&self) -> Tensor {
        self.unary(UnaryOp::Silu)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        self.unary(UnaryOp::Gelu)
    }
    pub fn relu(&self) -> Tensor {
        self.unary(UnaryOp::Relu)
    }
    pub fn square(&self) -> Tensor {
        self.unary(UnaryOp::Square)
    }
    pub fn sqrt(&self) -> Tensor {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let x = self.clone();
        let data = x.data().iter().map(|v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![x], move |ctx| {
            vec![Some(ctx.grad.iter().map(|g| g * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// Elementwise clamp; gradient passes only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let x = self.clone();
        let data = x.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![x.clone()], move |ctx| {
            let g = x
                .data()
                .iter()
                .zip(ctx.grad)
                .map(|(&v, &g)| if v >= lo && v <= hi { g } else { 0.0 })
                .collect();
            vec![Some(g)]
        })
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums out one axis (removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = self.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (dv, sv) in dst.iter_mut().zip(&d[base..base + inner]) {
                    *dv += sv;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &ctx.grad[o * inner..(o + 1) * inner];
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    g[base..base + inner].copy_from_slice(src);
                }
            }
            vec![Some(g)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let len = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }
}
