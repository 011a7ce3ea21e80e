//! The primitive table: every differentiable operation with its value rule,
//! its forward-mode (tangent) rule, and its reverse-mode (cotangent) rule.

use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Prim {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum; ties route the derivative to the first argument.
    Maximum,
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Rsqrt,
    /// Subgradient 0 at the origin.
    Abs,
    Square,
    Sigmoid,
    Powf(f64),
    MatMul,
    Sum { axes: Vec<usize>, keepdim: bool },
    BroadcastTo(Vec<usize>),
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    StopGradient,
}

impl Prim {
    pub fn name(&self) -> &'static str {
        match self {
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Div => "div",
            Prim::Maximum => "maximum",
            Prim::Neg => "neg",
            Prim::Exp => "exp",
            Prim::Log => "log",
            Prim::Sin => "sin",
            Prim::Cos => "cos",
            Prim::Sqrt => "sqrt",
            Prim::Rsqrt => "rsqrt",
            Prim::Abs => "abs",
            Prim::Square => "square",
            Prim::Sigmoid => "sigmoid",
            Prim::Powf(_) => "powf",
            Prim::MatMul => "matmul",
            Prim::Sum { .. } => "sum",
            Prim::BroadcastTo(_) => "broadcast_to",
            Prim::Reshape(_) => "reshape",
            Prim::Permute(_) => "permute",
            Prim::Concat(_) => "concat",
            Prim::Slice { .. } => "slice",
            Prim::StopGradient => "stop_gradient",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Prim::Add | Prim::Sub | Prim::Mul | Prim::Div | Prim::Maximum | Prim::MatMul => Some(2),
            Prim::Concat(_) => None,
            _ => Some(1),
        }
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        match self.arity() {
            Some(k) if k != n => invalid(format!("{} expects {k} inputs, got {n}", self.name())),
            None if n == 0 => invalid(format!("{} expects at least one input", self.name())),
            _ => Ok(()),
        }
    }

    /// Value rule.
    pub fn eval(&self, xs: &[&Tensor]) -> Result<Tensor> {
        self.check_arity(xs.len())?;
        let x = xs[0];
        Ok(match self {
            Prim::Add => x.add(xs[1])?,
            Prim::Sub => x.sub(xs[1])?,
            Prim::Mul => x.mul(xs[1])?,
            Prim::Div => x.div(xs[1])?,
            Prim::Maximum => x.zip(xs[1], "maximum", |a, b| if a >= b { a } else { b })?,
            Prim::Neg => x.map(|v| -v),
            Prim::Exp => x.map(f64::exp),
            Prim::Log => x.map(f64::ln),
            Prim::Sin => x.map(f64::sin),
            Prim::Cos => x.map(f64::cos),
            Prim::Sqrt => x.map(f64::sqrt),
            Prim::Rsqrt => x.map(|v| 1.0 / v.sqrt()),
            Prim::Abs => x.map(f64::abs),
            Prim::Square => x.map(|v| v * v),
            Prim::Sigmoid => x.map(sigmoid),
            Prim::Powf(p) => x.map(|v| v.powf(*p)),
            Prim::MatMul => x.matmul(xs[1])?,
            Prim::Sum { axes, keepdim } => x.sum_axes(axes, *keepdim)?,
            Prim::BroadcastTo(s) => x.broadcast_to(s)?,
            Prim::Reshape(s) => x.reshape(s)?,
            Prim::Permute(p) => x.permute(p)?,
            Prim::Concat(axis) => Tensor::concat(xs, *axis)?,
            Prim::Slice { axis, start, len } => x.slice_axis(*axis, *start, *len)?,
            Prim::StopGradient => x.clone(),
        })
    }

    /// Pointwise derivative f'(x) of a unary elementwise primitive, given input and output.
    fn unary_derivative(&self, x: &Tensor, y: &Tensor) -> Option<Tensor> {
        let d = match self {
            Prim::Neg => x.map(|_| -1.0),
            Prim::Exp => y.clone(),
            Prim::Log => x.map(|v| 1.0 / v),
            Prim::Sin => x.map(f64::cos),
            Prim::Cos => x.map(|v| -v.sin()),
            Prim::Sqrt => y.map(|v| 0.5 / v),
            Prim::Rsqrt => y.map(|v| -0.5 * v * v * v),
            Prim::Abs => x.map(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Prim::Square => x.scale(2.0),
            Prim::Sigmoid => y.map(|s| s * (1.0 - s)),
            Prim::Powf(p) => {
                let p = *p;
                x.map(|v| p * v.powf(p - 1.0))
            }
            _ => return None,
        };
        Some(d)
    }

    /// Forward-mode rule: tangent of the output given input tangents
    /// (`None` stands for a zero tangent). Returns `None` when the output
    /// tangent is identically zero.
    pub fn jvp(&self, xs: &[&Tensor], y: &Tensor, dxs: &[Option<&Tensor>]) -> Result<Option<Tensor>> {
        self.check_arity(xs.len())?;
        if dxs.len() != xs.len() {
            return invalid(format!("{}: {} tangents for {} inputs", self.name(), dxs.len(), xs.len()));
        }
        for (x, dx) in xs.iter().zip(dxs) {
            if let Some(dx) = dx {
                if dx.shape() != x.shape() {
                    return shape_err("jvp tangent", x.shape(), dx.shape());
                }
            }
        }
        if dxs.iter().all(Option::is_none) || matches!(self, Prim::StopGradient) {
            return Ok(None);
        }
        if let Some(d) = self.unary_derivative(xs[0], y) {
            return Ok(Some(d.mul(dxs[0].expect("unary tangent present"))?));
        }
        let out_shape = y.shape();
        let lift = |t: Tensor| t.broadcast_to(out_shape);
        let t = match self {
            Prim::Add | Prim::Sub => {
                let neg = matches!(self, Prim::Sub);
                match (dxs[0], dxs[1]) {
                    (Some(a), Some(b)) => if neg { a.sub(b)? } else { a.add(b)? },
                    (Some(a), None) => a.clone(),
                    (None, Some(b)) => if neg { b.scale(-1.0) } else { b.clone() },
                    (None, None) => unreachable!(),
                }
                .broadcast_to(out_shape)?
            }
            Prim::Mul => {
                let mut acc: Option<Tensor> = None;
                if let Some(da) = dxs[0] {
                    acc = Some(da.mul(xs[1])?);
                }
                if let Some(db) = dxs[1] {
                    let term = xs[0].mul(db)?;
                    acc = Some(match acc {
                        Some(a) => a.add(&term)?,
                        None => term,
                    });
                }
                lift(acc.expect("some tangent"))?
            }
            Prim::Div => {
                let b = xs[1];
                let mut acc: Option<Tensor> = None;
                if let Some(da) = dxs[0] {
                    acc = Some(da.div(b)?);
                }
                if let Some(db) = dxs[1] {
                    // -a db / b^2 = -y db / b
                    let term = y.mul(db)?.div(b)?.scale(-1.0);
                    acc = Some(match acc {
                        Some(t) => t.add(&term)?,
                        None => term,
                    });
                }
                lift(acc.expect("some tangent"))?
            }
            Prim::Maximum => {
                let first = xs[0].zip(xs[1], "maximum", |a, b| if a >= b { 1.0 } else { 0.0 })?;
                let mut acc = Tensor::zeros(out_shape);
                if let Some(da) = dxs[0] {
                    acc = acc.add(&first.mul(da)?)?;
                }
                if let Some(db) = dxs[1] {
                    acc = acc.add(&first.map(|m| 1.0 - m).mul(db)?)?;
                }
                acc
            }
            Prim::MatMul => {
                let mut acc: Option<Tensor> = None;
                if let Some(da) = dxs[0] {
                    acc = Some(da.matmul(xs[1])?);
                }
                if let Some(db) = dxs[1] {
                    let term = xs[0].matmul(db)?;
                    acc = Some(match acc {
                        Some(t) => t.add(&term)?,
                        None => term,
                    });
                }
                acc.expect("some tangent")
            }
            Prim::Concat(axis) => {
                let filled: Vec<Tensor> = xs
                    .iter()
                    .zip(dxs)
                    .map(|(x, dx)| dx.cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
                    .collect();
                let refs: Vec<&Tensor> = filled.iter().collect();
                Tensor::concat(&refs, *axis)?
            }
            // Linear structural ops: the tangent follows the value rule.
            Prim::Sum { .. } | Prim::BroadcastTo(_) | Prim::Reshape(_) | Prim::Permute(_) | Prim::Slice { .. } => {
                self.eval(&[dxs[0].expect("unary tangent present")])?
            }
            _ => unreachable!("unary elementwise handled above"),
        };
        Ok(Some(t))
    }

    /// Reverse-mode rule: cotangents for each input given the output cotangent `g`.
    pub fn vjp(&self, xs: &[&Tensor], y: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        self.check_arity(xs.len())?;
        if g.shape() != y.shape() {
            return shape_err("vjp cotangent", y.shape(), g.shape());
        }
        if matches!(self, Prim::StopGradient) {
            return Ok(vec![None]);
        }
        if let Some(d) = self.unary_derivative(xs[0], y) {
            return Ok(vec![Some(d.mul(g)?)]);
        }
        let reduce = |t: Tensor, x: &Tensor| t.sum_to_shape(x.shape());
        Ok(match self {
            Prim::Add => vec![Some(reduce(g.clone(), xs[0])?), Some(reduce(g.clone(), xs[1])?)],
            Prim::Sub => vec![Some(reduce(g.clone(), xs[0])?), Some(reduce(g.scale(-1.0), xs[1])?)],
            Prim::Mul => vec![
                Some(reduce(g.mul(xs[1])?, xs[0])?),
                Some(reduce(g.mul(xs[0])?, xs[1])?),
            ],
            Prim::Div => {
                let ga = g.div(xs[1])?;
                let gb = ga.mul(y)?.scale(-1.0);
                vec![Some(reduce(ga, xs[0])?), Some(reduce(gb, xs[1])?)]
            }
            Prim::Maximum => {
                let first = xs[0].zip(xs[1], "maximum", |a, b| if a >= b { 1.0 } else { 0.0 })?;
                let ga = g.mul(&first)?;
                let gb = g.mul(&first.map(|m| 1.0 - m))?;
                vec![Some(reduce(ga, xs[0])?), Some(reduce(gb, xs[1])?)]
            }
            Prim::MatMul => {
                let (a, b) = (xs[0], xs[1]);
                let ga = g.matmul(&b.transpose_last2()?)?;
                let gb = if b.ndim() == 2 {
                    let k = a.shape()[a.ndim() - 1];
                    let n = g.shape()[g.ndim() - 1];
                    let rows = a.numel() / k;
                    let a2 = a.reshape(&[rows, k])?;
                    let g2 = g.reshape(&[rows, n])?;
                    a2.transpose_last2()?.matmul(&g2)?
                } else {
                    a.transpose_last2()?.matmul(g)?
                };
                vec![Some(ga), Some(gb)]
            }
            Prim::Sum { axes, keepdim } => {
                let x = xs[0];
                let mut kept = x.shape().to_vec();
                for &a in axes {
                    kept[a] = 1;
                }
                let g = if *keepdim { g.clone() } else { g.reshape(&kept)? };
                vec![Some(g.broadcast_to(x.shape())?)]
            }
            Prim::BroadcastTo(_) => vec![Some(reduce(g.clone(), xs[0])?)],
            Prim::Reshape(_) => vec![Some(g.reshape(xs[0].shape())?)],
            Prim::Permute(p) => {
                let mut inv = vec![0; p.len()];
                for (i, &a) in p.iter().enumerate() {
                    inv[a] = i;
                }
                vec![Some(g.permute(&inv)?)]
            }
            Prim::Concat(axis) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for x in xs {
                    let len = x.shape()[*axis];
                    out.push(Some(g.slice_axis(*axis, start, len)?));
                    start += len;
                }
                out
            }
            Prim::Slice { axis, start, .. } => {
                vec![Some(g.pad_axis(*axis, *start, xs[0].shape()[*axis])?)]
            }
            _ => unreachable!("unary elementwise handled above"),
        })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
