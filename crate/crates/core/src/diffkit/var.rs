use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use super::prim::Prim;
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node {
    id: u64,
    value: Tensor,
    tangent: Option<Tensor>,
    requires_grad: bool,
    /// Kept only while some input requires a gradient.
    op: Option<(Prim, Vec<Var>)>,
}

/// A traced value: primal, optional forward-mode tangent, and (when it
/// depends on a gradient leaf) the primitive record that produced it.
///
/// Ids increase in creation order, so sorting reachable nodes by id yields
/// a topological order.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl Var {
    fn leaf(value: Tensor, tangent: Option<Tensor>, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            tangent,
            requires_grad,
            op: None,
        }))
    }

    /// A constant: no tangent, no gradient.
    pub fn constant(value: Tensor) -> Var {
        Self::leaf(value, None, false)
    }

    pub fn scalar(v: f64) -> Var {
        Self::constant(Tensor::scalar(v))
    }

    /// A gradient leaf.
    pub fn param(value: Tensor) -> Var {
        Self::leaf(value, None, true)
    }

    /// A forward-mode input carrying `tangent`.
    pub fn dual(value: Tensor, tangent: Tensor) -> Result<Var> {
        if value.shape() != tangent.shape() {
            return shape_err("dual", value.shape(), tangent.shape());
        }
        Ok(Self::leaf(value, Some(tangent), false))
    }

    /// A gradient leaf that also carries a tangent.
    pub fn dual_param(value: Tensor, tangent: Tensor) -> Result<Var> {
        if value.shape() != tangent.shape() {
            return shape_err("dual", value.shape(), tangent.shape());
        }
        Ok(Self::leaf(value, Some(tangent), true))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    /// Forward-mode tangent; zeros when the value does not depend on any dual input.
    pub fn tangent(&self) -> Tensor {
        self.0.tangent.clone().unwrap_or_else(|| Tensor::zeros(self.shape()))
    }

    pub fn has_tangent(&self) -> bool {
        self.0.tangent.is_some()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Applies a primitive, evaluating the value and (if needed) tangent rules.
    pub fn apply(prim: Prim, inputs: &[&Var]) -> Result<Var> {
        let xs: Vec<&Tensor> = inputs.iter().map(|v| v.value()).collect();
        let value = prim.eval(&xs)?;
        let tangent = if inputs.iter().any(|v| v.has_tangent()) {
            let dxs: Vec<Option<&Tensor>> = inputs.iter().map(|v| v.0.tangent.as_ref()).collect();
            prim.jvp(&xs, &value, &dxs)?
        } else {
            None
        };
        let requires_grad = !matches!(prim, Prim::StopGradient) && inputs.iter().any(|v| v.requires_grad());
        let op = requires_grad.then(|| (prim, inputs.iter().map(|v| (*v).clone()).collect()));
        Ok(Var(Rc::new(Node {
            id: next_id(),
            value,
            tangent,
            requires_grad,
            op,
        })))
    }

    fn unary(&self, prim: Prim) -> Result<Var> {
        Var::apply(prim, &[self])
    }

    pub fn add(&self, o: &Var) -> Result<Var> {
        Var::apply(Prim::Add, &[self, o])
    }
    pub fn sub(&self, o: &Var) -> Result<Var> {
        Var::apply(Prim::Sub, &[self, o])
    }
    pub fn mul(&self, o: &Var) -> Result<Var> {
        Var::apply(Prim::Mul, &[self, o])
    }
    pub fn div(&self, o: &Var) -> Result<Var> {
        Var::apply(Prim::Div, &[self, o])
    }
    pub fn maximum(&self, o: &Var) -> Result<Var> {
        Var::apply(Prim::Maximum, &[self, o])
    }
    pub fn matmul(&self, o: &Var) -> Result<Var> {
        Var::apply(Prim::MatMul, &[self, o])
    }
    pub fn neg(&self) -> Result<Var> {
        self.unary(Prim::Neg)
    }
    pub fn exp(&self) -> Result<Var> {
        self.unary(Prim::Exp)
    }
    pub fn log(&self) -> Result<Var> {
        self.unary(Prim::Log)
    }
    pub fn sin(&self) -> Result<Var> {
        self.unary(Prim::Sin)
    }
    pub fn cos(&self) -> Result<Var> {
        self.unary(Prim::Cos)
    }
    pub fn sqrt(&self) -> Result<Var> {
        self.unary(Prim::Sqrt)
    }
    pub fn rsqrt(&self) -> Result<Var> {
        self.unary(Prim::Rsqrt)
    }
    pub fn abs(&self) -> Result<Var> {
        self.unary(Prim::Abs)
    }
    pub fn square(&self) -> Result<Var> {
        self.unary(Prim::Square)
    }
    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(Prim::Sigmoid)
    }
    pub fn powf(&self, p: f64) -> Result<Var> {
        self.unary(Prim::Powf(p))
    }
    pub fn stop_gradient(&self) -> Result<Var> {
        self.unary(Prim::StopGradient)
    }

    /// x * sigmoid(x)
    pub fn silu(&self) -> Result<Var> {
        self.mul(&self.sigmoid()?)
    }

    pub fn scale(&self, s: f64) -> Result<Var> {
        self.mul(&Var::scalar(s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var> {
        self.add(&Var::scalar(s))
    }

    pub fn sum(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.unary(Prim::Sum {
            axes: axes.to_vec(),
            keepdim,
        })
    }

    pub fn sum_all(&self) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes, false)
    }

    pub fn mean(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        self.sum(axes, keepdim)?.scale(1.0 / count as f64)
    }

    pub fn mean_all(&self) -> Result<Var> {
        let n = self.value().numel();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        self.unary(Prim::BroadcastTo(shape.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        self.unary(Prim::Reshape(shape.to_vec()))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        self.unary(Prim::Permute(axes.to_vec()))
    }

    pub fn transpose_last2(&self) -> Result<Var> {
        let nd = self.shape().len();
        if nd < 2 {
            return invalid("transpose needs at least two axes");
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        Var::apply(Prim::Concat(axis), parts)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.unary(Prim::Slice { axis, start, len })
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self.shape().get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != extent {
            return invalid(format!("split sizes {sizes:?} do not cover extent {extent} on axis {axis}"));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.slice(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    /// Reverse-mode gradients of a scalar output with respect to every
    /// gradient leaf it depends on.
    pub fn backward(&self) -> Result<Grads> {
        if self.value().numel() != 1 {
            return invalid(format!(
                "gradient requires a scalar output, got shape {:?}",
                self.shape()
            ));
        }
        let graph = Graph::trace(self);
        graph.backward(Tensor::ones(self.shape()))
    }
}

/// Linearized record of everything a traced output depends on through
/// gradient-carrying paths. Leaves hold their values; interior nodes hold
/// the primitive and input indices.
pub struct Graph {
    nodes: Vec<GraphNode>,
}

pub struct GraphNode {
    pub id: u64,
    pub prim: Option<Prim>,
    pub inputs: Vec<usize>,
    pub value: Tensor,
    pub requires_grad: bool,
}

impl Graph {
    pub fn trace(output: &Var) -> Graph {
        let mut seen: HashMap<u64, Var> = HashMap::new();
        let mut stack = vec![output.clone()];
        while let Some(v) = stack.pop() {
            if seen.contains_key(&v.0.id) {
                continue;
            }
            if let Some((_, inputs)) = &v.0.op {
                stack.extend(inputs.iter().cloned());
            }
            seen.insert(v.0.id, v);
        }
        let mut vars: Vec<Var> = seen.into_values().collect();
        vars.sort_by_key(|v| v.0.id);
        let index: HashMap<u64, usize> = vars.iter().enumerate().map(|(i, v)| (v.0.id, i)).collect();
        let nodes = vars
            .iter()
            .map(|v| {
                let (prim, inputs) = match &v.0.op {
                    Some((p, ins)) => (Some(p.clone()), ins.iter().map(|i| index[&i.0.id]).collect()),
                    None => (None, vec![]),
                };
                GraphNode {
                    id: v.0.id,
                    prim,
                    inputs,
                    value: v.0.value.clone(),
                    requires_grad: v.0.requires_grad,
                }
            })
            .collect();
        Graph { nodes }
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    /// Re-evaluates every interior node from the leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let v = match &n.prim {
                None => n.value.clone(),
                Some(p) => {
                    let xs: Vec<&Tensor> = n.inputs.iter().map(|&i| &vals[i]).collect();
                    p.eval(&xs)?
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Propagates `seed` from the last node back to every gradient leaf.
    pub fn backward(&self, seed: Tensor) -> Result<Grads> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[n - 1] = Some(seed);
        let mut out = HashMap::new();
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.prim {
                None => {
                    if node.requires_grad {
                        out.insert(node.id, g);
                    }
                }
                Some(p) => {
                    let xs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let gs = p.vjp(&xs, &node.value, &g)?;
                    for (&j, gj) in node.inputs.iter().zip(gs) {
                        let Some(gj) = gj else { continue };
                        if !self.nodes[j].requires_grad {
                            continue;
                        }
                        adj[j] = Some(match adj[j].take() {
                            Some(acc) => acc.add(&gj)?,
                            None => gj,
                        });
                    }
                }
            }
        }
        Ok(Grads(out))
    }
}

/// Gradients keyed by leaf id.
#[derive(Default)]
pub struct Grads(HashMap<u64, Tensor>);

impl Grads {
    /// Gradient for `v`, zeros if the output does not depend on it.
    pub fn wrt(&self, v: &Var) -> Tensor {
        self.0.get(&v.id()).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

/// Gradient of the scalar `f(params)` with respect to every parameter tensor.
/// Returns the value alongside.
pub fn grad<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = params.iter().cloned().map(Var::param).collect();
    let out = f(&vars)?;
    let grads = out.backward()?;
    Ok((out.value().item()?, vars.iter().map(|v| grads.wrt(v)).collect()))
}

/// Forward-mode Jacobian-vector product: values of `f(x)` and `J_f(x) · tangent`.
pub fn jvp<F>(f: F, x: &[Tensor], tangent: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)>
where
    F: FnOnce(&[Var]) -> Result<Vec<Var>>,
{
    if x.len() != tangent.len() {
        return invalid(format!("jvp: {} inputs but {} tangents", x.len(), tangent.len()));
    }
    let vars = x
        .iter()
        .zip(tangent)
        .map(|(p, t)| Var::dual(p.clone(), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let outs = f(&vars)?;
    Ok((
        outs.iter().map(|o| o.value().clone()).collect(),
        outs.iter().map(|o| o.tangent()).collect(),
    ))
}

/// Identity on values; blocks both tangents and cotangents.
pub fn stop_gradient(x: &Var) -> Result<Var> {
    x.stop_gradient()
}
