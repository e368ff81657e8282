//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Nodes refer to
//! their inputs by [`Var`] index, so recording order is already a
//! topological order and the backward sweep is a single reverse pass.

use std::rc::Rc;

use crate::error::{RederError, Result};
use crate::ops::{self, AttnCache, AttnShape, Layout, NormCache};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: NormCache,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        rel_k: Var,
        rel_v: Var,
        shape: AttnShape,
        layout: Rc<Layout>,
        cache: AttnCache,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LogSoftmax(Var),
    /// Scalar loss whose gradient w.r.t. `input` was produced alongside the
    /// value (CTC forward-backward).
    Fused {
        input: Var,
        grad: Tensor,
    },
    CosineDistance {
        a: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_row_bias(self.value(x), self.value(bias))?;
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, cache) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), ops::EPS)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, cache }, &[x, gain, bias]))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn rel_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        rel_k: Var,
        rel_v: Var,
        shape: AttnShape,
        layout: Rc<Layout>,
    ) -> Result<Var> {
        let (out, cache) = ops::rel_attention(
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(rel_k),
            self.value(rel_v),
            shape,
            &layout,
        )?;
        let op = Op::Attention {
            q,
            k,
            v,
            rel_k,
            rel_v,
            shape,
            layout,
            cache,
        };
        Ok(self.push(out, op, &[q, k, v, rel_k, rel_v]))
    }

    /// Row lookup `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let vocab = t.rows();
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(RederError::Vocabulary { id, vocab_size: vocab });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, data);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = ops::log_softmax(self.value(x));
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Records a scalar `value` computed outside the tape from `input`,
    /// together with its gradient `d value / d input`.
    pub fn fused_scalar(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if !grad.same_shape(self.value(input)) {
            return Err(RederError::Shape {
                op: "fused_scalar",
                left: self.value(input).shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { input, grad }, &[input]))
    }

    /// `Σ_r w_r · (1 − cos(a_r, target_r))` over rows. `target` is a
    /// constant, so no gradient flows into it.
    pub fn cosine_distance(&mut self, a: Var, target: Tensor, weights: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if !av.same_shape(&target) || weights.len() != av.rows() {
            return Err(RederError::Shape {
                op: "cosine_distance",
                left: av.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let mut total = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                total += w * ops::cosine_distance(av.row(r), target.row(r));
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CosineDistance { a, target, weights },
            &[a],
        ))
    }

    /// `Σ c_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(RederError::Shape {
                op: "mask",
                left: xv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Mask { x, mask }, &[x]))
    }

    /// Backward sweep from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_seeded(&[(root, seed)])
    }

    /// Backward sweep with explicit output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if !g.same_shape(self.value(*v)) {
                return Err(RederError::Shape {
                    op: "backward seed",
                    left: self.value(*v).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if rg(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if rg(*b) {
                    accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::AddRowBias(x, bias) => {
                if rg(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if rg(*bias) {
                    let sums = ops::column_sums(g).reshape(self.value(*bias).shape().to_vec())?;
                    accumulate(grads, *bias, sums);
                }
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_map(g, |xv, gv| ops::gelu_grad(xv) * gv)?;
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let (dx, dg, db) = ops::layer_norm_backward(cache, self.value(*gain), g);
                if rg(*x) {
                    accumulate(grads, *x, dx);
                }
                if rg(*gain) {
                    accumulate(grads, *gain, dg.reshape(self.value(*gain).shape().to_vec())?);
                }
                if rg(*bias) {
                    accumulate(grads, *bias, db.reshape(self.value(*bias).shape().to_vec())?);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                rel_k,
                rel_v,
                shape,
                layout,
                cache,
            } => {
                let ag = ops::rel_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    self.value(*rel_k),
                    self.value(*rel_v),
                    *shape,
                    layout,
                    cache,
                    g,
                );
                let pairs = [
                    (*q, ag.dq),
                    (*k, ag.dk),
                    (*v, ag.dv),
                    (*rel_k, ag.drel_k),
                    (*rel_v, ag.drel_v),
                ];
                for (var, d) in pairs {
                    if rg(var) {
                        accumulate(grads, var, d);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let mut dt = Tensor::zeros(self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::LogSoftmax(x) => {
                accumulate(grads, *x, ops::log_softmax_backward(&node.value, g));
            }
            Op::Fused { input, grad } => {
                accumulate(grads, *input, grad.scale(g.item()));
            }
            Op::CosineDistance { a, target, weights } => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.shape());
                let s = g.item();
                for (r, &w) in weights.iter().enumerate() {
                    if w != 0.0 {
                        ops::cosine_distance_grad(av.row(r), target.row(r), w * s, da.row_mut(r));
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::WeightedSum(terms) => {
                let s = g.item();
                for &(v, c) in terms {
                    if rg(v) {
                        accumulate(grads, v, Tensor::full(self.value(v).shape(), c * s));
                    }
                }
            }
            Op::Mask { x, mask } => {
                let mut dx = g.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            existing
                .add_assign(&g)
                .expect("gradient shape matches node value");
        }
        slot @ None => *slot = Some(g),
    }
}
