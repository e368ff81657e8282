//! One set of layer formulas, two evaluators.
//!
//! Model code is generic over [`Exec`]. [`Eager`] computes plain tensors
//! (inference, inversion, stop-gradient targets); [`Tape`] records the
//! same arithmetic for reverse mode. Both call the kernels in
//! [`crate::ops`], so their forward values agree bit for bit.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::{self, AttnShape, Layout};
use crate::tensor::Tensor;

/// Sub-function labels reported to [`Exec::note`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubFn {
    San,
    Ffn,
}

impl SubFn {
    pub fn symbol(self) -> char {
        match self {
            SubFn::San => 's',
            SubFn::Ffn => 'f',
        }
    }
}

pub trait Exec {
    type T: Clone;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn matmul_nt(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn scale(&mut self, a: &Self::T, c: f64) -> Self::T;
    fn add_row_bias(&mut self, x: &Self::T, bias: &Self::T) -> Result<Self::T>;
    fn gelu(&mut self, x: &Self::T) -> Self::T;
    fn layer_norm(&mut self, x: &Self::T, gain: &Self::T, bias: &Self::T) -> Result<Self::T>;
    #[allow(clippy::too_many_arguments)]
    fn rel_attention(
        &mut self,
        q: &Self::T,
        k: &Self::T,
        v: &Self::T,
        rel_k: &Self::T,
        rel_v: &Self::T,
        shape: AttnShape,
        layout: &Rc<Layout>,
    ) -> Result<Self::T>;
    fn gather(&mut self, table: &Self::T, ids: &[usize]) -> Result<Self::T>;
    fn log_softmax(&mut self, x: &Self::T) -> Self::T;

    /// Inverted dropout on a sub-function output. Identity unless the
    /// evaluator was built with a dropout rate.
    fn dropout(&mut self, x: &Self::T) -> Result<Self::T> {
        Ok(x.clone())
    }

    /// Called once at the start of every SAN/FFN evaluation.
    fn note(&mut self, _sub: SubFn) {}
}

/// Direct evaluation on tensors.
#[derive(Debug, Default)]
pub struct Eager {
    trace: Option<String>,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluator that records the SAN/FFN execution order.
    pub fn tracing() -> Self {
        Self {
            trace: Some(String::new()),
        }
    }

    pub fn trace(&self) -> Option<&str> {
        self.trace.as_deref()
    }
}

impl Exec for Eager {
    type T = Tensor;

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }

    fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul_nt(b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        a.scale(c)
    }

    fn add_row_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        ops::add_row_bias(x, bias)
    }

    fn gelu(&mut self, x: &Tensor) -> Tensor {
        x.map(ops::gelu)
    }

    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        Ok(ops::layer_norm(x, gain, bias, ops::EPS)?.0)
    }

    fn rel_attention(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        rel_k: &Tensor,
        rel_v: &Tensor,
        shape: AttnShape,
        layout: &Rc<Layout>,
    ) -> Result<Tensor> {
        Ok(ops::rel_attention(q, k, v, rel_k, rel_v, shape, layout)?.0)
    }

    fn gather(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let vocab = table.rows();
        let mut data = Vec::with_capacity(ids.len() * table.cols());
        for &id in ids {
            if id >= vocab {
                return Err(crate::error::RederError::Vocabulary { id, vocab_size: vocab });
            }
            data.extend_from_slice(table.row(id));
        }
        Ok(Tensor::matrix(ids.len(), table.cols(), data))
    }

    fn log_softmax(&mut self, x: &Tensor) -> Tensor {
        ops::log_softmax(x)
    }

    fn note(&mut self, sub: SubFn) {
        if let Some(t) = &mut self.trace {
            t.push(sub.symbol());
        }
    }
}

/// Tape recorder with optional dropout.
pub struct Recorder<'a> {
    pub tape: &'a mut Tape,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Recorder<'a> {
    pub fn new(tape: &'a mut Tape) -> Self {
        Self { tape, dropout: None }
    }

    pub fn with_dropout(tape: &'a mut Tape, rate: f64, rng: ChaCha8Rng) -> Self {
        let dropout = (rate > 0.0).then_some((rate, rng));
        Self { tape, dropout }
    }
}

impl Exec for Recorder<'_> {
    type T = Var;

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.matmul(*a, *b)
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.matmul_nt(*a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.sub(*a, *b)
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        self.tape.scale(*a, c)
    }

    fn add_row_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        self.tape.add_row_bias(*x, *bias)
    }

    fn gelu(&mut self, x: &Var) -> Var {
        self.tape.gelu(*x)
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        self.tape.layer_norm(*x, *gain, *bias)
    }

    fn rel_attention(
        &mut self,
        q: &Var,
        k: &Var,
        v: &Var,
        rel_k: &Var,
        rel_v: &Var,
        shape: AttnShape,
        layout: &Rc<Layout>,
    ) -> Result<Var> {
        self.tape.rel_attention(*q, *k, *v, *rel_k, *rel_v, shape, Rc::clone(layout))
    }

    fn gather(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        self.tape.gather(*table, ids)
    }

    fn log_softmax(&mut self, x: &Var) -> Var {
        self.tape.log_softmax(*x)
    }

    fn dropout(&mut self, x: &Var) -> Result<Var> {
        let Some((rate, rng)) = &mut self.dropout else {
            return Ok(*x);
        };
        let keep = 1.0 / (1.0 - *rate);
        let n = self.tape.value(*x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep })
            .collect();
        self.tape.mask(*x, mask)
    }
}
