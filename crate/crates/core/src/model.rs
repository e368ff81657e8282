//! The duplex network: one embedding table and `L` reversible layers that
//! serve both translation directions.
//!
//! The source→target map runs layers `1..L/2` in reverse form and
//! `L/2+1..L` in regular form. The target→source map is its exact inverse:
//! the same layers walked from `L` down to `1` with every form flipped. In
//! both directions the SAN/FFN execution order reads `fs…fssf…sf`.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::error::{RederError, Result};
use crate::exec::{Eager, Exec};
use crate::layer::{apply_form, Form, HiddenPair, LayerDims, LayerParams, LayerWeights, Pair, LAYER_TENSOR_NAMES};
use crate::ops::Layout;
use crate::tensor::Tensor;
use crate::vocab::BLANK;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Includes the pad and blank rows.
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Even, so the stack splits into two halves.
    pub layers: usize,
    pub rel_clip: usize,
    pub upsample_factor: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 34,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            layers: 4,
            rel_clip: 8,
            upsample_factor: 2,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RederError::Config(m));
        if self.layers == 0 || self.layers % 2 != 0 {
            return bad(format!("layers must be a positive even number, got {}", self.layers));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.upsample_factor < 1 {
            return bad("upsample_factor must be at least 1".into());
        }
        if self.vocab_size <= BLANK {
            return bad("vocabulary must hold pad and blank".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims {
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            rel_clip: self.rel_clip,
        }
    }
}

/// Which end is the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Source → target.
    Forward,
    /// Target → source.
    Reverse,
}

impl Direction {
    pub fn opposite(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "x2y",
            Direction::Reverse => "y2x",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "x2y" | "forward" | "fwd" => Some(Direction::Forward),
            "y2x" | "reverse" | "rev" => Some(Direction::Reverse),
            _ => None,
        }
    }
}

/// One layer evaluation in a fixed form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub layer: usize,
    pub form: Form,
}

impl Step {
    pub fn inverse(self) -> Self {
        Step {
            layer: self.layer,
            form: self.form.flipped(),
        }
    }
}

/// Layer schedule for a direction over a stack of `layers` layers.
pub fn schedule(layers: usize, direction: Direction) -> Vec<Step> {
    let half = layers / 2;
    let forward: Vec<Step> = (0..layers)
        .map(|layer| Step {
            layer,
            form: if layer < half { Form::Reverse } else { Form::Regular },
        })
        .collect();
    match direction {
        Direction::Forward => forward,
        Direction::Reverse => forward.into_iter().rev().map(Step::inverse).collect(),
    }
}

/// All parameters, generic over storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub embedding: T,
    pub layers: Vec<LayerWeights<T>>,
}

impl<T> ModelWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelWeights<U> {
        ModelWeights {
            embedding: f(&self.embedding),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
        }
    }

    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(l.fields()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        std::iter::once(&mut self.embedding).chain(self.layers.iter_mut().flat_map(|l| l.fields_mut()))
    }

    /// Rebuilds from values in [`ModelWeights::named`] order.
    pub fn from_ordered(layers: usize, values: impl IntoIterator<Item = T>) -> Option<Self> {
        let mut it = values.into_iter();
        let embedding = it.next()?;
        let mut ls = Vec::with_capacity(layers);
        for _ in 0..layers {
            ls.push(LayerWeights::from_fields(it.by_ref().take(LAYER_TENSOR_NAMES.len()))?);
        }
        it.next().is_none().then_some(ModelWeights { embedding, layers: ls })
    }
}

pub type ModelParams = ModelWeights<Tensor>;

/// `[h1; h2] = [e(x); e(x)]` for every token.
pub fn embed_duplicate<E: Exec>(e: &mut E, table: &E::T, ids: &[usize]) -> Result<Pair<E::T>> {
    let emb = e.gather(table, ids)?;
    Ok(Pair {
        h1: emb.clone(),
        h2: emb,
    })
}

/// Runs `steps` from `h0`, returning the state after each step.
pub fn run_steps<E: Exec>(
    e: &mut E,
    h0: &Pair<E::T>,
    steps: &[Step],
    weights: &ModelWeights<E::T>,
    dims: &LayerDims,
    layout: &Rc<Layout>,
) -> Result<Vec<Pair<E::T>>> {
    let mut states: Vec<Pair<E::T>> = Vec::with_capacity(steps.len());
    for step in steps {
        let cur = states.last().unwrap_or(h0);
        let next = apply_form(e, step.form, cur, &weights.layers[step.layer], dims, layout)?;
        states.push(next);
    }
    Ok(states)
}

/// `log softmax_v((e_v·h1 + e_v·h2) / 2)` at every row.
pub fn output_log_probs<E: Exec>(e: &mut E, h: &Pair<E::T>, table: &E::T) -> Result<E::T> {
    let sum = e.add(&h.h1, &h.h2)?;
    let mean = e.scale(&sum, 0.5);
    let logits = e.matmul_nt(&mean, table)?;
    Ok(e.log_softmax(&logits))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DuplexModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl DuplexModel {
    /// Embedding `N(0, 1/d)`; layers per [`LayerParams::init`].
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.dims();
        let embedding = Tensor::randn(
            &[config.vocab_size, config.d_model],
            (config.d_model as f64).powf(-0.5),
            &mut rng,
        );
        let layers = (0..config.layers).map(|_| LayerParams::init(&dims, &mut rng)).collect();
        Ok(Self {
            config,
            params: ModelWeights { embedding, layers },
        })
    }

    /// Every layer tensor zero: all sub-functions vanish.
    pub fn zero_layers(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::init(config, seed)?;
        let dims = m.config.dims();
        for l in &mut m.params.layers {
            *l = LayerParams::zeros(&dims);
        }
        Ok(m)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        if params.layers.len() != config.layers {
            return Err(RederError::Config(format!(
                "{} layer tensors for a {}-layer config",
                params.layers.len(),
                config.layers
            )));
        }
        let want = [config.vocab_size, config.d_model];
        if params.embedding.shape() != want {
            return Err(RederError::Shape {
                op: "embedding",
                left: params.embedding.shape().to_vec(),
                right: want.to_vec(),
            });
        }
        for l in &params.layers {
            l.check_dims(&dims)?;
        }
        Ok(Self { config, params })
    }

    pub fn dims(&self) -> LayerDims {
        self.config.dims()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn embed_duplicate(&self, ids: &[usize]) -> Result<HiddenPair> {
        if ids.is_empty() {
            return Ok(HiddenPair::empty(self.config.d_model));
        }
        embed_duplicate(&mut Eager::new(), &self.params.embedding, ids)
    }

    /// Applies `direction`'s schedule; returns every intermediate state,
    /// the last being the output representation.
    pub fn map(&self, h0: &HiddenPair, direction: Direction, layout: &Layout) -> Result<Vec<HiddenPair>> {
        let steps = schedule(self.config.layers, direction);
        run_steps(
            &mut Eager::new(),
            h0,
            &steps,
            &self.params,
            &self.dims(),
            &Rc::new(layout.clone()),
        )
    }

    /// Source → target over continuous states.
    pub fn forward_map(&self, h0: &HiddenPair, layout: &Layout) -> Result<Vec<HiddenPair>> {
        self.map(h0, Direction::Forward, layout)
    }

    /// Target → source; the exact inverse of [`DuplexModel::forward_map`].
    pub fn reverse_map(&self, h_last: &HiddenPair, layout: &Layout) -> Result<Vec<HiddenPair>> {
        self.map(h_last, Direction::Reverse, layout)
    }

    pub fn output_log_probs(&self, h: &HiddenPair) -> Result<Tensor> {
        output_log_probs(&mut Eager::new(), h, &self.params.embedding)
    }

    /// SAN/FFN execution order for `direction` (`s` and `f`), recorded
    /// from an actual evaluation.
    pub fn op_trace(&self, direction: Direction) -> Result<String> {
        let mut e = Eager::tracing();
        let h = HiddenPair::empty(self.config.d_model);
        let steps = schedule(self.config.layers, direction);
        run_steps(&mut e, &h, &steps, &self.params, &self.dims(), &Rc::new(Layout::single(0)))?;
        Ok(e.trace().unwrap_or_default().to_string())
    }

    /// Per-frame output distribution for one unpadded input sequence:
    /// upsample, embed, map, project.
    pub fn log_probs(&self, input: &[usize], direction: Direction) -> Result<Tensor> {
        let up = ctc::upsample(input, self.config.upsample_factor);
        if up.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.vocab_size]));
        }
        let h0 = self.embed_duplicate(&up)?;
        let states = self.map(&h0, direction, &Layout::single(up.len()))?;
        self.output_log_probs(states.last().unwrap_or(&h0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            d_ff: 12,
            heads: 2,
            layers,
            rel_clip: 3,
            upsample_factor: 2,
            dropout: 0.0,
        }
    }

    #[test]
    fn odd_layer_count_is_rejected() {
        assert!(DuplexModel::init(small(3), 0).is_err());
    }

    #[test]
    fn embedding_halves_match() {
        let m = DuplexModel::init(small(2), 1).unwrap();
        assert_eq!(m.embed_duplicate(&[]).unwrap().rows(), 0);
        let h = m.embed_duplicate(&[3, 3, 5]).unwrap();
        assert_eq!(h.h1, h.h2);
        assert_eq!(h.h1.row(0), m.params.embedding.row(3));
        assert_eq!(h.h1.row(0), h.h1.row(1));
        assert!(m.embed_duplicate(&[10]).is_err());
    }

    #[test]
    fn two_layer_forward_is_manual_composition() {
        let m = DuplexModel::init(small(2), 2).unwrap();
        let h0 = m.embed_duplicate(&[2, 4, 6, 8]).unwrap();
        let layout = Layout::single(4);
        let rc = Rc::new(layout.clone());
        let dims = m.dims();
        let e = &mut Eager::new();
        let s1 = crate::layer::layer_reverse(e, &h0, &m.params.layers[0], &dims, &rc).unwrap();
        let s2 = crate::layer::layer_regular(e, &s1, &m.params.layers[1], &dims, &rc).unwrap();
        let states = m.forward_map(&h0, &layout).unwrap();
        assert_eq!(states.len(), 2);
        assert_eq!(states[0], s1);
        assert_eq!(states[1], s2);

        // Reverse direction on a target-side input: F2⁻¹ then F1.
        let r1 = crate::layer::layer_reverse(e, &h0, &m.params.layers[1], &dims, &rc).unwrap();
        let r2 = crate::layer::layer_regular(e, &r1, &m.params.layers[0], &dims, &rc).unwrap();
        let back = m.reverse_map(&h0, &layout).unwrap();
        assert_eq!(back[1], r2);
    }

    #[test]
    fn zero_model_is_identity_both_ways() {
        let m = DuplexModel::zero_layers(small(4), 3).unwrap();
        let h0 = m.embed_duplicate(&[2, 3, 4]).unwrap();
        let layout = Layout::single(3);
        for s in m.forward_map(&h0, &layout).unwrap() {
            assert_eq!(s, h0);
        }
        for s in m.reverse_map(&h0, &layout).unwrap() {
            assert_eq!(s, h0);
        }
    }

    #[test]
    fn reverse_map_inverts_forward_map() {
        for layers in [2, 4, 8] {
            let m = DuplexModel::init(small(layers), 4).unwrap();
            let h0 = m.embed_duplicate(&[2, 3, 4, 5, 6, 7, 8, 9, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
            let layout = Layout::single(16);
            let out = m.forward_map(&h0, &layout).unwrap();
            let back = m.reverse_map(out.last().unwrap(), &layout).unwrap();
            assert!(back.last().unwrap().max_abs_diff(&h0).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn output_head_hand_example() {
        let mut m = DuplexModel::init(
            ModelConfig {
                vocab_size: 2,
                d_model: 2,
                d_ff: 2,
                heads: 1,
                layers: 2,
                rel_clip: 1,
                upsample_factor: 2,
                dropout: 0.0,
            },
            0,
        )
        .unwrap();
        m.params.embedding = Tensor::identity(2);
        let h = HiddenPair {
            h1: Tensor::from_rows(&[vec![1.0, 0.0]]),
            h2: Tensor::from_rows(&[vec![1.0, 0.0]]),
        };
        let lp = m.output_log_probs(&h).unwrap();
        let want = crate::ops::log_softmax(&Tensor::from_rows(&[vec![1.0, 0.0]]));
        assert!(lp.max_abs_diff(&want).unwrap() < 1e-15);

        let zero = HiddenPair {
            h1: Tensor::zeros(&[1, 2]),
            h2: Tensor::zeros(&[1, 2]),
        };
        let lp = m.output_log_probs(&zero).unwrap();
        assert!(lp.data().iter().all(|v| (v + 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn output_logits_scale_linearly() {
        let m = DuplexModel::init(small(2), 5).unwrap();
        let h = m.embed_duplicate(&[2, 7]).unwrap();
        let scaled = HiddenPair {
            h1: h.h1.scale(3.0),
            h2: h.h2.scale(3.0),
        };
        let logits = |p: &HiddenPair| {
            p.h1.add(&p.h2).unwrap().scale(0.5).matmul_nt(&m.params.embedding).unwrap()
        };
        let a = logits(&h).scale(3.0);
        let b = logits(&scaled);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        let lp = m.output_log_probs(&h).unwrap();
        for r in 0..lp.rows() {
            let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_is_a_palindrome_in_both_directions() {
        let m = DuplexModel::init(small(4), 6).unwrap();
        let fwd = m.op_trace(Direction::Forward).unwrap();
        assert_eq!(fwd, "fsfssfsf");
        assert_eq!(m.op_trace(Direction::Reverse).unwrap(), fwd);
        assert_eq!(fwd.chars().rev().collect::<String>(), fwd);
    }

    #[test]
    fn schedules_are_mutual_inverses() {
        let f = schedule(6, Direction::Forward);
        let r = schedule(6, Direction::Reverse);
        let inv: Vec<Step> = f.iter().rev().map(|s| s.inverse()).collect();
        assert_eq!(r, inv);
    }
}
