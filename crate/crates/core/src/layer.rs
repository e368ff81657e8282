//! Reversible duplex Transformer layer.
//!
//! A layer owns two sub-functions, relative self-attention (SAN) and a
//! position-wise feed-forward network (FFN), joined by additive coupling
//! over a split hidden state `[h1; h2]`:
//!
//! ```text
//! regular:  h1' = h1 + SAN(h2)      h2' = h2 + FFN(h1')
//! reverse:  h2  = h2' − FFN(h1')    h1  = h1' − SAN(h2)
//! ```
//!
//! Layer norm is applied to each sub-function's input inside the
//! sub-function. Nothing is applied to the coupled sum, so the reverse form
//! is an exact inverse up to floating-point rounding.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec::{Exec, SubFn};
use crate::ops::{AttnShape, Layout};
use crate::tensor::Tensor;

/// Parameters of one layer, generic over the storage (tensors for the
/// model, tape variables while recording).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    /// Relative-position key embeddings, `[2·clip + 1, d_head]`.
    pub rel_k: T,
    /// Relative-position value embeddings, same shape as `rel_k`.
    pub rel_v: T,
    pub ln_san_gain: T,
    pub ln_san_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln_ffn_gain: T,
    pub ln_ffn_bias: T,
}

pub type LayerParams = LayerWeights<Tensor>;

pub const LAYER_TENSOR_NAMES: [&str; 14] = [
    "wq",
    "wk",
    "wv",
    "wo",
    "rel_k",
    "rel_v",
    "ln_san_gain",
    "ln_san_bias",
    "w1",
    "b1",
    "w2",
    "b2",
    "ln_ffn_gain",
    "ln_ffn_bias",
];

impl<T> LayerWeights<T> {
    /// Fields in [`LAYER_TENSOR_NAMES`] order.
    pub fn fields(&self) -> [&T; 14] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.rel_k,
            &self.rel_v,
            &self.ln_san_gain,
            &self.ln_san_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln_ffn_gain,
            &self.ln_ffn_bias,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut T; 14] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.rel_k,
            &mut self.rel_v,
            &mut self.ln_san_gain,
            &mut self.ln_san_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln_ffn_gain,
            &mut self.ln_ffn_bias,
        ]
    }

    pub fn from_fields(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            wq: it.next()?,
            wk: it.next()?,
            wv: it.next()?,
            wo: it.next()?,
            rel_k: it.next()?,
            rel_v: it.next()?,
            ln_san_gain: it.next()?,
            ln_san_bias: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
            ln_ffn_gain: it.next()?,
            ln_ffn_bias: it.next()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerWeights<U> {
        LayerWeights::from_fields(self.fields().into_iter().map(&mut f)).expect("14 fields")
    }
}

/// Dimensions shared by every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub rel_clip: usize,
}

impl LayerDims {
    pub fn attn(&self) -> AttnShape {
        AttnShape {
            heads: self.heads,
            clip: self.rel_clip,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn shapes(&self) -> [Vec<usize>; 14] {
        let (d, f) = (self.d_model, self.d_ff);
        [
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![2 * self.rel_clip + 1, self.d_head()],
            vec![2 * self.rel_clip + 1, self.d_head()],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
            vec![d],
            vec![d],
        ]
    }
}

impl LayerParams {
    /// Xavier-uniform projections, unit norm gains, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &LayerDims, rng: &mut R) -> Self {
        let (d, f) = (dims.d_model, dims.d_ff);
        let xavier = |rows: usize, cols: usize, rng: &mut R| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::uniform(&[rows, cols], bound, rng)
        };
        Self {
            wq: xavier(d, d, rng),
            wk: xavier(d, d, rng),
            wv: xavier(d, d, rng),
            wo: xavier(d, d, rng),
            rel_k: Tensor::randn(&[2 * dims.rel_clip + 1, dims.d_head()], 0.02, rng),
            rel_v: Tensor::randn(&[2 * dims.rel_clip + 1, dims.d_head()], 0.02, rng),
            ln_san_gain: Tensor::full(&[d], 1.0),
            ln_san_bias: Tensor::zeros(&[d]),
            w1: xavier(d, f, rng),
            b1: Tensor::zeros(&[f]),
            w2: xavier(f, d, rng),
            b2: Tensor::zeros(&[d]),
            ln_ffn_gain: Tensor::full(&[d], 1.0),
            ln_ffn_bias: Tensor::zeros(&[d]),
        }
    }

    /// All tensors zero; both sub-functions then output zero.
    pub fn zeros(dims: &LayerDims) -> Self {
        LayerWeights::from_fields(dims.shapes().iter().map(|s| Tensor::zeros(s))).expect("14 fields")
    }

    pub fn check_dims(&self, dims: &LayerDims) -> Result<()> {
        for ((t, want), name) in self.fields().iter().zip(dims.shapes()).zip(LAYER_TENSOR_NAMES) {
            if t.shape() != want.as_slice() {
                return Err(crate::error::RederError::Shape {
                    op: name,
                    left: t.shape().to_vec(),
                    right: want,
                });
            }
        }
        Ok(())
    }
}

/// Split hidden state `[h1; h2]`, each `[rows, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub h1: T,
    pub h2: T,
}

pub type HiddenPair = Pair<Tensor>;

impl HiddenPair {
    pub fn empty(d: usize) -> Self {
        Self {
            h1: Tensor::zeros(&[0, d]),
            h2: Tensor::zeros(&[0, d]),
        }
    }

    /// ∞-norm distance over both halves.
    pub fn max_abs_diff(&self, other: &HiddenPair) -> Result<f64> {
        Ok(self
            .h1
            .max_abs_diff(&other.h1)?
            .max(self.h2.max_abs_diff(&other.h2)?))
    }

    pub fn rows(&self) -> usize {
        self.h1.rows()
    }
}

/// Relative multi-head self-attention on `norm(x)`; no residual.
pub fn san<E: Exec>(
    e: &mut E,
    x: &E::T,
    p: &LayerWeights<E::T>,
    dims: &LayerDims,
    layout: &Rc<Layout>,
) -> Result<E::T> {
    e.note(SubFn::San);
    let h = e.layer_norm(x, &p.ln_san_gain, &p.ln_san_bias)?;
    let q = e.matmul(&h, &p.wq)?;
    let k = e.matmul(&h, &p.wk)?;
    let v = e.matmul(&h, &p.wv)?;
    let a = e.rel_attention(&q, &k, &v, &p.rel_k, &p.rel_v, dims.attn(), layout)?;
    let out = e.matmul(&a, &p.wo)?;
    e.dropout(&out)
}

/// `W2 · GELU(W1 · norm(x) + b1) + b2`, position-wise; no residual.
pub fn ffn<E: Exec>(e: &mut E, x: &E::T, p: &LayerWeights<E::T>) -> Result<E::T> {
    e.note(SubFn::Ffn);
    let h = e.layer_norm(x, &p.ln_ffn_gain, &p.ln_ffn_bias)?;
    let u = e.matmul(&h, &p.w1)?;
    let u = e.add_row_bias(&u, &p.b1)?;
    let u = e.gelu(&u);
    let out = e.matmul(&u, &p.w2)?;
    let out = e.add_row_bias(&out, &p.b2)?;
    e.dropout(&out)
}

pub fn layer_regular<E: Exec>(
    e: &mut E,
    h: &Pair<E::T>,
    p: &LayerWeights<E::T>,
    dims: &LayerDims,
    layout: &Rc<Layout>,
) -> Result<Pair<E::T>> {
    let s = san(e, &h.h2, p, dims, layout)?;
    let h1 = e.add(&h.h1, &s)?;
    let f = ffn(e, &h1, p)?;
    let h2 = e.add(&h.h2, &f)?;
    Ok(Pair { h1, h2 })
}

pub fn layer_reverse<E: Exec>(
    e: &mut E,
    h: &Pair<E::T>,
    p: &LayerWeights<E::T>,
    dims: &LayerDims,
    layout: &Rc<Layout>,
) -> Result<Pair<E::T>> {
    let f = ffn(e, &h.h1, p)?;
    let h2 = e.sub(&h.h2, &f)?;
    let s = san(e, &h2, p, dims, layout)?;
    let h1 = e.sub(&h.h1, &s)?;
    Ok(Pair { h1, h2 })
}

/// Which of the two closed forms a layer is evaluated in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Form {
    Regular,
    Reverse,
}

impl Form {
    pub fn flipped(self) -> Self {
        match self {
            Form::Regular => Form::Reverse,
            Form::Reverse => Form::Regular,
        }
    }
}

pub fn apply_form<E: Exec>(
    e: &mut E,
    form: Form,
    h: &Pair<E::T>,
    p: &LayerWeights<E::T>,
    dims: &LayerDims,
    layout: &Rc<Layout>,
) -> Result<Pair<E::T>> {
    match form {
        Form::Regular => layer_regular(e, h, p, dims, layout),
        Form::Reverse => layer_reverse(e, h, p, dims, layout),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(d: usize, f: usize, heads: usize, clip: usize) -> LayerDims {
        LayerDims {
            d_model: d,
            d_ff: f,
            heads,
            rel_clip: clip,
        }
    }

    fn random_pair(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> HiddenPair {
        Pair {
            h1: Tensor::randn(&[rows, d], 1.0, rng),
            h2: Tensor::randn(&[rows, d], 1.0, rng),
        }
    }

    /// Parameters with non-trivial norms and biases so every path is exercised.
    fn random_params(dims: &LayerDims, rng: &mut ChaCha8Rng) -> LayerParams {
        let mut p = LayerParams::init(dims, rng);
        p.rel_k = Tensor::randn(p.rel_k.shape(), 0.5, rng);
        p.rel_v = Tensor::randn(p.rel_v.shape(), 0.5, rng);
        p.ln_san_gain = Tensor::randn(&[dims.d_model], 1.0, rng);
        p.ln_ffn_bias = Tensor::randn(&[dims.d_model], 0.3, rng);
        p.b1 = Tensor::randn(&[dims.d_ff], 0.3, rng);
        p.b2 = Tensor::randn(&[dims.d_model], 0.3, rng);
        p
    }

    #[test]
    fn singleton_attention_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dm = dims(6, 8, 2, 3);
        let p = random_params(&dm, &mut rng);
        let x = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let layout = Rc::new(Layout::single(1));
        let out = san(&mut Eager::new(), &x, &p, &dm, &layout).unwrap();
        let (n, _) = crate::ops::layer_norm(&x, &p.ln_san_gain, &p.ln_san_bias, crate::ops::EPS).unwrap();
        // The only key sits at offset 0 (row 3 of the clip-3 table), in every head.
        let mut z = n.matmul(&p.wv).unwrap();
        for (c, x) in z.data_mut().iter_mut().enumerate() {
            *x += p.rel_v.row(3)[c % 3];
        }
        let want = z.matmul(&p.wo).unwrap();
        assert!(out.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn zero_projections_give_zero_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dm = dims(8, 8, 2, 2);
        let mut p = random_params(&dm, &mut rng);
        for w in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            *w = Tensor::zeros(w.shape());
        }
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let out = san(&mut Eager::new(), &x, &p, &dm, &Rc::new(Layout::single(5))).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    /// T = 3, d = 2, one head, clip 1; every number below is worked by hand
    /// from the score formula `q_i·(k_j + a[clip(j−i)]) / sqrt(2)`.
    #[test]
    fn attention_hand_example() {
        let dm = dims(2, 2, 1, 1);
        let mut p = LayerParams::zeros(&dm);
        // Rows of the form [a, −a] normalise to ±[1, −1].
        p.ln_san_gain = Tensor::vector(vec![1.0, 1.0]);
        p.wq = Tensor::identity(2);
        p.wk = Tensor::identity(2);
        p.wv = Tensor::identity(2);
        p.wo = Tensor::identity(2);
        p.rel_k = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.0], vec![0.0, 0.5]]);
        let x = Tensor::from_rows(&[vec![2.0, -2.0], vec![-1.0, 1.0], vec![3.0, -3.0]]);
        let out = san(&mut Eager::new(), &x, &p, &dm, &Rc::new(Layout::single(3))).unwrap();

        // Normalised rows (eps makes them 1/sqrt(1 + eps/a^2) short of ±1).
        let r = |a: f64| 1.0 / (1.0 + 1e-6 / (a * a)).sqrt();
        let n = [[r(2.0), -r(2.0)], [-r(1.0), r(1.0)], [r(3.0), -r(3.0)]];
        let s2 = 2f64.sqrt();
        let mut want = [[0.0; 2]; 3];
        for i in 0..3 {
            let mut scores = [0.0; 3];
            for j in 0..3 {
                let a = match j as i32 - i as i32 {
                    o if o < 0 => [0.5, 0.0],
                    0 => [0.0, 0.0],
                    _ => [0.0, 0.5],
                };
                scores[j] =
                    (n[i][0] * (n[j][0] + a[0]) + n[i][1] * (n[j][1] + a[1])) / s2;
            }
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                let w = scores[j].exp() / z;
                want[i][0] += w * n[j][0];
                want[i][1] += w * n[j][1];
            }
        }
        for i in 0..3 {
            for c in 0..2 {
                assert!((out.get(i, c) - want[i][c]).abs() < 1e-9, "({i},{c})");
            }
        }
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let dm = dims(4, 6, 1, 1);
        let p = LayerParams::zeros(&dm);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[3, 4], 2.0, &mut rng);
        assert_eq!(ffn(&mut Eager::new(), &x, &p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn ffn_large_positive_is_near_norm() {
        let dm = dims(2, 2, 1, 1);
        let mut p = LayerParams::zeros(&dm);
        p.ln_ffn_gain = Tensor::vector(vec![10.0, 10.0]);
        p.ln_ffn_bias = Tensor::vector(vec![20.0, 20.0]);
        p.w1 = Tensor::identity(2);
        p.w2 = Tensor::identity(2);
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]);
        let out = ffn(&mut Eager::new(), &x, &p).unwrap();
        let (n, _) = crate::ops::layer_norm(&x, &p.ln_ffn_gain, &p.ln_ffn_bias, crate::ops::EPS).unwrap();
        assert!(out.max_abs_diff(&n).unwrap() < 1e-9);
    }

    /// d = 2, d_ff = 3 with hand-set weights, evaluated scalar by scalar.
    #[test]
    fn ffn_hand_example() {
        let dm = dims(2, 3, 1, 1);
        let mut p = LayerParams::zeros(&dm);
        p.ln_ffn_gain = Tensor::vector(vec![1.0, 2.0]);
        p.ln_ffn_bias = Tensor::vector(vec![0.5, -0.5]);
        p.w1 = Tensor::from_rows(&[vec![1.0, 0.0, -1.0], vec![0.5, 2.0, 1.0]]);
        p.b1 = Tensor::vector(vec![0.1, -0.2, 0.3]);
        p.w2 = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.0, 2.0], vec![3.0, 1.0]]);
        p.b2 = Tensor::vector(vec![-0.1, 0.4]);
        let x = Tensor::from_rows(&[vec![4.0, 1.0]]);
        let out = ffn(&mut Eager::new(), &x, &p).unwrap();

        // norm([4, 1]) = [1, −1]·(1 + eps/2.25)^(−1/2) before affine.
        let r = 1.0 / (1.0 + 1e-6 / 2.25f64).sqrt();
        let n = [r * 1.0 + 0.5, -r * 2.0 - 0.5];
        let gelu = |z: f64| {
            0.5 * z * (1.0 + (0.797_884_560_802_865_4 * (z + 0.044715 * z * z * z)).tanh())
        };
        let u = [
            gelu(n[0] * 1.0 + n[1] * 0.5 + 0.1),
            gelu(n[1] * 2.0 - 0.2),
            gelu(-n[0] + n[1] + 0.3),
        ];
        let want = [
            u[0] * 1.0 + u[2] * 3.0 - 0.1,
            -u[0] + 2.0 * u[1] + u[2] + 0.4,
        ];
        assert!((out.get(0, 0) - want[0]).abs() < 1e-9);
        assert!((out.get(0, 1) - want[1]).abs() < 1e-9);
    }

    #[test]
    fn zero_layer_is_identity_in_both_forms() {
        let dm = dims(4, 4, 2, 2);
        let p = LayerParams::zeros(&dm);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = random_pair(3, 4, &mut rng);
        let layout = Rc::new(Layout::single(3));
        for form in [Form::Regular, Form::Reverse] {
            let out = apply_form(&mut Eager::new(), form, &h, &p, &dm, &layout).unwrap();
            assert_eq!(out, h);
        }
    }

    #[test]
    fn forms_are_two_sided_inverses() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let dm = dims(8, 16, 2, 3);
        let p = random_params(&dm, &mut rng);
        let h = random_pair(4, 8, &mut rng);
        let layout = Rc::new(Layout::single(4));
        let e = &mut Eager::new();
        let fwd = layer_regular(e, &h, &p, &dm, &layout).unwrap();
        assert!(fwd.max_abs_diff(&h).unwrap() > 1e-3);
        let back = layer_reverse(e, &fwd, &p, &dm, &layout).unwrap();
        assert!(back.max_abs_diff(&h).unwrap() <= 1e-10);
        let rev = layer_reverse(e, &h, &p, &dm, &layout).unwrap();
        let again = layer_regular(e, &rev, &p, &dm, &layout).unwrap();
        assert!(again.max_abs_diff(&h).unwrap() <= 1e-10);
    }

    #[test]
    fn wrong_subtraction_order_does_not_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let dm = dims(8, 16, 2, 3);
        let p = random_params(&dm, &mut rng);
        let h = random_pair(5, 8, &mut rng);
        let layout = Rc::new(Layout::single(5));
        let e = &mut Eager::new();
        let fwd = layer_regular(e, &h, &p, &dm, &layout).unwrap();
        // SAN first, then FFN: the wrong order.
        let s = san(e, &fwd.h2, &p, &dm, &layout).unwrap();
        let h1 = fwd.h1.sub(&s).unwrap();
        let f = ffn(e, &h1, &p).unwrap();
        let h2 = fwd.h2.sub(&f).unwrap();
        let wrong = Pair { h1, h2 };
        assert!(wrong.max_abs_diff(&h).unwrap() > 1e-3);
    }

    #[test]
    fn padding_does_not_change_real_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dm = dims(8, 8, 2, 2);
        let p = random_params(&dm, &mut rng);
        let real = random_pair(4, 8, &mut rng);
        let e = &mut Eager::new();
        let base = layer_regular(e, &real, &p, &dm, &Rc::new(Layout::single(4))).unwrap();

        // Two pad rows in front, three behind, in a slot of nine.
        let pad = |t: &Tensor, rng: &mut ChaCha8Rng| {
            let front = Tensor::randn(&[2, 8], 5.0, rng);
            let back = Tensor::randn(&[3, 8], 5.0, rng);
            Tensor::vstack(&[&front, t, &back]).unwrap()
        };
        let padded = Pair {
            h1: pad(&real.h1, &mut rng),
            h2: pad(&real.h2, &mut rng),
        };
        let layout = Rc::new(Layout {
            rows: 9,
            spans: vec![(2, 4)],
        });
        let out = layer_regular(e, &padded, &p, &dm, &layout).unwrap();
        let got = Pair {
            h1: out.h1.slice_rows(2, 6),
            h2: out.h2.slice_rows(2, 6),
        };
        assert!(got.max_abs_diff(&base).unwrap() <= 1e-9);
    }

    #[test]
    fn trace_orders_subfunctions() {
        let dm = dims(4, 4, 1, 1);
        let p = LayerParams::zeros(&dm);
        let h = HiddenPair::empty(4);
        let layout = Rc::new(Layout::single(0));
        let mut e = Eager::tracing();
        layer_regular(&mut e, &h, &p, &dm, &layout).unwrap();
        layer_reverse(&mut e, &h, &p, &dm, &layout).unwrap();
        assert_eq!(e.trace(), Some("sffs"));
    }
}
