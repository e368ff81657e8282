//! Forward kernels and their vector-Jacobian products.
//!
//! These are plain functions over [`Tensor`]s. The tape in
//! [`crate::autodiff`] records them for reverse mode; inference paths call
//! them directly.

use crate::error::{RederError, Result};
use crate::tensor::Tensor;

/// Stabiliser for layer-norm variance and cosine denominators.
pub const EPS: f64 = 1e-6;

/// Log-space stand-in for −∞. Finite so that arithmetic never yields NaN.
pub const NEG_INF: f64 = -1e30;

pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a <= NEG_INF {
        return b;
    }
    if b <= NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through one `exp`; several times cheaper than libm's `tanh`
/// and within a few ulps of it.
fn tanh_exp(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh_exp(GELU_C * (x + 0.044715 * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh_exp(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// VJP of log-softmax given its output.
pub fn log_softmax_backward(out: &Tensor, grad: &Tensor) -> Tensor {
    let cols = out.cols();
    let mut dx = grad.clone();
    for (r, drow) in dx.data_mut().chunks_mut(cols).enumerate() {
        let orow = out.row(r);
        let gsum: f64 = drow.iter().sum();
        for (d, o) in drow.iter_mut().zip(orow) {
            *d -= o.exp() * gsum;
        }
    }
    dx
}

/// Saved statistics from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, NormCache)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(RederError::Shape {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    let (g, b) = (gain.data(), bias.data());
    for (hrow, orow) in xhat
        .data_mut()
        .chunks_mut(d)
        .zip(out.data_mut().chunks_mut(d))
    {
        let mean = hrow.iter().sum::<f64>() / d as f64;
        let var = hrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            hrow[j] = (hrow[j] - mean) * r;
            orow[j] = hrow[j] * g[j] + b[j];
        }
        rstd.push(r);
    }
    Ok((out, NormCache { xhat, rstd }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(cache: &NormCache, gain: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = grad.cols();
    let g = gain.data();
    let mut dx = Tensor::zeros(grad.shape());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    for r in 0..grad.rows() {
        let dy = grad.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            let dxh = dy[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
            dgain.data_mut()[j] += dy[j] * xh[j];
            dbias.data_mut()[j] += dy[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = rs * (dy[j] * g[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (dx, dgain, dbias)
}

/// `x + bias` with the bias broadcast over rows.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if bias.len() != d {
        return Err(RederError::Shape {
            op: "add_row_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn column_sums(x: &Tensor) -> Tensor {
    let d = x.cols();
    let mut out = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// `1 − cos(u, v)`; a product of norms below [`EPS`] is clamped to it, so
/// a zero vector yields distance 1.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let (dot, nu, nv) = dot_norms(u, v);
    1.0 - dot / (nu * nv).max(EPS)
}

/// Gradient of [`cosine_distance`] with respect to `u`, written into `out`
/// scaled by `w`.
pub fn cosine_distance_grad(u: &[f64], v: &[f64], w: f64, out: &mut [f64]) {
    let (dot, nu, nv) = dot_norms(u, v);
    let denom = nu * nv;
    if denom > EPS {
        let cos = dot / denom;
        for j in 0..u.len() {
            out[j] -= w * (v[j] / denom - cos * u[j] / (nu * nu));
        }
    } else {
        for j in 0..u.len() {
            out[j] -= w * v[j] / EPS;
        }
    }
}

fn dot_norms(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    (dot, uu.sqrt(), vv.sqrt())
}

/// Placement of variable-length sequences inside one block of rows.
///
/// Sequence `b` owns rows `spans[b].0 .. spans[b].0 + spans[b].1`; any row
/// outside every span is padding. Attention never reads a key outside its
/// own sequence, and losses skip pad rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub rows: usize,
    /// `(first row, length)` per sequence.
    pub spans: Vec<(usize, usize)>,
}

impl Layout {
    /// Sequences back to back with no pad rows.
    pub fn packed(lengths: &[usize]) -> Self {
        let mut start = 0;
        let spans = lengths
            .iter()
            .map(|&l| {
                let s = (start, l);
                start += l;
                s
            })
            .collect();
        Self { rows: start, spans }
    }

    /// Each sequence in a slot of the longest length, pads at the end.
    pub fn right_padded(lengths: &[usize]) -> Self {
        let slot = lengths.iter().copied().max().unwrap_or(0);
        Self {
            rows: slot * lengths.len(),
            spans: lengths.iter().enumerate().map(|(b, &l)| (b * slot, l)).collect(),
        }
    }

    pub fn single(len: usize) -> Self {
        Self::packed(&[len])
    }

    pub fn batch(&self) -> usize {
        self.spans.len()
    }

    pub fn total_rows(&self) -> usize {
        self.rows
    }

    pub fn max_len(&self) -> usize {
        self.spans.iter().map(|s| s.1).max().unwrap_or(0)
    }

    /// Absolute row indices of the real tokens of sequence `b`.
    pub fn rows_of(&self, b: usize) -> std::ops::Range<usize> {
        let (start, len) = self.spans[b];
        start..start + len
    }

    /// Row-major ids of `seqs` placed by this layout, `fill` on pad rows.
    pub fn scatter_ids(&self, seqs: &[Vec<usize>], fill: usize) -> Vec<usize> {
        let mut ids = vec![fill; self.rows];
        for (b, s) in seqs.iter().enumerate() {
            ids[self.rows_of(b)].copy_from_slice(s);
        }
        ids
    }

    pub fn real_rows(&self) -> usize {
        self.spans.iter().map(|s| s.1).sum()
    }

    /// Row weights: `1 / real_rows` on real tokens, 0 on pads.
    pub fn mean_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.total_rows()];
        let n = self.real_rows().max(1) as f64;
        for b in 0..self.batch() {
            for r in self.rows_of(b) {
                w[r] = 1.0 / n;
            }
        }
        w
    }
}

/// Shape parameters of relative multi-head attention.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub heads: usize,
    pub clip: usize,
}

/// Attention probabilities kept for the backward pass, per
/// `(sequence, head)` block of `max_len × max_len` in sequence-local
/// coordinates.
#[derive(Clone, Debug)]
pub struct AttnCache {
    pub probs: Vec<f64>,
}

/// Input gradients of [`rel_attention`].
#[derive(Clone, Debug)]
pub struct AttnGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    pub drel_k: Tensor,
    pub drel_v: Tensor,
}

fn clip_offset(i: usize, j: usize, clip: usize) -> usize {
    let off = j as isize - i as isize;
    (off.clamp(-(clip as isize), clip as isize) + clip as isize) as usize
}

/// Scaled dot-product attention with relative-position key and value
/// offsets.
///
/// `e_ij = q_i · (k_j + rel_k[clip(j − i)]) / sqrt(d_head)`, softmax over
/// the real keys of the query's own sequence, and
/// `z_i = Σ_j p_ij (v_j + rel_v[clip(j − i)])`. Both tables are
/// `[2·clip + 1, d_head]` and shared by all heads. Offsets are taken in the sequence's own index
/// order, so padding placement does not change them.
pub fn rel_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rel_k: &Tensor,
    rel_v: &Tensor,
    shape: AttnShape,
    layout: &Layout,
) -> Result<(Tensor, AttnCache)> {
    let d = q.cols();
    let heads = shape.heads;
    if heads == 0 || d % heads != 0 {
        return Err(RederError::Config(format!("d = {d} not divisible by heads = {heads}")));
    }
    let dh = d / heads;
    for rel in [rel_k, rel_v] {
        if rel.rows() != 2 * shape.clip + 1 || rel.cols() != dh {
            return Err(RederError::Shape {
                op: "rel_attention",
                left: vec![2 * shape.clip + 1, dh],
                right: rel.shape().to_vec(),
            });
        }
    }
    if q.rows() != layout.total_rows() || !q.same_shape(k) || !q.same_shape(v) {
        return Err(RederError::Shape {
            op: "rel_attention",
            left: q.shape().to_vec(),
            right: vec![layout.total_rows(), d],
        });
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let nrel = 2 * shape.clip + 1;
    let m = layout.max_len();
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![0.0; layout.batch() * heads * m * m];
    let mut scores = vec![0.0; m];
    let mut qa = vec![0.0; nrel];
    for (b, &(start, len)) in layout.spans.iter().enumerate() {
        for h in 0..heads {
            let c0 = h * dh;
            let pblock = (b * heads + h) * m * m;
            for i in 0..len {
                let qi = &q.row(start + i)[c0..c0 + dh];
                // Only offsets reachable from query i.
                let (lo, hi) = (clip_offset(i, 0, shape.clip), clip_offset(i, len - 1, shape.clip));
                for o in lo..=hi {
                    qa[o] = dot(qi, rel_k.row(o));
                }
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    let kj = &k.row(start + j)[c0..c0 + dh];
                    let s = (dot(qi, kj) + qa[clip_offset(i, j, shape.clip)]) * scale;
                    scores[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for s in scores[..len].iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let prow = &mut probs[pblock + i * m..pblock + i * m + len];
                let orow = &mut out.row_mut(start + i)[c0..c0 + dh];
                for j in 0..len {
                    let p = scores[j] / z;
                    prow[j] = p;
                    let vj = &v.row(start + j)[c0..c0 + dh];
                    let rv = rel_v.row(clip_offset(i, j, shape.clip));
                    for ((o, x), r) in orow.iter_mut().zip(vj).zip(rv) {
                        *o += p * (x + r);
                    }
                }
            }
        }
    }
    Ok((out, AttnCache { probs }))
}

/// VJP of [`rel_attention`]; returns `(dq, dk, dv, drel_k, drel_v)`.
#[allow(clippy::too_many_arguments)]
pub fn rel_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rel_k: &Tensor,
    rel_v: &Tensor,
    shape: AttnShape,
    layout: &Layout,
    cache: &AttnCache,
    grad: &Tensor,
) -> AttnGrads {
    let d = q.cols();
    let heads = shape.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nrel = 2 * shape.clip + 1;
    let m = layout.max_len();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut drel_k = Tensor::zeros(rel_k.shape());
    let mut drel_v = Tensor::zeros(rel_v.shape());
    let mut dp = vec![0.0; m];
    let mut dqa = vec![0.0; nrel];
    let mut dqi = vec![0.0; dh];
    for (b, &(start, len)) in layout.spans.iter().enumerate() {
        for h in 0..heads {
            let c0 = h * dh;
            let pblock = (b * heads + h) * m * m;
            for i in 0..len {
                let ri = start + i;
                let prow = &cache.probs[pblock + i * m..pblock + i * m + len];
                let go = &grad.row(ri)[c0..c0 + dh];
                let (lo, hi) = (clip_offset(i, 0, shape.clip), clip_offset(i, len - 1, shape.clip));
                let mut pdp = 0.0;
                for j in 0..len {
                    let rj = start + j;
                    let p = prow[j];
                    let o = clip_offset(i, j, shape.clip);
                    dp[j] = dot(go, &v.row(rj)[c0..c0 + dh]) + dot(go, rel_v.row(o));
                    pdp += p * dp[j];
                    let dvj = &mut dv.row_mut(rj)[c0..c0 + dh];
                    for (a, g) in dvj.iter_mut().zip(go) {
                        *a += p * g;
                    }
                    for (a, g) in drel_v.row_mut(o).iter_mut().zip(go) {
                        *a += p * g;
                    }
                }
                dqa[lo..=hi].iter_mut().for_each(|x| *x = 0.0);
                dqi.iter_mut().for_each(|x| *x = 0.0);
                let qi = &q.row(ri)[c0..c0 + dh];
                for j in 0..len {
                    let rj = start + j;
                    let ds = prow[j] * (dp[j] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    dqa[clip_offset(i, j, shape.clip)] += ds;
                    let kj = &k.row(rj)[c0..c0 + dh];
                    for (a, x) in dqi.iter_mut().zip(kj) {
                        *a += ds * x;
                    }
                    let dkj = &mut dk.row_mut(rj)[c0..c0 + dh];
                    for (a, x) in dkj.iter_mut().zip(qi) {
                        *a += ds * x;
                    }
                }
                for o in lo..=hi {
                    let w = dqa[o];
                    if w == 0.0 {
                        continue;
                    }
                    for (a, x) in dqi.iter_mut().zip(rel_k.row(o)) {
                        *a += w * x;
                    }
                    for (a, x) in drel_k.row_mut(o).iter_mut().zip(qi) {
                        *a += w * x;
                    }
                }
                let dqrow = &mut dq.row_mut(ri)[c0..c0 + dh];
                for (a, x) in dqrow.iter_mut().zip(&dqi) {
                    *a += x;
                }
            }
        }
    }
    AttnGrads {
        dq,
        dk,
        dv,
        drel_k,
        drel_v,
    }
}

#[inline]
/// Dot product with four partial sums, so the loop vectorises.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_tanh_matches_libm() {
        for i in -4000..=4000 {
            let u = i as f64 * 0.005;
            assert!((tanh_exp(u) - u.tanh()).abs() <= 4.0 * f64::EPSILON, "{u}");
        }
        assert_eq!(tanh_exp(800.0), 1.0);
        assert_eq!(tanh_exp(-800.0), -1.0);
    }

    #[test]
    fn log_softmax_uniform() {
        let out = log_softmax(&Tensor::vector(vec![0.0, 0.0]));
        for v in out.data() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_large_logits_do_not_overflow() {
        let out = log_softmax(&Tensor::vector(vec![1000.0, 0.0]));
        assert!(out.data()[0].abs() < 1e-12);
        assert!((out.data()[1] + 1000.0).abs() < 1e-9);
        assert!(out.all_finite());
    }

    #[test]
    fn log_softmax_matches_direct_formula() {
        let out = log_softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        for (i, v) in out.data().iter().enumerate() {
            let direct = ((i + 1) as f64).exp().ln() - z.ln();
            assert!((v - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::matrix(1, 4, vec![3.0; 4]);
        let (y, _) = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), EPS).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let x = Tensor::matrix(2, 3, vec![1.0, -4.0, 2.0, 0.5, 0.0, 9.0]);
        let bias = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let (y, _) = layer_norm(&x, &Tensor::zeros(&[3]), &bias, EPS).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), bias.data());
        }
    }

    #[test]
    fn layer_norm_hand_values() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        let (y, _) = layer_norm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1e-6).unwrap();
        let want = [-1.2247, 0.0, 1.2247];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn cosine_distance_reference_points() {
        let u = [1.0, 2.0, -0.5];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!(cosine_distance(&u, &u).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&u, &neg) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
    }

    #[test]
    fn logaddexp_sentinel() {
        assert_eq!(logaddexp(NEG_INF, 0.5), 0.5);
        assert!((logaddexp(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
