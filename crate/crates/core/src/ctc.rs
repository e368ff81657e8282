//! Connectionist Temporal Classification.
//!
//! An alignment is a frame-level label string over the vocabulary plus a
//! blank. [`collapse`] maps an alignment to its output by merging runs of
//! equal labels and then dropping blanks. The likelihood of an output is
//! the total probability of every alignment that collapses to it, computed
//! by a forward recursion over the expanded target
//! `z = [␣, y1, ␣, y2, …, ␣]`.
//!
//! All scores are natural-log probabilities. Unreachable lattice cells hold
//! [`NEG_INF`], a finite sentinel, so arithmetic never produces NaN.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{RederError, Result};
use crate::ops::{logaddexp, NEG_INF};
use crate::tensor::Tensor;

/// Largest alignment space [`brute_force_ctc`] will enumerate.
pub const ENUMERATION_CAP: u128 = 1 << 24;

/// Repeats every token `factor` times in place.
pub fn upsample(x: &[usize], factor: usize) -> Vec<usize> {
    x.iter()
        .flat_map(|&t| std::iter::repeat(t).take(factor))
        .collect()
}

/// Merges runs of identical labels, then removes blanks.
pub fn collapse(alignment: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if Some(a) != prev && a != blank {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}

/// Fewest frames any alignment of `y` needs: one per label plus a blank
/// between each pair of equal neighbours.
pub fn min_frames<T: PartialEq>(y: &[T]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible<T: PartialEq>(frames: usize, y: &[T]) -> bool {
    frames >= min_frames(y)
}

/// Expanded target with blanks around and between labels.
pub fn expand(y: &[usize], blank: usize) -> Vec<usize> {
    let mut z = Vec::with_capacity(2 * y.len() + 1);
    z.push(blank);
    for &l in y {
        z.push(l);
        z.push(blank);
    }
    z
}

/// Whether state `s` of the expanded target may be entered from `s − 2`.
fn can_skip(z: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && z[s] != blank && z[s] != z[s - 2]
}

/// CTC forward table for one sequence.
#[derive(Clone, Debug)]
pub struct AlignmentLattice {
    pub expanded: Vec<usize>,
    /// `alpha[t * S + s]`: log mass of alignment prefixes of length `t + 1`
    /// ending in state `s`.
    pub alpha: Vec<f64>,
    pub frames: usize,
}

impl AlignmentLattice {
    pub fn states(&self) -> usize {
        self.expanded.len()
    }

    pub fn alpha(&self, t: usize, s: usize) -> f64 {
        self.alpha[t * self.states() + s]
    }

    /// `log p(y)`: sum of the two terminal cells.
    pub fn log_likelihood(&self) -> f64 {
        let s = self.states();
        if self.frames == 0 {
            return if s == 1 { 0.0 } else { NEG_INF };
        }
        let last = self.alpha(self.frames - 1, s - 1);
        if s == 1 {
            return last;
        }
        logaddexp(last, self.alpha(self.frames - 1, s - 2))
    }
}

/// Forward recursion over the rows of `log_probs` (`[T, vocab]`).
pub fn forward_lattice(log_probs: &Tensor, y: &[usize], blank: usize) -> AlignmentLattice {
    let frames = log_probs.rows();
    let z = expand(y, blank);
    let ns = z.len();
    let mut alpha = vec![NEG_INF; frames * ns];
    if frames > 0 {
        let row = log_probs.row(0);
        alpha[0] = row[z[0]];
        if ns > 1 {
            alpha[1] = row[z[1]];
        }
        for t in 1..frames {
            let row = log_probs.row(t);
            let (prev, cur) = alpha.split_at_mut(t * ns);
            let prev = &prev[(t - 1) * ns..];
            for s in 0..ns {
                let mut a = prev[s];
                if s >= 1 {
                    a = logaddexp(a, prev[s - 1]);
                }
                if can_skip(&z, s, blank) {
                    a = logaddexp(a, prev[s - 2]);
                }
                cur[s] = if a <= NEG_INF { NEG_INF } else { a + row[z[s]] };
            }
        }
    }
    AlignmentLattice {
        expanded: z,
        alpha,
        frames,
    }
}

fn check_normalised(log_probs: &Tensor) -> Result<()> {
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        if !lse.is_finite() || lse.abs() > 1e-6 {
            return Err(RederError::Contract(format!(
                "row {t} of log_probs is not a log-distribution (logsumexp = {lse})"
            )));
        }
    }
    Ok(())
}

/// `log Σ_{a collapses to y} p(a)`. Returns [`NEG_INF`] when no alignment
/// of `y` fits in the available frames (see [`is_feasible`]).
pub fn ctc_log_likelihood(log_probs: &Tensor, y: &[usize], blank: usize) -> Result<f64> {
    check_normalised(log_probs)?;
    check_labels(log_probs, y, blank)?;
    if !is_feasible(log_probs.rows(), y) {
        return Ok(NEG_INF);
    }
    Ok(forward_lattice(log_probs, y, blank).log_likelihood())
}

fn check_labels(log_probs: &Tensor, y: &[usize], blank: usize) -> Result<()> {
    let v = log_probs.cols();
    for &l in y.iter().chain(std::iter::once(&blank)) {
        if l >= v {
            return Err(RederError::Vocabulary { id: l, vocab_size: v });
        }
    }
    if y.contains(&blank) {
        return Err(RederError::Contract("blank inside a target sequence".into()));
    }
    Ok(())
}

/// Log-likelihood and its gradient with respect to every entry of
/// `log_probs`, from the forward and backward recursions.
///
/// The gradient entry `(t, v)` is the posterior probability that frame `t`
/// emits `v`. Rows need not be normalised; the recursion treats
/// `log_probs` as free per-frame scores.
pub fn ctc_forward_backward(log_probs: &Tensor, y: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    check_labels(log_probs, y, blank)?;
    let frames = log_probs.rows();
    if !is_feasible(frames, y) {
        return Err(RederError::Infeasible {
            frames,
            target: y.len(),
        });
    }
    let lat = forward_lattice(log_probs, y, blank);
    let ll = lat.log_likelihood();
    let z = &lat.expanded;
    let ns = z.len();
    let mut beta = vec![NEG_INF; frames * ns];
    let mut grad = Tensor::zeros(log_probs.shape());
    if frames == 0 {
        return Ok((ll, grad));
    }
    // beta[t][s]: log mass of suffixes from frame t (inclusive) given state s at t.
    let last = log_probs.row(frames - 1);
    beta[(frames - 1) * ns + ns - 1] = last[z[ns - 1]];
    if ns > 1 {
        beta[(frames - 1) * ns + ns - 2] = last[z[ns - 2]];
    }
    for t in (0..frames - 1).rev() {
        let row = log_probs.row(t);
        for s in 0..ns {
            let nxt = &beta[(t + 1) * ns..(t + 2) * ns];
            let mut b = nxt[s];
            if s + 1 < ns {
                b = logaddexp(b, nxt[s + 1]);
            }
            if s + 2 < ns && can_skip(z, s + 2, blank) {
                b = logaddexp(b, nxt[s + 2]);
            }
            beta[t * ns + s] = if b <= NEG_INF { NEG_INF } else { b + row[z[s]] };
        }
    }
    for t in 0..frames {
        let row = log_probs.row(t);
        let g = grad.row_mut(t);
        for s in 0..ns {
            let a = lat.alpha[t * ns + s];
            let b = beta[t * ns + s];
            if a <= NEG_INF || b <= NEG_INF {
                continue;
            }
            // alpha and beta both include the emission at t.
            g[z[s]] += (a + b - row[z[s]] - ll).exp();
        }
    }
    Ok((ll, grad))
}

/// Reference likelihood by summing `p(a)` over every length-`T` string.
pub fn brute_force_ctc(log_probs: &Tensor, y: &[usize], blank: usize) -> Result<f64> {
    let frames = log_probs.rows();
    let v = log_probs.cols();
    let space = (v as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if space > ENUMERATION_CAP {
        return Err(RederError::EnumerationCap(space));
    }
    let mut total = NEG_INF;
    for_each_alignment(frames, v, |a| {
        if collapse(a, blank) == y {
            let lp: f64 = a.iter().enumerate().map(|(t, &l)| log_probs.get(t, l)).sum();
            total = logaddexp(total, lp);
        }
    });
    Ok(total)
}

/// Visits every string in `vocab^frames`, odometer order.
pub fn for_each_alignment(frames: usize, vocab: usize, mut visit: impl FnMut(&[usize])) {
    let mut a = vec![0usize; frames];
    loop {
        visit(&a);
        let mut i = frames;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            a[i] += 1;
            if a[i] < vocab {
                break;
            }
            a[i] = 0;
        }
    }
}

/// Most probable alignment among those collapsing to `y`, with its log
/// probability. Max-product recursion on the same lattice as the forward
/// pass, then backtrace.
pub fn viterbi_alignment(log_probs: &Tensor, y: &[usize], blank: usize) -> Result<(Vec<usize>, f64)> {
    check_labels(log_probs, y, blank)?;
    let frames = log_probs.rows();
    if !is_feasible(frames, y) {
        return Err(RederError::Infeasible {
            frames,
            target: y.len(),
        });
    }
    if frames == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let z = expand(y, blank);
    let ns = z.len();
    let mut score = vec![NEG_INF; frames * ns];
    let mut back = vec![0usize; frames * ns];
    let row = log_probs.row(0);
    score[0] = row[z[0]];
    if ns > 1 {
        score[1] = row[z[1]];
    }
    for t in 1..frames {
        let row = log_probs.row(t);
        for s in 0..ns {
            let p = (t - 1) * ns;
            let mut best = (score[p + s], s);
            if s >= 1 && score[p + s - 1] > best.0 {
                best = (score[p + s - 1], s - 1);
            }
            if can_skip(&z, s, blank) && score[p + s - 2] > best.0 {
                best = (score[p + s - 2], s - 2);
            }
            if best.0 > NEG_INF {
                score[t * ns + s] = best.0 + row[z[s]];
                back[t * ns + s] = best.1;
            }
        }
    }
    let tail = (frames - 1) * ns;
    let mut s = ns - 1;
    if ns > 1 && score[tail + ns - 2] > score[tail + ns - 1] {
        s = ns - 2;
    }
    let best = score[tail + s];
    let mut path = vec![0; frames];
    for t in (0..frames).rev() {
        path[t] = z[s];
        s = back[t * ns + s];
    }
    Ok((path, best))
}

/// Per-frame argmax then collapse. Ties go to the lowest label id.
pub fn greedy_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    collapse(&greedy_path(log_probs).0, blank)
}

/// The per-frame argmax alignment and its log probability.
pub fn greedy_path(log_probs: &Tensor) -> (Vec<usize>, f64) {
    let mut path = Vec::with_capacity(log_probs.rows());
    let mut score = 0.0;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (v, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = v;
            }
        }
        path.push(best);
        score += row[best];
    }
    (path, score)
}

/// A collapsed hypothesis and its summed log probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Clone, Copy)]
struct PrefixMass {
    blank: f64,
    label: f64,
}

impl PrefixMass {
    const EMPTY: Self = PrefixMass {
        blank: NEG_INF,
        label: NEG_INF,
    };

    fn total(&self) -> f64 {
        logaddexp(self.blank, self.label)
    }
}

fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// CTC prefix beam search.
///
/// Each prefix carries two masses: alignments ending in blank and
/// alignments ending in its last label. A repeated label extends the
/// prefix only from the blank-ending mass, so paths that collapse to the
/// same output merge. Returns at most `beam` hypotheses, best first, ties
/// broken by token order.
pub fn prefix_beam_search(log_probs: &Tensor, beam: usize, blank: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(RederError::Config("beam width must be at least 1".into()));
    }
    let vocab = log_probs.cols();
    if blank >= vocab {
        return Err(RederError::Vocabulary {
            id: blank,
            vocab_size: vocab,
        });
    }
    let mut beams: Vec<(Vec<usize>, PrefixMass)> = vec![(
        Vec::new(),
        PrefixMass {
            blank: 0.0,
            label: NEG_INF,
        },
    )];
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: HashMap<Vec<usize>, PrefixMass> = HashMap::new();
        for (prefix, mass) in &beams {
            let last = prefix.last().copied();
            let total = mass.total();
            for (v, &lp) in row.iter().enumerate() {
                if v == blank {
                    let e = next.entry(prefix.clone()).or_insert(PrefixMass::EMPTY);
                    e.blank = logaddexp(e.blank, total + lp);
                } else if Some(v) == last {
                    // Stay on the same label: no new token.
                    let e = next.entry(prefix.clone()).or_insert(PrefixMass::EMPTY);
                    e.label = logaddexp(e.label, mass.label + lp);
                    // A blank in between starts a new copy of the label.
                    let mut ext = prefix.clone();
                    ext.push(v);
                    let e = next.entry(ext).or_insert(PrefixMass::EMPTY);
                    e.label = logaddexp(e.label, mass.blank + lp);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(v);
                    let e = next.entry(ext).or_insert(PrefixMass::EMPTY);
                    e.label = logaddexp(e.label, total + lp);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, f64, PrefixMass)> =
            next.into_iter().map(|(p, m)| (p, m.total(), m)).collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam);
        beams = ranked.into_iter().map(|(p, _, m)| (p, m)).collect();
    }
    let mut out: Vec<(Vec<usize>, f64)> = beams.into_iter().map(|(p, m)| (p, m.total())).collect();
    out.sort_by(rank);
    Ok(out
        .into_iter()
        .map(|(tokens, log_prob)| Hypothesis { tokens, log_prob })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: usize = 0;
    const B: usize = 1;
    const BLANK: usize = 2;

    fn rows(p: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&p.iter().map(|r| r.iter().map(|x| x.ln()).collect()).collect::<Vec<_>>())
    }

    #[test]
    fn upsample_cases() {
        assert_eq!(upsample(&[5, 7], 2), vec![5, 5, 7, 7]);
        assert_eq!(upsample(&[5, 7, 9], 1), vec![5, 7, 9]);
        assert!(upsample(&[], 2).is_empty());
    }

    #[test]
    fn collapse_cases() {
        assert_eq!(collapse(&[A, A, BLANK, B, B], BLANK), vec![A, B]);
        assert!(collapse(&[BLANK, BLANK, BLANK], BLANK).is_empty());
        assert_eq!(collapse(&[A, BLANK, A], BLANK), vec![A, A]);
    }

    #[test]
    fn uniform_three_frames_has_five_alignments() {
        let third = 1.0 / 3.0;
        let lp = rows(&[&[third; 3], &[third; 3], &[third; 3]]);
        let mut found = Vec::new();
        for_each_alignment(3, 3, |a| {
            if collapse(a, BLANK) == [A, B] {
                found.push(a.to_vec());
            }
        });
        assert_eq!(found.len(), 5);
        let want = (5.0f64 / 27.0).ln();
        assert!((ctc_log_likelihood(&lp, &[A, B], BLANK).unwrap() - want).abs() < 1e-12);
        assert!((brute_force_ctc(&lp, &[A, B], BLANK).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn too_long_target_is_infeasible() {
        let lp = rows(&[&[0.2, 0.3, 0.5]]);
        assert_eq!(ctc_log_likelihood(&lp, &[A, B], BLANK).unwrap(), NEG_INF);
        assert!(!is_feasible(3, &[A, A, A]));
        assert!(ctc_forward_backward(&lp, &[A, B], BLANK).is_err());
    }

    #[test]
    fn single_certain_frame() {
        let lp = Tensor::from_rows(&[vec![0.0, NEG_INF, NEG_INF]]);
        assert_eq!(ctc_log_likelihood(&lp, &[A], BLANK).unwrap(), 0.0);
    }

    #[test]
    fn empty_target_with_all_blank_mass() {
        let lp = Tensor::from_rows(&[vec![NEG_INF, NEG_INF, 0.0], vec![NEG_INF, NEG_INF, 0.0]]);
        assert_eq!(brute_force_ctc(&lp, &[], BLANK).unwrap(), 0.0);
        assert_eq!(ctc_log_likelihood(&lp, &[], BLANK).unwrap(), 0.0);
    }

    #[test]
    fn unnormalised_rows_are_rejected() {
        let lp = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]);
        assert!(matches!(
            ctc_log_likelihood(&lp, &[A], BLANK),
            Err(RederError::Contract(_))
        ));
    }

    #[test]
    fn viterbi_two_frames() {
        let lp = rows(&[&[0.9, 0.0, 0.1], &[0.9, 0.0, 0.1]]);
        let (path, score) = viterbi_alignment(&lp, &[A], BLANK).unwrap();
        assert_eq!(path, vec![A, A]);
        assert!((score - 0.81f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_cases() {
        let lp = rows(&[&[0.6, 0.1, 0.3], &[0.6, 0.1, 0.3], &[0.1, 0.1, 0.8], &[0.1, 0.7, 0.2]]);
        assert_eq!(greedy_decode(&lp, BLANK), vec![A, B]);
        let all_blank = rows(&[&[0.1, 0.1, 0.8], &[0.2, 0.1, 0.7]]);
        assert!(greedy_decode(&all_blank, BLANK).is_empty());
        let tie = Tensor::from_rows(&[vec![-5.0, -5.0, -1.0, -5.0, -5.0, -1.0]]);
        assert_eq!(greedy_decode(&tie, 0), vec![2]);
    }

    #[test]
    fn beam_beats_greedy_on_split_mass() {
        let lp = rows(&[&[0.3, 0.2, 0.5], &[0.3, 0.2, 0.5]]);
        assert!(greedy_decode(&lp, BLANK).is_empty());
        let (_, greedy_score) = greedy_path(&lp);
        assert!((greedy_score - 0.25f64.ln()).abs() < 1e-12);
        let hyps = prefix_beam_search(&lp, 2, BLANK).unwrap();
        assert_eq!(hyps[0].tokens, vec![A]);
        assert!((hyps[0].log_prob - 0.39f64.ln()).abs() < 1e-12);
        assert!(hyps.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    }

    #[test]
    fn zero_beam_is_rejected() {
        let lp = rows(&[&[0.3, 0.2, 0.5]]);
        assert!(prefix_beam_search(&lp, 0, BLANK).is_err());
    }
}
