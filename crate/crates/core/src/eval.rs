//! Decoding, metrics, round-trip reconstruction, and reranking.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::ctc::{self, Hypothesis};
use crate::data::{symbol_name, Task, TokenPair};
use crate::error::{RederError, Result};
use crate::model::{Direction, DuplexModel};
use crate::training::loss::{eager_log_probs, oriented, SeqBatch};
use crate::vocab::{Vocab, BLANK};

/// Corpus BLEU-4 on a 0–100 scale: clipped n-gram precisions pooled over
/// the corpus, uniform weights, brevity penalty. Precisions for `n ≥ 2`
/// use add-one smoothing `(m + 1) / (c + 1)`; unigram precision is not
/// smoothed, so a corpus without any matching token scores 0.
pub fn bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(RederError::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(RederError::Contract("BLEU of an empty corpus".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            let hc = ngram_counts(h, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    Ok(100.0 * (bp + log_p / 4.0).exp())
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn exact_match<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    hits as f64 / hyps.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
    /// Beam candidates reranked by an external score.
    Reranked { width: usize, score: RerankScore },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RerankScore {
    /// [`ReverseLikelihood`] alone.
    ReverseLikelihood,
    /// Beam score plus reverse likelihood, see [`JointLikelihood`].
    Joint,
}

/// Sequences per batched forward pass when decoding.
const DECODE_CHUNK: usize = 64;

/// Per-sequence output log-probs (frames × vocab) for raw inputs.
pub fn batch_log_probs(
    model: &DuplexModel,
    inputs: &[Vec<usize>],
    direction: Direction,
) -> Result<Vec<crate::tensor::Tensor>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(DECODE_CHUNK) {
        let raw: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = SeqBatch::new(&raw, &vec![&[][..]; raw.len()], model.config.upsample_factor);
        let lp = eager_log_probs(model, &batch, direction)?;
        for b in 0..batch.len() {
            let r = batch.layout.rows_of(b);
            out.push(lp.slice_rows(r.start, r.end));
        }
    }
    Ok(out)
}

/// Decodes every input; beam mode returns each input's top hypothesis.
pub fn decode_batch(
    model: &DuplexModel,
    inputs: &[Vec<usize>],
    direction: Direction,
    mode: DecodeMode,
) -> Result<Vec<Vec<usize>>> {
    let reverse = ReverseLikelihood { model, direction };
    let joint = JointLikelihood(ReverseLikelihood { model, direction });
    batch_log_probs(model, inputs, direction)?
        .iter()
        .zip(inputs)
        .map(|(lp, x)| match mode {
            DecodeMode::Greedy => Ok(ctc::greedy_decode(lp, BLANK)),
            DecodeMode::Beam { width } => {
                Ok(ctc::prefix_beam_search(lp, width, BLANK)?.into_iter().next().map(|h| h.tokens).unwrap_or_default())
            }
            DecodeMode::Reranked { width, score } => {
                let scorer: &dyn Scorer = match score {
                    RerankScore::ReverseLikelihood => &reverse,
                    RerankScore::Joint => &joint,
                };
                Ok(rerank(&ctc::prefix_beam_search(lp, width, BLANK)?, x, scorer)?.tokens)
            }
        })
        .collect()
}

/// Scores a candidate translation of `source`.
pub trait Scorer {
    fn score(&self, source: &[usize], candidate: &Hypothesis) -> Result<f64>;
}

/// The beam's own collapsed-sequence log probability.
pub struct BeamScore;

impl Scorer for BeamScore {
    fn score(&self, _source: &[usize], candidate: &Hypothesis) -> Result<f64> {
        Ok(candidate.log_prob)
    }
}

/// `log p_ctc(source | candidate)` under the opposite mapping of the same
/// model.
pub struct ReverseLikelihood<'a> {
    pub model: &'a DuplexModel,
    /// Direction the candidates were decoded in.
    pub direction: Direction,
}

impl Scorer for ReverseLikelihood<'_> {
    fn score(&self, source: &[usize], candidate: &Hypothesis) -> Result<f64> {
        let lp = self.model.log_probs(&candidate.tokens, self.direction.opposite())?;
        ctc::ctc_log_likelihood(&lp, source, BLANK)
    }
}

/// `log p(candidate | source) + log p(source | candidate)`. The reverse
/// term alone favours long candidates, whose extra frames give the source
/// more alignments; the beam score counters that.
pub struct JointLikelihood<'a>(pub ReverseLikelihood<'a>);

impl Scorer for JointLikelihood<'_> {
    fn score(&self, source: &[usize], candidate: &Hypothesis) -> Result<f64> {
        Ok(candidate.log_prob + self.0.score(source, candidate)?)
    }
}

/// Highest-scoring candidate; ties keep the earlier one.
pub fn rerank<S: Scorer + ?Sized>(candidates: &[Hypothesis], source: &[usize], scorer: &S) -> Result<Hypothesis> {
    let mut best: Option<(f64, &Hypothesis)> = None;
    for c in candidates {
        let s = scorer.score(source, c)?;
        if best.map_or(true, |(b, _)| s > b) {
            best = Some((s, c));
        }
    }
    best.map(|(_, h)| h.clone())
        .ok_or_else(|| RederError::Contract("rerank needs at least one candidate".into()))
}

/// Anything that maps token sequences in either direction.
pub trait Translator {
    fn translate(&self, inputs: &[Vec<usize>], direction: Direction) -> Result<Vec<Vec<usize>>>;
}

pub struct ModelTranslator<'a> {
    pub model: &'a DuplexModel,
    pub mode: DecodeMode,
}

impl Translator for ModelTranslator<'_> {
    fn translate(&self, inputs: &[Vec<usize>], direction: Direction) -> Result<Vec<Vec<usize>>> {
        decode_batch(self.model, inputs, direction, self.mode)
    }
}

/// A task's ground-truth bijection expressed over vocabulary ids.
pub struct OracleTranslator<'a> {
    pub task: &'a Task,
    pub vocab: &'a Vocab,
}

impl OracleTranslator<'_> {
    fn to_task(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                self.vocab
                    .symbol(id)
                    .and_then(|s| s.strip_prefix('t'))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| RederError::Vocabulary {
                        id,
                        vocab_size: self.vocab.len(),
                    })
            })
            .collect()
    }

    fn to_vocab(&self, syms: &[usize]) -> Result<Vec<usize>> {
        syms.iter()
            .map(|&s| {
                self.vocab
                    .id(&symbol_name(s))
                    .ok_or_else(|| RederError::Corpus(format!("symbol {} missing from vocabulary", symbol_name(s))))
            })
            .collect()
    }
}

impl Translator for OracleTranslator<'_> {
    fn translate(&self, inputs: &[Vec<usize>], direction: Direction) -> Result<Vec<Vec<usize>>> {
        inputs
            .iter()
            .map(|x| {
                let s = self.to_task(x)?;
                let out = match direction {
                    Direction::Forward => self.task.map(&s),
                    Direction::Reverse => self.task.invert(&s),
                };
                self.to_vocab(&out)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub exact_match: f64,
    /// Over sentences whose first decode was non-empty.
    pub bleu: f64,
    pub empty_decodes: usize,
    pub sentences: usize,
}

/// Decodes `sources` in `direction`, decodes the result back, and compares
/// the reconstruction with the source.
pub fn round_trip_eval<T: Translator + ?Sized>(t: &T, sources: &[Vec<usize>], direction: Direction) -> Result<RoundTrip> {
    let there = t.translate(sources, direction)?;
    let back = t.translate(&there, direction.opposite())?;
    let empty_decodes = there.iter().filter(|y| y.is_empty()).count();
    let (hyp, refs): (Vec<Vec<usize>>, Vec<Vec<usize>>) = there
        .iter()
        .zip(back.iter().zip(sources))
        .filter(|(y, _)| !y.is_empty())
        .map(|(_, (b, s))| (b.clone(), s.clone()))
        .unzip();
    Ok(RoundTrip {
        exact_match: exact_match(&back, sources),
        bleu: if hyp.is_empty() { 0.0 } else { bleu(&hyp, &refs)? },
        empty_decodes,
        sentences: sources.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: String,
    pub decode: DecodeMode,
    pub sentences: usize,
    pub exact_match: f64,
    pub bleu: f64,
    pub reconstruction_em: f64,
    pub reconstruction_bleu: f64,
    pub empty_decodes: usize,
    /// Mean hypothesis length over mean reference length.
    pub length_ratio: f64,
}

/// Translation quality and round-trip reconstruction on `pairs`.
pub fn evaluate(model: &DuplexModel, pairs: &[TokenPair], direction: Direction, mode: DecodeMode) -> Result<EvalReport> {
    let (inputs, refs): (Vec<Vec<usize>>, Vec<Vec<usize>>) = pairs
        .iter()
        .map(|p| {
            let (a, b) = oriented(p, direction);
            (a.to_vec(), b.to_vec())
        })
        .unzip();
    let t = ModelTranslator { model, mode };
    let hyps = t.translate(&inputs, direction)?;
    let back = t.translate(&hyps, direction.opposite())?;
    let empty_decodes = hyps.iter().filter(|h| h.is_empty()).count();
    let nonempty: Vec<usize> = (0..hyps.len()).filter(|&i| !hyps[i].is_empty()).collect();
    let rec_bleu = if nonempty.is_empty() {
        0.0
    } else {
        let h: Vec<_> = nonempty.iter().map(|&i| back[i].clone()).collect();
        let r: Vec<_> = nonempty.iter().map(|&i| inputs[i].clone()).collect();
        bleu(&h, &r)?
    };
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    Ok(EvalReport {
        direction: direction.name().into(),
        decode: mode,
        sentences: pairs.len(),
        exact_match: exact_match(&hyps, &refs),
        bleu: if pairs.is_empty() { 0.0 } else { bleu(&hyps, &refs)? },
        reconstruction_em: exact_match(&back, &inputs),
        reconstruction_bleu: rec_bleu,
        empty_decodes,
        length_ratio: if ref_len == 0 { 0.0 } else { hyp_len as f64 / ref_len as f64 },
    })
}
