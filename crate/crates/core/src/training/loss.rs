//! Objective terms: per-direction CTC, layer-wise forward-backward
//! agreement, and cycle consistency, each expressed as a [`Pass`] over one
//! padded batch.

use std::ops::Range;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::ctc;
use crate::data::TokenPair;
use crate::error::{RederError, Result};
use crate::exec::{Eager, Recorder};
use crate::layer::HiddenPair;
use crate::model::{
    embed_duplicate, output_log_probs, run_steps, schedule, Direction, DuplexModel, ModelConfig, ModelParams,
    ModelWeights,
};
use crate::ops::Layout;
use crate::tensor::Tensor;
use crate::vocab::{BLANK, PAD};

/// Packed, upsampled inputs with their CTC targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub layout: Layout,
    /// Row-major token ids.
    pub ids: Vec<usize>,
}

impl SeqBatch {
    /// Upsamples every raw input by `factor`.
    pub fn new(raw_inputs: &[&[usize]], targets: &[&[usize]], factor: usize) -> Self {
        let inputs: Vec<Vec<usize>> = raw_inputs.iter().map(|x| ctc::upsample(x, factor)).collect();
        Self::from_frames(inputs, targets.iter().map(|t| t.to_vec()).collect())
    }

    /// Inputs already at frame rate (e.g. alignments).
    pub fn from_frames(inputs: Vec<Vec<usize>>, targets: Vec<Vec<usize>>) -> Self {
        let lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let layout = Layout::packed(&lens);
        let ids = layout.scatter_ids(&inputs, PAD);
        Self {
            inputs,
            targets,
            layout,
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Layer-agreement term: the Viterbi alignment of the true output, re-fed
/// through the opposite mapping, gives constant per-layer targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Agreement {
    /// Padded alignment ids in the pass layout.
    pub alignment: Vec<usize>,
    /// Per-row weight of each cosine term (both halves, every layer).
    pub weights: Vec<f64>,
}

/// One mapping evaluated on one batch, contributing
/// `Σ_b ctc_weights[b]·(−log p_ctc) + smoothing KL + agreement` to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Pass {
    pub direction: Direction,
    pub batch: SeqBatch,
    pub ctc_weights: Vec<f64>,
    /// Per-row weight of `KL(uniform ‖ p)`; zero disables.
    pub smoothing: f64,
    pub agreement: Option<Agreement>,
}

/// Weighted contributions of a pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PassValue {
    pub ctc: f64,
    pub smoothing: f64,
    pub agreement: f64,
}

impl PassValue {
    pub fn total(&self) -> f64 {
        self.ctc + self.smoothing + self.agreement
    }
}

/// CTC (and smoothing) value and gradient w.r.t. the output log-probs.
pub fn output_terms(lp: &Tensor, pass: &Pass) -> Result<(PassValue, Tensor)> {
    let mut grad = Tensor::zeros(lp.shape());
    let mut value = PassValue::default();
    let v = lp.cols() as f64;
    for b in 0..pass.batch.len() {
        let rows = pass.batch.layout.rows_of(b);
        let w = pass.ctc_weights[b];
        if w != 0.0 {
            let lp_b = lp.slice_rows(rows.start, rows.end);
            let (ll, occ) = ctc::ctc_forward_backward(&lp_b, &pass.batch.targets[b], BLANK).map_err(|e| match e {
                RederError::Infeasible { frames, target } => RederError::Contract(format!(
                    "pair with {frames} frames and target length {target} reached the loss; length filter failed"
                )),
                other => other,
            })?;
            value.ctc -= w * ll;
            for (t, r) in rows.clone().enumerate() {
                for (g, o) in grad.row_mut(r).iter_mut().zip(occ.row(t)) {
                    *g -= w * o;
                }
            }
        }
        if pass.smoothing > 0.0 {
            let s = pass.smoothing;
            for r in rows {
                let row_sum: f64 = lp.row(r).iter().sum();
                value.smoothing += s * (-v.ln() - row_sum / v);
                grad.row_mut(r).iter_mut().for_each(|g| *g -= s / v);
            }
        }
    }
    Ok((value, grad))
}

/// Backward-direction states `H←_1 … H←_L` for agreement targets, computed
/// without gradient from `params`: `H←_L` is the embedded alignment and
/// each lower state inverts the corresponding forward step.
pub fn agreement_targets(
    params: &ModelParams,
    config: &ModelConfig,
    direction: Direction,
    alignment: &[usize],
    layout: &Layout,
) -> Result<Vec<HiddenPair>> {
    let mut e = Eager::new();
    let top = embed_duplicate(&mut e, &params.embedding, alignment)?;
    let back = run_steps(
        &mut e,
        &top,
        &schedule(config.layers, direction.opposite()),
        params,
        &config.dims(),
        &Rc::new(layout.clone()),
    )?;
    // back[j] is H←_{L−1−j}; drop H←_0.
    let mut states: Vec<HiddenPair> = back.into_iter().rev().skip(1).collect();
    states.push(top);
    Ok(states)
}

/// Records `pass` on the tape; returns the scalar loss variable.
/// Agreement targets come from `frozen` and carry no gradient.
pub fn record_pass(
    rec: &mut Recorder,
    weights: &ModelWeights<Var>,
    frozen: &ModelParams,
    config: &ModelConfig,
    pass: &Pass,
) -> Result<(Var, PassValue)> {
    let layout = Rc::new(pass.batch.layout.clone());
    let h0 = embed_duplicate(rec, &weights.embedding, &pass.batch.ids)?;
    let steps = schedule(config.layers, pass.direction);
    let states = run_steps(rec, &h0, &steps, weights, &config.dims(), &layout)?;
    let top = states.last().unwrap_or(&h0);
    let lp = output_log_probs(rec, top, &weights.embedding)?;
    let (mut value, grad) = output_terms(rec.tape.value(lp), pass)?;
    let mut terms = vec![(rec.tape.fused_scalar(lp, value.ctc + value.smoothing, grad)?, 1.0)];
    if let Some(agr) = &pass.agreement {
        let targets = agreement_targets(frozen, config, pass.direction, &agr.alignment, &pass.batch.layout)?;
        for (s, t) in states.iter().zip(&targets) {
            for (a, b) in [(s.h1, &t.h1), (s.h2, &t.h2)] {
                let c = rec.tape.cosine_distance(a, b.clone(), agr.weights.clone())?;
                value.agreement += rec.tape.value(c).item();
                terms.push((c, 1.0));
            }
        }
    }
    Ok((rec.tape.weighted_sum(&terms), value))
}

/// Objective weights for one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_fba: f64,
    pub lambda_cc: f64,
    pub label_smoothing: f64,
    /// Stage 2: auxiliary terms on.
    pub aux_active: bool,
    /// `None` trains both directions; `Some(d)` only `d` (simplex).
    pub only: Option<Direction>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fba: 0.1,
            lambda_cc: 0.1,
            label_smoothing: 0.0,
            aux_active: true,
            only: None,
        }
    }
}

impl LossWeights {
    pub fn directions(&self) -> Vec<Direction> {
        match self.only {
            Some(d) => vec![d],
            None => vec![Direction::Forward, Direction::Reverse],
        }
    }

    fn wants_fba(&self) -> bool {
        self.aux_active && self.lambda_fba > 0.0
    }

    fn wants_cc(&self) -> bool {
        self.aux_active && self.lambda_cc > 0.0 && self.only.is_none()
    }

    fn wants_aux(&self) -> bool {
        self.wants_fba() || self.wants_cc()
    }
}

/// Input and target of a pair for a direction.
pub fn oriented(p: &TokenPair, direction: Direction) -> (&[usize], &[usize]) {
    match direction {
        Direction::Forward => (&p.src, &p.tgt),
        Direction::Reverse => (&p.tgt, &p.src),
    }
}

/// Per-sequence no-grad results of a first forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqAux {
    /// Best alignment of the true output; `None` when infeasible.
    pub alignment: Option<Vec<usize>>,
    /// Greedy prediction.
    pub prediction: Vec<usize>,
}

/// Constants for the auxiliary terms, computed from the current
/// parameters and then frozen for the step.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxTargets {
    pub forward: Vec<SeqAux>,
    pub reverse: Vec<SeqAux>,
}

impl AuxTargets {
    pub fn compute(model: &DuplexModel, pairs: &[TokenPair], dirs: &[Direction]) -> Result<Self> {
        let mut out = AuxTargets {
            forward: Vec::new(),
            reverse: Vec::new(),
        };
        for &d in dirs {
            let (inputs, targets): (Vec<&[usize]>, Vec<&[usize]>) = pairs.iter().map(|p| oriented(p, d)).unzip();
            let batch = SeqBatch::new(&inputs, &targets, model.config.upsample_factor);
            let lp = eager_log_probs(model, &batch, d)?;
            let mut seqs = Vec::with_capacity(pairs.len());
            for b in 0..batch.len() {
                let rows = batch.layout.rows_of(b);
                let lp_b = lp.slice_rows(rows.start, rows.end);
                let alignment = if ctc::is_feasible(lp_b.rows(), &batch.targets[b]) {
                    Some(ctc::viterbi_alignment(&lp_b, &batch.targets[b], BLANK)?.0)
                } else {
                    None
                };
                seqs.push(SeqAux {
                    alignment,
                    prediction: ctc::greedy_decode(&lp_b, BLANK),
                });
            }
            match d {
                Direction::Forward => out.forward = seqs,
                Direction::Reverse => out.reverse = seqs,
            }
        }
        Ok(out)
    }

    pub fn get(&self, d: Direction) -> &[SeqAux] {
        match d {
            Direction::Forward => &self.forward,
            Direction::Reverse => &self.reverse,
        }
    }
}

/// Output log-probs of a padded batch, evaluated directly.
pub fn eager_log_probs(model: &DuplexModel, batch: &SeqBatch, direction: Direction) -> Result<Tensor> {
    let e = &mut Eager::new();
    let layout = Rc::new(batch.layout.clone());
    let h0 = embed_duplicate(e, &model.params.embedding, &batch.ids)?;
    let states = run_steps(
        e,
        &h0,
        &schedule(model.config.layers, direction),
        &model.params,
        &model.dims(),
        &layout,
    )?;
    output_log_probs(e, states.last().unwrap_or(&h0), &model.params.embedding)
}

/// Which objective term a pass carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    /// CTC of the direction's true pair, plus its agreement term.
    Supervised(Direction),
    /// Reconstruction of the direction's input from its own prediction.
    Cycle(Direction),
}

/// Loss components, unweighted means over contributing sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ctc_x2y: f64,
    pub ctc_y2x: f64,
    pub fba_x2y: f64,
    pub fba_y2x: f64,
    pub cc_x: f64,
    pub cc_y: f64,
    pub smoothing: f64,
    pub fba_skipped: usize,
    pub cc_skipped: usize,
    pub sequences: usize,
}

/// Per-pass scales that turn weighted values back into means.
#[derive(Clone, Debug)]
pub struct PassPlan {
    pub passes: Vec<(Term, Pass)>,
    pub fba_skipped: usize,
    pub cc_skipped: usize,
}

/// Builds the passes of the objective for `range` of `pairs`, with
/// weights normalised over the full batch so shards sum exactly.
pub fn build_passes(
    pairs: &[TokenPair],
    range: Range<usize>,
    aux: Option<&AuxTargets>,
    w: &LossWeights,
    config: &ModelConfig,
) -> Result<PassPlan> {
    let factor = config.upsample_factor;
    let n = pairs.len() as f64;
    let mut plan = PassPlan {
        passes: Vec::new(),
        fba_skipped: 0,
        cc_skipped: 0,
    };
    if range.is_empty() {
        return Ok(plan);
    }
    let aux = if w.wants_aux() {
        Some(aux.ok_or_else(|| RederError::Contract("auxiliary terms need aux targets".into()))?)
    } else {
        None
    };
    let shard = &pairs[range.clone()];
    for d in w.directions() {
        let (inputs, targets): (Vec<&[usize]>, Vec<&[usize]>) = shard.iter().map(|p| oriented(p, d)).unzip();
        let batch = SeqBatch::new(&inputs, &targets, factor);
        let smoothing = if w.label_smoothing > 0.0 {
            w.label_smoothing / pairs.iter().map(|p| factor * oriented(p, d).0.len()).sum::<usize>() as f64
        } else {
            0.0
        };
        let agreement = match aux {
            Some(a) if w.wants_fba() => {
                let seqs = a.get(d);
                let ok = seqs.iter().filter(|s| s.alignment.is_some()).count();
                plan.fba_skipped += seqs[range.clone()].iter().filter(|s| s.alignment.is_none()).count();
                let mut frames = Vec::with_capacity(shard.len());
                let mut weights = vec![0.0; batch.layout.total_rows()];
                for (b, s) in seqs[range.clone()].iter().enumerate() {
                    match &s.alignment {
                        Some(al) => {
                            let per_row =
                                w.lambda_fba / (ok as f64 * al.len() as f64 * 2.0 * config.layers as f64);
                            for r in batch.layout.rows_of(b) {
                                weights[r] = per_row;
                            }
                            frames.push(al.clone());
                        }
                        // Any in-vocabulary filler; zero weight.
                        None => frames.push(batch.inputs[b].clone()),
                    }
                }
                Some(Agreement {
                    alignment: batch.layout.scatter_ids(&frames, PAD),
                    weights,
                })
            }
            _ => None,
        };
        plan.passes.push((
            Term::Supervised(d),
            Pass {
                direction: d,
                ctc_weights: vec![1.0 / n; shard.len()],
                batch,
                smoothing,
                agreement,
            },
        ));
    }
    if let Some(a) = aux.filter(|_| w.wants_cc()) {
        for d in [Direction::Forward, Direction::Reverse] {
            let seqs = a.get(d);
            let usable = |p: &TokenPair, s: &SeqAux| {
                !s.prediction.is_empty() && ctc::is_feasible(factor * s.prediction.len(), oriented(p, d).0)
            };
            let ok = pairs.iter().zip(seqs).filter(|(p, s)| usable(p, s)).count();
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for (p, s) in shard.iter().zip(&seqs[range.clone()]) {
                if usable(p, s) {
                    inputs.push(s.prediction.as_slice());
                    targets.push(oriented(p, d).0);
                } else {
                    plan.cc_skipped += 1;
                }
            }
            if inputs.is_empty() {
                continue;
            }
            let batch = SeqBatch::new(&inputs, &targets, factor);
            plan.passes.push((
                Term::Cycle(d),
                Pass {
                    direction: d.opposite(),
                    ctc_weights: vec![w.lambda_cc / ok as f64; batch.len()],
                    batch,
                    smoothing: 0.0,
                    agreement: None,
                },
            ));
        }
    }
    Ok(plan)
}

/// Folds weighted pass values into an unweighted breakdown.
pub fn accumulate_breakdown(out: &mut LossBreakdown, term: Term, v: &PassValue, w: &LossWeights) {
    out.total += v.total();
    out.smoothing += v.smoothing;
    let unweight = |x: f64, l: f64| if l > 0.0 { x / l } else { 0.0 };
    match term {
        Term::Supervised(Direction::Forward) => {
            out.ctc_x2y += v.ctc;
            out.fba_x2y += unweight(v.agreement, w.lambda_fba);
        }
        Term::Supervised(Direction::Reverse) => {
            out.ctc_y2x += v.ctc;
            out.fba_y2x += unweight(v.agreement, w.lambda_fba);
        }
        Term::Cycle(Direction::Forward) => out.cc_x += unweight(v.ctc, w.lambda_cc),
        Term::Cycle(Direction::Reverse) => out.cc_y += unweight(v.ctc, w.lambda_cc),
    }
}

/// Records every pass of `plan` and returns their summed loss.
pub fn record_plan(
    tape: &mut Tape,
    vars: &ModelWeights<Var>,
    frozen: &ModelParams,
    config: &ModelConfig,
    plan: &PassPlan,
) -> Result<Var> {
    let mut rec = Recorder::new(tape);
    let mut roots = Vec::new();
    for (_, pass) in &plan.passes {
        roots.push((record_pass(&mut rec, vars, frozen, config, pass)?.0, 1.0));
    }
    Ok(rec.tape.weighted_sum(&roots))
}

/// Records every pass on one tape with stored activations and returns the
/// loss breakdown and parameter gradients.
pub fn stored_grads(
    model: &DuplexModel,
    plan: &PassPlan,
    w: &LossWeights,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, ModelParams)> {
    let mut tape = Tape::new();
    let vars = model.params.map(|t| tape.param(t.clone()));
    let mut rec = match dropout_seed {
        Some(seed) if model.config.dropout > 0.0 => {
            Recorder::with_dropout(&mut tape, model.config.dropout, ChaCha8Rng::seed_from_u64(seed))
        }
        _ => Recorder::new(&mut tape),
    };
    let mut breakdown = LossBreakdown::default();
    let mut roots = Vec::new();
    for (term, pass) in &plan.passes {
        let (root, v) = record_pass(&mut rec, &vars, &model.params, &model.config, pass)?;
        accumulate_breakdown(&mut breakdown, *term, &v, w);
        roots.push((root, 1.0));
    }
    breakdown.fba_skipped = plan.fba_skipped;
    breakdown.cc_skipped = plan.cc_skipped;
    if roots.is_empty() {
        return Ok((breakdown, model.params.map(|t| Tensor::zeros(t.shape()))));
    }
    let root = tape.weighted_sum(&roots);
    let mut grads = tape.backward(root)?;
    let g = vars.map(|v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())));
    Ok((breakdown, g))
}
