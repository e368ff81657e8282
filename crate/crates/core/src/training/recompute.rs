//! Backpropagation without stored layer activations.
//!
//! The forward sweep keeps only the current state. The backward sweep
//! walks the steps in reverse, rebuilding each step's input from its output
//! with the opposite layer form, then differentiating that single step on a
//! local tape. Agreement targets are regenerated in the same order, so the
//! number of live hidden pairs does not depend on depth.

use std::rc::Rc;

use crate::autodiff::Tape;
use crate::error::{RederError, Result};
use crate::exec::{Eager, Recorder};
use crate::layer::{apply_form, HiddenPair, Pair};
use crate::model::{embed_duplicate, output_log_probs, schedule, DuplexModel, ModelParams};
use crate::tensor::Tensor;

use super::loss::{accumulate_breakdown, output_terms, LossBreakdown, LossWeights, Pass, PassPlan, PassValue};

/// Live hidden-pair accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairMeter {
    live: usize,
    peak: usize,
}

impl PairMeter {
    fn hold(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    fn release(&mut self, n: usize) {
        self.live -= n;
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Hidden pairs a stored-activation pass keeps alive for its backward
/// sweep: every layer state plus, with agreement, every target state.
pub fn stored_pair_count(layers: usize, agreement: bool) -> usize {
    layers + 1 + if agreement { layers } else { 0 }
}

fn take(grads: &mut crate::autodiff::Gradients, v: crate::autodiff::Var, shape: &[usize]) -> Tensor {
    grads.take(v).unwrap_or_else(|| Tensor::zeros(shape))
}

fn recompute_pass(model: &DuplexModel, pass: &Pass, acc: &mut ModelParams, meter: &mut PairMeter) -> Result<PassValue> {
    let cfg = &model.config;
    let dims = cfg.dims();
    let params = &model.params;
    let layout = Rc::new(pass.batch.layout.clone());
    let steps = schedule(cfg.layers, pass.direction);
    let e = &mut Eager::new();

    let mut cur = embed_duplicate(e, &params.embedding, &pass.batch.ids)?;
    meter.hold(1);
    for st in &steps {
        let next = apply_form(e, st.form, &cur, &params.layers[st.layer], &dims, &layout)?;
        meter.hold(1);
        cur = next;
        meter.release(1);
    }

    let (mut value, mut g_out) = {
        let mut tape = Tape::new();
        let ev = tape.param(params.embedding.clone());
        let h = Pair {
            h1: tape.param(cur.h1.clone()),
            h2: tape.param(cur.h2.clone()),
        };
        let lp = output_log_probs(&mut Recorder::new(&mut tape), &h, &ev)?;
        let (value, grad) = output_terms(tape.value(lp), pass)?;
        let root = tape.fused_scalar(lp, value.ctc + value.smoothing, grad)?;
        let mut g = tape.backward(root)?;
        acc.embedding.add_assign(&take(&mut g, ev, params.embedding.shape()))?;
        let shape = cur.h1.shape().to_vec();
        let g_out = HiddenPair {
            h1: take(&mut g, h.h1, &shape),
            h2: take(&mut g, h.h2, &shape),
        };
        (value, g_out)
    };
    meter.hold(1);

    let mut target = match &pass.agreement {
        Some(a) => {
            meter.hold(1);
            Some(embed_duplicate(e, &params.embedding, &a.alignment)?)
        }
        None => None,
    };

    for st in steps.iter().rev() {
        let lw = &params.layers[st.layer];
        let inp = apply_form(e, st.form.flipped(), &cur, lw, &dims, &layout)?;
        meter.hold(1);

        let mut tape = Tape::new();
        let x = Pair {
            h1: tape.param(inp.h1.clone()),
            h2: tape.param(inp.h2.clone()),
        };
        let wl = lw.map(|t| tape.param(t.clone()));
        // The local tape holds a copy of the input and the output.
        meter.hold(2);
        let out = apply_form(&mut Recorder::new(&mut tape), st.form, &x, &wl, &dims, &layout)?;
        let mut seeds = vec![(out.h1, g_out.h1.clone()), (out.h2, g_out.h2.clone())];
        if let (Some(a), Some(t)) = (&pass.agreement, &target) {
            for (s, tt) in [(out.h1, &t.h1), (out.h2, &t.h2)] {
                let c = tape.cosine_distance(s, tt.clone(), a.weights.clone())?;
                value.agreement += tape.value(c).item();
                seeds.push((c, Tensor::scalar(1.0)));
            }
        }
        let mut g = tape.backward_seeded(&seeds)?;
        for (a, v) in acc.layers[st.layer].fields_mut().into_iter().zip(wl.fields()) {
            let shape = a.shape().to_vec();
            a.add_assign(&take(&mut g, *v, &shape))?;
        }
        let shape = inp.h1.shape().to_vec();
        g_out = HiddenPair {
            h1: take(&mut g, x.h1, &shape),
            h2: take(&mut g, x.h2, &shape),
        };
        drop(tape);
        meter.release(2);

        if let Some(t) = target.take() {
            meter.hold(1);
            target = Some(apply_form(e, st.form.flipped(), &t, lw, &dims, &layout)?);
            meter.release(1);
        }
        cur = inp;
        meter.release(1);
    }

    let d = params.embedding.cols();
    for (r, &id) in pass.batch.ids.iter().enumerate() {
        let row = acc.embedding.row_mut(id);
        for c in 0..d {
            row[c] += g_out.h1.row(r)[c] + g_out.h2.row(r)[c];
        }
    }
    meter.release(1 + 1 + usize::from(target.is_some()));
    Ok(value)
}

/// Gradients of the planned objective by activation recomputation.
/// Returns the breakdown, gradients, and peak live hidden pairs.
pub fn recompute_grads(model: &DuplexModel, plan: &PassPlan, w: &LossWeights) -> Result<(LossBreakdown, ModelParams, usize)> {
    if model.config.dropout > 0.0 {
        return Err(RederError::Config(
            "activation recomputation needs dropout disabled: a fresh mask breaks the inverse".into(),
        ));
    }
    let mut acc = model.params.map(|t| Tensor::zeros(t.shape()));
    let mut breakdown = LossBreakdown::default();
    let mut meter = PairMeter::default();
    for (term, pass) in &plan.passes {
        let v = recompute_pass(model, pass, &mut acc, &mut meter)?;
        accumulate_breakdown(&mut breakdown, *term, &v, w);
    }
    breakdown.fba_skipped = plan.fba_skipped;
    breakdown.cc_skipped = plan.cc_skipped;
    Ok((breakdown, acc, meter.peak()))
}
