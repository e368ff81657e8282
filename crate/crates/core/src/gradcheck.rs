//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{RederError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Finite-difference step, in `[1e-7, 1e-3]`.
    pub step: f64,
    /// Coordinates probed per leaf; `None` probes every coordinate.
    pub probes_per_leaf: Option<usize>,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            probes_per_leaf: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_leaf: usize,
    pub worst_index: usize,
    pub probes: usize,
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh tape and one parameter variable per leaf and must
/// return a scalar variable.
pub fn grad_check<F>(f: F, leaves: &[Tensor], cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&cfg.step) {
        return Err(RederError::Config(format!("finite-difference step {} outside [1e-7, 1e-3]", cfg.step)));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(RederError::NonFinite(format!("objective at probe point is {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(RederError::NonFinite("objective at base point".into()));
    }
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = leaves.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_leaf: 0,
        worst_index: 0,
        probes: 0,
    };
    for (li, var) in vars.iter().enumerate() {
        let n = leaves[li].len();
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaves[li].shape()));
        let coords: Vec<usize> = match cfg.probes_per_leaf {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let x0 = leaves[li].data()[idx];
            work[li].data_mut()[idx] = x0 + cfg.step;
            let up = eval(&work)?;
            work[li].data_mut()[idx] = x0 - cfg.step;
            let down = eval(&work)?;
            work[li].data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.probes += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_leaf = li;
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
