//! Input-estimation error metrics.
//!
//! `rho_k` is the normalized rms estimation error over steps `0..=k`. It
//! needs the true input and so is only a diagnostic. It is undefined (`None`)
//! while the true input has had zero energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::RunRecord;

/// Running sums behind `rho_k`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RhoAccumulator {
    pub sum_err_sq: f64,
    pub sum_d_sq: f64,
    pub count: usize,
}

impl RhoAccumulator {
    /// Folds in one step and returns the current `rho`, or `None` while
    /// `sum d^2 = 0`.
    pub fn update(&mut self, dhat: f64, d: f64) -> Result<Option<f64>> {
        if !(dhat.is_finite() && d.is_finite()) {
            return Err(Error::NonFinite { what: "rho input", step: self.count });
        }
        self.sum_err_sq += (dhat - d) * (dhat - d);
        self.sum_d_sq += d * d;
        self.count += 1;
        Ok(self.rho())
    }

    pub fn rho(&self) -> Option<f64> {
        (self.sum_d_sq > 0.0).then(|| (self.sum_err_sq / self.sum_d_sq).sqrt())
    }
}

/// Run-level summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// `rho` at the last step.
    pub rho_final: Option<f64>,
    pub s_tilde_final: f64,
    /// Normalized rms error over the final 20% of steps.
    pub steady_state_rho: Option<f64>,
    pub vtilde_final: f64,
}

/// Number of trailing steps treated as steady state.
pub fn steady_state_len(steps: usize) -> usize {
    (steps / 5).max(1).min(steps)
}

pub fn summarize_run(records: &[RunRecord]) -> Result<RunSummary> {
    let last = records.last().ok_or_else(|| Error::config("cannot summarize an empty run"))?;
    let tail = &records[records.len() - steady_state_len(records.len())..];
    let mut err = 0.0;
    let mut energy = 0.0;
    for r in tail {
        if let Some(d) = r.d_true {
            err += (r.dhat - d) * (r.dhat - d);
            energy += d * d;
        }
    }
    Ok(RunSummary {
        steps: records.len(),
        rho_final: last.rho,
        s_tilde_final: last.s_tilde,
        steady_state_rho: (energy > 0.0).then(|| (err / energy).sqrt()),
        vtilde_final: last.vtilde,
    })
}
