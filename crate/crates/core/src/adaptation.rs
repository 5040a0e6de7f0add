//! Online selection of the unknown-input covariance by innovation-variance
//! matching.
//!
//! A bank keeps one forecast-covariance recursion per candidate value, each
//! driven by its own constant `vtilde` from step 0. At every step the
//! candidate whose predicted innovation variance `S = C P_fc C^T + V2` is
//! closest to the running sample variance of the innovations supplies the
//! gain used by the filter.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{assimilated_covariance, forecast_covariance, kalman_gain, VtildeShape};
use crate::model::IntegratorModel;

/// Running mean and sum of squared deviations of the innovations.
///
/// The sample variance uses `1/k` normalization over `z_0..z_k` (that is,
/// `k + 1` samples), while the mean uses `1/(k + 1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InnovationStats {
    pub count: usize,
    pub mean: f64,
    pub m2: f64,
}

impl InnovationStats {
    pub fn update(&mut self, z: f64) {
        self.count += 1;
        let delta = z - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (z - self.mean);
    }

    /// Sample variance `S_hat_k`; zero until two samples have been seen.
    pub fn sample_variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

/// Filter-predicted innovation variance `C P_fc C^T + V2`.
pub fn filter_variance(pfc: &DMatrix<f64>, model: &IntegratorModel) -> f64 {
    (model.c() * pfc * model.c().transpose())[0] + model.v2()
}

/// Index minimizing `|s_hat - s|`, with ties going to the lower index, and
/// the attained minimum.
pub fn select_index(s_hat: f64, s_filter: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in s_filter.iter().enumerate() {
        let gap = (s_hat - s).abs();
        match best {
            Some((_, b)) if gap >= b => {}
            _ => best = Some((i, gap)),
        }
    }
    best
}

/// Candidate grid of unknown-input variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VtildeGrid {
    /// `count` log-spaced values from `lo` to `hi` inclusive.
    LogSpace { lo: f64, hi: f64, count: usize },
    List(Vec<f64>),
}

impl VtildeGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        let values = match self {
            VtildeGrid::LogSpace { lo, hi, count } => logspace(*lo, *hi, *count)?,
            VtildeGrid::List(v) => v.clone(),
        };
        check_grid(&values)?;
        Ok(values)
    }
}

/// `count` log-spaced points from `lo` to `hi`, endpoints exact.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > 0.0 && lo.is_finite() && hi.is_finite()) {
        return Err(Error::config(format!("logspace bounds must be finite and > 0, got {lo}, {hi}")));
    }
    if count == 0 {
        return Err(Error::config("logspace count must be >= 1"));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    let step = (b - a) / (count - 1) as f64;
    Ok((0..count)
        .map(|i| match i {
            0 => lo,
            _ if i == count - 1 => hi,
            _ => 10f64.powf(a + step * i as f64),
        })
        .collect())
}

fn check_grid(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config("candidate grid is empty"));
    }
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::config("candidate grid values must be finite and > 0"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("candidate grid must be strictly ascending"));
    }
    Ok(())
}

impl FromStr for VtildeGrid {
    type Err = Error;

    /// Parses `logspace:LO:HI:COUNT` or `list:V1,V2,...`; list values are
    /// sorted ascending and must be distinct.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("cannot parse grid {s:?}; expected logspace:LO:HI:COUNT or list:V,..."));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let grid = match kind.trim() {
            "logspace" => {
                let parts: Vec<&str> = rest.split(':').collect();
                if parts.len() != 3 {
                    return Err(bad());
                }
                let lo = parts[0].trim().parse().map_err(|_| bad())?;
                let hi = parts[1].trim().parse().map_err(|_| bad())?;
                let count = parts[2].trim().parse().map_err(|_| bad())?;
                VtildeGrid::LogSpace { lo, hi, count }
            }
            "list" => {
                let mut values: Vec<f64> = rest
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                values.sort_by(f64::total_cmp);
                VtildeGrid::List(values)
            }
            _ => return Err(bad()),
        };
        grid.values()?;
        Ok(grid)
    }
}

impl TryFrom<String> for VtildeGrid {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for VtildeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VtildeGrid::LogSpace { lo, hi, count } => write!(f, "logspace:{lo:e}:{hi:e}:{count}"),
            VtildeGrid::List(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
                write!(f, "list:{}", parts.join(","))
            }
        }
    }
}

impl From<VtildeGrid> for String {
    fn from(g: VtildeGrid) -> Self {
        g.to_string()
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    vtilde: f64,
    vtilde_mat: DMatrix<f64>,
    pfc: DMatrix<f64>,
}

/// What the bank decided at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BankDecision {
    pub index: usize,
    pub vtilde: f64,
    pub s_hat: f64,
    pub s_filter: f64,
    pub s_tilde: f64,
    pub gain: DVector<f64>,
    pub pda: DMatrix<f64>,
}

/// Bank of candidate covariance recursions sharing one innovation history.
#[derive(Debug, Clone)]
pub struct AdaptationBank {
    candidates: Vec<Candidate>,
    v1: DMatrix<f64>,
    stats: InnovationStats,
    active: usize,
    warmup: usize,
    k: usize,
}

impl AdaptationBank {
    /// `grid` must be nonempty, strictly ascending and positive. Selection
    /// starts at step `warmup`; before that the geometric-median candidate
    /// is used.
    pub fn new(
        grid: &[f64],
        model: &IntegratorModel,
        v1: DMatrix<f64>,
        shape: VtildeShape,
        warmup: usize,
    ) -> Result<Self> {
        check_grid(grid)?;
        let n = model.order();
        if v1.shape() != (n, n) {
            return Err(Error::config(format!("V1 must be {n}x{n}")));
        }
        crate::kalman::check_psd(&v1, "V1", 0)?;
        let candidates = grid
            .iter()
            .map(|&vtilde| Candidate {
                vtilde,
                vtilde_mat: shape.lift(vtilde, model),
                pfc: DMatrix::zeros(n, n),
            })
            .collect();
        Ok(Self {
            candidates,
            v1,
            stats: InnovationStats::default(),
            active: (grid.len() - 1) / 2,
            warmup,
            k: 0,
        })
    }

    pub fn grid(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.vtilde).collect()
    }

    pub fn stats(&self) -> &InnovationStats {
        &self.stats
    }

    pub fn active_index(&self) -> usize {
        self.active
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    /// Predicted innovation variance of every candidate at the current step.
    pub fn filter_variances(&self, model: &IntegratorModel) -> Vec<f64> {
        self.candidates.iter().map(|c| filter_variance(&c.pfc, model)).collect()
    }

    /// Argmin of `|S_hat - S|` over the grid at the current step; updates the
    /// active candidate and returns `(vtilde_opt, s_tilde)`.
    pub fn select_vtilde(&mut self, model: &IntegratorModel) -> (f64, f64) {
        let s = self.filter_variances(model);
        let (idx, s_tilde) =
            select_index(self.stats.sample_variance(), &s).expect("grid is nonempty");
        self.active = idx;
        (self.candidates[idx].vtilde, s_tilde)
    }

    /// Folds `z_k` into the innovation statistics, picks the candidate for
    /// step `k`, exports its gain, then advances every candidate to `k + 1`.
    pub fn step(&mut self, z: f64, model: &IntegratorModel) -> Result<BankDecision> {
        if !z.is_finite() {
            return Err(Error::NonFinite { what: "innovation", step: self.k });
        }
        self.stats.update(z);
        let s_hat = self.stats.sample_variance();
        if self.k >= self.warmup {
            self.select_vtilde(model);
        }
        let chosen = &self.candidates[self.active];
        let s_filter = filter_variance(&chosen.pfc, model);
        let gain = kalman_gain(&chosen.pfc, model);
        let pda = assimilated_covariance(&chosen.pfc, &gain, model);
        let decision = BankDecision {
            index: self.active,
            vtilde: chosen.vtilde,
            s_hat,
            s_filter,
            s_tilde: (s_hat - s_filter).abs(),
            gain,
            pda,
        };

        let step = self.k;
        for cand in &mut self.candidates {
            let gain = kalman_gain(&cand.pfc, model);
            let pda = assimilated_covariance(&cand.pfc, &gain, model);
            cand.pfc = forecast_covariance(&pda, model, &self.v1, &cand.vtilde_mat);
            if cand.pfc.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "candidate forecast covariance", step });
            }
        }
        self.k += 1;
        Ok(decision)
    }
}
