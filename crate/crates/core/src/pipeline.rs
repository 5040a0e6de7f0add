//! The full per-step differentiation loop.
//!
//! At step `k`:
//! 1. innovation `z_k = C x_fc,k - y_k`;
//! 2. gain `K_da,k` from the forecast covariance (fixed `vtilde`, or the
//!    candidate chosen by the adaptation bank);
//! 3. assimilation `x_da,k = x_fc,k + K_da,k z_k`;
//! 4. input estimate `dhat_k = Phi_k theta_k`, then the RLS refit of theta;
//! 5. forecast `x_fc,k+1 = A x_da,k + B dhat_k` and covariance propagation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adaptation::{filter_variance, AdaptationBank, InnovationStats};
use crate::error::{Error, Result};
use crate::kalman::{
    assimilated_covariance, check_psd, forecast_covariance, innovation, kalman_gain, KalmanState,
    VtildeShape,
};
use crate::metrics::{summarize_run, RhoAccumulator, RunSummary};
use crate::model::IntegratorModel;
use crate::rcie::{InputEstimator, RcieConfig};

/// How the unknown-input covariance is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum VtildeMode {
    Constant(f64),
    Adaptive { grid: Vec<f64>, warmup: usize },
}

impl VtildeMode {
    /// Adaptive mode with the default warm-up `max(nf, 10)`.
    pub fn adaptive(grid: Vec<f64>, nf: usize) -> Self {
        VtildeMode::Adaptive { grid, warmup: default_warmup(nf) }
    }
}

pub fn default_warmup(nf: usize) -> usize {
    nf.max(10)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: IntegratorModel,
    pub rcie: RcieConfig,
    /// Process-noise covariance; zero for pure differentiation.
    pub v1: DMatrix<f64>,
    pub shape: VtildeShape,
    pub mode: VtildeMode,
}

impl PipelineConfig {
    pub fn new(model: IntegratorModel, rcie: RcieConfig, mode: VtildeMode) -> Self {
        let n = model.order();
        Self { model, rcie, v1: DMatrix::zeros(n, n), shape: VtildeShape::default(), mode }
    }
}

/// One step of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub k: usize,
    pub t: f64,
    pub y: f64,
    pub z: f64,
    pub dhat: f64,
    pub d_true: Option<f64>,
    pub rho: Option<f64>,
    pub vtilde: f64,
    pub s_hat: f64,
    pub s_filter: f64,
    pub s_tilde: f64,
    pub kda: Vec<f64>,
}

#[derive(Debug, Clone)]
enum GainSource {
    Constant { vtilde: f64, vtilde_mat: DMatrix<f64>, stats: InnovationStats },
    Bank(Box<AdaptationBank>),
}

/// Streaming causal differentiator: feed one sample per call.
#[derive(Debug, Clone)]
pub struct Differentiator {
    model: IntegratorModel,
    v1: DMatrix<f64>,
    shape: VtildeShape,
    kalman: KalmanState,
    estimator: InputEstimator,
    gains: GainSource,
    rho: RhoAccumulator,
    k: usize,
}

impl Differentiator {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let model = cfg.model.clone();
        let n = model.order();
        if cfg.v1.shape() != (n, n) {
            return Err(Error::config(format!("V1 must be {n}x{n}")));
        }
        check_psd(&cfg.v1, "V1", 0)?;
        let gains = match &cfg.mode {
            VtildeMode::Constant(v) => {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(Error::config(format!("constant vtilde must be >= 0, got {v}")));
                }
                GainSource::Constant {
                    vtilde: *v,
                    vtilde_mat: cfg.shape.lift(*v, &model),
                    stats: InnovationStats::default(),
                }
            }
            VtildeMode::Adaptive { grid, warmup } => GainSource::Bank(Box::new(AdaptationBank::new(
                grid,
                &model,
                cfg.v1.clone(),
                cfg.shape,
                *warmup,
            )?)),
        };
        Ok(Self {
            kalman: KalmanState::new(n),
            estimator: InputEstimator::new(cfg.rcie.clone())?,
            v1: cfg.v1.clone(),
            shape: cfg.shape,
            gains,
            rho: RhoAccumulator::default(),
            k: 0,
            model,
        })
    }

    pub fn kalman(&self) -> &KalmanState {
        &self.kalman
    }

    pub fn estimator(&self) -> &InputEstimator {
        &self.estimator
    }

    /// Processes measurement `y_k`; `d_true` enables the `rho` diagnostic.
    pub fn step(&mut self, y: f64, d_true: Option<f64>) -> Result<RunRecord> {
        let k = self.k;
        if !y.is_finite() {
            return Err(Error::NonFinite { what: "measurement", step: k });
        }
        let model = &self.model;
        let z = innovation(self.kalman.forecast_output(model), y);

        let (gain, pda, vtilde, s_hat, s_filter, vtilde_mat) = match &mut self.gains {
            GainSource::Constant { vtilde, stats, .. } => {
                stats.update(z);
                let gain = kalman_gain(&self.kalman.pfc, model);
                let pda = assimilated_covariance(&self.kalman.pfc, &gain, model);
                let s_filter = filter_variance(&self.kalman.pfc, model);
                (gain, pda, *vtilde, stats.sample_variance(), s_filter, None)
            }
            GainSource::Bank(bank) => {
                let d = bank.step(z, model)?;
                let lifted = self.shape.lift(d.vtilde, model);
                (d.gain, d.pda, d.vtilde, d.s_hat, d.s_filter, Some(lifted))
            }
        };

        self.kalman.assimilate_with(z, gain, pda);
        let est = self.estimator.step(z, &self.kalman.kda, model)?;
        if !est.dhat.is_finite() {
            return Err(Error::NonFinite { what: "input estimate", step: k });
        }
        self.kalman.forecast(est.dhat, model);
        // in adaptive mode this is what the selected candidate forecasts
        let vtilde_mat = match (&self.gains, &vtilde_mat) {
            (_, Some(lifted)) => lifted,
            (GainSource::Constant { vtilde_mat, .. }, None) => vtilde_mat,
            (GainSource::Bank(_), None) => unreachable!("bank always lifts its selection"),
        };
        self.kalman.pfc = forecast_covariance(&self.kalman.pda, model, &self.v1, vtilde_mat);
        if self.kalman.xfc.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "forecast state", step: k });
        }

        let rho = match d_true {
            Some(d) => self.rho.update(est.dhat, d)?,
            None => None,
        };
        self.k += 1;
        Ok(RunRecord {
            k,
            t: 0.0,
            y,
            z,
            dhat: est.dhat,
            d_true,
            rho,
            vtilde,
            s_hat,
            s_filter,
            s_tilde: (s_hat - s_filter).abs(),
            kda: self.kalman.kda.iter().copied().collect(),
        })
    }
}

/// Records and summary of a complete run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub summary: RunSummary,
}

/// Runs the differentiator over a whole measurement sequence.
pub fn run(cfg: &PipelineConfig, t: &[f64], y: &[f64], d_true: Option<&[f64]>) -> Result<RunOutput> {
    if y.is_empty() {
        return Err(Error::config("measurement sequence is empty"));
    }
    if t.len() != y.len() || d_true.is_some_and(|d| d.len() != y.len()) {
        return Err(Error::config("time, measurement and truth sequences differ in length"));
    }
    let mut diff = Differentiator::new(cfg)?;
    let mut records = Vec::with_capacity(y.len());
    for (k, (&tk, &yk)) in t.iter().zip(y).enumerate() {
        let mut rec = diff.step(yk, d_true.map(|d| d[k]))?;
        rec.t = tk;
        records.push(rec);
    }
    let summary = summarize_run(&records)?;
    Ok(RunOutput { records, summary })
}
