//! Kalman filter with an additive unknown-input covariance term.
//!
//! Sign convention: the innovation is `z = y_fc - y`, so the gain
//! `K = -P C^T (C P C^T + V2)^-1` is non-positive in the scalar case and the
//! assimilation step is `x_da = x_fc + K z`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IntegratorModel;

/// Tolerance on the smallest eigenvalue when a matrix is required to be PSD.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// How a scalar unknown-input variance is lifted to the state dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VtildeShape {
    /// `B v B^T`: variance enters through the input channel.
    #[default]
    InputChannel,
    /// `v I`.
    Identity,
}

impl VtildeShape {
    pub fn lift(self, v: f64, model: &IntegratorModel) -> DMatrix<f64> {
        match self {
            VtildeShape::InputChannel => model.b() * model.b().transpose() * v,
            VtildeShape::Identity => DMatrix::identity(model.order(), model.order()) * v,
        }
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn check_psd(m: &DMatrix<f64>, what: &'static str, step: usize) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what, step });
    }
    let min_eigenvalue = min_eigenvalue(m);
    if min_eigenvalue < -PSD_TOLERANCE {
        return Err(Error::NotPositiveDefinite { what, step, min_eigenvalue });
    }
    Ok(())
}

/// Gain for forecast covariance `pfc`. Zero when `C P C^T + V2 = 0`.
pub fn kalman_gain(pfc: &DMatrix<f64>, model: &IntegratorModel) -> DVector<f64> {
    let pct = pfc * model.c().transpose();
    let s = (model.c() * &pct)[0] + model.v2();
    if s == 0.0 {
        return DVector::zeros(model.order());
    }
    // keep exact zeros positive so exported gains print as 0
    pct.map(|v| if v == 0.0 { 0.0 } else { -v / s })
}

/// `(I + K C) P_fc`, symmetrized.
pub fn assimilated_covariance(
    pfc: &DMatrix<f64>,
    gain: &DVector<f64>,
    model: &IntegratorModel,
) -> DMatrix<f64> {
    let n = model.order();
    let i_kc = DMatrix::identity(n, n) + gain * model.c();
    symmetrize(&(i_kc * pfc))
}

/// `A P_da A^T + V1 + Vtilde`, symmetrized. Inputs are not validated.
pub fn forecast_covariance(
    pda: &DMatrix<f64>,
    model: &IntegratorModel,
    v1: &DMatrix<f64>,
    vtilde: &DMatrix<f64>,
) -> DMatrix<f64> {
    let a = model.a();
    symmetrize(&(a * pda * a.transpose() + v1 + vtilde))
}

/// Filter state for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub xfc: DVector<f64>,
    pub xda: DVector<f64>,
    pub pfc: DMatrix<f64>,
    pub pda: DMatrix<f64>,
    pub kda: DVector<f64>,
    pub z: f64,
    pub k: usize,
}

impl KalmanState {
    /// Zero forecast state and zero forecast covariance.
    pub fn new(order: usize) -> Self {
        Self {
            xfc: DVector::zeros(order),
            xda: DVector::zeros(order),
            pfc: DMatrix::zeros(order, order),
            pda: DMatrix::zeros(order, order),
            kda: DVector::zeros(order),
            z: 0.0,
            k: 0,
        }
    }

    pub fn forecast_output(&self, model: &IntegratorModel) -> f64 {
        (model.c() * &self.xfc)[0]
    }

    /// `x_fc <- A x_da + B dhat` and advances the step counter.
    pub fn forecast(&mut self, dhat: f64, model: &IntegratorModel) {
        self.xfc = model.a() * &self.xda + model.b() * dhat;
        self.k += 1;
    }

    /// Computes the gain from the current forecast covariance, then assimilates `z`.
    pub fn gain_and_assimilate(&mut self, z: f64, model: &IntegratorModel) {
        let gain = kalman_gain(&self.pfc, model);
        let pda = assimilated_covariance(&self.pfc, &gain, model);
        self.assimilate_with(z, gain, pda);
    }

    /// Assimilates `z` with an externally computed gain and covariance
    /// (used when a bank of covariance recursions owns the gain).
    pub fn assimilate_with(&mut self, z: f64, gain: DVector<f64>, pda: DMatrix<f64>) {
        self.z = z;
        self.xda = &self.xfc + &gain * z;
        self.kda = gain;
        self.pda = pda;
    }

    /// `P_fc <- A P_da A^T + V1 + Vtilde` after checking both added terms are PSD.
    pub fn propagate_covariance(
        &mut self,
        model: &IntegratorModel,
        v1: &DMatrix<f64>,
        vtilde: &DMatrix<f64>,
    ) -> Result<()> {
        check_psd(v1, "V1", self.k)?;
        check_psd(vtilde, "Vtilde", self.k)?;
        self.pfc = forecast_covariance(&self.pda, model, v1, vtilde);
        Ok(())
    }
}

/// `z = y_fc - y`.
pub fn innovation(yfc: f64, y: f64) -> f64 {
    yfc - y
}

/// Gains, forecast and assimilated covariances of the scalar integrator
/// recursion (`A = C = 1`, `P_fc,0 = 0`) for steps `0..=kmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarRecursion {
    pub gains: Vec<f64>,
    pub pfc: Vec<f64>,
    pub pda: Vec<f64>,
}

pub fn scalar_recursion(v1: f64, v2: f64, kmax: usize) -> ScalarRecursion {
    let mut out = ScalarRecursion {
        gains: Vec::with_capacity(kmax + 1),
        pfc: Vec::with_capacity(kmax + 1),
        pda: Vec::with_capacity(kmax + 1),
    };
    let mut pfc = 0.0;
    for _ in 0..=kmax {
        let s = pfc + v2;
        let k = if s == 0.0 || pfc == 0.0 { 0.0 } else { -pfc / s };
        let pda = (1.0 + k) * pfc;
        out.gains.push(k);
        out.pfc.push(pfc);
        out.pda.push(pda);
        pfc = pda + v1;
    }
    out
}

/// Gains `K_0..=K_kmax` of the scalar recursion for measurement-to-process
/// variance ratio `c = V2/V1`.
pub fn gain_ratio_sequence(c: f64, kmax: usize) -> Result<Vec<f64>> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::config(format!("variance ratio must be finite and > 0, got {c}")));
    }
    Ok(scalar_recursion(1.0, c, kmax).gains)
}

/// Closed-form `K_1, K_2, K_3` as rational functions of `c = V2/V1`.
pub fn closed_form_gains(c: f64) -> [f64; 3] {
    let k1 = -1.0 / (1.0 + c);
    let k2 = -(1.0 + 2.0 * c) / ((1.0 + c) * (1.0 + c) + c);
    let k3 = -(1.0 + 3.0 * c * c + 4.0 * c) / (c * c * c + 6.0 * c * c + 5.0 * c + 1.0);
    [k1, k2, k3]
}
