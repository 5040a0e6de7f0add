//! Zero-order-hold discretization of integrator chains.
//!
//! The continuous plant is the n-th order integrator `x' = A_I x + B_I u`,
//! `y = C_I x`, where `A_I` is the nilpotent upper shift. Because `A_I^n = 0`
//! the matrix exponential series terminates, so the discrete matrices have
//! exact factorial entries.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};

/// Discretized n-th order integrator used as the differentiation plant.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorModel {
    order: usize,
    ts: f64,
    ad: DMatrix<f64>,
    bd: DVector<f64>,
    c: RowDVector<f64>,
    v2: f64,
}

impl IntegratorModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.ad
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.bd
    }

    pub fn c(&self) -> &RowDVector<f64> {
        &self.c
    }

    /// Sensor-noise variance assumed by the Kalman filter.
    pub fn v2(&self) -> f64 {
        self.v2
    }

    /// Same plant with a different assumed sensor variance.
    pub fn with_v2(&self, v2: f64) -> Result<Self> {
        check_v2(v2)?;
        Ok(Self { v2, ..self.clone() })
    }
}

fn check_v2(v2: f64) -> Result<()> {
    if !(v2.is_finite() && v2 >= 0.0) {
        return Err(Error::config(format!("sensor variance must be finite and >= 0, got {v2}")));
    }
    Ok(())
}

fn factorial(m: usize) -> f64 {
    (1..=m).map(|i| i as f64).product()
}

/// Builds the exact ZOH discretization of the `order`-th integrator chain.
///
/// `Ad[i][j] = Ts^(j-i) / (j-i)!` for `j >= i`, `Bd[i] = Ts^(n-i) / (n-i)!`
/// (0-indexed), `C = [1, 0, ..., 0]`.
pub fn discretize_integrator(order: usize, ts: f64, v2: f64) -> Result<IntegratorModel> {
    if order < 1 {
        return Err(Error::config("integrator order must be >= 1"));
    }
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::config(format!("sampling time must be finite and > 0, got {ts}")));
    }
    check_v2(v2)?;

    let ad = DMatrix::from_fn(order, order, |i, j| {
        if j >= i {
            ts.powi((j - i) as i32) / factorial(j - i)
        } else {
            0.0
        }
    });
    let bd = DVector::from_fn(order, |i, _| {
        let p = order - i;
        ts.powi(p as i32) / factorial(p)
    });
    let mut c = RowDVector::zeros(order);
    c[0] = 1.0;

    Ok(IntegratorModel { order, ts, ad, bd, c, v2 })
}

/// Noise gain `D2` that puts white unit-variance noise at `snr_db` below the
/// empirical rms of `clean_signal`.
pub fn snr_to_noise_gain(snr_db: f64, clean_signal: &[f64]) -> Result<f64> {
    if clean_signal.is_empty() {
        return Err(Error::config("clean signal is empty"));
    }
    if !snr_db.is_finite() {
        return Err(Error::config("SNR must be finite"));
    }
    let mean_sq = clean_signal.iter().map(|v| v * v).sum::<f64>() / clean_signal.len() as f64;
    if mean_sq == 0.0 {
        return Err(Error::config("clean signal is identically zero; SNR undefined"));
    }
    if !mean_sq.is_finite() {
        return Err(Error::config("clean signal contains non-finite values"));
    }
    Ok(mean_sq.sqrt() * 10f64.powf(-snr_db / 20.0))
}
