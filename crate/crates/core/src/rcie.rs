//! Retrospective cost input estimation.
//!
//! The input estimate is `dhat_k = Phi_k theta_k` where the regressor stacks
//! past estimates and current/past innovations. After each step the
//! coefficients are refit by recursive least squares against the
//! retrospective cost, whose filtered regressor comes from an FIR filter
//! built from the plant's closed-loop Markov-like parameters.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, RowDVector, Vector2};

use crate::error::{Error, Result};
use crate::kalman::{min_eigenvalue, symmetrize};
use crate::model::IntegratorModel;

/// Hyperparameters of the input-estimation subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct RcieConfig {
    /// Subsystem order.
    pub nc: usize,
    /// FIR window length of the retrospective filter.
    pub nf: usize,
    /// Weight on the retrospective performance variable.
    pub rz: f64,
    /// Weight on the input-estimate magnitude.
    pub rd: f64,
    /// Regularization on `theta - theta0`; its inverse is the initial RLS covariance.
    pub r_theta: DMatrix<f64>,
    pub theta0: DVector<f64>,
}

impl RcieConfig {
    /// Config with `R_theta = r_theta_scale * I` and `theta0 = 0`.
    pub fn new(nc: usize, nf: usize, rz: f64, rd: f64, r_theta_scale: f64) -> Result<Self> {
        let l = 2 * nc + 1;
        let cfg = Self {
            nc,
            nf,
            rz,
            rd,
            r_theta: DMatrix::identity(l, l) * r_theta_scale,
            theta0: DVector::zeros(l),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of coefficients, `2 nc + 1`.
    pub fn l_theta(&self) -> usize {
        2 * self.nc + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.nc < 1 {
            return Err(Error::config("nc must be >= 1"));
        }
        if self.nf < 1 {
            return Err(Error::config("nf must be >= 1"));
        }
        if !(self.rz.is_finite() && self.rz > 0.0) {
            return Err(Error::config(format!("Rz must be finite and > 0, got {}", self.rz)));
        }
        if !(self.rd.is_finite() && self.rd >= 0.0) {
            return Err(Error::config(format!("Rd must be finite and >= 0, got {}", self.rd)));
        }
        let l = self.l_theta();
        if self.r_theta.shape() != (l, l) {
            return Err(Error::config(format!(
                "R_theta must be {l}x{l} for nc = {}, got {}x{}",
                self.nc,
                self.r_theta.nrows(),
                self.r_theta.ncols()
            )));
        }
        if self.theta0.len() != l {
            return Err(Error::config(format!("theta0 must have length {l}")));
        }
        if (&self.r_theta - self.r_theta.transpose()).amax() > 1e-12 * self.r_theta.amax() {
            return Err(Error::config("R_theta must be symmetric"));
        }
        if self.r_theta.iter().any(|v| !v.is_finite())
            || Cholesky::new(self.r_theta.clone()).is_none()
        {
            return Err(Error::config("R_theta must be positive definite"));
        }
        Ok(())
    }
}

/// Taps `H_1..H_nf` of the retrospective FIR filter at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FirCoefficients(pub Vec<f64>);

impl FirCoefficients {
    pub fn taps(&self) -> &[f64] {
        &self.0
    }
}

/// Computes `H_{i,k}` for `i = 1..=nf`.
///
/// `past_gains` holds `K_{k-1}, K_{k-2}, ...` newest first; missing entries
/// count as zero gain. `H_{i,k} = C Abar_{k-1} ... Abar_{k-i+1} B` with
/// `Abar_j = A (I + K_j C)`, and `H_{i,k} = 0` for `i > k`.
pub fn fir_coefficients(
    k: usize,
    past_gains: &[DVector<f64>],
    model: &IntegratorModel,
    nf: usize,
) -> FirCoefficients {
    let a = model.a();
    let b = model.b();
    let c = model.c();
    let mut taps = vec![0.0; nf];
    let mut row: RowDVector<f64> = c.clone();
    for (idx, tap) in taps.iter_mut().enumerate() {
        let i = idx + 1;
        if i > k {
            break;
        }
        if i >= 2 {
            // row <- row * Abar_{k-(i-1)}
            row = match past_gains.get(i - 2) {
                Some(gain) => {
                    let ra = &row * a;
                    let scale = (&ra * gain)[0];
                    &ra + c * scale
                }
                None => &row * a,
            };
        }
        *tap = (&row * b)[0];
    }
    FirCoefficients(taps)
}

/// `Phi_k = [dhat_{k-1} .. dhat_{k-nc}, z_k .. z_{k-nc}]`.
///
/// Both histories are newest first; `z_hist[0]` is `z_k`. Missing entries are zero.
pub fn build_regressor(dhat_hist: &[f64], z_hist: &[f64], nc: usize) -> RowDVector<f64> {
    let mut phi = RowDVector::zeros(2 * nc + 1);
    for (i, v) in dhat_hist.iter().take(nc).enumerate() {
        phi[i] = *v;
    }
    for (i, v) in z_hist.iter().take(nc + 1).enumerate() {
        phi[nc + i] = *v;
    }
    phi
}

/// Filtered regressor and filtered input estimate:
/// `Phi_f,k = sum_i H_i Phi_{k-i}`, `dhat_f,k = sum_i H_i dhat_{k-i}`.
///
/// `phi_hist` and `dhat_hist` are newest first starting at lag 1.
pub fn retrospective_variable(
    h: &FirCoefficients,
    phi_hist: &[RowDVector<f64>],
    dhat_hist: &[f64],
    l_theta: usize,
) -> (RowDVector<f64>, f64) {
    let mut phi_f = RowDVector::zeros(l_theta);
    let mut dhat_f = 0.0;
    for (i, tap) in h.taps().iter().enumerate() {
        if let Some(phi) = phi_hist.get(i) {
            phi_f += phi * *tap;
        }
        if let Some(d) = dhat_hist.get(i) {
            dhat_f += tap * d;
        }
    }
    (phi_f, dhat_f)
}

/// `dhat = Phi theta`.
pub fn estimate_input(theta: &DVector<f64>, phi: &RowDVector<f64>) -> f64 {
    phi.dot(&theta.transpose())
}

/// `Gamma = (Rtilde^-1 + M)^-1` written as `Rtilde (I + M Rtilde)^-1`, which
/// stays finite when `Rd = 0`.
fn gamma(m: &Matrix2<f64>, rz: f64, rd: f64) -> Matrix2<f64> {
    let r = Matrix2::new(rz, 0.0, 0.0, rd);
    let s = Matrix2::identity() + m * r;
    let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
    let adj = Matrix2::new(s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)]);
    r * adj / det
}

/// Coefficients and covariance of the recursive least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub theta: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl RlsState {
    /// `theta = theta0`, `P = R_theta^-1`.
    pub fn new(cfg: &RcieConfig) -> Result<Self> {
        let p = cfg
            .r_theta
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::config("R_theta is singular"))?;
        Ok(Self { theta: cfg.theta0.clone(), p: symmetrize(&p) })
    }

    /// One RLS step; afterwards `theta` minimizes the cumulative retrospective cost.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        phi: &RowDVector<f64>,
        phi_f: &RowDVector<f64>,
        dhat_f: f64,
        z: f64,
        cfg: &RcieConfig,
        step: usize,
    ) -> Result<()> {
        if !(z.is_finite() && dhat_f.is_finite())
            || phi.iter().chain(phi_f.iter()).any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite { what: "RLS input", step });
        }
        let l = self.theta.len();
        let mut phit = DMatrix::zeros(2, l);
        phit.row_mut(0).copy_from(phi_f);
        phit.row_mut(1).copy_from(phi);

        let g = &self.p * phit.transpose(); // l x 2
        let m_dyn = &phit * &g;
        let m = Matrix2::new(m_dyn[(0, 0)], m_dyn[(0, 1)], m_dyn[(1, 0)], m_dyn[(1, 1)]);
        let gam = gamma(&m, cfg.rz, cfg.rd);
        let gam = DMatrix::from_column_slice(2, 2, gam.as_slice());

        let ztilde = Vector2::new(z - dhat_f, 0.0);
        let pred = &phit * &self.theta;
        let resid = DVector::from_vec(vec![ztilde[0] + pred[0], ztilde[1] + pred[1]]);

        let g_gam = &g * &gam;
        let theta_next = &self.theta - &g_gam * resid;
        let p_next = symmetrize(&(&self.p - &g_gam * g.transpose()));

        if theta_next.iter().chain(p_next.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "RLS update", step });
        }
        if Cholesky::new(p_next.clone()).is_none() {
            let min_eigenvalue = min_eigenvalue(&p_next);
            let scale = p_next.diagonal().amax().max(1.0);
            if min_eigenvalue < -1e-10 * scale {
                return Err(Error::NotPositiveDefinite { what: "RLS covariance", step, min_eigenvalue });
            }
        }
        self.theta = theta_next;
        self.p = p_next;
        Ok(())
    }
}

/// Standalone RLS update on explicit data, returning the next state.
pub fn rls_update(
    state: &RlsState,
    phi: &RowDVector<f64>,
    phi_f: &RowDVector<f64>,
    dhat_f: f64,
    z: f64,
    cfg: &RcieConfig,
) -> Result<RlsState> {
    let mut next = state.clone();
    next.update(phi, phi_f, dhat_f, z, cfg, 0)?;
    Ok(next)
}

/// Per-step diagnostics of the input estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct RcieStep {
    pub dhat: f64,
    pub phi: RowDVector<f64>,
    pub phi_f: RowDVector<f64>,
    pub dhat_f: f64,
    pub fir: FirCoefficients,
}

/// Input-estimation subsystem with its signal histories. Histories are
/// zero-initialized.
#[derive(Debug, Clone)]
pub struct InputEstimator {
    cfg: RcieConfig,
    rls: RlsState,
    dhat_hist: VecDeque<f64>,
    z_hist: VecDeque<f64>,
    phi_hist: VecDeque<RowDVector<f64>>,
    gain_hist: VecDeque<DVector<f64>>,
    k: usize,
}

impl InputEstimator {
    pub fn new(cfg: RcieConfig) -> Result<Self> {
        cfg.validate()?;
        let rls = RlsState::new(&cfg)?;
        Ok(Self {
            rls,
            dhat_hist: VecDeque::with_capacity(cfg.nc.max(cfg.nf) + 1),
            z_hist: VecDeque::with_capacity(cfg.nc + 2),
            phi_hist: VecDeque::with_capacity(cfg.nf + 1),
            gain_hist: VecDeque::with_capacity(cfg.nf + 1),
            k: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &RcieConfig {
        &self.cfg
    }

    pub fn rls(&self) -> &RlsState {
        &self.rls
    }

    pub fn step_index(&self) -> usize {
        self.k
    }

    /// Processes innovation `z_k`: emits `dhat_k = Phi_k theta_k`, then refits
    /// theta. `gain` is the state-estimator gain `K_da,k` used at this step; it
    /// enters the FIR filter from step `k + 1` on.
    pub fn step(&mut self, z: f64, gain: &DVector<f64>, model: &IntegratorModel) -> Result<RcieStep> {
        let k = self.k;
        if !z.is_finite() {
            return Err(Error::NonFinite { what: "innovation", step: k });
        }
        push_capped(&mut self.z_hist, z, self.cfg.nc + 1);

        let dhat_hist = self.dhat_hist.make_contiguous();
        let phi = build_regressor(dhat_hist, self.z_hist.make_contiguous(), self.cfg.nc);
        let dhat = estimate_input(&self.rls.theta, &phi);

        let fir = fir_coefficients(k, self.gain_hist.make_contiguous(), model, self.cfg.nf);
        let (phi_f, dhat_f) = retrospective_variable(
            &fir,
            self.phi_hist.make_contiguous(),
            self.dhat_hist.make_contiguous(),
            self.cfg.l_theta(),
        );
        self.rls.update(&phi, &phi_f, dhat_f, z, &self.cfg, k)?;

        let dhat_cap = self.cfg.nc.max(self.cfg.nf);
        push_capped(&mut self.dhat_hist, dhat, dhat_cap);
        push_capped(&mut self.phi_hist, phi.clone(), self.cfg.nf);
        push_capped(&mut self.gain_hist, gain.clone(), self.cfg.nf);
        self.k += 1;

        Ok(RcieStep { dhat, phi, phi_f, dhat_f, fir })
    }
}

fn push_capped<T>(buf: &mut VecDeque<T>, value: T, cap: usize) {
    buf.push_front(value);
    buf.truncate(cap);
}
