//! Test signals with exact derivatives, seeded measurement noise, and
//! ingestion of recorded traces.
//!
//! Built-in sinusoids and chirps are defined per step (phase in radians per
//! step). The sampling time only enters when converting to derivatives with
//! respect to time, so `Ts = 1` gives `d/dk`.
//!
//! Noise is produced by a counter-based SplitMix64 stream fed through the
//! Box-Muller transform, so a seed fixes the sequence independently of any
//! RNG crate's defaults:
//!
//! - word `i` is `mix(seed + (i + 1) * 0x9E3779B97F4A7C15)` (wrapping), where
//!   `mix` is the SplitMix64 finalizer with multipliers `0xBF58476D1CE4E5B9`
//!   and `0x94D049BB133111EB` and shifts 30, 27, 31;
//! - normal pair `j` uses words `2j` and `2j + 1`:
//!   `u1 = ((w_2j >> 11) + 1) / 2^53`, `u2 = (w_2j+1 >> 11) / 2^53`,
//!   `v_2j = r cos(2 pi u2)`, `v_2j+1 = r sin(2 pi u2)`, `r = sqrt(-2 ln u1)`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::snr_to_noise_gain;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Word `index` of the counter-based stream for `seed`.
pub fn noise_word(seed: u64, index: u64) -> u64 {
    splitmix_finalize(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// First `len` standard normal samples for `seed`.
pub fn standard_normal(seed: u64, len: usize) -> Vec<f64> {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let mut out = Vec::with_capacity(len + 1);
    let mut pair = 0u64;
    while out.len() < len {
        let u1 = ((noise_word(seed, 2 * pair) >> 11) + 1) as f64 * SCALE;
        let u2 = (noise_word(seed, 2 * pair + 1) >> 11) as f64 * SCALE;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        out.push(r * c);
        out.push(r * s);
        pair += 1;
    }
    out.truncate(len);
    out
}

/// One smooth transition `amplitude * (1 + tanh((t - center) / width)) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Waveform {
    /// `amplitude * sin(omega * k + phase)`.
    Sine {
        omega: f64,
        amplitude: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `amplitude * sin(omega0 * k + rate * k^2 / 2)`.
    Chirp { omega0: f64, rate: f64, amplitude: f64 },
    /// `sum_i coeffs[i] * t^i` with `t = k Ts`.
    Polynomial { coeffs: Vec<f64> },
    /// Relative lateral position during lane changes: an offset plus a sum
    /// of smooth steps in `t = k Ts`. Synthetic stand-in for recorded
    /// vehicle traces.
    Maneuver { offset: f64, transitions: Vec<Transition> },
}

impl Waveform {
    /// Value and first two time derivatives at (possibly fractional) step `kf`.
    fn eval(&self, kf: f64, ts: f64) -> [f64; 3] {
        match self {
            Waveform::Sine { omega, amplitude, phase } => {
                let w = omega / ts;
                let ph = omega * kf + phase;
                [
                    amplitude * ph.sin(),
                    amplitude * w * (ph + FRAC_PI_2).sin(),
                    amplitude * w * w * (ph + 2.0 * FRAC_PI_2).sin(),
                ]
            }
            Waveform::Chirp { omega0, rate, amplitude } => {
                let ph = omega0 * kf + 0.5 * rate * kf * kf;
                let dph = (omega0 + rate * kf) / ts;
                let ddph = rate / (ts * ts);
                let (s, c) = ph.sin_cos();
                [
                    amplitude * s,
                    amplitude * dph * c,
                    amplitude * (ddph * c - dph * dph * s),
                ]
            }
            Waveform::Polynomial { coeffs } => {
                let t = kf * ts;
                let mut out = [0.0; 3];
                // Horner for the value and both derivatives
                for c in coeffs.iter().rev() {
                    out[2] = out[2] * t + 2.0 * out[1];
                    out[1] = out[1] * t + out[0];
                    out[0] = out[0] * t + c;
                }
                out
            }
            Waveform::Maneuver { offset, transitions } => {
                let t = kf * ts;
                let mut out = [*offset, 0.0, 0.0];
                for tr in transitions {
                    let th = ((t - tr.center) / tr.width).tanh();
                    let sech2 = 1.0 - th * th;
                    out[0] += tr.amplitude * 0.5 * (1.0 + th);
                    out[1] += tr.amplitude * 0.5 * sech2 / tr.width;
                    out[2] += -tr.amplitude * th * sech2 / (tr.width * tr.width);
                }
                out
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Waveform::Sine { omega, amplitude, phase } => {
                omega.is_finite() && amplitude.is_finite() && phase.is_finite()
            }
            Waveform::Chirp { omega0, rate, amplitude } => {
                omega0.is_finite() && rate.is_finite() && amplitude.is_finite()
            }
            Waveform::Polynomial { coeffs } => {
                !coeffs.is_empty() && coeffs.iter().all(|c| c.is_finite())
            }
            Waveform::Maneuver { offset, transitions } => {
                offset.is_finite()
                    && transitions.iter().all(|t| {
                        t.amplitude.is_finite() && t.center.is_finite() && t.width > 0.0
                    })
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid waveform parameters: {self:?}")))
        }
    }
}

/// Measurement-noise level: either a target SNR or an explicit gain `D2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    SnrDb(f64),
    D2(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub waveform: Waveform,
    /// Sampling time in seconds.
    pub ts: f64,
    pub noise: NoiseLevel,
    pub seed: u64,
    /// Number of samples.
    pub kf: usize,
}

/// A sampled noisy signal and the exact derivative of its clean part.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSignal {
    pub t: Vec<f64>,
    pub clean: Vec<f64>,
    pub y: Vec<f64>,
    pub d_true: Vec<f64>,
    pub d2: f64,
}

/// Samples `spec` and the `n_deriv`-th derivative of its clean waveform.
pub fn generate(spec: &SignalSpec, n_deriv: usize) -> Result<GeneratedSignal> {
    if !(1..=2).contains(&n_deriv) {
        return Err(Error::config(format!(
            "built-in waveforms provide derivatives of order 1 or 2, not {n_deriv}"
        )));
    }
    if spec.kf < 1 {
        return Err(Error::config("signal horizon kf must be >= 1"));
    }
    if !(spec.ts.is_finite() && spec.ts > 0.0) {
        return Err(Error::config("signal sampling time must be > 0"));
    }
    spec.waveform.validate()?;

    let mut clean = Vec::with_capacity(spec.kf);
    let mut d_true = Vec::with_capacity(spec.kf);
    for k in 0..spec.kf {
        let v = spec.waveform.eval(k as f64, spec.ts);
        clean.push(v[0]);
        d_true.push(v[n_deriv]);
    }
    let d2 = match spec.noise {
        NoiseLevel::SnrDb(db) => snr_to_noise_gain(db, &clean)?,
        NoiseLevel::D2(d2) if d2.is_finite() && d2 >= 0.0 => d2,
        NoiseLevel::D2(d2) => return Err(Error::config(format!("noise gain must be >= 0, got {d2}"))),
    };
    let v = standard_normal(spec.seed, spec.kf);
    let y = clean.iter().zip(&v).map(|(c, n)| c + d2 * n).collect();
    let t = (0..spec.kf).map(|k| k as f64 * spec.ts).collect();
    Ok(GeneratedSignal { t, clean, y, d_true, d2 })
}

/// Column names of a measurement trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSchema {
    pub k: String,
    pub t: String,
    pub y: String,
    pub d_true: String,
}

impl Default for TraceSchema {
    fn default() -> Self {
        Self { k: "k".into(), t: "t".into(), y: "y".into(), d_true: "d_true".into() }
    }
}

/// A time step more than 1.5 sampling times long.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapWarning {
    /// Row index (0-based, excluding header) at which the gap ends.
    pub row: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub k: Vec<i64>,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub d_true: Option<Vec<f64>>,
    /// Median time step.
    pub ts: f64,
    pub gaps: Vec<GapWarning>,
}

/// Reads a UTF-8 CSV trace with header `k,t,y[,d_true]` (names per `schema`).
pub fn load_trace(path: &Path, schema: &TraceSchema) -> Result<Trace> {
    let fail = |message: String| Error::Trace { path: path.to_path_buf(), message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fail(e.to_string()))?;
    let headers = reader.headers().map_err(|e| fail(e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let k_col = column(&schema.k).ok_or_else(|| fail(format!("missing column {:?}", schema.k)))?;
    let t_col = column(&schema.t).ok_or_else(|| fail(format!("missing column {:?}", schema.t)))?;
    let y_col = column(&schema.y).ok_or_else(|| fail(format!("missing column {:?}", schema.y)))?;
    let d_col = column(&schema.d_true);

    let mut trace = Trace {
        k: Vec::new(),
        t: Vec::new(),
        y: Vec::new(),
        d_true: d_col.map(|_| Vec::new()),
        ts: 0.0,
        gaps: Vec::new(),
    };
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fail(e.to_string()))?;
        let field = |col: usize, name: &str| -> Result<&str> {
            record.get(col).ok_or_else(|| fail(format!("row {row}: missing field {name:?}")))
        };
        let real = |col: usize, name: &str| -> Result<f64> {
            let raw = field(col, name)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(format!("row {row}: field {name:?} is not a finite number: {raw:?}")))
        };
        let raw_k = field(k_col, &schema.k)?;
        let k = raw_k
            .parse::<i64>()
            .map_err(|_| fail(format!("row {row}: field {:?} is not an integer: {raw_k:?}", schema.k)))?;
        trace.k.push(k);
        trace.t.push(real(t_col, &schema.t)?);
        trace.y.push(real(y_col, &schema.y)?);
        if let (Some(col), Some(d)) = (d_col, trace.d_true.as_mut()) {
            d.push(real(col, &schema.d_true)?);
        }
    }

    if trace.t.is_empty() {
        return Err(fail("trace has no data rows".into()));
    }
    if trace.t.len() < 2 {
        return Err(fail("trace needs at least two rows to infer the sampling time".into()));
    }
    let mut deltas: Vec<f64> = trace.t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(row) = deltas.iter().position(|dt| *dt <= 0.0) {
        return Err(fail(format!("time column is not strictly increasing at row {}", row + 1)));
    }
    let raw_deltas = deltas.clone();
    deltas.sort_by(f64::total_cmp);
    let mid = deltas.len() / 2;
    trace.ts = if deltas.len() % 2 == 1 { deltas[mid] } else { 0.5 * (deltas[mid - 1] + deltas[mid]) };
    trace.gaps = raw_deltas
        .iter()
        .enumerate()
        .filter(|(_, dt)| **dt > 1.5 * trace.ts)
        .map(|(i, dt)| GapWarning { row: i + 1, dt: *dt })
        .collect();
    Ok(trace)
}
