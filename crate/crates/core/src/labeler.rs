//! Logistic malignancy model.
//!
//! Features are encoded as
//!
//! | index | feature                    |
//! |-------|----------------------------|
//! | 0     | age, standardised          |
//! | 1     | size (mm), standardised    |
//! | 2     | sex = M                    |
//! | 3     | margin = Lobulated         |
//! | 4     | margin = Spiculated        |
//! | 5     | location = UpperLobe       |
//! | 6     | location = MiddleLobe      |
//! | 7     | type = PartSolid           |
//! | 8     | type = GroundGlass         |
//!
//! Reference levels (all indicators zero) are F, Smooth, LowerLobe, Solid.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lesion::{Margin, NoduleType};
use crate::metrics;
use crate::phantom::Sex;
use crate::volume::VoxelVolume;

pub const N_FEATURES: usize = 9;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "age",
    "size_mm",
    "sex=M",
    "margin=Lobulated",
    "margin=Spiculated",
    "location=UpperLobe",
    "location=MiddleLobe",
    "type=PartSolid",
    "type=GroundGlass",
];

pub const DEFAULT_THRESHOLD: f64 = 0.5;

const MAX_ITERATIONS: usize = 100;
const GRAD_TOL: f64 = 1e-6;
const ROUNDING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    UpperLobe,
    MiddleLobe,
    LowerLobe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoduleFeatures {
    pub age: f64,
    pub sex: Sex,
    pub size: f64,
    pub margin: Margin,
    pub location: Location,
    pub nodule_type: NoduleType,
}

impl NoduleFeatures {
    pub fn validate(&self) -> Result<()> {
        if !(self.age > 0.0 && self.age.is_finite()) || !(self.size > 0.0 && self.size.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "features need age > 0 and size > 0 (age {}, size {})",
                self.age, self.size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticModel {
    /// Names of the encoded columns, in weight order.
    pub encoding: Vec<String>,
    pub age: Standardization,
    pub size: Standardization,
    pub weights: Vec<f64>,
    pub intercept: f64,
    #[serde(default)]
    pub note: String,
}

impl Default for LogisticModel {
    /// Illustrative coefficients with clinically plausible signs (larger,
    /// older, spiculated, upper lobe → higher risk). They are not fitted to
    /// any cohort.
    fn default() -> Self {
        LogisticModel {
            encoding: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            age: Standardization { mean: 62.0, std: 8.0 },
            size: Standardization { mean: 10.0, std: 5.0 },
            weights: vec![0.35, 1.4, 0.2, 0.5, 1.2, 0.45, 0.1, 0.3, -0.4],
            intercept: -1.2,
            note: "illustrative default coefficients, not fitted to clinical data".into(),
        }
    }
}

impl LogisticModel {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != N_FEATURES || self.encoding.len() != N_FEATURES {
            return Err(Error::InvalidParameter(format!(
                "model needs {N_FEATURES} weights and encoding names, got {} and {}",
                self.weights.len(),
                self.encoding.len()
            )));
        }
        if let Some((i, _)) = self
            .encoding
            .iter()
            .zip(FEATURE_NAMES)
            .enumerate()
            .find(|(_, (a, b))| a.as_str() != *b)
        {
            return Err(Error::InvalidParameter(format!(
                "encoding column {i} is {:?}, expected {:?}",
                self.encoding[i], FEATURE_NAMES[i]
            )));
        }
        for (name, s) in [("age", self.age), ("size", self.size)] {
            if !(s.std > 0.0 && s.mean.is_finite() && s.std.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} std must be > 0, got {}", s.std)));
            }
        }
        if !self.intercept.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("model coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: LogisticModel = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn linear(&self, x: &[f64; N_FEATURES]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
    }
}

pub fn encode(f: &NoduleFeatures, m: &LogisticModel) -> [f64; N_FEATURES] {
    let ind = |b: bool| b as u8 as f64;
    [
        (f.age - m.age.mean) / m.age.std,
        (f.size - m.size.mean) / m.size.std,
        ind(f.sex == Sex::M),
        ind(f.margin == Margin::Lobulated),
        ind(f.margin == Margin::Spiculated),
        ind(f.location == Location::UpperLobe),
        ind(f.location == Location::MiddleLobe),
        ind(f.nodule_type == NoduleType::PartSolid),
        ind(f.nodule_type == NoduleType::GroundGlass),
    ]
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn predict_probability(f: &NoduleFeatures, m: &LogisticModel) -> f64 {
    sigmoid(m.linear(&encode(f, m)))
}

/// Softplus `ln(1 + e^z)` without overflow.
fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: LogisticModel,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Penalised negative log-likelihood after each accepted step, starting
    /// with the zero model.
    pub objective: Vec<f64>,
}

/// Penalised negative log-likelihood; the intercept is not penalised.
fn objective(x: &[[f64; N_FEATURES]], y: &[bool], beta: &[f64; N_FEATURES + 1], l2: f64) -> f64 {
    let nll: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let z = beta[0] + (0..N_FEATURES).map(|j| beta[j + 1] * xi[j]).sum::<f64>();
            log1p_exp(z) - if yi { z } else { 0.0 }
        })
        .sum();
    nll + 0.5 * l2 * beta[1..].iter().map(|b| b * b).sum::<f64>()
}

/// Fit by Newton–Raphson (IRLS) on the L2-penalised negative log-likelihood,
/// from zero, with step halving whenever a full step does not decrease the
/// objective (up to the rounding error of summing it). Continuous features are standardised with the sample mean and
/// std before fitting.
pub fn fit(data: &[(NoduleFeatures, bool)], l2: f64) -> Result<FitReport> {
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::InvalidParameter(format!("l2 must be >= 0, got {l2}")));
    }
    let n_pos = data.iter().filter(|d| d.1).count();
    if n_pos == 0 || n_pos == data.len() {
        return Err(Error::DegenerateData(format!(
            "fitting needs both outcomes ({n_pos} of {} positive)",
            data.len()
        )));
    }
    for (f, _) in data {
        f.validate()?;
    }
    let stat = |get: fn(&NoduleFeatures) -> f64| {
        let v: Vec<f64> = data.iter().map(|(f, _)| get(f)).collect();
        let (mean, std) = metrics::mean_std(&v);
        Standardization {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    };
    let mut model = LogisticModel {
        age: stat(|f| f.age),
        size: stat(|f| f.size),
        weights: vec![0.0; N_FEATURES],
        intercept: 0.0,
        note: format!("fitted by IRLS on {} examples, l2 = {l2}", data.len()),
        ..LogisticModel::default()
    };
    let x: Vec<[f64; N_FEATURES]> = data.iter().map(|(f, _)| encode(f, &model)).collect();
    let y: Vec<bool> = data.iter().map(|d| d.1).collect();

    const P: usize = N_FEATURES + 1;
    let mut beta = [0.0; P];
    let mut obj = objective(&x, &y, &beta, l2);
    let mut history = vec![obj];
    for iter in 0..MAX_ITERATIONS {
        let mut grad = [0.0; P];
        let mut hess = [[0.0; P]; P];
        for (xi, &yi) in x.iter().zip(&y) {
            let mut row = [1.0; P];
            row[1..].copy_from_slice(xi);
            let z: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = sigmoid(z);
            let r = p - yi as u8 as f64;
            let w = p * (1.0 - p);
            for a in 0..P {
                grad[a] += r * row[a];
                for b in 0..=a {
                    hess[a][b] += w * row[a] * row[b];
                }
            }
        }
        for a in 1..P {
            grad[a] += l2 * beta[a];
            hess[a][a] += l2;
        }
        for a in 0..P {
            for b in a + 1..P {
                hess[a][b] = hess[b][a];
            }
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < GRAD_TOL {
            model.intercept = beta[0];
            model.weights = beta[1..].to_vec();
            return Ok(FitReport {
                model,
                iterations: iter,
                grad_norm,
                objective: history,
            });
        }
        let step = solve_spd(hess, grad).ok_or_else(|| {
            Error::DegenerateData("Hessian is singular; add l2 regularisation".into())
        })?;
        let mut t = 1.0;
        loop {
            let mut trial = beta;
            for a in 0..P {
                trial[a] -= t * step[a];
            }
            let trial_obj = objective(&x, &y, &trial, l2);
            // near the optimum the decrease drops below the rounding of the sum
            if trial_obj <= obj + ROUNDING * obj.abs() {
                beta = trial;
                obj = trial_obj;
                history.push(obj);
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return Err(Error::NotConverged {
                    iterations: iter + 1,
                    grad_norm,
                });
            }
        }
    }
    Err(Error::NotConverged {
        iterations: MAX_ITERATIONS,
        grad_norm: f64::NAN,
    })
}

/// Cholesky solve of `a x = b` for a symmetric positive-definite `a`.
fn solve_spd<const P: usize>(a: [[f64; P]; P], b: [f64; P]) -> Option<[f64; P]> {
    let mut l = [[0.0; P]; P];
    for i in 0..P {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 1e-300) {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = [0.0; P];
    for i in 0..P {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; P];
    for i in (0..P).rev() {
        x[i] = (y[i] - (i + 1..P).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(Label::Benign),
            "malignant" => Ok(Label::Malignant),
            _ => Err(Error::InvalidParameter(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMode {
    Deterministic,
    Bernoulli,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" | "deterministic" => Ok(LabelMode::Deterministic),
            "bern" | "bernoulli" => Ok(LabelMode::Bernoulli),
            _ => Err(Error::InvalidParameter(format!("unknown label mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledNodule {
    pub features: NoduleFeatures,
    pub probability: f64,
    pub label: Label,
    pub threshold_used: f64,
}

/// Label from a probability. Deterministic mode thresholds; Bernoulli mode
/// draws the threshold itself as `1 − u`, `u ~ U[0,1)`, so the nodule is
/// malignant with probability `p` and the label still equals
/// `p ≥ threshold_used`.
pub fn label_probability<R: Rng + ?Sized>(p: f64, threshold: f64, rng: &mut R, mode: LabelMode) -> (Label, f64) {
    let threshold = match mode {
        LabelMode::Deterministic => threshold,
        LabelMode::Bernoulli => 1.0 - rng.random::<f64>(),
    };
    let label = if p >= threshold { Label::Malignant } else { Label::Benign };
    (label, threshold)
}

pub fn assign_label<R: Rng + ?Sized>(
    features: &NoduleFeatures,
    model: &LogisticModel,
    threshold: f64,
    rng: &mut R,
    mode: LabelMode,
) -> LabeledNodule {
    let probability = predict_probability(features, model);
    let (label, threshold_used) = label_probability(probability, threshold, rng, mode);
    LabeledNodule {
        features: *features,
        probability,
        label,
        threshold_used,
    }
}

pub fn evaluate_auc(model: &LogisticModel, data: &[(NoduleFeatures, bool)]) -> Result<f64> {
    let scores: Vec<(f64, bool)> = data
        .iter()
        .map(|(f, y)| (predict_probability(f, model), *y))
        .collect();
    metrics::auc(&scores)
}

/// Lobe from the lesion centre's position within the z-extent of the lung
/// mask: top third upper, middle third middle, bottom third lower. Larger z
/// is superior.
pub fn location_from_z(lung: &VoxelVolume, center_z_mm: f64) -> Location {
    let [nx, ny, nz] = lung.dims();
    let slab = nx * ny;
    let occupied = |k: usize| lung.values()[k * slab..(k + 1) * slab].iter().any(|v| *v != 0.0);
    let (lo, hi) = match ((0..nz).find(|&k| occupied(k)), (0..nz).rev().find(|&k| occupied(k))) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => (0, nz.saturating_sub(1)),
    };
    let z0 = lung.origin()[2] + (lo as f64 - 0.5) * lung.spacing()[2];
    let z1 = lung.origin()[2] + (hi as f64 + 0.5) * lung.spacing()[2];
    let t = (center_z_mm - z0) / (z1 - z0);
    if t >= 2.0 / 3.0 {
        Location::UpperLobe
    } else if t >= 1.0 / 3.0 {
        Location::MiddleLobe
    } else {
        Location::LowerLobe
    }
}
