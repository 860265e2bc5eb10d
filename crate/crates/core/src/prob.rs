//! Simplex arithmetic: softmax, entropies, both KL directions against the
//! uniform distribution, the background regularizers and their closed-form
//! binary gradients.
//!
//! All logarithms are natural (nats). Probabilities are clamped to
//! `[PROB_FLOOR, 1]` before any logarithm, and `0 · log 0` is taken as `0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the simplex constraint `Σ p = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex over `c ≥ 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Posterior(Vec<f64>);

impl Posterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "posterior needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!(
                "posterior component {p} outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "posterior sums to {total}, expected 1"
            )));
        }
        Ok(Posterior(probs))
    }

    /// The uniform distribution `q` over `classes` classes.
    pub fn uniform(classes: usize) -> Result<Self> {
        Posterior::new(vec![1.0 / classes as f64; classes])
    }

    /// The one-hot encoding of `label`.
    pub fn one_hot(label: usize, classes: usize) -> Result<Self> {
        if label >= classes {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; classes];
        probs[label] = 1.0;
        Posterior::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest component; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for Posterior {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Posterior::new(probs)
    }
}

impl From<Posterior> for Vec<f64> {
    fn from(p: Posterior) -> Self {
        p.0
    }
}

/// Background regularizer variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    /// Negative entropy `−H(p̂)`, equal to `KL(p̂‖q)` up to `log c`.
    Eem,
    /// Cross-entropy against uniform `H(q, p̂)`, equal to `KL(q‖p̂)` up to `log c`.
    Sem,
}

impl std::str::FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eem" => Ok(RegMode::Eem),
            "sem" => Ok(RegMode::Sem),
            other => Err(Error::Config(format!("unknown regularizer mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RegMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegMode::Eem => write!(f, "eem"),
            RegMode::Sem => write!(f, "sem"),
        }
    }
}

#[inline]
pub(crate) fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0).ln()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Posterior> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("softmax input is not finite".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Posterior(exps.into_iter().map(|e| e / total).collect()))
}

/// Shannon entropy `H(p) = −Σ p log p`.
pub fn entropy(p: &Posterior) -> f64 {
    -p.0
        .iter()
        .filter(|&&pl| pl > 0.0)
        .map(|&pl| pl * pl.ln())
        .sum::<f64>()
}

/// Cross-entropy `H(p, p̂) = −Σ p log p̂`.
pub fn cross_entropy(p: &Posterior, p_hat: &Posterior) -> f64 {
    -p.0
        .iter()
        .zip(&p_hat.0)
        .filter(|(&pl, _)| pl > 0.0)
        .map(|(&pl, &ql)| pl * clamped_ln(ql))
        .sum::<f64>()
}

/// `KL(p̂‖q) = Σ p̂ log(p̂ / q)`.
pub fn kl_forward(p_hat: &Posterior, q: &Posterior) -> f64 {
    p_hat
        .0
        .iter()
        .zip(&q.0)
        .filter(|(&pl, _)| pl > 0.0)
        .map(|(&pl, &ql)| pl * (pl.ln() - clamped_ln(ql)))
        .sum()
}

/// `KL(q‖p̂)` for uniform `q`, by direct summation.
pub fn kl_uniform_to(p_hat: &Posterior) -> f64 {
    let c = p_hat.classes() as f64;
    let q = 1.0 / c;
    p_hat.0.iter().map(|&pl| q * (q.ln() - clamped_ln(pl))).sum()
}

/// `H(q, p̂) = −(1/c) Σ log p̂` for uniform `q`; differs from `KL(q‖p̂)` by `log c`.
pub fn kl_reverse_vs_uniform(p_hat: &Posterior) -> f64 {
    let c = p_hat.classes() as f64;
    -p_hat.0.iter().map(|&pl| clamped_ln(pl)).sum::<f64>() / c
}

/// Background regularizer `R(p̂)`: `−H(p̂)` for EEM, `H(q, p̂)` for SEM.
pub fn regularizer(p_hat: &Posterior, mode: RegMode) -> f64 {
    match mode {
        RegMode::Eem => -entropy(p_hat),
        RegMode::Sem => kl_reverse_vs_uniform(p_hat),
    }
}

fn check_open_unit(p1: f64) -> Result<()> {
    if p1 > 0.0 && p1 < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "binary probability {p1} must lie in (0, 1)"
        )))
    }
}

/// `d(−H)/dp₁ = log(p₁ / (1 − p₁))` for a two-class posterior `(p₁, 1 − p₁)`.
pub fn grad_neg_entropy_binary(p1: f64) -> Result<f64> {
    check_open_unit(p1)?;
    Ok((p1 / (1.0 - p1)).ln())
}

/// `d H(q,·)/dp₁ = −½ (1/p₁ − 1/(1 − p₁))` for a two-class posterior.
pub fn grad_uniform_ce_binary(p1: f64) -> Result<f64> {
    check_open_unit(p1)?;
    Ok(-0.5 * (1.0 / p1 - 1.0 / (1.0 - p1)))
}
