//! Effective number of samples and class-balanced weights.
//!
//! For a class whose data lives in a region of volume `N` and a sampling
//! process where each new unit-volume sample either falls entirely inside the
//! already-covered region or entirely outside it, the expected covered volume
//! after `n` samples is
//!
//! ```text
//! E_n = (1 - beta^n) / (1 - beta),    beta = (N - 1) / N
//! ```
//!
//! The class-balanced weight of a class is proportional to `1 / E_n` and the
//! weights are rescaled so that they sum to the number of classes.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(domain(format!("beta must lie in [0, 1), got {beta}")));
    }
    Ok(())
}

/// The overlap parameter `beta` together with the prototype volume `N`
/// it implies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffNumParams {
    beta: f64,
}

impl EffNumParams {
    pub fn new(beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self { beta })
    }

    pub fn from_prototypes(n_prototypes: f64) -> Result<Self> {
        Self::new(beta_from_prototypes(n_prototypes)?)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `N = 1 / (1 - beta)`.
    pub fn n_total_volume(&self) -> f64 {
        1.0 / (1.0 - self.beta)
    }

    pub fn effective_number(&self, n: u64) -> Result<f64> {
        effective_number(self.beta, n)
    }
}

/// Expected covered volume after `n` samples.
///
/// `1 - beta^n` is evaluated as `-expm1(n * ln(beta))`, which keeps full
/// relative precision for `beta` close to one where the naive subtraction
/// cancels. The expression is valid on the whole domain so there is no
/// switchover point; `beta == 0` and `n == 1` short-circuit to exactly 1.
pub fn effective_number(beta: f64, n: u64) -> Result<f64> {
    check_beta(beta)?;
    if n == 0 {
        return Err(domain("number of samples must be at least 1"));
    }
    if beta == 0.0 || n == 1 {
        return Ok(1.0);
    }
    let one_minus_beta = 1.0 - beta;
    let covered = -(n as f64 * beta.ln()).exp_m1();
    let e = covered / one_minus_beta;
    // Rounding may push the quotient an ulp past its analytic bounds.
    let upper = (n as f64).min(1.0 / one_minus_beta);
    Ok(e.clamp(1.0, upper))
}

/// Same quantity via the recurrence `E_k = 1 + beta * E_{k-1}`, `E_1 = 1`.
pub fn effective_number_recursive(beta: f64, n: u64) -> Result<f64> {
    check_beta(beta)?;
    if n == 0 {
        return Err(domain("number of samples must be at least 1"));
    }
    let mut e = 1.0;
    for _ in 1..n {
        e = 1.0 + beta * e;
    }
    Ok(e)
}

/// `beta = (N - 1) / N`.
pub fn beta_from_prototypes(n_prototypes: f64) -> Result<f64> {
    if !n_prototypes.is_finite() || n_prototypes < 1.0 {
        return Err(domain(format!(
            "number of prototypes must be a finite value >= 1, got {n_prototypes}"
        )));
    }
    Ok((n_prototypes - 1.0) / n_prototypes)
}

/// `N = 1 / (1 - beta)`.
pub fn prototypes_from_beta(beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(1.0 / (1.0 - beta))
}

/// Per-class training sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct ClassCounts(Vec<u64>);

impl ClassCounts {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(domain("class counts must cover at least one class"));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(domain("at least one class must have a sample"));
        }
        Ok(Self(counts))
    }

    pub fn n_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> Option<u64> {
        self.0.get(class).copied()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// Indices of the `k` classes with the fewest samples, smallest first.
    /// Ties go to the lower class index.
    pub fn smallest_classes(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by_key(|&i| (self.0[i], i));
        order.truncate(k);
        order
    }
}

impl TryFrom<Vec<u64>> for ClassCounts {
    type Error = Error;

    fn try_from(counts: Vec<u64>) -> Result<Self> {
        Self::new(counts)
    }
}

impl From<ClassCounts> for Vec<u64> {
    fn from(counts: ClassCounts) -> Self {
        counts.0
    }
}

/// Normalized class-balance weights; they sum to the number of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn uniform(n_classes: usize) -> Self {
        Self(vec![1.0; n_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.0.get(class).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weights `alpha_i ∝ (1 - beta) / (1 - beta^{n_i})`, rescaled to sum to `C`.
///
/// `beta == 0` and equal counts both return exact ones so that the
/// class-balanced loss reduces bit-for-bit to the plain loss.
pub fn class_balanced_weights(counts: &ClassCounts, beta: f64) -> Result<WeightVector> {
    check_beta(beta)?;
    if let Some(class) = counts.as_slice().iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let c = counts.n_classes();
    let first = counts.as_slice()[0];
    if beta == 0.0 || counts.as_slice().iter().all(|&n| n == first) {
        return Ok(WeightVector::uniform(c));
    }
    let raw = counts
        .as_slice()
        .iter()
        .map(|&n| effective_number(beta, n).map(|e| 1.0 / e))
        .collect::<Result<Vec<_>>>()?;
    let scale = c as f64 / raw.iter().sum::<f64>();
    Ok(WeightVector(raw.into_iter().map(|r| r * scale).collect()))
}
