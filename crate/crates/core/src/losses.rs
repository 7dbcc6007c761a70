//! Softmax cross-entropy, sigmoid cross-entropy and focal loss on a single
//! logit vector, with analytic gradients with respect to the logits, and the
//! class-balanced reweighting that can be layered on any of them.
//!
//! Sigmoid-based losses are written in terms of the sign-flipped logits
//! `z^t` (`z_i` for the target class, `-z_i` otherwise), so every class
//! contributes a term of the form `f(z^t_i)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::effnum::{class_balanced_weights, ClassCounts, WeightVector};
use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    #[serde(alias = "softmax_ce")]
    Softmax,
    #[serde(alias = "sigmoid_ce")]
    Sigmoid,
    Focal,
}

impl LossFamily {
    pub const ALL: [LossFamily; 3] = [LossFamily::Softmax, LossFamily::Sigmoid, LossFamily::Focal];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossFamily::Softmax => "softmax",
            LossFamily::Sigmoid => "sigmoid",
            LossFamily::Focal => "focal",
        }
    }

    /// Families that score classes independently through a sigmoid.
    pub fn is_sigmoid_based(&self) -> bool {
        matches!(self, LossFamily::Sigmoid | LossFamily::Focal)
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" | "softmax_ce" => Ok(LossFamily::Softmax),
            "sigmoid" | "sigmoid_ce" => Ok(LossFamily::Sigmoid),
            "focal" => Ok(LossFamily::Focal),
            other => Err(domain(format!("unknown loss family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Derivative of `value` with respect to each logit.
    pub grad: Vec<f64>,
}

impl LossOutput {
    fn scaled(mut self, factor: f64) -> Self {
        self.value *= factor;
        self.grad.iter_mut().for_each(|g| *g *= factor);
        self
    }
}

fn check_inputs(z: &[f64], y: usize) -> Result<()> {
    if y >= z.len() {
        return Err(Error::ClassIndex {
            index: y,
            n_classes: z.len(),
        });
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(domain(format!("logit {i} is not finite: {}", z[i])));
    }
    Ok(())
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(sigmoid(x)) = -softplus(-x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max subtraction. Entries may underflow to zero for logit gaps
/// beyond ~745 but never overflow.
pub fn softmax_probs(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// `ln Σ exp(z_j) - z_y`, evaluated as `(m - z_y) + ln_1p(Σ_{j≠top} exp(z_j - m))`
/// so that confident predictions keep full relative precision.
pub fn softmax_ce(z: &[f64], y: usize) -> Result<LossOutput> {
    check_inputs(z, y)?;
    let top = argmax(z);
    let max = z[top];
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    // the top entry contributes exactly 1; the rest go through ln_1p
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, e)| e)
        .sum();
    let sum = 1.0 + rest;
    let others: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, e)| e)
        .sum();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[y] = -others / sum;
    Ok(LossOutput {
        value: (max - z[y]) + rest.ln_1p(),
        grad,
    })
}

/// `z^t_i = z_i` for `i == y`, `-z_i` otherwise.
pub fn transform_zt(z: &[f64], y: usize) -> Result<Vec<f64>> {
    if y >= z.len() {
        return Err(Error::ClassIndex {
            index: y,
            n_classes: z.len(),
        });
    }
    Ok(z.iter()
        .enumerate()
        .map(|(i, &v)| if i == y { v } else { -v })
        .collect())
}

/// Sum over classes of a per-class term `f(z^t_i)` whose derivative with
/// respect to `z^t_i` is returned alongside; the chain rule through the sign
/// flip is applied here.
fn sum_over_zt(z: &[f64], y: usize, term: impl Fn(f64) -> (f64, f64)) -> LossOutput {
    let mut value = 0.0;
    let grad = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (x, sign) = if i == y { (v, 1.0) } else { (-v, -1.0) };
            let (f, df) = term(x);
            value += f;
            sign * df
        })
        .collect();
    LossOutput { value, grad }
}

/// `-Σ_i ln sigmoid(z^t_i)`.
pub fn sigmoid_ce(z: &[f64], y: usize) -> Result<LossOutput> {
    check_inputs(z, y)?;
    Ok(sum_over_zt(z, y, |x| (softplus(-x), -sigmoid(-x))))
}

/// Per-class focal term `-(1 - p)^γ ln p` with `p = sigmoid(x)` and its
/// derivative `γ (1-p)^γ p ln p - (1-p)^{γ+1}`.
///
/// `ln p` and `1 - p` come from `-softplus(-x)` and `sigmoid(-x)`, so neither
/// saturates before the other and no clamping of `p` is needed. With `γ = 0`
/// the expressions reduce to the sigmoid cross-entropy term bit for bit.
#[inline]
fn focal_term(x: f64, gamma: f64) -> (f64, f64) {
    let log_p = log_sigmoid(x);
    let q = sigmoid(-x);
    let p = sigmoid(x);
    let modulator = q.powf(gamma);
    let value = -(modulator * log_p);
    let dvalue = gamma * modulator * p * log_p - modulator * q;
    (value, dvalue)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(domain(format!(
            "gamma must be finite and >= 0, got {gamma}"
        )));
    }
    Ok(())
}

/// `-Σ_i (1 - p^t_i)^γ ln p^t_i` with `p^t_i = sigmoid(z^t_i)`.
pub fn focal(z: &[f64], y: usize, gamma: f64) -> Result<LossOutput> {
    check_gamma(gamma)?;
    check_inputs(z, y)?;
    Ok(sum_over_zt(z, y, |x| focal_term(x, gamma)))
}

/// Focal loss with an explicit target weight `alpha_t` folded into every
/// per-class term.
pub fn alpha_balanced_focal(z: &[f64], y: usize, gamma: f64, alpha_t: f64) -> Result<LossOutput> {
    check_gamma(gamma)?;
    check_inputs(z, y)?;
    Ok(sum_over_zt(z, y, |x| {
        let (f, df) = focal_term(x, gamma);
        (alpha_t * f, alpha_t * df)
    }))
}

/// Scales a loss and its gradient by the normalized class weight of `y`.
pub fn class_balanced(
    loss: LossOutput,
    y: usize,
    beta: f64,
    counts: &ClassCounts,
) -> Result<LossOutput> {
    let weights = class_balanced_weights(counts, beta)?;
    let alpha = weights.get(y).ok_or(Error::ClassIndex {
        index: y,
        n_classes: counts.n_classes(),
    })?;
    Ok(loss.scaled(alpha))
}

/// Checks that class-balanced focal loss equals alpha-balanced focal loss with
/// `alpha_t` set to the normalized class weight, in value and gradient, to
/// relative 1e-12.
pub fn cb_focal_alpha_equivalence_check(
    z: &[f64],
    y: usize,
    gamma: f64,
    beta: f64,
    counts: &ClassCounts,
) -> Result<bool> {
    if counts.n_classes() != z.len() {
        return Err(Error::Shape(format!(
            "{} logits but {} class counts",
            z.len(),
            counts.n_classes()
        )));
    }
    let weights = class_balanced_weights(counts, beta)?;
    let alpha_t = weights.as_slice()[check_index(y, z.len())?];
    let cb = class_balanced(focal(z, y, gamma)?, y, beta, counts)?;
    let ab = alpha_balanced_focal(z, y, gamma, alpha_t)?;

    let close =
        |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    Ok(close(cb.value, ab.value) && cb.grad.iter().zip(&ab.grad).all(|(&a, &b)| close(a, b)))
}

fn check_index(y: usize, n_classes: usize) -> Result<usize> {
    if y < n_classes {
        Ok(y)
    } else {
        Err(Error::ClassIndex {
            index: y,
            n_classes,
        })
    }
}

/// Class-balance term: global `beta` plus the training counts it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBalance {
    beta: f64,
    counts: ClassCounts,
    weights: WeightVector,
}

impl ClassBalance {
    pub fn new(beta: f64, counts: ClassCounts) -> Result<Self> {
        let weights = class_balanced_weights(&counts, beta)?;
        Ok(Self {
            beta,
            counts,
            weights,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn counts(&self) -> &ClassCounts {
        &self.counts
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }
}

/// A loss family, its focusing parameter and an optional class-balance term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    family: LossFamily,
    gamma: f64,
    class_balance: Option<ClassBalance>,
}

impl LossSpec {
    /// `gamma` is only kept for focal loss; other families store 0.
    pub fn new(family: LossFamily, gamma: f64) -> Result<Self> {
        let gamma = if family == LossFamily::Focal {
            check_gamma(gamma)?;
            gamma
        } else {
            0.0
        };
        Ok(Self {
            family,
            gamma,
            class_balance: None,
        })
    }

    pub fn with_class_balance(mut self, balance: ClassBalance) -> Self {
        self.class_balance = Some(balance);
        self
    }

    pub fn family(&self) -> LossFamily {
        self.family
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn class_balance(&self) -> Option<&ClassBalance> {
        self.class_balance.as_ref()
    }

    /// Multiplier applied to samples of class `y`.
    pub fn weight(&self, y: usize) -> f64 {
        self.class_balance
            .as_ref()
            .and_then(|cb| cb.weights.get(y))
            .unwrap_or(1.0)
    }

    pub fn evaluate(&self, z: &[f64], y: usize) -> Result<LossOutput> {
        if let Some(cb) = &self.class_balance {
            if cb.counts.n_classes() != z.len() {
                return Err(Error::Shape(format!(
                    "{} logits but class balance built for {} classes",
                    z.len(),
                    cb.counts.n_classes()
                )));
            }
        }
        let base = match self.family {
            LossFamily::Softmax => softmax_ce(z, y)?,
            LossFamily::Sigmoid => sigmoid_ce(z, y)?,
            LossFamily::Focal => focal(z, y, self.gamma)?,
        };
        Ok(match &self.class_balance {
            Some(cb) => base.scaled(cb.weights.as_slice()[y]),
            None => base,
        })
    }
}
