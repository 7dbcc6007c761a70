use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::losses::{LossFamily, LossOutput, LossSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    #[default]
    Linear,
    /// One ReLU hidden layer.
    Mlp { hidden: usize },
}

/// Dense layer `out = W x + b` with `W` stored row-major as `n_out x n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.n_in).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub layers: Vec<Layer>,
}

/// Bias that makes every sigmoid output start at the class prior `1 / C`:
/// `-ln((1 - pi) / pi)`.
pub fn prior_bias(n_classes: usize) -> f64 {
    let prior = 1.0 / n_classes as f64;
    -((1.0 - prior) / prior).ln()
}

/// Builds a model for `dim` inputs and `n_classes` outputs.
///
/// Weights are uniform in `[-a, a]`, keyed by `seed`: hidden layers use
/// He scaling `a = sqrt(6 / fan_in)`, the output layer Glorot scaling
/// `a = sqrt(6 / (fan_in + fan_out))`. Hidden biases start at zero. The
/// output bias is zero for softmax and [`prior_bias`] for sigmoid and focal.
pub fn init_model(
    architecture: Architecture,
    n_classes: usize,
    dim: usize,
    family: LossFamily,
    seed: u64,
) -> Result<ModelParams> {
    if n_classes < 2 {
        return Err(domain("a classifier needs at least two classes"));
    }
    if dim == 0 {
        return Err(domain("input dimension must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |layer: &mut Layer, bound: f64| {
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..=bound);
        }
    };

    let mut layers = Vec::new();
    let mut fan_in = dim;
    if let Architecture::Mlp { hidden } = architecture {
        if hidden == 0 {
            return Err(domain("hidden layer size must be >= 1"));
        }
        let mut h = Layer::zeros(dim, hidden);
        uniform(&mut h, (6.0 / dim as f64).sqrt());
        layers.push(h);
        fan_in = hidden;
    }
    let mut out = Layer::zeros(fan_in, n_classes);
    uniform(&mut out, (6.0 / (fan_in + n_classes) as f64).sqrt());
    if family.is_sigmoid_based() {
        out.bias.fill(prior_bias(n_classes));
    }
    layers.push(out);
    Ok(ModelParams {
        architecture,
        layers,
    })
}

impl ModelParams {
    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").n_out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            architecture: self.architecture,
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.layers.last().expect("at least one layer").bias
    }

    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.n_out];
            let input: &[f64] = if k == 0 { x } else { &acts[k - 1] };
            layer.forward(input, &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).pop().expect("at least one layer")
    }

    /// Loss of one sample and its gradient, accumulated into `grads` after
    /// scaling by `scale`.
    pub fn accumulate_gradient(
        &self,
        x: &[f64],
        y: usize,
        loss: &LossSpec,
        scale: f64,
        grads: &mut ModelParams,
    ) -> Result<LossOutput> {
        if x.len() != self.n_inputs() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.n_inputs()
            )));
        }
        let acts = self.activations(x);
        let out = loss.evaluate(acts.last().expect("logits"), y)?;

        let mut delta: Vec<f64> = out.grad.iter().map(|g| g * scale).collect();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input: &[f64] = if k == 0 { x } else { &acts[k - 1] };
            let g = &mut grads.layers[k];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (w, &v) in row.iter_mut().zip(input) {
                    *w += d * v;
                }
            }
            if k > 0 {
                // back through W, then the ReLU of the layer below
                let mut below = vec![0.0; layer.n_in];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                    for (b, &w) in below.iter_mut().zip(row) {
                        *b += d * w;
                    }
                }
                for (b, &a) in below.iter_mut().zip(&acts[k - 1]) {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = below;
            }
        }
        Ok(out)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&mut Vec<f64>, bool)> {
        let last = self.layers.len() - 1;
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(move |(k, l)| [(&mut l.weights, false), (&mut l.bias, k == last)])
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = (&Vec<f64>, bool)> {
        let last = self.layers.len() - 1;
        self.layers
            .iter()
            .enumerate()
            .flat_map(move |(k, l)| [(&l.weights, false), (&l.bias, k == last)])
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|(p, _)| p.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_bias_examples() {
        // -ln(999) = -6.90675477864855...
        assert!((prior_bias(1000) + 6.906_754_778_648_554).abs() < 1e-12);
        assert_eq!(prior_bias(2), 0.0);
    }

    #[test]
    fn output_bias_by_family() {
        let m = init_model(Architecture::Linear, 1000, 4, LossFamily::Sigmoid, 0).unwrap();
        assert!(m
            .output_bias()
            .iter()
            .all(|&b| (b + 999f64.ln()).abs() < 1e-12));
        let m = init_model(Architecture::Linear, 2, 4, LossFamily::Focal, 0).unwrap();
        assert!(m.output_bias().iter().all(|&b| b == 0.0));
        for c in [2, 10, 57] {
            let m = init_model(
                Architecture::Mlp { hidden: 8 },
                c,
                3,
                LossFamily::Softmax,
                1,
            )
            .unwrap();
            assert!(m.output_bias().iter().all(|&b| b == 0.0));
            assert_eq!(m.n_classes(), c);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_model(
            Architecture::Mlp { hidden: 16 },
            5,
            7,
            LossFamily::Softmax,
            3,
        )
        .unwrap();
        assert_eq!(
            a,
            init_model(
                Architecture::Mlp { hidden: 16 },
                5,
                7,
                LossFamily::Softmax,
                3
            )
            .unwrap()
        );
        assert_ne!(
            a,
            init_model(
                Architecture::Mlp { hidden: 16 },
                5,
                7,
                LossFamily::Softmax,
                4
            )
            .unwrap()
        );
        let he = (6.0f64 / 7.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= he));
        let glorot = (6.0f64 / 21.0).sqrt();
        assert!(a.layers[1].weights.iter().all(|w| w.abs() <= glorot));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(init_model(Architecture::Linear, 1, 4, LossFamily::Softmax, 0).is_err());
        assert!(init_model(Architecture::Linear, 3, 0, LossFamily::Softmax, 0).is_err());
        assert!(init_model(
            Architecture::Mlp { hidden: 0 },
            3,
            2,
            LossFamily::Softmax,
            0
        )
        .is_err());
    }

    fn flat(m: &ModelParams) -> Vec<f64> {
        m.params().flat_map(|(p, _)| p.clone()).collect()
    }

    fn set(m: &mut ModelParams, idx: usize, v: f64) {
        let mut k = idx;
        for (p, _) in m.params_mut() {
            if k < p.len() {
                p[k] = v;
                return;
            }
            k -= p.len();
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let x = [0.7, -1.3, 0.25];
        for family in LossFamily::ALL {
            let spec = LossSpec::new(family, 1.5).unwrap();
            let model = init_model(Architecture::Mlp { hidden: 6 }, 4, 3, family, 9).unwrap();
            let mut grads = model.zeros_like();
            model
                .accumulate_gradient(&x, 2, &spec, 1.0, &mut grads)
                .unwrap();
            let analytic = flat(&grads);
            let theta = flat(&model);
            let h = 1e-6;
            for i in 0..theta.len() {
                let mut plus = model.clone();
                set(&mut plus, i, theta[i] + h);
                let mut minus = model.clone();
                set(&mut minus, i, theta[i] - h);
                let fp = spec.evaluate(&plus.logits(&x), 2).unwrap().value;
                let fm = spec.evaluate(&minus.logits(&x), 2).unwrap().value;
                let numeric = (fp - fm) / (2.0 * h);
                assert!(
                    (numeric - analytic[i]).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "{family} param {i}: {numeric} vs {}",
                    analytic[i]
                );
            }
        }
    }
}
