//! Differentiable models with per-example gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::keystream::Seed;

use super::LearnerError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Sigmoid output for two classes, softmax otherwise.
    LogisticRegression { features: usize, classes: usize },
    /// Fully connected tanh layers with a softmax output.
    Mlp {
        features: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
}

impl ModelKind {
    pub fn features(&self) -> usize {
        match self {
            Self::LogisticRegression { features, .. } | Self::Mlp { features, .. } => *features,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::LogisticRegression { classes, .. } | Self::Mlp { classes, .. } => *classes,
        }
    }

    /// Layer widths from input to output.
    fn widths(&self) -> Vec<usize> {
        match self {
            Self::LogisticRegression { features, classes } => {
                vec![*features, if *classes == 2 { 1 } else { *classes }]
            }
            Self::Mlp {
                features,
                hidden,
                classes,
            } => std::iter::once(*features)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(*classes))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::InvalidConfig(m.to_string()));
        if self.features() == 0 {
            return bad("model needs at least one feature");
        }
        if self.classes() < 2 {
            return bad("model needs at least two classes");
        }
        if let Self::Mlp { hidden, .. } = self {
            if hidden.iter().any(|&h| h == 0) {
                return bad("hidden layers must be non-empty");
            }
        }
        Ok(())
    }
}

/// Fixed random map `x ↦ tanh(Wx + c)`, standing in for pretrained and
/// frozen lower layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeatures {
    input: usize,
    output: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl FrozenFeatures {
    pub fn generate(input: usize, output: usize, seed: &Seed) -> Self {
        let mut rng = seed.rng();
        let scale = 1.0 / (input as f64).sqrt();
        let weights = (0..input * output)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = (0..output).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            input,
            output,
            weights,
            bias,
        }
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input, "frozen feature input dimension");
        self.weights
            .chunks_exact(self.input)
            .zip(&self.bias)
            .map(|(row, c)| (dot(row, x) + c).tanh())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub theta: Vec<f64>,
    pub frozen: Option<FrozenFeatures>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Model {
    /// Zero weights for logistic regression; `N(0, 1/fan_in)` weights and
    /// zero biases for the MLP.
    pub fn init(kind: ModelKind, frozen: Option<FrozenFeatures>, seed: &Seed) -> Result<Self, LearnerError> {
        kind.validate()?;
        if let Some(f) = &frozen {
            if f.output() != kind.features() {
                return Err(LearnerError::InvalidConfig(format!(
                    "frozen features emit {} values but the model expects {}",
                    f.output(),
                    kind.features()
                )));
            }
        }
        let mut theta = vec![0.0; kind.param_count()];
        if let ModelKind::Mlp { .. } = kind {
            let mut rng = seed.rng();
            let mut offset = 0;
            for w in kind.widths().windows(2) {
                let scale = 1.0 / (w[0] as f64).sqrt();
                for t in &mut theta[offset..offset + w[0] * w[1]] {
                    *t = scale * rng.sample::<f64, _>(StandardNormal);
                }
                offset += w[1] * (w[0] + 1);
            }
        }
        Ok(Self { kind, theta, frozen })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Raw input to the trainable part's input.
    pub fn featurize(&self, x: &[f64]) -> Vec<f64> {
        match &self.frozen {
            Some(f) => f.apply(x),
            None => x.to_vec(),
        }
    }

    /// Output scores on a featurized input: one logit for binary logistic
    /// regression, one per class otherwise.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).pop().expect("at least one layer")
    }

    pub fn predict(&self, x: &[f64]) -> u32 {
        let out = self.logits(x);
        if out.len() == 1 {
            return (out[0] > 0.0) as u32;
        }
        out.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0 as u32
    }

    pub fn loss(&self, x: &[f64], y: u32) -> f64 {
        Self::loss_from_logits(&self.logits(x), y)
    }

    fn loss_from_logits(out: &[f64], y: u32) -> f64 {
        if out.len() == 1 {
            softplus(out[0]) - y as f64 * out[0]
        } else {
            log_sum_exp(out) - out[y as usize]
        }
    }

    // Activations of every layer; the last entry holds the raw output.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let widths = self.kind.widths();
        let layers = widths.len() - 1;
        let mut acts = Vec::with_capacity(widths.len());
        acts.push(x.to_vec());
        let mut offset = 0;
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.theta[offset..offset + fan_in * fan_out];
            let bias = &self.theta[offset + fan_in * fan_out..offset + fan_out * (fan_in + 1)];
            let input = acts.last().unwrap();
            let mut z: Vec<f64> = weights
                .chunks_exact(fan_in)
                .zip(bias)
                .map(|(row, b)| dot(row, input) + b)
                .collect();
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
            offset += fan_out * (fan_in + 1);
        }
        acts
    }

    /// Loss at one featurized example; `grad` receives `∇θ` of that loss.
    pub fn loss_and_grad(&self, x: &[f64], y: u32, grad: &mut [f64]) -> f64 {
        assert_eq!(grad.len(), self.dim());
        let widths = self.kind.widths();
        let acts = self.forward(x);
        let out = acts.last().unwrap();
        let loss = Self::loss_from_logits(out, y);

        // error signal at the output
        let mut delta: Vec<f64> = if out.len() == 1 {
            let p = 1.0 / (1.0 + (-out[0]).exp());
            vec![p - y as f64]
        } else {
            let lse = log_sum_exp(out);
            out.iter()
                .enumerate()
                .map(|(c, &v)| (v - lse).exp() - if c == y as usize { 1.0 } else { 0.0 })
                .collect()
        };

        let mut offset = self.dim();
        for l in (0..widths.len() - 1).rev() {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            offset -= fan_out * (fan_in + 1);
            let input = &acts[l];
            let (gw, gb) = grad[offset..offset + fan_out * (fan_in + 1)].split_at_mut(fan_in * fan_out);
            for ((row, b), d) in gw.chunks_exact_mut(fan_in).zip(gb.iter_mut()).zip(&delta) {
                for (g, a) in row.iter_mut().zip(input) {
                    *g = d * a;
                }
                *b = *d;
            }
            if l > 0 {
                let weights = &self.theta[offset..offset + fan_in * fan_out];
                let mut back = vec![0.0; fan_in];
                for (row, d) in weights.chunks_exact(fan_in).zip(&delta) {
                    for (bk, w) in back.iter_mut().zip(row) {
                        *bk += w * d;
                    }
                }
                // tanh'(z) = 1 - tanh(z)^2
                delta = back.iter().zip(input).map(|(b, a)| b * (1.0 - a * a)).collect();
            }
        }
        loss
    }
}
