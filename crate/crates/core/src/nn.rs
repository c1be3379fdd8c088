//! Small dense networks with hand-written reverse mode, Adam, and a
//! central-difference gradient checker.
//!
//! Batches are column-major: an input batch is an `in_dim × batch` matrix whose
//! columns are samples.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
    #[serde(rename = "none")]
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine map followed by an activation. `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|w| *w *= k);
        self.biases.iter_mut().for_each(|b| *b *= k);
    }
}

impl Mlp {
    /// Validates layer shapes: consecutive widths agree and the last layer is linear.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Configuration("an MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    format!("layer {} input width {}", i + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape(
                    format!("layer {i} bias length {}", l.out_dim()),
                    l.bias.len(),
                ));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::Configuration(
                "the final layer must have no activation".into(),
            ));
        }
        Ok(Mlp { layers })
    }

    /// Random network with LeCun-normal weights and zero biases.
    pub fn new(widths: &[usize], hidden: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let normal = Normal::new(0.0, (1.0 / w[0] as f64).sqrt()).unwrap();
                let act = if i + 2 == widths.len() {
                    Activation::Identity
                } else {
                    hidden
                };
                Dense {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| normal.sample(rng)),
                    bias: DVector::zeros(w[1]),
                    activation: act,
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), flat.len()));
        }
        let mut off = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: self.layers.iter().map(|l| DVector::zeros(l.out_dim())).collect(),
        }
    }

    /// Forward pass over a batch (`in_dim × batch`).
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache)> {
        if x.nrows() != self.input_dim() {
            return Err(Error::shape(
                format!("{} input rows", self.input_dim()),
                x.nrows(),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for l in &self.layers {
            let mut z = &l.weight * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            let out = z.map(|v| l.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        Ok((
            a,
            MlpCache {
                inputs,
                pre_activations: pre,
            },
        ))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::shape(
                format!("{} input rows", self.input_dim()),
                x.nrows(),
            ));
        }
        let mut a = x.clone();
        for l in &self.layers {
            let mut z = &l.weight * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            z.apply(|v| *v = l.activation.apply(*v));
            a = z;
        }
        Ok(a)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.predict(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(out.as_slice().to_vec())
    }

    /// Reverse pass. Returns parameter gradients and the gradient with respect to
    /// the input batch.
    pub fn backward(&self, cache: &MlpCache, grad_out: &DMatrix<f64>) -> Result<(MlpGrads, DMatrix<f64>)> {
        let batch = cache.inputs.first().map_or(0, |x| x.ncols());
        if grad_out.nrows() != self.output_dim() || grad_out.ncols() != batch {
            return Err(Error::shape(
                format!("{}x{}", self.output_dim(), batch),
                format!("{}x{}", grad_out.nrows(), grad_out.ncols()),
            ));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut g = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation != Activation::Identity {
                g.zip_apply(&cache.pre_activations[i], |gv, z| {
                    *gv *= l.activation.derivative(z)
                });
            }
            weights.push(&g * cache.inputs[i].transpose());
            biases.push(g.column_sum());
            g = l.weight.tr_mul(&g);
        }
        weights.reverse();
        biases.reverse();
        Ok((MlpGrads { weights, biases }, g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Adam {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&[f64]]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Adam::new(config, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                format!("{} parameter buffers", self.first.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::shape(
                    format!("buffer {i} of length {}", self.first[i].len()),
                    format!("{} / {}", p.len(), g.len()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Coordinates compared per check at most.
pub const GRAD_CHECK_MAX_COORDS: usize = 512;

/// Gradient magnitude below which errors are measured absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `f` at `params`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-6)`. When there
/// are more than [`GRAD_CHECK_MAX_COORDS`] coordinates, a random subset of that
/// size is checked.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::shape(params.len(), analytic.len()));
    }
    let idx: Vec<usize> = if params.len() <= GRAD_CHECK_MAX_COORDS {
        (0..params.len()).collect()
    } else {
        let mut v = sample(rng, params.len(), GRAD_CHECK_MAX_COORDS).into_vec();
        v.sort_unstable();
        v
    };
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: idx.first().copied().unwrap_or(0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: idx.len(),
    };
    for &i in &idx {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if !(rel <= report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = Mlp::new(&[3, 5, 2], Activation::Silu, &mut rng());
        for l in net.layers_mut() {
            l.weight.fill(0.0);
        }
        net.layers_mut()[1].bias = DVector::from_vec(vec![0.5, -1.5]);
        assert_eq!(net.forward_one(&[1.0, -2.0, 3.0]).unwrap(), vec![0.5, -1.5]);
        assert_eq!(net.forward_one(&[0.0, 0.0, 7.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::from_layers(vec![Dense {
            weight: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        assert_eq!(net.forward_one(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn relu_clips_before_next_affine() {
        let net = Mlp::from_layers(vec![
            Dense {
                weight: DMatrix::identity(2, 2),
                bias: DVector::zeros(2),
                activation: Activation::Relu,
            },
            Dense {
                weight: DMatrix::identity(2, 2),
                bias: DVector::zeros(2),
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        assert_eq!(net.forward_one(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn shape_validation() {
        let bad = Mlp::from_layers(vec![
            Dense {
                weight: DMatrix::zeros(4, 3),
                bias: DVector::zeros(4),
                activation: Activation::Silu,
            },
            Dense {
                weight: DMatrix::zeros(1, 5),
                bias: DVector::zeros(1),
                activation: Activation::Identity,
            },
        ]);
        assert!(matches!(bad, Err(Error::ShapeMismatch { .. })));
        let nonlinear_last = Mlp::from_layers(vec![Dense {
            weight: DMatrix::zeros(1, 1),
            bias: DVector::zeros(1),
            activation: Activation::Relu,
        }]);
        assert!(nonlinear_last.is_err());
        let net = Mlp::new(&[3, 2], Activation::Silu, &mut rng());
        assert!(net.forward(&DMatrix::zeros(4, 1)).is_err());
        let (_, cache) = net.forward(&DMatrix::zeros(3, 2)).unwrap();
        assert!(net.backward(&cache, &DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn linear_input_grad_is_transpose_product() {
        let net = Mlp::new(&[4, 3], Activation::Identity, &mut rng());
        let x = DMatrix::from_column_slice(4, 1, &[0.1, 0.2, -0.3, 0.4]);
        let (_, cache) = net.forward(&x).unwrap();
        let go = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let (_, gx) = net.backward(&cache, &go).unwrap();
        let expected = net.layers()[0].weight.transpose() * &go;
        assert!((gx - expected).abs().max() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = Mlp::new(&[3, 8, 2], Activation::Silu, &mut rng());
        let x = DMatrix::from_fn(3, 5, |i, j| (i as f64 - j as f64) * 0.3);
        let (_, cache) = net.forward(&x).unwrap();
        let (g, gx) = net.backward(&cache, &DMatrix::zeros(2, 5)).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    /// Loss used for gradient checks: `Σ c ⊙ f(x)` with fixed random `c`.
    fn check_net(widths: &[usize], act: Activation, tol: f64, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(widths, act, &mut r);
        for l in net.layers_mut() {
            l.bias = DVector::from_fn(l.bias.len(), |_, _| r.random_range(-0.5..0.5));
        }
        let batch = 4;
        let x = DMatrix::from_fn(widths[0], batch, |_, _| r.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(*widths.last().unwrap(), batch, |_, _| r.random_range(-1.0..1.0));
        let (_, cache) = net.forward(&x).unwrap();
        let (g, gx) = net.backward(&cache, &c).unwrap();

        let base = net.clone();
        let loss_params = |p: &[f64]| {
            let mut n = base.clone();
            n.set_flat_params(p).unwrap();
            n.predict(&x).unwrap().component_mul(&c).sum()
        };
        let rep = grad_check(loss_params, &net.flat_params(), &g.flatten(), 1e-5, &mut r).unwrap();
        assert!(rep.passed(tol), "params: {rep:?}");

        let loss_input = |p: &[f64]| {
            let xi = DMatrix::from_column_slice(widths[0], batch, p);
            base.predict(&xi).unwrap().component_mul(&c).sum()
        };
        let rep = grad_check(loss_input, x.as_slice(), gx.as_slice(), 1e-5, &mut r).unwrap();
        assert!(rep.passed(tol), "input: {rep:?}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            check_net(&[3, 6, 5, 2], Activation::Silu, 1e-6, seed);
        }
        check_net(&[5, 4], Activation::Identity, 1e-6, 9);
    }

    #[test]
    fn grad_check_on_linear_map_is_tight() {
        let a = [1.5, -2.0, 0.25];
        let f = |p: &[f64]| p.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>();
        let rep = grad_check(f, &[0.3, 0.1, -0.7], &a, 1e-5, &mut rng()).unwrap();
        assert!(rep.max_rel_error < 1e-9, "{rep:?}");
        assert_eq!(rep.checked, 3);
    }

    #[test]
    fn grad_check_reports_wrong_gradient() {
        let f = |p: &[f64]| p[0] * p[0] + p[1];
        let rep = grad_check(f, &[1.0, 1.0], &[2.0, 3.0], 1e-5, &mut rng()).unwrap();
        assert_eq!(rep.worst_index, 1);
        assert!(rep.max_rel_error > 0.5);
    }

    #[test]
    fn grad_check_subsamples_large_inputs() {
        let n = 2000;
        let f = |p: &[f64]| p.iter().sum::<f64>();
        let rep = grad_check(f, &vec![0.0; n], &vec![1.0; n], 1e-5, &mut rng()).unwrap();
        assert_eq!(rep.checked, GRAD_CHECK_MAX_COORDS);
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut p = vec![1.0, -2.0];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[2]);
        adam.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, 1.0, 1.0];
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &[3]);
        adam.step(&mut [&mut p], &[&[3.0, -0.2, 1e-3]]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
        assert!((p[2] - 0.99).abs() < 1e-7);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut x = vec![1.0, 1.0];
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &[2]);
        let mut prev = f64::INFINITY;
        for _ in 0..15 {
            let loss = x[0] * x[0] + x[1] * x[1];
            assert!(loss < prev);
            prev = loss;
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            adam.step(&mut [&mut x], &[&g]).unwrap();
        }
        assert!(prev < 0.5);
    }

    #[test]
    fn adam_rejects_mismatched_buffers() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[2]);
        let mut p = vec![0.0; 3];
        assert!(adam.step(&mut [&mut p], &[&[0.0; 3]]).is_err());
    }
}
