//! DDPM over flattened ray bundles: schedule, closed-form noising, the
//! SDF-conditioned denoiser, training, and reverse sampling.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{canonicalize, ray_endpoint, Pixel, RawRay, Ray, RayBundle, Vec3, RAY_DIM};
use crate::nn::{Activation, Adam, AdamConfig, Mlp, MlpCache, MlpGrads};
pub use crate::field::{SdfField, ZeroField};
use crate::scene::{Feature, Scene, FEATURE_DIM};

pub type Row = [f64; RAY_DIM];

pub const TIME_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

/// Linear β schedule from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_steps == 0 {
        return Err(Error::Configuration("diffusion needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Configuration(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps + 1);
    alpha_bars.push(1.0);
    for a in &alphas {
        alpha_bars.push(alpha_bars.last().unwrap() * a);
    }
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t = 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (t == 0 && !allow_zero) {
            return Err(Error::InputDomain(format!(
                "timestep {t} outside [{}, {}]",
                u8::from(!allow_zero),
                self.steps()
            )));
        }
        Ok(())
    }
}

fn check_rows(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(format!("{expected}x{RAY_DIM}"), format!("{got}x{RAY_DIM}")));
    }
    Ok(())
}

/// Closed-form marginal `R_t = √ᾱ_t R_0 + √(1 − ᾱ_t) ε`. `t = 0` returns `R_0`.
pub fn forward_noise(r0: &[Row], t: usize, eps: &[Row], schedule: &DiffusionSchedule) -> Result<Vec<Row>> {
    schedule.check_t(t, true)?;
    check_rows(r0.len(), eps.len())?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(r0
        .iter()
        .zip(eps)
        .map(|(x, e)| std::array::from_fn(|k| a * x[k] + b * e[k]))
        .collect())
}

/// One step of the Markov kernel `q(R_t | R_{t−1}) = N(√α_t R_{t−1}, β_t I)`.
pub fn noise_step(prev: &[Row], t: usize, schedule: &DiffusionSchedule, rng: &mut impl Rng) -> Result<Vec<Row>> {
    schedule.check_t(t, false)?;
    let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    Ok(prev
        .iter()
        .map(|x| std::array::from_fn(|k| a * x[k] + b * Distribution::<f64>::sample(&StandardNormal, rng)))
        .collect())
}

pub fn standard_normal_rows(n: usize, rng: &mut impl Rng) -> Vec<Row> {
    (0..n)
        .map(|_| std::array::from_fn(|_| StandardNormal.sample(rng)))
        .collect()
}

/// SDF value at each noisy ray's endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub sdf: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Canonicalizes each row and queries the field at its endpoint. Rows whose
/// direction vanishes are flagged and queried at the origin.
pub fn condition(field: &dyn SdfField, rows: &[Row]) -> Conditioning {
    let mut degenerate = Vec::with_capacity(rows.len());
    let points: Vec<Vec3> = rows
        .iter()
        .map(|r| match canonicalize(&RawRay::from(*r)) {
            Ok(ray) => {
                degenerate.push(false);
                ray_endpoint(&ray)
            }
            Err(_) => {
                degenerate.push(true);
                Vec3::zeros()
            }
        })
        .collect();
    Conditioning {
        sdf: field.sdf_batch(&points),
        degenerate,
    }
}

/// Sinusoidal embedding of the timestep with frequencies `1000^{-k/4}`.
pub fn time_embedding(t: usize) -> [f64; TIME_DIM] {
    let mut out = [0.0; TIME_DIM];
    for k in 0..TIME_DIM / 2 {
        let w = (-(1000f64.ln()) * k as f64 / (TIME_DIM / 2) as f64).exp();
        out[2 * k] = (t as f64 * w).sin();
        out[2 * k + 1] = (t as f64 * w).cos();
    }
    out
}

/// Everything the denoiser sees for one scene at one timestep. Rays are grouped
/// by image through `image`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    pub rows: Vec<Row>,
    pub sdf: Vec<f64>,
    pub features: Vec<Feature>,
    pub image: Vec<usize>,
    pub n_images: usize,
}

impl DenoiserInput {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.rows.len();
        if self.sdf.len() != n || self.features.len() != n || self.image.len() != n {
            return Err(Error::shape(
                format!("{n} rows of sdf/features/image ids"),
                format!("{}/{}/{}", self.sdf.len(), self.features.len(), self.image.len()),
            ));
        }
        if let Some(&bad) = self.image.iter().find(|&&i| i >= self.n_images) {
            return Err(Error::InputDomain(format!(
                "image id {bad} but only {} images",
                self.n_images
            )));
        }
        if n == 0 {
            return Err(Error::InputDomain("denoiser input has no rays".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub trunk_width: usize,
    pub head_width: usize,
}

impl Default for DenoiserShape {
    fn default() -> Self {
        DenoiserShape {
            trunk_width: 128,
            head_width: 256,
        }
    }
}

/// Input width of the per-ray trunk: ray, time embedding, SDF value, feature.
pub const TRUNK_INPUT: usize = RAY_DIM + TIME_DIM + 1 + FEATURE_DIM;

/// Noise predictor. A per-ray trunk produces hidden states; the head sees each
/// ray's own state together with the mean state of its image and of the whole
/// scene, and outputs ε̂.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    trunk: Mlp,
    head: Mlp,
}

#[derive(Debug, Clone)]
pub struct DenoiserCache {
    trunk: MlpCache,
    head: MlpCache,
    image: Vec<usize>,
    counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserGrads {
    pub trunk: MlpGrads,
    pub head: MlpGrads,
}

impl DenoiserGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.trunk.flatten();
        out.extend(self.head.flatten());
        out
    }

    pub fn add_assign(&mut self, other: &DenoiserGrads) {
        self.trunk.add_assign(&other.trunk);
        self.head.add_assign(&other.head);
    }

    pub fn scale(&mut self, k: f64) {
        self.trunk.scale(k);
        self.head.scale(k);
    }
}

impl DenoiserNet {
    /// Random trunk; the head's last layer starts at zero so that ε̂ = 0 initially.
    pub fn new(shape: DenoiserShape, rng: &mut impl Rng) -> Self {
        let w = shape.trunk_width;
        let trunk = Mlp::new(&[TRUNK_INPUT, w, w], Activation::Silu, rng);
        let head_widths: Vec<usize> = if shape.head_width == 0 {
            vec![3 * w, RAY_DIM]
        } else {
            vec![3 * w, shape.head_width, RAY_DIM]
        };
        let mut head = Mlp::new(&head_widths, Activation::Silu, rng);
        let last = head.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        DenoiserNet { trunk, head }
    }

    pub fn from_parts(trunk: Mlp, head: Mlp) -> Result<Self> {
        if trunk.input_dim() != TRUNK_INPUT {
            return Err(Error::shape(format!("trunk input {TRUNK_INPUT}"), trunk.input_dim()));
        }
        if head.input_dim() != 3 * trunk.output_dim() || head.output_dim() != RAY_DIM {
            return Err(Error::shape(
                format!("head {} -> {RAY_DIM}", 3 * trunk.output_dim()),
                format!("{} -> {}", head.input_dim(), head.output_dim()),
            ));
        }
        Ok(DenoiserNet { trunk, head })
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    pub fn head_mut(&mut self) -> &mut Mlp {
        &mut self.head
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.head.num_params()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.trunk.flat_params();
        out.extend(self.head.flat_params());
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), flat.len()));
        }
        let n = self.trunk.num_params();
        self.trunk.set_flat_params(&flat[..n])?;
        self.head.set_flat_params(&flat[n..])
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.params_mut();
        out.extend(self.head.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = self.trunk.params();
        out.extend(self.head.params());
        out
    }

    pub fn zero_grads(&self) -> DenoiserGrads {
        DenoiserGrads {
            trunk: self.trunk.zero_grads(),
            head: self.head.zero_grads(),
        }
    }

    fn trunk_input(input: &DenoiserInput, t: usize) -> DMatrix<f64> {
        let emb = time_embedding(t);
        let mut x = DMatrix::zeros(TRUNK_INPUT, input.len());
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let vals = input.rows[j]
                .iter()
                .chain(&emb)
                .chain(std::iter::once(&input.sdf[j]))
                .chain(&input.features[j]);
            for (dst, v) in col.iter_mut().zip(vals) {
                *dst = *v;
            }
        }
        x
    }

    /// Predicted noise, one `7`-row per ray.
    pub fn forward(&self, input: &DenoiserInput, t: usize) -> Result<(Vec<Row>, DenoiserCache)> {
        input.validate()?;
        let x = Self::trunk_input(input, t);
        let (h, trunk_cache) = self.trunk.forward(&x)?;
        let w = h.nrows();
        let n = h.ncols();
        let mut counts = vec![0usize; input.n_images];
        let mut image_sum = DMatrix::<f64>::zeros(w, input.n_images);
        for (j, &g) in input.image.iter().enumerate() {
            counts[g] += 1;
            let mut dst = image_sum.column_mut(g);
            dst += h.column(j);
        }
        for (g, &c) in counts.iter().enumerate() {
            if c > 0 {
                let mut col = image_sum.column_mut(g);
                col /= c as f64;
            }
        }
        let scene_mean = h.column_mean();
        let mut z = DMatrix::zeros(3 * w, n);
        for j in 0..n {
            z.view_mut((0, j), (w, 1)).copy_from(&h.column(j));
            z.view_mut((w, j), (w, 1)).copy_from(&image_sum.column(input.image[j]));
            z.view_mut((2 * w, j), (w, 1)).copy_from(&scene_mean);
        }
        let (out, head_cache) = self.head.forward(&z)?;
        let rows = out
            .column_iter()
            .map(|c| std::array::from_fn(|k| c[k]))
            .collect();
        Ok((
            rows,
            DenoiserCache {
                trunk: trunk_cache,
                head: head_cache,
                image: input.image.clone(),
                counts,
            },
        ))
    }

    pub fn backward(&self, cache: &DenoiserCache, grad_out: &[Row]) -> Result<DenoiserGrads> {
        let n = cache.image.len();
        check_rows(n, grad_out.len())?;
        let g = DMatrix::from_fn(RAY_DIM, n, |k, j| grad_out[j][k]);
        let (head, gz) = self.head.backward(&cache.head, &g)?;
        let w = gz.nrows() / 3;
        let mut image_grad = DMatrix::<f64>::zeros(w, cache.counts.len());
        for (j, &img) in cache.image.iter().enumerate() {
            let mut dst = image_grad.column_mut(img);
            dst += gz.view((w, j), (w, 1));
        }
        for (img, &c) in cache.counts.iter().enumerate() {
            if c > 0 {
                let mut col = image_grad.column_mut(img);
                col /= c as f64;
            }
        }
        let scene_grad = gz.rows(2 * w, w).column_sum() / n as f64;
        let mut gh = gz.rows(0, w).into_owned();
        for (j, mut col) in gh.column_iter_mut().enumerate() {
            col += image_grad.column(cache.image[j]);
            col += &scene_grad;
        }
        let (trunk, _) = self.trunk.backward(&cache.trunk, &gh)?;
        Ok(DenoiserGrads { trunk, head })
    }
}

/// Mean squared error over all entries.
pub fn diffusion_loss(eps_hat: &[Row], eps: &[Row]) -> Result<f64> {
    check_rows(eps.len(), eps_hat.len())?;
    if eps.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = eps_hat
        .iter()
        .zip(eps)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(sum / (RAY_DIM * eps.len()) as f64)
}

/// Gradient of [`diffusion_loss`] with respect to `eps_hat`.
pub fn diffusion_loss_grad(eps_hat: &[Row], eps: &[Row]) -> Result<Vec<Row>> {
    check_rows(eps.len(), eps_hat.len())?;
    let k = 2.0 / (RAY_DIM * eps.len().max(1)) as f64;
    Ok(eps_hat
        .iter()
        .zip(eps)
        .map(|(a, b)| std::array::from_fn(|i| k * (a[i] - b[i])))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// DDPM ancestral sampling.
    Stochastic,
    /// Zero-variance (η = 0) updates.
    Deterministic,
}

/// One reverse update from `R_t` to `R_{t−1}`.
pub fn reverse_step(
    rt: &[Row],
    eps_hat: &[Row],
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
    mode: SamplingMode,
) -> Result<Vec<Row>> {
    schedule.check_t(t, false)?;
    check_rows(rt.len(), eps_hat.len())?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let out = match mode {
        SamplingMode::Deterministic => {
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            rt.iter()
                .zip(eps_hat)
                .map(|(x, e)| {
                    std::array::from_fn(|k| {
                        let x0 = (x[k] - sb * e[k]) / sa;
                        pa * x0 + pb * e[k]
                    })
                })
                .collect()
        }
        SamplingMode::Stochastic => {
            let beta = schedule.beta(t);
            let coef = beta / (1.0 - ab).sqrt();
            let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
            let sigma = if t > 1 {
                (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
            } else {
                0.0
            };
            rt.iter()
                .zip(eps_hat)
                .map(|(x, e)| {
                    std::array::from_fn(|k| {
                        let mean = (x[k] - coef * e[k]) * inv_sqrt_alpha;
                        if sigma > 0.0 {
                            mean + sigma * Distribution::<f64>::sample(&StandardNormal, rng)
                        } else {
                            mean
                        }
                    })
                })
                .collect()
        }
    };
    Ok(out)
}

/// Clean-sample estimate `x̂_0 = (R_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(rt: &[Row], eps_hat: &[Row], t: usize, schedule: &DiffusionSchedule) -> Result<Vec<Row>> {
    schedule.check_t(t, true)?;
    check_rows(rt.len(), eps_hat.len())?;
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(rt
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| std::array::from_fn(|k| (x[k] - sb * e[k]) / sa))
        .collect())
}

/// Anything that predicts ε from a noisy scene.
pub trait NoisePredictor {
    fn predict(&self, input: &DenoiserInput, t: usize) -> Result<Vec<Row>>;
}

impl NoisePredictor for DenoiserNet {
    fn predict(&self, input: &DenoiserInput, t: usize) -> Result<Vec<Row>> {
        Ok(self.forward(input, t)?.0)
    }
}

/// Exact noise given the clean rows: `ε = (R_t − √ᾱ_t R_0) / √(1 − ᾱ_t)`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub clean: Vec<Row>,
    pub schedule: DiffusionSchedule,
}

impl NoisePredictor for OracleDenoiser {
    fn predict(&self, input: &DenoiserInput, t: usize) -> Result<Vec<Row>> {
        self.schedule.check_t(t, false)?;
        check_rows(self.clean.len(), input.len())?;
        let ab = self.schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(input
            .rows
            .iter()
            .zip(&self.clean)
            .map(|(x, c)| std::array::from_fn(|k| (x[k] - sa * c[k]) / sb))
            .collect())
    }
}

/// Observed, pose-free data for one scene: pixels and features per image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObservation {
    pub pixels: Vec<Vec<Pixel>>,
    pub features: Vec<Vec<Feature>>,
}

impl SceneObservation {
    pub fn from_scene(scene: &Scene) -> Self {
        SceneObservation {
            pixels: scene.bundles.iter().map(|b| b.pixels.clone()).collect(),
            features: scene.features.clone(),
        }
    }

    pub fn n_images(&self) -> usize {
        self.pixels.len()
    }

    pub fn n_rays(&self) -> usize {
        self.pixels.iter().map(Vec::len).sum()
    }

    /// Image index of every ray in flattened order.
    pub fn image_ids(&self) -> Vec<usize> {
        self.pixels
            .iter()
            .enumerate()
            .flat_map(|(i, p)| std::iter::repeat_n(i, p.len()))
            .collect()
    }

    pub fn flat_features(&self) -> Vec<Feature> {
        self.features.concat()
    }

    /// Keeps the rays at `keep[i]` in image `i`.
    pub fn select(&self, keep: &[Vec<usize>]) -> Self {
        SceneObservation {
            pixels: keep
                .iter()
                .enumerate()
                .map(|(i, k)| k.iter().map(|&j| self.pixels[i][j]).collect())
                .collect(),
            features: keep
                .iter()
                .enumerate()
                .map(|(i, k)| k.iter().map(|&j| self.features[i][j]).collect())
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.features.len() != self.pixels.len() {
            return Err(Error::shape(self.pixels.len(), self.features.len()));
        }
        for (p, f) in self.pixels.iter().zip(&self.features) {
            if p.len() != f.len() {
                return Err(Error::shape(p.len(), f.len()));
            }
        }
        if self.n_rays() == 0 {
            return Err(Error::InputDomain("scene has no rays".into()));
        }
        Ok(())
    }
}

/// Flattened ground-truth rows of a scene in image order.
pub fn scene_rows(scene: &Scene) -> Vec<Row> {
    scene
        .bundles
        .iter()
        .flat_map(|b| b.rays.iter().map(Ray::to_array))
        .collect()
}

/// Reverse diffusion chain for one scene, advanced one timestep at a time so
/// callers can interleave their own updates.
#[derive(Debug, Clone)]
pub struct ReverseChain {
    rows: Vec<Row>,
    t: usize,
    image: Vec<usize>,
    features: Vec<Feature>,
    obs: SceneObservation,
    mode: SamplingMode,
    last_eps: Option<Vec<Row>>,
}

impl ReverseChain {
    /// Starts from `R_T ~ N(0, I)`.
    pub fn new(obs: &SceneObservation, schedule: &DiffusionSchedule, mode: SamplingMode, rng: &mut impl Rng) -> Result<Self> {
        obs.validate()?;
        Ok(ReverseChain {
            rows: standard_normal_rows(obs.n_rays(), rng),
            t: schedule.steps(),
            image: obs.image_ids(),
            features: obs.flat_features(),
            obs: obs.clone(),
            mode,
            last_eps: None,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t == 0
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    /// Most recent ε̂, from the last call to [`ReverseChain::step`].
    pub fn last_eps(&self) -> Option<&[Row]> {
        self.last_eps.as_deref()
    }

    pub fn input(&self, field: &dyn SdfField) -> DenoiserInput {
        DenoiserInput {
            sdf: condition(field, &self.rows).sdf,
            rows: self.rows.clone(),
            features: self.features.clone(),
            image: self.image.clone(),
            n_images: self.obs.n_images(),
        }
    }

    /// Conditions on `field` at the current endpoints, predicts ε, and steps to `t − 1`.
    pub fn step(
        &mut self,
        predictor: &dyn NoisePredictor,
        field: &dyn SdfField,
        schedule: &DiffusionSchedule,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::InputDomain("reverse chain already finished".into()));
        }
        let input = self.input(field);
        let eps = predictor.predict(&input, self.t)?;
        self.rows = reverse_step(&self.rows, &eps, self.t, schedule, rng, self.mode)?;
        self.last_eps = Some(eps);
        self.t -= 1;
        Ok(())
    }

    /// Canonicalizes the final rows into per-image bundles. Degenerate rows are
    /// dropped; more than half degenerate is an error.
    pub fn finish(&self) -> Result<Vec<RayBundle>> {
        rows_to_bundles(&self.rows, &self.obs)
    }
}

/// Splits flattened rows back into per-image bundles.
pub fn rows_to_bundles(rows: &[Row], obs: &SceneObservation) -> Result<Vec<RayBundle>> {
    check_rows(obs.n_rays(), rows.len())?;
    let mut degenerate = 0usize;
    let mut out = Vec::with_capacity(obs.n_images());
    let mut k = 0;
    for (i, pixels) in obs.pixels.iter().enumerate() {
        let mut bundle = RayBundle {
            rays: Vec::with_capacity(pixels.len()),
            pixels: Vec::with_capacity(pixels.len()),
            image_index: i,
        };
        for px in pixels {
            match canonicalize(&RawRay::from(rows[k])) {
                Ok(r) => {
                    bundle.rays.push(r);
                    bundle.pixels.push(*px);
                }
                Err(_) => degenerate += 1,
            }
            k += 1;
        }
        out.push(bundle);
    }
    if 2 * degenerate > rows.len() {
        return Err(Error::DegenerateBundle(format!(
            "{degenerate} of {} sampled rays are degenerate",
            rows.len()
        )));
    }
    Ok(out)
}

/// Runs the full reverse chain `t = T..1` and returns per-image bundles.
pub fn sample_bundles(
    predictor: &dyn NoisePredictor,
    field: &dyn SdfField,
    obs: &SceneObservation,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
    mode: SamplingMode,
) -> Result<Vec<RayBundle>> {
    let mut chain = ReverseChain::new(obs, schedule, mode, rng)?;
    while !chain.is_done() {
        chain.step(predictor, field, schedule, rng)?;
    }
    chain.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub trunk_width: usize,
    pub head_width: usize,
    pub train_steps: usize,
    pub lr: f64,
    /// Fraction of training run at full learning rate before linear decay.
    pub coarse_fraction: f64,
    pub final_lr_factor: f64,
    pub scenes_per_step: usize,
    pub rays_per_image_train: usize,
    pub rays_per_image_infer: usize,
    pub sampling: SamplingMode,
    /// Condition on SDF values; `false` feeds zeros instead.
    pub use_sdf: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            t_steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            trunk_width: 128,
            head_width: 256,
            train_steps: 20_000,
            lr: 1e-3,
            coarse_fraction: 0.625,
            final_lr_factor: 0.1,
            scenes_per_step: 4,
            rays_per_image_train: 32,
            rays_per_image_infer: 64,
            sampling: SamplingMode::Deterministic,
            use_sdf: true,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.t_steps, self.beta_start, self.beta_end)
    }

    pub fn shape(&self) -> DenoiserShape {
        DenoiserShape {
            trunk_width: self.trunk_width,
            head_width: self.head_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let bad = |m: &str| Err(Error::Configuration(format!("diffusion: {m}")));
        if self.trunk_width == 0 {
            return bad("trunk_width must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.coarse_fraction) || !(0.0..=1.0).contains(&self.final_lr_factor) {
            return bad("coarse_fraction and final_lr_factor must lie in [0, 1]");
        }
        if self.scenes_per_step == 0 || self.rays_per_image_train == 0 || self.rays_per_image_infer == 0 {
            return bad("batch sizes must be positive");
        }
        Ok(())
    }

    /// Learning rate at `step`: constant for the coarse stage, then linear decay
    /// to `final_lr_factor × lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let coarse = (self.coarse_fraction * self.train_steps as f64).round() as usize;
        if step < coarse || self.train_steps <= coarse {
            return self.lr;
        }
        let frac = (step - coarse) as f64 / (self.train_steps - coarse) as f64;
        self.lr * (1.0 + (self.final_lr_factor - 1.0) * frac)
    }
}

/// Training scene: ground truth plus the field used for conditioning.
pub struct TrainingScene<'a> {
    pub scene: &'a Scene,
    pub field: &'a dyn SdfField,
}

/// Picks up to `k` rays per image at random.
pub fn subsample_rays(obs: &SceneObservation, k: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    obs.pixels
        .iter()
        .map(|p| {
            if p.len() <= k {
                (0..p.len()).collect()
            } else {
                let mut v = sample(rng, p.len(), k).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect()
}

/// One noisy training example: input for the denoiser and the target noise.
pub fn training_example(
    scene: &Scene,
    field: &dyn SdfField,
    keep: &[Vec<usize>],
    t: usize,
    schedule: &DiffusionSchedule,
    use_sdf: bool,
    rng: &mut impl Rng,
) -> Result<(DenoiserInput, Vec<Row>)> {
    let obs = SceneObservation::from_scene(scene).select(keep);
    let r0: Vec<Row> = keep
        .iter()
        .enumerate()
        .flat_map(|(i, k)| k.iter().map(move |&j| scene.bundles[i].rays[j].to_array()))
        .collect();
    let eps = standard_normal_rows(r0.len(), rng);
    let rt = forward_noise(&r0, t, &eps, schedule)?;
    let sdf = if use_sdf {
        condition(field, &rt).sdf
    } else {
        vec![0.0; rt.len()]
    };
    Ok((
        DenoiserInput {
            rows: rt,
            sdf,
            features: obs.flat_features(),
            image: obs.image_ids(),
            n_images: obs.n_images(),
        },
        eps,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Trains a fresh denoiser with Adam on the ε-prediction loss.
pub fn train_denoiser(
    scenes: &[TrainingScene<'_>],
    config: &DiffusionConfig,
    rng: &mut impl Rng,
    mut progress: impl FnMut(usize, f64),
) -> Result<(DenoiserNet, TrainReport)> {
    config.validate()?;
    let net = DenoiserNet::new(config.shape(), rng);
    continue_training(net, scenes, config, rng, &mut progress)
}

pub fn continue_training(
    mut net: DenoiserNet,
    scenes: &[TrainingScene<'_>],
    config: &DiffusionConfig,
    rng: &mut impl Rng,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<(DenoiserNet, TrainReport)> {
    if scenes.is_empty() && config.train_steps > 0 {
        return Err(Error::InputDomain("no training scenes".into()));
    }
    let schedule = config.schedule()?;
    let mut adam = Adam::for_params(AdamConfig::with_lr(config.lr), &net.params());
    let mut losses = Vec::with_capacity(config.train_steps);
    for step in 0..config.train_steps {
        adam.config.lr = config.lr_at(step);
        let mut grads = net.zero_grads();
        let mut loss = 0.0;
        let batch = config.scenes_per_step.min(scenes.len());
        for idx in sample(rng, scenes.len(), batch) {
            let sc = &scenes[idx];
            let t = rng.random_range(1..=schedule.steps());
            let keep = subsample_rays(&SceneObservation::from_scene(sc.scene), config.rays_per_image_train, rng);
            let (input, eps) = training_example(sc.scene, sc.field, &keep, t, &schedule, config.use_sdf, rng)?;
            let (eps_hat, cache) = net.forward(&input, t)?;
            loss += diffusion_loss(&eps_hat, &eps)?;
            let g = net.backward(&cache, &diffusion_loss_grad(&eps_hat, &eps)?)?;
            grads.add_assign(&g);
        }
        loss /= batch as f64;
        grads.scale(1.0 / batch as f64);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        progress(step, loss);
        let flat = [grads.trunk.slices(), grads.head.slices()].concat();
        adam.step(&mut net.params_mut(), &flat)?;
    }
    Ok((net, TrainReport { losses }))
}
