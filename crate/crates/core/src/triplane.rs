//! Triplane signed distance field: three axis-aligned feature planes sampled
//! bilinearly, concatenated with a positional encoding, and decoded by an MLP.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SdfField;
use crate::geometry::Vec3;
use crate::nn::{Activation, Adam, AdamConfig, Mlp, MlpCache, MlpGrads};
use crate::scene::{analytic_normal, analytic_sdf, Shape};

/// Coordinate pairs sampled by each plane: `F_x` sees `(y, z)`, `F_y` sees
/// `(x, z)`, `F_z` sees `(x, y)`.
pub const PLANE_AXES: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriplaneConfig {
    pub resolution: usize,
    pub channels: usize,
    pub pe_bands: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub init_std: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_planes: f64,
    pub lr_decoder: f64,
    /// Weight of a finite-difference eikonal penalty; 0 disables it.
    pub eikonal_weight: f64,
    pub n_surface: usize,
    pub n_uniform: usize,
    pub n_near: usize,
    pub near_sigma: f64,
}

impl Default for TriplaneConfig {
    fn default() -> Self {
        TriplaneConfig {
            resolution: 32,
            channels: 16,
            pe_bands: 4,
            hidden_width: 64,
            hidden_layers: 2,
            init_std: 0.1,
            steps: 3000,
            batch_size: 1024,
            lr_planes: 1e-2,
            lr_decoder: 1e-3,
            eikonal_weight: 0.0,
            n_surface: 8000,
            n_uniform: 8000,
            n_near: 8000,
            near_sigma: 0.05,
        }
    }
}

impl TriplaneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(format!("triplane: {m}")));
        if self.resolution < 2 {
            return bad("resolution must be at least 2");
        }
        if self.channels == 0 || self.hidden_width == 0 {
            return bad("channels and hidden_width must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_planes > 0.0 && self.lr_decoder > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.eikonal_weight >= 0.0) || !(self.near_sigma > 0.0) {
            return bad("eikonal_weight must be >= 0 and near_sigma > 0");
        }
        Ok(())
    }

    pub fn decoder_input_dim(&self) -> usize {
        3 * self.channels + 6 * self.pe_bands
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriplaneSdf {
    resolution: usize,
    channels: usize,
    pe_bands: usize,
    /// Each plane is stored `[(i * res + j) * C + c]` where `i` indexes the
    /// plane's first coordinate and `j` its second.
    planes: [Vec<f64>; 3],
    decoder: Mlp,
}

/// Per-point sampling record for one plane.
#[derive(Debug, Clone, Copy)]
struct Cell {
    base: usize,
    a: f64,
    b: f64,
}

/// Forward state kept for [`TriplaneSdf::backward`].
#[derive(Debug, Clone)]
pub struct TriplaneCache {
    cells: Vec<[Cell; 3]>,
    clamped: Vec<Vec3>,
    inside: Vec<[bool; 3]>,
    mlp: MlpCache,
}

impl TriplaneCache {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriplaneGrads {
    pub planes: [Vec<f64>; 3],
    pub decoder: MlpGrads,
}

impl TriplaneGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.planes.concat();
        out.extend(self.decoder.flatten());
        out
    }

    pub fn add_scaled(&mut self, other: &TriplaneGrads, k: f64) {
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += k * y);
        }
        let mut d = other.decoder.clone();
        d.scale(k);
        self.decoder.add_assign(&d);
    }
}

/// Maps `u ∈ [-1, 1]` onto a grid of `res` nodes. Returns the left cell index and
/// the fractional offset; exactly on an interior node the cell to the left is used.
fn grid_cell(u: f64, res: usize) -> (usize, f64) {
    let g = (u + 1.0) * 0.5 * (res - 1) as f64;
    let i0 = (g.ceil() as isize - 1).clamp(0, res as isize - 2) as usize;
    (i0, g - i0 as f64)
}

impl TriplaneSdf {
    pub fn new(config: &TriplaneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.resolution * config.resolution * config.channels;
        let normal = Normal::new(0.0, config.init_std.max(0.0))
            .map_err(|e| Error::Configuration(format!("triplane init_std: {e}")))?;
        let planes = [(); 3].map(|_| (0..n).map(|_| normal.sample(rng)).collect::<Vec<_>>());
        let mut widths = vec![config.decoder_input_dim()];
        widths.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        widths.push(1);
        let decoder = Mlp::new(&widths, Activation::Silu, rng);
        Ok(TriplaneSdf {
            resolution: config.resolution,
            channels: config.channels,
            pe_bands: config.pe_bands,
            planes,
            decoder,
        })
    }

    pub fn from_parts(
        resolution: usize,
        channels: usize,
        pe_bands: usize,
        planes: [Vec<f64>; 3],
        decoder: Mlp,
    ) -> Result<Self> {
        if resolution < 2 || channels == 0 {
            return Err(Error::Configuration(
                "triplane needs resolution >= 2 and channels >= 1".into(),
            ));
        }
        let n = resolution * resolution * channels;
        for p in &planes {
            if p.len() != n {
                return Err(Error::shape(n, p.len()));
            }
        }
        let input = 3 * channels + 6 * pe_bands;
        if decoder.input_dim() != input || decoder.output_dim() != 1 {
            return Err(Error::shape(
                format!("decoder {input} -> 1"),
                format!("{} -> {}", decoder.input_dim(), decoder.output_dim()),
            ));
        }
        Ok(TriplaneSdf {
            resolution,
            channels,
            pe_bands,
            planes,
            decoder,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pe_bands(&self) -> usize {
        self.pe_bands
    }

    pub fn planes(&self) -> &[Vec<f64>; 3] {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut [Vec<f64>; 3] {
        &mut self.planes
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn num_params(&self) -> usize {
        3 * self.planes[0].len() + self.decoder.num_params()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.planes.concat();
        out.extend(self.decoder.flat_params());
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), flat.len()));
        }
        let n = self.planes[0].len();
        for (k, p) in self.planes.iter_mut().enumerate() {
            p.copy_from_slice(&flat[k * n..(k + 1) * n]);
        }
        self.decoder.set_flat_params(&flat[3 * n..])
    }

    pub fn zero_grads(&self) -> TriplaneGrads {
        TriplaneGrads {
            planes: [(); 3].map(|_| vec![0.0; self.planes[0].len()]),
            decoder: self.decoder.zero_grads(),
        }
    }

    fn input_dim(&self) -> usize {
        3 * self.channels + 6 * self.pe_bands
    }

    fn frequency(k: usize) -> f64 {
        (1u64 << k) as f64 * PI
    }

    /// Builds decoder inputs (one column per point) and the sampling records.
    fn encode(&self, points: &[Vec3]) -> (DMatrix<f64>, Vec<[Cell; 3]>, Vec<Vec3>, Vec<[bool; 3]>) {
        let (res, c) = (self.resolution, self.channels);
        let mut input = DMatrix::zeros(self.input_dim(), points.len());
        let mut cells = Vec::with_capacity(points.len());
        let mut clamped = Vec::with_capacity(points.len());
        let mut inside = Vec::with_capacity(points.len());
        for (col, x) in points.iter().enumerate() {
            let xc = x.map(|u| u.clamp(-1.0, 1.0));
            inside.push([0, 1, 2].map(|i| x[i].abs() <= 1.0));
            let mut rec = [Cell { base: 0, a: 0.0, b: 0.0 }; 3];
            let mut column = input.column_mut(col);
            for (p, &(ax, bx)) in PLANE_AXES.iter().enumerate() {
                let (i0, a) = grid_cell(xc[ax], res);
                let (j0, b) = grid_cell(xc[bx], res);
                let base = (i0 * res + j0) * c;
                rec[p] = Cell { base, a, b };
                let plane = &self.planes[p];
                let (w00, w01, w10, w11) = ((1.0 - a) * (1.0 - b), (1.0 - a) * b, a * (1.0 - b), a * b);
                let (o01, o10, o11) = (c, res * c, res * c + c);
                for ch in 0..c {
                    let k = base + ch;
                    column[p * c + ch] = w00 * plane[k]
                        + w01 * plane[k + o01]
                        + w10 * plane[k + o10]
                        + w11 * plane[k + o11];
                }
            }
            let mut row = 3 * c;
            for i in 0..3 {
                for k in 0..self.pe_bands {
                    let w = Self::frequency(k);
                    column[row] = (w * xc[i]).sin();
                    column[row + 1] = (w * xc[i]).cos();
                    row += 2;
                }
            }
            cells.push(rec);
            clamped.push(xc);
        }
        (input, cells, clamped, inside)
    }

    /// SDF value at each point. Coordinates outside `[-1, 1]` are clamped.
    pub fn query_batch(&self, points: &[Vec3]) -> Vec<f64> {
        if points.is_empty() {
            return Vec::new();
        }
        let (input, ..) = self.encode(points);
        self.decoder
            .predict(&input)
            .expect("decoder width matches encoding")
            .as_slice()
            .to_vec()
    }

    pub fn query(&self, x: &Vec3) -> f64 {
        self.query_batch(std::slice::from_ref(x))[0]
    }

    pub fn forward(&self, points: &[Vec3]) -> (Vec<f64>, TriplaneCache) {
        let (input, cells, clamped, inside) = self.encode(points);
        let (out, mlp) = self
            .decoder
            .forward(&input)
            .expect("decoder width matches encoding");
        (
            out.as_slice().to_vec(),
            TriplaneCache {
                cells,
                clamped,
                inside,
                mlp,
            },
        )
    }

    /// Gradients of `Σ grad_s[k] · s(x_k)` with respect to the planes, the
    /// decoder, and each point. Clamped coordinates receive zero spatial gradient.
    pub fn backward(&self, cache: &TriplaneCache, grad_s: &[f64]) -> Result<(TriplaneGrads, Vec<Vec3>)> {
        if grad_s.len() != cache.len() {
            return Err(Error::shape(cache.len(), grad_s.len()));
        }
        let mut grads = self.zero_grads();
        if cache.is_empty() {
            return Ok((grads, Vec::new()));
        }
        let upstream = DMatrix::from_row_slice(1, grad_s.len(), grad_s);
        let (decoder_grads, g_in) = self.decoder.backward(&cache.mlp, &upstream)?;
        grads.decoder = decoder_grads;

        let (res, c) = (self.resolution, self.channels);
        let scale = 0.5 * (res - 1) as f64;
        let (o01, o10, o11) = (c, res * c, res * c + c);
        let mut spatial = Vec::with_capacity(cache.len());
        for (col, cells) in cache.cells.iter().enumerate() {
            let g = g_in.column(col);
            let mut dx = Vec3::zeros();
            for (p, &(ax, bx)) in PLANE_AXES.iter().enumerate() {
                let Cell { base, a, b } = cells[p];
                let (w00, w01, w10, w11) = ((1.0 - a) * (1.0 - b), (1.0 - a) * b, a * (1.0 - b), a * b);
                let plane = &self.planes[p];
                let gp = &mut grads.planes[p];
                let (mut da, mut db) = (0.0, 0.0);
                for ch in 0..c {
                    let gf = g[p * c + ch];
                    let k = base + ch;
                    gp[k] += w00 * gf;
                    gp[k + o01] += w01 * gf;
                    gp[k + o10] += w10 * gf;
                    gp[k + o11] += w11 * gf;
                    let (f00, f01, f10, f11) = (plane[k], plane[k + o01], plane[k + o10], plane[k + o11]);
                    da += gf * ((f10 - f00) * (1.0 - b) + (f11 - f01) * b);
                    db += gf * ((f01 - f00) * (1.0 - a) + (f11 - f10) * a);
                }
                dx[ax] += da * scale;
                dx[bx] += db * scale;
            }
            let xc = cache.clamped[col];
            let mut row = 3 * c;
            for i in 0..3 {
                for k in 0..self.pe_bands {
                    let w = Self::frequency(k);
                    dx[i] += g[row] * w * (w * xc[i]).cos() - g[row + 1] * w * (w * xc[i]).sin();
                    row += 2;
                }
            }
            for i in 0..3 {
                if !cache.inside[col][i] {
                    dx[i] = 0.0;
                }
            }
            spatial.push(dx);
        }
        Ok((grads, spatial))
    }

    /// Spatial gradient `∇s` at each point.
    pub fn gradient(&self, points: &[Vec3]) -> Vec<Vec3> {
        let (_, cache) = self.forward(points);
        self.backward(&cache, &vec![1.0; points.len()])
            .expect("matching cache")
            .1
    }
}

impl SdfField for TriplaneSdf {
    fn sdf_batch(&self, points: &[Vec3]) -> Vec<f64> {
        points.chunks(4096).flat_map(|c| self.query_batch(c)).collect()
    }
}

/// Mean squared SDF at the endpoints, with gradients into the field and into
/// every endpoint.
pub fn on_surface_loss(tp: &TriplaneSdf, endpoints: &[Vec3]) -> Result<(f64, TriplaneGrads, Vec<Vec3>)> {
    if endpoints.is_empty() {
        return Err(Error::InputDomain("on_surface_loss needs at least one endpoint".into()));
    }
    if let Some(bad) = endpoints.iter().find(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InputDomain(format!("non-finite endpoint {bad:?}")));
    }
    let n = endpoints.len() as f64;
    let (s, cache) = tp.forward(endpoints);
    let loss = s.iter().map(|v| v * v).sum::<f64>() / n;
    let grad_s: Vec<f64> = s.iter().map(|v| 2.0 * v / n).collect();
    let (grads, spatial) = tp.backward(&cache, &grad_s)?;
    Ok((loss, grads, spatial))
}

/// Points with SDF targets. Surface samples carry target 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SdfSamples {
    pub points: Vec<Vec3>,
    pub targets: Vec<f64>,
}

impl SdfSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vec3, target: f64) {
        self.points.push(p);
        self.targets.push(target);
    }

    /// Surface, uniform-box, and near-surface samples of an analytic shape.
    pub fn from_shape(shape: &Shape, config: &TriplaneConfig, rng: &mut impl Rng) -> Self {
        let mut out = SdfSamples::default();
        for p in surface_points(shape, config.n_surface, rng) {
            out.push(p, 0.0);
        }
        for _ in 0..config.n_uniform {
            let p = uniform_box_point(rng);
            out.push(p, analytic_sdf(shape, &p));
        }
        let jitter = Normal::new(0.0, config.near_sigma).expect("positive sigma");
        for p in surface_points(shape, config.n_near, rng) {
            let q = (p + Vec3::from_fn(|_, _| jitter.sample(rng))).map(|u| u.clamp(-1.0, 1.0));
            out.push(q, analytic_sdf(shape, &q));
        }
        out
    }
}

pub fn uniform_box_point(rng: &mut impl Rng) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-1.0..=1.0))
}

/// Points on the zero level set, found by Newton projection `x ← x − s ∇s` from
/// uniform starts near the surface.
pub fn surface_points(shape: &Shape, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        assert!(attempts < 1000 * (n + 1), "shape surface is not reachable from [-1,1]^3");
        let mut x = uniform_box_point(rng);
        if analytic_sdf(shape, &x).abs() > 0.3 {
            continue;
        }
        for _ in 0..50 {
            let s = analytic_sdf(shape, &x);
            if s.abs() < 1e-12 {
                break;
            }
            x -= s * analytic_normal(shape, &x);
        }
        if analytic_sdf(shape, &x).abs() < 1e-9 && x.amax() <= 1.0 {
            out.push(x);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub steps: usize,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Fits a freshly initialized triplane to `samples`.
pub fn fit_triplane(samples: &SdfSamples, config: &TriplaneConfig, rng: &mut impl Rng) -> Result<(TriplaneSdf, FitReport)> {
    let init = TriplaneSdf::new(config, rng)?;
    fit_from(init, samples, config, rng)
}

/// Adam on the mean squared SDF error (plus the optional eikonal penalty),
/// starting from `tp`.
pub fn fit_from(
    mut tp: TriplaneSdf,
    samples: &SdfSamples,
    config: &TriplaneConfig,
    rng: &mut impl Rng,
) -> Result<(TriplaneSdf, FitReport)> {
    config.validate()?;
    if samples.points.len() != samples.targets.len() {
        return Err(Error::shape(samples.points.len(), samples.targets.len()));
    }
    if config.steps > 0 && samples.is_empty() {
        return Err(Error::InputDomain("no supervision samples".into()));
    }
    let mut opt = TriplaneOptimizer::new(&tp, config.lr_planes, config.lr_decoder);
    let batch = config.batch_size.min(samples.len());
    let mut losses = Vec::with_capacity(config.steps);
    let mut pts = Vec::with_capacity(batch);
    let mut tgt = Vec::with_capacity(batch);
    for step in 0..config.steps {
        pts.clear();
        tgt.clear();
        for i in sample(rng, samples.len(), batch) {
            pts.push(samples.points[i]);
            tgt.push(samples.targets[i]);
        }
        let (mut loss, mut grads) = mse_loss(&tp, &pts, &tgt)?;
        if config.eikonal_weight > 0.0 {
            let (el, eg) = eikonal_loss(&tp, &pts, 1e-3)?;
            loss += config.eikonal_weight * el;
            grads.add_scaled(&eg, config.eikonal_weight);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        opt.step(&mut tp, &grads)?;
    }
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok((
        tp,
        FitReport {
            steps: config.steps,
            final_loss,
            losses,
        },
    ))
}

/// Mean squared error against targets with parameter gradients.
pub fn mse_loss(tp: &TriplaneSdf, points: &[Vec3], targets: &[f64]) -> Result<(f64, TriplaneGrads)> {
    if points.len() != targets.len() {
        return Err(Error::shape(points.len(), targets.len()));
    }
    let n = points.len() as f64;
    let (s, cache) = tp.forward(points);
    let mut loss = 0.0;
    let grad_s: Vec<f64> = s
        .iter()
        .zip(targets)
        .map(|(a, b)| {
            loss += (a - b) * (a - b);
            2.0 * (a - b) / n
        })
        .collect();
    let (grads, _) = tp.backward(&cache, &grad_s)?;
    Ok((loss / n, grads))
}

/// `mean (‖∇s‖ − 1)²` with `∇s` taken by central differences of step `h`.
pub fn eikonal_loss(tp: &TriplaneSdf, points: &[Vec3], h: f64) -> Result<(f64, TriplaneGrads)> {
    let n = points.len();
    let mut probes = Vec::with_capacity(6 * n);
    for p in points {
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = h;
            probes.push(p + e);
            probes.push(p - e);
        }
    }
    let (s, cache) = tp.forward(&probes);
    let mut loss = 0.0;
    let mut grad_s = vec![0.0; 6 * n];
    for k in 0..n {
        let g = Vec3::from_fn(|i, _| (s[6 * k + 2 * i] - s[6 * k + 2 * i + 1]) / (2.0 * h));
        let norm = g.norm();
        loss += (norm - 1.0).powi(2);
        if norm > 0.0 {
            let coef = 2.0 * (norm - 1.0) / norm / n as f64 / (2.0 * h);
            for i in 0..3 {
                grad_s[6 * k + 2 * i] = coef * g[i];
                grad_s[6 * k + 2 * i + 1] = -coef * g[i];
            }
        }
    }
    let (grads, _) = tp.backward(&cache, &grad_s)?;
    Ok((loss / n.max(1) as f64, grads))
}

/// Separate Adam states for planes and decoder.
#[derive(Debug, Clone)]
pub struct TriplaneOptimizer {
    planes: Adam,
    decoder: Adam,
}

impl TriplaneOptimizer {
    pub fn new(tp: &TriplaneSdf, lr_planes: f64, lr_decoder: f64) -> Self {
        let plane_shapes: Vec<&[f64]> = tp.planes.iter().map(Vec::as_slice).collect();
        TriplaneOptimizer {
            planes: Adam::for_params(AdamConfig::with_lr(lr_planes), &plane_shapes),
            decoder: Adam::for_params(AdamConfig::with_lr(lr_decoder), &tp.decoder.params()),
        }
    }

    pub fn step(&mut self, tp: &mut TriplaneSdf, grads: &TriplaneGrads) -> Result<()> {
        let mut planes: Vec<&mut [f64]> = tp.planes.iter_mut().map(Vec::as_mut_slice).collect();
        let gp: Vec<&[f64]> = grads.planes.iter().map(Vec::as_slice).collect();
        self.planes.step(&mut planes, &gp)?;
        self.decoder.step(&mut tp.decoder.params_mut(), &grads.decoder.slices())
    }
}
