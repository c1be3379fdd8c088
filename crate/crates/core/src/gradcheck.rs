//! Finite-difference checks of every hand-written backward pass.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::{
    diffusion_loss, diffusion_loss_grad, make_schedule, training_example, DenoiserNet, DenoiserShape, TRUNK_INPUT,
};
use crate::error::Result;
use crate::geometry::{Vec3, RAY_DIM};
use crate::nn::{grad_check, Activation, GradCheckReport, Mlp};
use crate::scene::{generate_scene, DatasetConfig};
use crate::triplane::{on_surface_loss, TriplaneConfig, TriplaneSdf};

/// Tolerance for nets with nonlinear activations.
pub const TOL_NONLINEAR: f64 = 1e-4;
/// Tolerance for purely linear nets.
pub const TOL_LINEAR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub passed: bool,
}

impl SuiteResult {
    fn new(name: &str, tolerance: f64, rep: GradCheckReport) -> Self {
        SuiteResult {
            name: name.into(),
            tolerance,
            max_rel_error: rep.max_rel_error,
            worst_index: rep.worst_index,
            analytic_at_worst: rep.analytic_at_worst,
            numeric_at_worst: rep.numeric_at_worst,
            checked: rep.checked,
            passed: rep.passed(tolerance),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn get(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

fn small_triplane(rng: &mut impl Rng) -> Result<TriplaneSdf> {
    let cfg = TriplaneConfig {
        resolution: 6,
        channels: 3,
        pe_bands: 2,
        hidden_width: 8,
        hidden_layers: 2,
        init_std: 0.5,
        ..TriplaneConfig::default()
    };
    let mut tp = TriplaneSdf::new(&cfg, rng)?;
    for l in tp.decoder_mut().layers_mut() {
        l.bias.apply(|b| *b = rng.random_range(-0.3..0.3));
    }
    Ok(tp)
}

/// Points at least 1e-3 away from every grid line, where the field is smooth.
fn off_grid_points(n: usize, res: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let cell = 2.0 / (res - 1) as f64;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Vec3::from_fn(|_, _| rng.random_range(-0.99..0.99));
        let near_line = p.iter().any(|u| {
            let g = (u + 1.0) / cell;
            (g - g.round()).abs() * cell < 1e-3
        });
        if !near_line {
            out.push(p);
        }
    }
    out
}

fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().copied()).collect()
}

fn unflatten(x: &[f64]) -> Vec<Vec3> {
    x.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

fn mlp_suite(name: &str, widths: &[usize], act: Activation, tol: f64, rng: &mut ChaCha8Rng) -> Result<Vec<SuiteResult>> {
    let mut net = Mlp::new(widths, act, rng);
    for l in net.layers_mut() {
        l.bias = DVector::from_fn(l.bias.len(), |_, _| rng.random_range(-0.5..0.5));
    }
    let batch = 4;
    let x = DMatrix::from_fn(widths[0], batch, |_, _| rng.random_range(-1.0..1.0));
    let c = DMatrix::from_fn(*widths.last().unwrap(), batch, |_, _| rng.random_range(-1.0..1.0));
    let (_, cache) = net.forward(&x)?;
    let (g, gx) = net.backward(&cache, &c)?;
    let f = |p: &[f64]| {
        let mut n = net.clone();
        n.set_flat_params(p).expect("same size");
        n.predict(&x).expect("shape").component_mul(&c).sum()
    };
    let params = grad_check(f, &net.flat_params(), &g.flatten(), 1e-5, rng)?;
    let f = |p: &[f64]| {
        let xi = DMatrix::from_column_slice(widths[0], batch, p);
        net.predict(&xi).expect("shape").component_mul(&c).sum()
    };
    let input = grad_check(f, x.as_slice(), gx.as_slice(), 1e-5, rng)?;
    Ok(vec![
        SuiteResult::new(&format!("{name}_params"), tol, params),
        SuiteResult::new(&format!("{name}_input"), tol, input),
    ])
}

fn triplane_suites(rng: &mut ChaCha8Rng) -> Result<Vec<SuiteResult>> {
    let tp = small_triplane(rng)?;
    let pts = off_grid_points(8, tp.resolution(), rng);
    let w: Vec<f64> = (0..pts.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, cache) = tp.forward(&pts);
    let (g, spatial) = tp.backward(&cache, &w)?;
    let f = |p: &[f64]| {
        let mut t = tp.clone();
        t.set_flat_params(p).expect("same size");
        t.query_batch(&pts).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
    };
    let query_params = grad_check(f, &tp.flat_params(), &g.flatten(), 1e-5, rng)?;
    let f = |x: &[f64]| {
        tp.query_batch(&unflatten(x))
            .iter()
            .zip(&w)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let query_spatial = grad_check(f, &flatten(&pts), &flatten(&spatial), 1e-5, rng)?;

    let (_, g, dx) = on_surface_loss(&tp, &pts)?;
    let f = |p: &[f64]| {
        let mut t = tp.clone();
        t.set_flat_params(p).expect("same size");
        on_surface_loss(&t, &pts).expect("finite").0
    };
    let surf_params = grad_check(f, &tp.flat_params(), &g.flatten(), 1e-5, rng)?;
    let f = |x: &[f64]| on_surface_loss(&tp, &unflatten(x)).expect("finite").0;
    let surf_points = grad_check(f, &flatten(&pts), &flatten(&dx), 1e-5, rng)?;
    Ok(vec![
        SuiteResult::new("triplane_query_params", TOL_NONLINEAR, query_params),
        SuiteResult::new("triplane_query_spatial", TOL_NONLINEAR, query_spatial),
        SuiteResult::new("on_surface_params", TOL_NONLINEAR, surf_params),
        SuiteResult::new("on_surface_endpoints", TOL_NONLINEAR, surf_points),
    ])
}

fn denoiser_suite(name: &str, mut net: DenoiserNet, tol: f64, h: f64, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    for l in net.head_mut().layers_mut() {
        l.weight.apply(|w| *w = rng.random_range(-0.2..0.2));
        l.bias.apply(|b| *b = rng.random_range(-0.2..0.2));
    }
    let cfg = DatasetConfig {
        rays_per_image: 8,
        ..DatasetConfig::default()
    };
    let scene = generate_scene(&cfg, 17, 1)?;
    let schedule = make_schedule(100, 1e-3, 0.2)?;
    let keep: Vec<Vec<usize>> = scene.bundles.iter().map(|b| (0..b.rays.len()).collect()).collect();
    let t = 40;
    let (input, eps) = training_example(&scene, &scene.shape, &keep, t, &schedule, true, rng)?;
    let (out, cache) = net.forward(&input, t)?;
    let g = net.backward(&cache, &diffusion_loss_grad(&out, &eps)?)?;
    let f = |p: &[f64]| {
        let mut n = net.clone();
        n.set_flat_params(p).expect("same size");
        diffusion_loss(&n.forward(&input, t).expect("shape").0, &eps).expect("shape")
    };
    let rep = grad_check(f, &net.flat_params(), &g.flatten(), h, rng)?;
    Ok(SuiteResult::new(name, tol, rep))
}

/// Runs every suite with a fixed seed.
pub fn run_all(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suites = Vec::new();
    suites.extend(mlp_suite("mlp_silu", &[3, 6, 5, 2], Activation::Silu, TOL_NONLINEAR, &mut rng)?);
    suites.extend(mlp_suite("mlp_relu", &[3, 6, 2], Activation::Relu, TOL_NONLINEAR, &mut rng)?);
    suites.extend(mlp_suite("mlp_linear", &[5, 4, 3], Activation::Identity, TOL_LINEAR, &mut rng)?);
    suites.extend(triplane_suites(&mut rng)?);
    let net = DenoiserNet::new(
        DenoiserShape {
            trunk_width: 12,
            head_width: 10,
        },
        &mut rng,
    );
    suites.push(denoiser_suite("denoiser_loss", net, TOL_NONLINEAR, 1e-5, &mut rng)?);
    let trunk = Mlp::new(&[TRUNK_INPUT, 6], Activation::Identity, &mut rng);
    let head = Mlp::new(&[18, RAY_DIM], Activation::Identity, &mut rng);
    let linear = DenoiserNet::from_parts(trunk, head)?;
    suites.push(denoiser_suite("denoiser_loss_linear", linear, TOL_LINEAR, 1e-4, &mut rng)?);
    Ok(GradcheckReport { suites })
}
