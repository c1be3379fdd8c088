//! End-to-end commands over a workspace directory, including the joint loop
//! that interleaves reverse diffusion with triplane refinement.
//!
//! Workspace layout:
//!
//! ```text
//! <root>/dataset/                 synth output (manifest.toml + scene_XXXX/)
//! <root>/triplanes/scene_XXXX/    fit-sdf checkpoints, fit_losses.csv
//! <root>/denoiser/<variant>/      train output (full | no-sdf)
//! <root>/runs/<label>/scene_XXXX/ infer output; eval writes metrics.{json,csv}
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, PipelineConfig, TrainConditioning};
use crate::diffusion::{
    predict_x0, rows_to_bundles, subsample_rays, train_denoiser, DenoiserNet, NoisePredictor, OracleDenoiser,
    ReverseChain, Row, SceneObservation, SdfField, TrainReport, TrainingScene, ZeroField,
};
use crate::error::{Error, Result};
use crate::geometry::{canonicalize, ray_endpoint, recover_camera, Camera, RawRay, Ray, RayBundle, Vec3, RAY_DIM};
use crate::gradcheck::{self, GradcheckReport};
use crate::mesh::{load_obj, marching_cubes, save_obj, Bounds, Mesh};
use crate::metrics::{
    rotation_accuracy_partial, surface_metrics, translation_accuracy_partial, MetricsReport, SceneMetrics,
};
use crate::scene::{generate_scene, rig_intrinsics, scene_seed, Scene};
use crate::storage::{
    self, load_dataset, read_cameras, read_json, save_dataset, write_array, write_bytes, write_json, Array,
    CameraRecord, Manifest, SceneEntry, Split,
};
use crate::triplane::{fit_triplane, mse_loss, on_surface_loss, SdfSamples, TriplaneOptimizer, TriplaneSdf};

const FIT_STREAM: u64 = 0x4649_5453_4446;
const INFER_STREAM: u64 = 0x494e_4645_5200;
const EVAL_STREAM: u64 = 0x4556_414c_0000;
const TRAIN_STREAM: u64 = 0x5452_4149_4e00;

/// Paths of one workspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub root: PathBuf,
    pub dataset: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Workspace {
            dataset: root.join("dataset"),
            root,
        }
    }

    pub fn with_dataset(mut self, dataset: impl Into<PathBuf>) -> Self {
        self.dataset = dataset.into();
        self
    }

    pub fn triplanes(&self) -> PathBuf {
        self.root.join("triplanes")
    }

    pub fn triplane(&self, scene: &str) -> PathBuf {
        self.triplanes().join(scene)
    }

    pub fn denoiser(&self, variant: &str) -> PathBuf {
        self.root.join("denoiser").join(variant)
    }

    pub fn run(&self, label: &str) -> PathBuf {
        self.root.join("runs").join(label)
    }
}

/// Which scenes a per-scene command touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitSelection {
    Train,
    #[default]
    Eval,
    All,
}

impl SplitSelection {
    fn includes(self, split: Split) -> bool {
        match self {
            SplitSelection::All => true,
            SplitSelection::Train => split == Split::Train,
            SplitSelection::Eval => split == Split::Eval,
        }
    }
}

fn stream_rng(cfg: &PipelineConfig, stream: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed ^ stream, index))
}

fn write_config_echo(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    write_bytes(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

/// Generates the dataset and writes it with its manifest.
pub fn cmd_synth(ws: &Workspace, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let scenes = (0..cfg.dataset.n_scenes())
        .map(|i| generate_scene(&cfg.dataset, cfg.seed, i))
        .collect::<Result<Vec<_>>>()?;
    save_dataset(&ws.dataset, cfg.seed, &cfg.dataset, &scenes)
}

/// Supervision for a scene's triplane: a pure function of (shape, config, seed, index).
pub fn supervision(scene: &Scene, cfg: &PipelineConfig, index: usize) -> (SdfSamples, ChaCha8Rng) {
    let mut rng = stream_rng(cfg, FIT_STREAM, index);
    let samples = SdfSamples::from_shape(&scene.shape, &cfg.triplane, &mut rng);
    (samples, rng)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitSummary {
    pub fitted: Vec<String>,
    pub final_losses: Vec<f64>,
    /// Scenes whose fit failed, with the reason; the run continues past them.
    pub failed: Vec<(String, String)>,
}

/// Fits one triplane per selected scene.
pub fn cmd_fit_sdf(ws: &Workspace, cfg: &PipelineConfig, which: SplitSelection) -> Result<FitSummary> {
    cfg.validate()?;
    let (manifest, scenes) = load_dataset(&ws.dataset)?;
    let mut summary = FitSummary::default();
    let mut csv = String::from("scene,step,loss\n");
    for (entry, scene) in manifest.scenes.iter().zip(&scenes) {
        if !which.includes(entry.split) {
            continue;
        }
        let (samples, mut rng) = supervision(scene, cfg, entry.index);
        match fit_triplane(&samples, &cfg.triplane, &mut rng) {
            Ok((tp, report)) => {
                storage::save_triplane(&ws.triplane(&entry.name), &tp)?;
                for (step, loss) in report.losses.iter().enumerate() {
                    if step % 10 == 0 || step + 1 == report.losses.len() {
                        let _ = writeln!(csv, "{},{step},{loss}", entry.name);
                    }
                }
                summary.fitted.push(entry.name.clone());
                summary.final_losses.push(report.final_loss);
            }
            Err(e) => summary.failed.push((entry.name.clone(), e.to_string())),
        }
    }
    write_bytes(&ws.triplanes().join("fit_losses.csv"), csv.as_bytes())?;
    write_json(&ws.triplanes().join("fit_summary.json"), &summary)?;
    Ok(summary)
}

/// Trains the denoiser for `cfg.ablation` and writes it with its loss curve.
pub fn cmd_train(ws: &Workspace, cfg: &PipelineConfig, mut progress: impl FnMut(usize, f64)) -> Result<TrainReport> {
    cfg.validate()?;
    let (manifest, scenes) = load_dataset(&ws.dataset)?;
    let mut dcfg = cfg.diffusion.clone();
    dcfg.use_sdf = cfg.ablation != Ablation::NoSdf;
    let train: Vec<(&SceneEntry, &Scene)> = manifest
        .scenes
        .iter()
        .zip(&scenes)
        .filter(|(e, _)| e.split == Split::Train)
        .collect();
    let fields: Vec<Box<dyn SdfField>> = train
        .iter()
        .map(|(e, s)| -> Result<Box<dyn SdfField>> {
            if !dcfg.use_sdf {
                return Ok(Box::new(ZeroField));
            }
            Ok(match cfg.joint.train_conditioning {
                TrainConditioning::Analytic => Box::new(s.shape.clone()),
                TrainConditioning::Triplane => {
                    let dir = ws.triplane(&e.name);
                    if !dir.exists() {
                        return Err(Error::Missing(format!("triplane checkpoint for {}", e.name)));
                    }
                    Box::new(storage::load_triplane(&dir)?)
                }
            })
        })
        .collect::<Result<_>>()?;
    let training: Vec<TrainingScene<'_>> = train
        .iter()
        .zip(&fields)
        .map(|((_, s), f)| TrainingScene {
            scene: s,
            field: f.as_ref(),
        })
        .collect();
    let mut rng = stream_rng(cfg, TRAIN_STREAM, 0);
    let (net, report) = train_denoiser(&training, &dcfg, &mut rng, &mut progress)?;
    let dir = ws.denoiser(cfg.ablation.denoiser_variant());
    storage::save_denoiser(&dir, &net)?;
    let mut csv = String::from("step,loss,lr\n");
    for (step, loss) in report.losses.iter().enumerate() {
        let _ = writeln!(csv, "{step},{loss},{}", dcfg.lr_at(step));
    }
    write_bytes(&dir.join("losses.csv"), csv.as_bytes())?;
    write_config_echo(&dir, cfg)?;
    Ok(report)
}

/// Triplane refinement state for one scene's joint loop.
struct Refiner<'a> {
    anchor: &'a SdfSamples,
    probe: (Vec<Vec3>, Vec<f64>),
    baseline: f64,
    opt: TriplaneOptimizer,
    lambda: f64,
    steps: usize,
    batch: usize,
    guard: f64,
    lr: (f64, f64),
    accepted: usize,
    rolled_back: usize,
}

impl<'a> Refiner<'a> {
    fn new(tp: &TriplaneSdf, anchor: &'a SdfSamples, cfg: &PipelineConfig, rng: &mut impl Rng) -> Result<Self> {
        let n = anchor.len().min(4096);
        let idx = rand::seq::index::sample(rng, anchor.len(), n);
        let probe: (Vec<Vec3>, Vec<f64>) = idx.iter().map(|i| (anchor.points[i], anchor.targets[i])).unzip();
        let baseline = mse_loss(tp, &probe.0, &probe.1)?.0;
        let k = cfg.joint.refine_lr_scale;
        let lr = (k * cfg.triplane.lr_planes, k * cfg.triplane.lr_decoder);
        Ok(Refiner {
            anchor,
            probe,
            baseline,
            opt: TriplaneOptimizer::new(tp, lr.0, lr.1),
            lambda: cfg.joint.lambda_surf,
            steps: cfg.joint.refine_steps,
            batch: cfg.joint.anchor_batch.min(anchor.len()),
            guard: cfg.joint.guard_factor,
            lr,
            accepted: 0,
            rolled_back: 0,
        })
    }

    fn anchor_loss(&self, tp: &TriplaneSdf) -> Result<f64> {
        Ok(mse_loss(tp, &self.probe.0, &self.probe.1)?.0)
    }

    /// Adam steps on `λ · on_surface(endpoints) + anchor MSE`, rolled back if the
    /// anchor loss exceeds the guard.
    fn refine(&mut self, tp: &mut TriplaneSdf, endpoints: &[Vec3], rng: &mut impl Rng) -> Result<()> {
        if endpoints.is_empty() || self.steps == 0 || self.anchor.is_empty() {
            return Ok(());
        }
        let backup = tp.clone();
        let mut pts = Vec::with_capacity(self.batch);
        let mut tgt = Vec::with_capacity(self.batch);
        for _ in 0..self.steps {
            pts.clear();
            tgt.clear();
            for i in rand::seq::index::sample(rng, self.anchor.len(), self.batch) {
                pts.push(self.anchor.points[i]);
                tgt.push(self.anchor.targets[i]);
            }
            let (_, mut grads) = mse_loss(tp, &pts, &tgt)?;
            let (_, g_surf, _) = on_surface_loss(tp, endpoints)?;
            grads.add_scaled(&g_surf, self.lambda);
            self.opt.step(tp, &grads)?;
        }
        let after = self.anchor_loss(tp)?;
        if !(after <= self.guard * self.baseline.max(1e-12)) {
            *tp = backup;
            self.opt = TriplaneOptimizer::new(tp, self.lr.0, self.lr.1);
            self.rolled_back += 1;
        } else {
            self.accepted += 1;
        }
        Ok(())
    }
}

/// Endpoints of rows that canonicalize and fall inside the field's box.
pub fn valid_endpoints(rows: &[Row]) -> Vec<Vec3> {
    rows.iter()
        .filter_map(|r| canonicalize(&RawRay::from(*r)).ok())
        .map(|ray| ray_endpoint(&ray))
        .filter(|p| p.iter().all(|u| u.is_finite() && u.abs() <= 1.0))
        .collect()
}

/// Result of the joint loop for one scene.
#[derive(Debug, Clone)]
pub struct JointOutput {
    pub bundles: Option<Vec<RayBundle>>,
    pub cameras: Vec<Option<Camera>>,
    pub triplane: TriplaneSdf,
    pub status: SceneStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneStatus {
    pub scene: String,
    pub n_views: usize,
    pub diffused: bool,
    /// Set when the sampled rays could not be turned into bundles.
    pub degenerate: Option<String>,
    pub failed_cameras: Vec<usize>,
    pub refinements_accepted: usize,
    pub refinements_rolled_back: usize,
    pub anchor_loss_before: f64,
    pub anchor_loss_after: f64,
    pub empty_surface: bool,
}

/// Reverse-diffuses the scene's rays with SDF conditioning and, every
/// `period` steps, refines the triplane on the endpoints of the current clean
/// estimate x̂0. After `t = 0` the cameras are recovered and the triplane gets
/// a final refinement on the sampled endpoints.
pub fn joint_inference(
    predictor: &dyn NoisePredictor,
    obs: &SceneObservation,
    mut tp: TriplaneSdf,
    anchor: &SdfSamples,
    cfg: &PipelineConfig,
    rng: &mut impl Rng,
) -> Result<JointOutput> {
    let schedule = cfg.diffusion.schedule()?;
    let mut refiner = Refiner::new(&tp, anchor, cfg, rng)?;
    let mut status = SceneStatus {
        n_views: obs.n_images(),
        anchor_loss_before: refiner.baseline,
        ..SceneStatus::default()
    };
    if cfg.ablation == Ablation::NoRayDiffuser {
        status.anchor_loss_after = refiner.baseline;
        return Ok(JointOutput {
            bundles: None,
            cameras: Vec::new(),
            triplane: tp,
            status,
        });
    }
    status.diffused = true;
    let period = cfg.joint.period_for(schedule.steps());
    let zero = ZeroField;
    let mut chain = ReverseChain::new(obs, &schedule, cfg.diffusion.sampling, rng)?;
    while !chain.is_done() {
        let t = chain.t();
        let prev = chain.rows().to_vec();
        {
            let field: &dyn SdfField = if cfg.ablation == Ablation::NoSdf { &zero } else { &tp };
            chain.step(predictor, field, &schedule, rng)?;
        }
        if !chain.is_done() && (schedule.steps() - chain.t()) % period == 0 {
            let eps = chain.last_eps().expect("just stepped");
            let x0 = predict_x0(&prev, eps, t, &schedule)?;
            refiner.refine(&mut tp, &valid_endpoints(&x0), rng)?;
        }
    }
    let bundles = match chain.finish() {
        Ok(b) => Some(b),
        Err(e) => {
            status.degenerate = Some(e.to_string());
            None
        }
    };
    let mut cameras = vec![None; obs.n_images()];
    if let Some(bundles) = &bundles {
        for (i, b) in bundles.iter().enumerate() {
            match recover_camera(b, &rig_intrinsics()) {
                Ok(c) => cameras[i] = Some(c),
                Err(_) => status.failed_cameras.push(i),
            }
        }
        let endpoints: Vec<Vec3> = bundles
            .iter()
            .flat_map(|b| b.endpoints())
            .filter(|p| p.iter().all(|u| u.is_finite() && u.abs() <= 1.0))
            .collect();
        refiner.refine(&mut tp, &endpoints, rng)?;
    } else {
        status.failed_cameras = (0..obs.n_images()).collect();
    }
    status.refinements_accepted = refiner.accepted;
    status.refinements_rolled_back = refiner.rolled_back;
    status.anchor_loss_after = refiner.anchor_loss(&tp)?;
    Ok(JointOutput {
        bundles,
        cameras,
        triplane: tp,
        status,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InferOptions {
    /// Replace the denoiser with the exact-noise oracle built from ground truth.
    pub oracle: bool,
    /// Denoiser checkpoint; defaults to the workspace's variant for the ablation.
    pub checkpoint: Option<PathBuf>,
    /// Run directory name; defaults to the ablation name (suffixed `-oracle`).
    pub label: Option<String>,
}

impl InferOptions {
    pub fn label(&self, ablation: Ablation) -> String {
        self.label.clone().unwrap_or_else(|| {
            let base = ablation.name().to_string();
            if self.oracle {
                base + "-oracle"
            } else {
                base
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub label: String,
    pub scenes: Vec<SceneStatus>,
    /// Scenes skipped because an input was missing, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Observation used at inference: `rays_per_image_infer` rays per image.
pub fn inference_observation(scene: &Scene, cfg: &PipelineConfig, rng: &mut impl Rng) -> (SceneObservation, Vec<Vec<usize>>) {
    let obs = SceneObservation::from_scene(scene);
    let keep = subsample_rays(&obs, cfg.diffusion.rays_per_image_infer, rng);
    (obs.select(&keep), keep)
}

fn write_bundles(dir: &Path, bundles: &[RayBundle]) -> Result<()> {
    for (i, b) in bundles.iter().enumerate() {
        let rays: Vec<[f64; RAY_DIM]> = b.rays.iter().map(Ray::to_array).collect();
        let pixels: Vec<[f64; 2]> = b.pixels.iter().map(|p| [p.x, p.y]).collect();
        write_array(&dir.join(format!("rays_{i}.bin")), &Array::from_rows(&rays))?;
        write_array(&dir.join(format!("pixels_{i}.bin")), &Array::from_rows(&pixels))?;
    }
    Ok(())
}

/// Runs the joint loop on every evaluation scene and writes per-scene outputs.
pub fn cmd_infer(ws: &Workspace, cfg: &PipelineConfig, opts: &InferOptions) -> Result<InferSummary> {
    cfg.validate()?;
    let (manifest, scenes) = load_dataset(&ws.dataset)?;
    let label = opts.label(cfg.ablation);
    let run = ws.run(&label);
    let net: Option<DenoiserNet> = if opts.oracle || cfg.ablation == Ablation::NoRayDiffuser {
        None
    } else {
        let dir = opts
            .checkpoint
            .clone()
            .unwrap_or_else(|| ws.denoiser(cfg.ablation.denoiser_variant()));
        Some(storage::load_denoiser(&dir)?)
    };
    let schedule = cfg.diffusion.schedule()?;
    let mut summary = InferSummary {
        label: label.clone(),
        ..InferSummary::default()
    };
    for (entry, scene) in manifest.scenes.iter().zip(&scenes) {
        if entry.split != Split::Eval {
            continue;
        }
        let tp_dir = ws.triplane(&entry.name);
        if !tp_dir.join("triplane.json").exists() {
            summary
                .skipped
                .push((entry.name.clone(), format!("missing triplane checkpoint {}", tp_dir.display())));
            continue;
        }
        let tp = storage::load_triplane(&tp_dir)?;
        let (anchor, _) = supervision(scene, cfg, entry.index);
        let mut rng = stream_rng(cfg, INFER_STREAM, entry.index);
        let (obs, keep) = inference_observation(scene, cfg, &mut rng);
        let oracle;
        let predictor: &dyn NoisePredictor = match &net {
            Some(n) => n,
            None => {
                let clean: Vec<Row> = keep
                    .iter()
                    .enumerate()
                    .flat_map(|(i, k)| k.iter().map(move |&j| scene.bundles[i].rays[j].to_array()))
                    .collect();
                oracle = OracleDenoiser {
                    clean,
                    schedule: schedule.clone(),
                };
                &oracle
            }
        };
        let out = joint_inference(predictor, &obs, tp, &anchor, cfg, &mut rng)?;
        let dir = run.join(&entry.name);
        let mut status = out.status;
        status.scene = entry.name.clone();
        if status.diffused {
            let recs: Vec<Option<CameraRecord>> = out.cameras.iter().map(|c| c.as_ref().map(CameraRecord::from)).collect();
            write_json(&dir.join("cameras.json"), &recs)?;
        }
        if let Some(b) = &out.bundles {
            write_bundles(&dir, b)?;
        }
        storage::save_triplane(&dir.join("triplane"), &out.triplane)?;
        match marching_cubes(&out.triplane, cfg.eval.mesh_resolution, &Bounds::default(), 0.0) {
            Ok(mesh) => save_obj(&mesh, &dir.join("mesh.obj"))?,
            Err(Error::EmptySurface) => status.empty_surface = true,
            Err(e) => return Err(e),
        }
        write_json(&dir.join("status.json"), &status)?;
        summary.scenes.push(status);
    }
    write_config_echo(&run, cfg)?;
    write_json(&run.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Reads a run's estimated cameras; `None` when the run made no pose estimate.
pub fn read_run_cameras(dir: &Path) -> Result<Option<Vec<Option<Camera>>>> {
    let path = dir.join("cameras.json");
    if !path.exists() {
        return Ok(None);
    }
    let recs: Vec<Option<CameraRecord>> = read_json(&path)?;
    recs.iter()
        .map(|r| r.as_ref().map(CameraRecord::to_camera).transpose())
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Ground-truth mesh of a scene's analytic shape.
pub fn ground_truth_mesh(scene: &Scene, resolution: usize) -> Result<Mesh> {
    marching_cubes(&scene.shape, resolution, &Bounds::default(), 0.0)
}

/// Scores one scene's run outputs against ground truth.
pub fn evaluate_scene(
    scene: &Scene,
    name: &str,
    est_cameras: Option<&[Option<Camera>]>,
    mesh: Option<&Mesh>,
    gt_mesh: &Mesh,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<SceneMetrics> {
    let mut m = SceneMetrics {
        scene: name.to_string(),
        n_views: scene.n_views(),
        rotation_accuracy_at_15: None,
        translation_accuracy_at_0_1: None,
        translation_fallback: false,
        cd: None,
        hd: None,
        nc: None,
        f_score: None,
        rotation_pairs: Vec::new(),
        translation_errors: Vec::new(),
    };
    if let Some(est) = est_cameras {
        let rots: Vec<_> = est.iter().map(|c| c.map(|c| c.rotation)).collect();
        let gt_rots: Vec<_> = scene.cameras.iter().map(|c| c.rotation).collect();
        let rot = rotation_accuracy_partial(&rots, &gt_rots, cfg.eval.rotation_threshold_deg)?;
        let (frac, errors, fallback) = translation_accuracy_partial(est, &scene.cameras, cfg.eval.translation_threshold)?;
        m.rotation_accuracy_at_15 = Some(rot.fraction);
        m.rotation_pairs = rot.pairs;
        m.translation_accuracy_at_0_1 = Some(frac);
        m.translation_errors = errors;
        m.translation_fallback = fallback;
    }
    if let Some(mesh) = mesh {
        let s = surface_metrics::<ChaCha8Rng>(mesh, gt_mesh, cfg.eval.surface_samples, cfg.eval.f_tau_fraction, seed)?;
        m.cd = Some(s.cd);
        m.hd = Some(s.hd);
        m.nc = Some(s.nc);
        m.f_score = Some(s.f_score);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    /// Expected outputs that were not found.
    pub missing: Vec<String>,
}

/// Scores a run directory; missing outputs are listed and the report covers
/// whatever is present.
pub fn cmd_eval(ws: &Workspace, cfg: &PipelineConfig, label: &str) -> Result<EvalOutput> {
    cfg.validate()?;
    let (manifest, scenes) = load_dataset(&ws.dataset)?;
    let run = ws.run(label);
    if !run.exists() {
        return Err(Error::Missing(format!("run directory {}", run.display())));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (entry, scene) in manifest.scenes.iter().zip(&scenes) {
        if entry.split != Split::Eval {
            continue;
        }
        let dir = run.join(&entry.name);
        if !dir.exists() {
            missing.push(format!("{}/", entry.name));
            continue;
        }
        let cams = read_run_cameras(&dir)?;
        let status: Option<SceneStatus> = dir.join("status.json").exists().then(|| read_json(&dir.join("status.json"))).transpose()?;
        if cams.is_none() && status.as_ref().is_none_or(|s| s.diffused) {
            missing.push(format!("{}/cameras.json", entry.name));
        }
        let mesh_path = dir.join("mesh.obj");
        let mesh = if mesh_path.exists() {
            Some(load_obj(&mesh_path)?)
        } else {
            missing.push(format!("{}/mesh.obj", entry.name));
            None
        };
        let gt_mesh = ground_truth_mesh(scene, cfg.eval.gt_mesh_resolution)?;
        let seed = scene_seed(cfg.seed ^ EVAL_STREAM, entry.index);
        rows.push(evaluate_scene(scene, &entry.name, cams.as_deref(), mesh.as_ref(), &gt_mesh, cfg, seed)?);
    }
    let report = MetricsReport::new(rows);
    write_bytes(&run.join("metrics.json"), report.to_json()?.as_bytes())?;
    write_bytes(&run.join("metrics.csv"), report.to_csv().as_bytes())?;
    if !missing.is_empty() {
        write_bytes(&run.join("missing.txt"), (missing.join("\n") + "\n").as_bytes())?;
    }
    Ok(EvalOutput { report, missing })
}

/// Runs every gradient-check suite.
pub fn cmd_gradcheck(seed: u64) -> Result<GradcheckReport> {
    gradcheck::run_all(seed)
}

/// Reads the bundles written by [`cmd_infer`] for one scene.
pub fn read_run_bundles(dir: &Path, n_views: usize) -> Result<Vec<RayBundle>> {
    (0..n_views)
        .map(|i| {
            let rays: Vec<[f64; RAY_DIM]> = storage::read_array(&dir.join(format!("rays_{i}.bin")))?.rows()?;
            let pixels: Vec<[f64; 2]> = storage::read_array(&dir.join(format!("pixels_{i}.bin")))?.rows()?;
            Ok(RayBundle {
                rays: rays
                    .iter()
                    .map(|r| Ray {
                        v: Vec3::new(r[0], r[1], r[2]),
                        m: Vec3::new(r[3], r[4], r[5]),
                        d: r[6],
                    })
                    .collect(),
                pixels: pixels.iter().map(|p| crate::geometry::Pixel::new(p[0], p[1])).collect(),
                image_index: i,
            })
        })
        .collect()
}

/// Splits rows into bundles for an observation; re-exported for callers that
/// drive the chain themselves.
pub fn bundles_from_rows(rows: &[Row], obs: &SceneObservation) -> Result<Vec<RayBundle>> {
    rows_to_bundles(rows, obs)
}

/// Cameras of a run, for callers that only need poses.
pub fn run_cameras(ws: &Workspace, label: &str, scene: &str) -> Result<Vec<Camera>> {
    read_cameras(&ws.run(label).join(scene).join("cameras.json"))
}
