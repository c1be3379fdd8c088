use std::path::Path;

use raysdf::config::{Ablation, PipelineConfig};
use raysdf::geometry::rotation_angle_deg;
use raysdf::mesh::save_obj;
use raysdf::pipeline::{self, InferOptions, SplitSelection, Workspace};
use raysdf::storage::{self, list_files, write_json, CameraRecord};
use raysdf::Error;

fn tiny_config() -> PipelineConfig {
    PipelineConfig::from_toml_str(
        r#"
seed = 3
[dataset]
n_train = 2
n_eval = 2
rays_per_image = 24
[triplane]
resolution = 8
channels = 4
pe_bands = 2
hidden_width = 16
steps = 60
batch_size = 256
n_surface = 400
n_uniform = 400
n_near = 400
[diffusion]
trunk_width = 16
head_width = 16
train_steps = 6
rays_per_image_train = 8
rays_per_image_infer = 12
[joint]
refine_steps = 3
anchor_batch = 128
[eval]
surface_samples = 500
mesh_resolution = 16
gt_mesh_resolution = 24
"#,
    )
    .unwrap()
}

fn prepared(dir: &Path, cfg: &PipelineConfig) -> Workspace {
    let ws = Workspace::new(dir);
    pipeline::cmd_synth(&ws, cfg).unwrap();
    let fit = pipeline::cmd_fit_sdf(&ws, cfg, SplitSelection::Eval).unwrap();
    assert_eq!(fit.fitted.len(), 2);
    assert!(fit.failed.is_empty());
    ws
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    list_files(root)
        .unwrap()
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(root.join(&p)).unwrap();
            (p.display().to_string(), bytes)
        })
        .collect()
}

#[test]
fn oracle_inference_recovers_ground_truth_cameras() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ws = prepared(dir.path(), &cfg);
    let opts = InferOptions {
        oracle: true,
        ..InferOptions::default()
    };
    let summary = pipeline::cmd_infer(&ws, &cfg, &opts).unwrap();
    assert_eq!(summary.label, "full-oracle");
    assert_eq!(summary.scenes.len(), 2);
    let (manifest, scenes) = storage::load_dataset(&ws.dataset).unwrap();
    for (entry, scene) in manifest.scenes.iter().zip(&scenes).filter(|(e, _)| e.split == storage::Split::Eval) {
        let dir = ws.run("full-oracle").join(&entry.name);
        let cams = pipeline::read_run_cameras(&dir).unwrap().unwrap();
        for (est, gt) in cams.iter().zip(&scene.cameras) {
            let est = est.unwrap();
            assert!(rotation_angle_deg(&est.rotation, &gt.rotation) < 1e-3);
            assert!((est.center - gt.center).norm() < 1e-5);
        }
        let status: pipeline::SceneStatus = storage::read_json(&dir.join("status.json")).unwrap();
        assert!(status.anchor_loss_after <= cfg.joint.guard_factor * status.anchor_loss_before);
        let bundles = pipeline::read_run_bundles(&dir, scene.n_views()).unwrap();
        assert_eq!(bundles.len(), scene.n_views());
    }
    let echoed = std::fs::read_to_string(ws.run("full-oracle").join("config.toml")).unwrap();
    assert_eq!(PipelineConfig::from_toml_str(&echoed).unwrap(), cfg);

    let out = pipeline::cmd_eval(&ws, &cfg, "full-oracle").unwrap();
    assert!(out.missing.is_empty());
    assert_eq!(out.report.overall.rotation_accuracy_at_15, Some(1.0));
    assert_eq!(out.report.overall.translation_accuracy_at_0_1, Some(1.0));
    assert!(ws.run("full-oracle").join("metrics.csv").exists());
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny_config();
    let trees: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let ws = prepared(dir.path(), &cfg);
            pipeline::cmd_train(&ws, &cfg, |_, _| {}).unwrap();
            pipeline::cmd_infer(&ws, &cfg, &InferOptions::default()).unwrap();
            read_tree(dir.path())
        })
        .collect();
    assert!(!trees[0].is_empty());
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn eval_of_ground_truth_outputs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ws = Workspace::new(dir.path());
    pipeline::cmd_synth(&ws, &cfg).unwrap();
    let (manifest, scenes) = storage::load_dataset(&ws.dataset).unwrap();
    for (entry, scene) in manifest.scenes.iter().zip(&scenes) {
        let out = ws.run("gt").join(&entry.name);
        let recs: Vec<Option<CameraRecord>> = scene.cameras.iter().map(|c| Some(CameraRecord::from(c))).collect();
        write_json(&out.join("cameras.json"), &recs).unwrap();
        let mesh = pipeline::ground_truth_mesh(scene, cfg.eval.gt_mesh_resolution).unwrap();
        save_obj(&mesh, &out.join("mesh.obj")).unwrap();
    }
    let out = pipeline::cmd_eval(&ws, &cfg, "gt").unwrap();
    let r = &out.report;
    assert_eq!(r.scenes.len(), 2);
    for s in &r.scenes {
        assert_eq!(s.rotation_accuracy_at_15, Some(1.0));
        assert_eq!(s.translation_accuracy_at_0_1, Some(1.0));
        assert!(s.cd.unwrap() < 1e-6, "{s:?}");
        assert_eq!(s.f_score, Some(1.0));
    }
    let mean_cd = r.scenes.iter().map(|s| s.cd.unwrap()).sum::<f64>() / 2.0;
    assert!((r.overall.cd.unwrap() - mean_cd).abs() < 1e-15);
    let mut views: Vec<usize> = r.scenes.iter().map(|s| s.n_views).collect();
    views.sort_unstable();
    views.dedup();
    assert_eq!(r.by_views.len(), views.len());
}

#[test]
fn missing_outputs_are_listed_and_partial_report_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ws = prepared(dir.path(), &cfg);
    pipeline::cmd_infer(
        &ws,
        &cfg,
        &InferOptions {
            oracle: true,
            label: Some("partial".into()),
            ..InferOptions::default()
        },
    )
    .unwrap();
    let run = ws.run("partial");
    let victim = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap();
    std::fs::remove_file(victim.join("mesh.obj")).unwrap();
    let out = pipeline::cmd_eval(&ws, &cfg, "partial").unwrap();
    assert_eq!(out.missing.len(), 1);
    assert!(out.missing[0].ends_with("mesh.obj"));
    assert_eq!(out.report.scenes.len(), 2);
    assert_eq!(out.report.scenes.iter().filter(|s| s.cd.is_none()).count(), 1);
    assert!(run.join("missing.txt").exists());
    assert!(matches!(pipeline::cmd_eval(&ws, &cfg, "nope"), Err(Error::Missing(_))));
}

#[test]
fn ablations_write_their_own_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ws = prepared(dir.path(), &cfg);
    let no_sdf = PipelineConfig {
        ablation: Ablation::NoSdf,
        ..cfg.clone()
    };
    let rep = pipeline::cmd_train(&ws, &no_sdf, |_, _| {}).unwrap();
    assert!((rep.losses[0] - 1.0).abs() < 0.3);
    assert!(ws.denoiser("no-sdf").join("losses.csv").exists());
    assert!(!ws.denoiser("full").exists());
    pipeline::cmd_infer(&ws, &no_sdf, &InferOptions::default()).unwrap();

    let nrd = PipelineConfig {
        ablation: Ablation::NoRayDiffuser,
        ..cfg.clone()
    };
    let s = pipeline::cmd_infer(&ws, &nrd, &InferOptions::default()).unwrap();
    for st in &s.scenes {
        assert!(!st.diffused);
        assert_eq!(st.anchor_loss_after, st.anchor_loss_before);
        let dir = ws.run("no-ray-diffuser").join(&st.scene);
        assert!(dir.join("mesh.obj").exists());
        assert!(!dir.join("cameras.json").exists());
    }
    let out = pipeline::cmd_eval(&ws, &nrd, "no-ray-diffuser").unwrap();
    assert!(out.missing.is_empty());
    assert_eq!(out.report.overall.rotation_accuracy_at_15, None);
    assert!(out.report.overall.cd.is_some());
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let ws = Workspace::new(dir.path());
    assert!(pipeline::cmd_fit_sdf(&ws, &cfg, SplitSelection::Eval).is_err());
    pipeline::cmd_synth(&ws, &cfg).unwrap();
    assert!(matches!(
        pipeline::cmd_infer(&ws, &cfg, &InferOptions::default()),
        Err(Error::Missing(_))
    ));
    let mut tp_cfg = cfg.clone();
    tp_cfg.joint.train_conditioning = raysdf::config::TrainConditioning::Triplane;
    assert!(matches!(pipeline::cmd_train(&ws, &tp_cfg, |_, _| {}), Err(Error::Missing(_))));
    let s = pipeline::cmd_infer(
        &ws,
        &cfg,
        &InferOptions {
            oracle: true,
            ..InferOptions::default()
        },
    )
    .unwrap();
    assert!(s.scenes.is_empty());
    assert_eq!(s.skipped.len(), 2);
}
