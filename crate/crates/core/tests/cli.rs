use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 11
[dataset]
n_train = 2
n_eval = 1
rays_per_image = 16
[triplane]
resolution = 8
channels = 4
pe_bands = 2
hidden_width = 16
steps = 40
batch_size = 128
n_surface = 300
n_uniform = 300
n_near = 300
[diffusion]
trunk_width = 8
head_width = 8
train_steps = 4
rays_per_image_train = 8
rays_per_image_infer = 8
[joint]
refine_steps = 2
anchor_batch = 64
[eval]
surface_samples = 300
mesh_resolution = 16
gt_mesh_resolution = 16
"#;

fn raysdf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raysdf"))
        .arg("--out")
        .arg(dir)
        .arg("--config")
        .arg(dir.join("config.toml"))
        .args(args)
        .env_remove("RAYSDF_SEED")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("config.toml"), CONFIG).unwrap();
    ok(raysdf(d, &["synth"]));
    assert!(d.join("dataset/manifest.toml").exists());
    ok(raysdf(d, &["fit-sdf"]));
    assert!(d.join("triplanes/fit_losses.csv").exists());
    ok(raysdf(d, &["train"]));
    assert!(d.join("denoiser/full/denoiser.json").exists());
    ok(raysdf(d, &["infer"]));
    let csv = ok(raysdf(d, &["eval"]));
    assert!(csv.starts_with("scene,n_views,"));
    assert!(csv.lines().any(|l| l.starts_with("all,")));
    ok(raysdf(d, &["--ablation", "no-ray-diffuser", "infer"]));
    ok(raysdf(d, &["--ablation", "no-ray-diffuser", "eval"]));
    assert!(d.join("runs/no-ray-diffuser/metrics.json").exists());
}

#[test]
fn seed_flag_and_environment_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("config.toml"), CONFIG).unwrap();
    ok(raysdf(d, &["--seed", "5", "synth"]));
    let manifest = std::fs::read_to_string(d.join("dataset/manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 5"), "{manifest}");

    let out = Command::new(env!("CARGO_BIN_EXE_raysdf"))
        .arg("--out")
        .arg(d)
        .arg("--config")
        .arg(d.join("config.toml"))
        .arg("synth")
        .env("RAYSDF_DATASET__N_EVAL", "2")
        .output()
        .unwrap();
    ok(out);
    let manifest = std::fs::read_to_string(d.join("dataset/manifest.toml")).unwrap();
    assert!(manifest.contains("scene_0003"), "{manifest}");
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("config.toml"), "[diffusion]\nbogus = 1\n").unwrap();
    let out = raysdf(d, &["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    std::fs::write(d.join("config.toml"), CONFIG).unwrap();
    let out = raysdf(d, &["infer"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_suite() {
    let out = Command::new(env!("CARGO_BIN_EXE_raysdf")).arg("gradcheck").output().unwrap();
    let text = ok(out);
    assert_eq!(text.lines().count(), 12);
    assert!(text.lines().all(|l| l.contains("PASS") && l.contains("worst=")));
}
