//! Pipeline configuration: TOML file, `RAYSDF_` environment overrides, and
//! command-line flags, applied in that order over the defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::scene::DatasetConfig;
use crate::triplane::TriplaneConfig;

/// Prefix of environment overrides. `RAYSDF_DIFFUSION__TRAIN_STEPS=500` sets
/// `diffusion.train_steps`; `__` separates nesting levels.
pub const ENV_PREFIX: &str = "RAYSDF_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// The denoiser is trained and sampled with SDF conditioning fixed at 0.
    NoSdf,
    /// No reverse diffusion and no refinement: the fitted field is meshed as is.
    NoRayDiffuser,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSdf => "no-sdf",
            Ablation::NoRayDiffuser => "no-ray-diffuser",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-sdf" | "no_sdf" | "no_sdf_conditioning" => Ok(Ablation::NoSdf),
            "no-ray-diffuser" | "no_ray_diffuser" => Ok(Ablation::NoRayDiffuser),
            other => Err(Error::Configuration(format!("unknown ablation {other:?}"))),
        }
    }

    /// Name of the denoiser checkpoint this variant trains or samples with.
    pub fn denoiser_variant(self) -> &'static str {
        match self {
            Ablation::NoSdf => "no-sdf",
            _ => "full",
        }
    }
}

/// Field used to condition the denoiser during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainConditioning {
    /// The scene's exact SDF.
    #[default]
    Analytic,
    /// The scene's fitted triplane; checkpoints must exist for training scenes.
    Triplane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    /// Reverse steps between triplane refinements; 0 means `T / 10`.
    pub period: usize,
    pub lambda_surf: f64,
    pub refine_steps: usize,
    /// Refinement learning rates as a fraction of the fitting ones.
    pub refine_lr_scale: f64,
    /// Anchor samples per refinement step.
    pub anchor_batch: usize,
    /// Refinements that raise the anchor loss above this multiple of its
    /// pre-loop value are rolled back.
    pub guard_factor: f64,
    pub train_conditioning: TrainConditioning,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            period: 0,
            lambda_surf: 0.1,
            refine_steps: 20,
            refine_lr_scale: 0.1,
            anchor_batch: 1024,
            guard_factor: 2.0,
            train_conditioning: TrainConditioning::Analytic,
        }
    }
}

impl JointConfig {
    pub fn period_for(&self, t_steps: usize) -> usize {
        if self.period > 0 {
            self.period
        } else {
            (t_steps / 10).max(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rotation_threshold_deg: f64,
    pub translation_threshold: f64,
    pub surface_samples: usize,
    pub f_tau_fraction: f64,
    pub mesh_resolution: usize,
    /// Resolution of the ground-truth mesh extracted from the analytic SDF.
    pub gt_mesh_resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rotation_threshold_deg: crate::metrics::ROTATION_THRESHOLD_DEG,
            translation_threshold: crate::metrics::TRANSLATION_THRESHOLD,
            surface_samples: crate::metrics::DEFAULT_SURFACE_SAMPLES,
            f_tau_fraction: crate::metrics::F_SCORE_TAU_FRACTION,
            mesh_resolution: crate::mesh::DEFAULT_RESOLUTION,
            gt_mesh_resolution: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub dataset: DatasetConfig,
    pub triplane: TriplaneConfig,
    pub diffusion: DiffusionConfig,
    pub joint: JointConfig,
    pub eval: EvalConfig,
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Configuration(e.to_string())
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| config_error("empty override key"))?;
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_error(format!("override path {} is not a table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(config_error)?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: PipelineConfig = toml::Value::Table(table).try_into().map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults), then applies `(key, value)` overrides
    /// whose keys use `__` between nesting levels, case-insensitively.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
                    message: e.message().to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
            set_path(&mut table, &path, parse_value(raw))?;
        }
        Self::from_table(table)
    }

    /// Overrides taken from `RAYSDF_*` environment variables.
    pub fn env_overrides() -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = std::env::vars()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v)))
            .collect();
        out.sort();
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_error)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.triplane.validate()?;
        self.diffusion.validate()?;
        let bad = |m: &str| Err(Error::Configuration(m.into()));
        if !(self.joint.lambda_surf >= 0.0) || !(self.joint.guard_factor >= 1.0) {
            return bad("joint: lambda_surf must be >= 0 and guard_factor >= 1");
        }
        if !(self.joint.refine_lr_scale > 0.0) {
            return bad("joint: refine_lr_scale must be positive");
        }
        if self.joint.anchor_batch == 0 {
            return bad("joint: anchor_batch must be positive");
        }
        if self.eval.mesh_resolution < crate::mesh::MIN_RESOLUTION
            || self.eval.gt_mesh_resolution < crate::mesh::MIN_RESOLUTION
        {
            return bad("eval: mesh resolutions must be at least 8");
        }
        if self.eval.surface_samples == 0 || !(self.eval.f_tau_fraction > 0.0) {
            return bad("eval: surface_samples and f_tau_fraction must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(text.contains("[diffusion]") && text.contains("[joint]"));
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\nablation = \"no-sdf\"\n[diffusion]\ntrain_steps = 10\n").unwrap();
        let cfg = PipelineConfig::load(
            Some(&path),
            &[
                ("DIFFUSION__TRAIN_STEPS".into(), "25".into()),
                ("DATASET__SHAPE_MIX".into(), "[\"sphere\", \"torus\"]".into()),
                ("JOINT__TRAIN_CONDITIONING".into(), "triplane".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.ablation, Ablation::NoSdf);
        assert_eq!(cfg.diffusion.train_steps, 25);
        assert_eq!(cfg.dataset.shape_mix.len(), 2);
        assert_eq!(cfg.joint.train_conditioning, TrainConditioning::Triplane);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[diffusion]\nbogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml_str("[dataset]\nmin_views = 1\n").is_err());
        assert!(PipelineConfig::from_toml_str("ablation = \"half\"\n").is_err());
        assert!(PipelineConfig::load(None, &[("NOPE".into(), "1".into())]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "seed = 1\n[joint\n").unwrap();
        assert!(matches!(PipelineConfig::load(Some(&path), &[]), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn ablation_names() {
        for a in [Ablation::Full, Ablation::NoSdf, Ablation::NoRayDiffuser] {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("x").is_err());
        assert_eq!(JointConfig::default().period_for(100), 10);
        assert_eq!(JointConfig::default().period_for(5), 1);
    }
}
