//! On-disk formats: the binary array container, camera JSON, datasets with a
//! checksummed manifest, and network checkpoints.
//!
//! Array file layout (all integers little-endian):
//!
//! ```text
//! b"RDARRAY\0"        8 bytes magic
//! b"f64\0"            4 bytes dtype tag
//! ndim                u32
//! dims[ndim]          u64 each
//! payload             f64 each, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::DenoiserNet;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Intrinsics, Mat3, Pixel, Ray, RayBundle, Vec3, RAY_DIM};
use crate::nn::{Activation, Dense, Mlp};
use crate::scene::{DatasetConfig, Feature, Scene, Shape, FEATURE_DIM};
use crate::triplane::TriplaneSdf;

pub const ARRAY_MAGIC: &[u8; 8] = b"RDARRAY\0";
pub const DTYPE_F64: &[u8; 4] = b"f64\0";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FORMAT_VERSION: u32 = 1;

/// Dense row-major `f64` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("{n} elements for {shape:?}"), data.len()));
        }
        Ok(Array { shape, data })
    }

    pub fn from_rows<const K: usize>(rows: &[[f64; K]]) -> Self {
        Array {
            shape: vec![rows.len(), K],
            data: rows.concat(),
        }
    }

    pub fn rows<const K: usize>(&self) -> Result<Vec<[f64; K]>> {
        if self.shape.len() != 2 || self.shape[1] != K {
            return Err(Error::shape(format!("[n, {K}]"), format!("{:?}", self.shape)));
        }
        Ok(self
            .data
            .chunks_exact(K)
            .map(|c| c.try_into().expect("chunk of K"))
            .collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(ARRAY_MAGIC);
        out.extend_from_slice(DTYPE_F64);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
            let end = pos.checked_add(n).filter(|e| *e <= bytes.len());
            let end = end.ok_or_else(|| format!("truncated at byte {pos}"))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let mut pos = 0;
        if take(&mut pos, 8)? != ARRAY_MAGIC {
            return Err("bad magic".into());
        }
        if take(&mut pos, 4)? != DTYPE_F64 {
            return Err("unsupported dtype".into());
        }
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or("shape overflows")?;
        if bytes.len() - pos != n.checked_mul(8).ok_or("shape overflows")? {
            return Err(format!("payload is {} bytes, expected {}", bytes.len() - pos, 8 * n));
        }
        let data = bytes[pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array { shape, data })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes the array and returns the SHA-256 of the file.
pub fn write_array(path: &Path, array: &Array) -> Result<String> {
    let bytes = array.encode();
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_array(path: &Path) -> Result<Array> {
    Array::decode(&read_bytes(path)?).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Camera as stored on disk: row-major camera-to-world rotation, center, and
/// `[fx, fy, cx, cy]`. The image is `2cx × 2cy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    pub intrinsics: [f64; 4],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        CameraRecord {
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            center: [c.center.x, c.center.y, c.center.z],
            intrinsics: [c.intrinsics.fx, c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy],
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        let [fx, fy, cx, cy] = self.intrinsics;
        let intrinsics = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width: 2.0 * cx,
            height: 2.0 * cy,
        };
        Camera::new(intrinsics, Mat3::from_row_slice(&self.rotation), Vec3::from(self.center))
    }
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let recs: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    write_json(path, &recs)
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let recs: Vec<CameraRecord> = read_json(path)?;
    recs.iter().map(CameraRecord::to_camera).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    pub index: usize,
    pub split: Split,
    pub n_views: usize,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub scenes: Vec<SceneEntry>,
    /// Relative path of every array file to its SHA-256.
    pub checksums: BTreeMap<String, String>,
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

fn write_scene(root: &Path, name: &str, scene: &Scene, checksums: &mut BTreeMap<String, String>) -> Result<()> {
    let dir = root.join(name);
    write_json(&dir.join("shape.json"), &scene.shape)?;
    write_cameras(&dir.join("cameras.json"), &scene.cameras)?;
    for (i, (b, f)) in scene.bundles.iter().zip(&scene.features).enumerate() {
        let rays: Vec<[f64; RAY_DIM]> = b.rays.iter().map(Ray::to_array).collect();
        let pixels: Vec<[f64; 2]> = b.pixels.iter().map(|p| [p.x, p.y]).collect();
        for (file, arr) in [
            (format!("rays_{i}.bin"), Array::from_rows(&rays)),
            (format!("pixels_{i}.bin"), Array::from_rows(&pixels)),
            (format!("features_{i}.bin"), Array::from_rows(f)),
        ] {
            let hash = write_array(&dir.join(&file), &arr)?;
            checksums.insert(format!("{name}/{file}"), hash);
        }
    }
    Ok(())
}

/// Writes scenes and the manifest. `scenes[k]` is stored under `entries[k].name`.
pub fn save_dataset(root: &Path, seed: u64, config: &DatasetConfig, scenes: &[Scene]) -> Result<Manifest> {
    let mut checksums = BTreeMap::new();
    let mut entries = Vec::with_capacity(scenes.len());
    for (index, scene) in scenes.iter().enumerate() {
        let name = scene_name(index);
        write_scene(root, &name, scene, &mut checksums)?;
        entries.push(SceneEntry {
            name,
            index,
            split: if index < config.n_train { Split::Train } else { Split::Eval },
            n_views: scene.n_views(),
            kind: serde_json::to_value(scene.shape.kind())?
                .as_str()
                .unwrap_or_default()
                .to_string(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        dataset: config.clone(),
        scenes: entries,
        checksums,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::Configuration(format!("manifest: {e}")))?;
    write_bytes(&root.join(MANIFEST_FILE), text.as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = String::from_utf8(read_bytes(&path)?).map_err(|e| Error::Parse {
        path: path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        path: path.clone(),
        message: e.message().to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "dataset format version {} is not supported",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Recomputes every array checksum listed in the manifest.
pub fn verify_dataset(root: &Path, manifest: &Manifest) -> Result<()> {
    for (rel, expected) in &manifest.checksums {
        let got = sha256_hex(&read_bytes(&root.join(rel))?);
        if &got != expected {
            return Err(Error::Validation(format!("checksum mismatch for {rel}")));
        }
    }
    Ok(())
}

/// Loads one scene listed in the manifest.
pub fn load_scene(root: &Path, entry: &SceneEntry) -> Result<Scene> {
    let dir = root.join(&entry.name);
    let shape: Shape = read_json(&dir.join("shape.json"))?;
    let cameras = read_cameras(&dir.join("cameras.json"))?;
    if cameras.len() != entry.n_views {
        return Err(Error::Validation(format!(
            "{}: {} cameras, manifest says {}",
            entry.name,
            cameras.len(),
            entry.n_views
        )));
    }
    let mut bundles = Vec::with_capacity(cameras.len());
    let mut features = Vec::with_capacity(cameras.len());
    for i in 0..cameras.len() {
        let rays: Vec<[f64; RAY_DIM]> = read_array(&dir.join(format!("rays_{i}.bin")))?.rows()?;
        let pixels: Vec<[f64; 2]> = read_array(&dir.join(format!("pixels_{i}.bin")))?.rows()?;
        let feats: Vec<Feature> = read_array(&dir.join(format!("features_{i}.bin")))?.rows::<FEATURE_DIM>()?;
        if rays.len() != pixels.len() || rays.len() != feats.len() {
            return Err(Error::Validation(format!("{}: image {i} arrays disagree in length", entry.name)));
        }
        bundles.push(RayBundle {
            rays: rays
                .iter()
                .map(|r| Ray {
                    v: Vec3::new(r[0], r[1], r[2]),
                    m: Vec3::new(r[3], r[4], r[5]),
                    d: r[6],
                })
                .collect(),
            pixels: pixels.iter().map(|p| Pixel::new(p[0], p[1])).collect(),
            image_index: i,
        });
        features.push(feats);
    }
    Ok(Scene {
        shape,
        cameras,
        bundles,
        features,
    })
}

/// Reads, checksums and audits a whole dataset.
pub fn load_dataset(root: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let manifest = read_manifest(root)?;
    verify_dataset(root, &manifest)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| load_scene(root, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

/// Architecture of a stored MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn of(mlp: &Mlp) -> Self {
        let mut widths = vec![mlp.input_dim()];
        widths.extend(mlp.layers().iter().map(Dense::out_dim));
        MlpSpec {
            widths,
            activations: mlp.layers().iter().map(|l| l.activation).collect(),
        }
    }

    pub fn build(&self, flat: &[f64]) -> Result<Mlp> {
        if self.activations.len() + 1 != self.widths.len() {
            return Err(Error::shape(self.widths.len() - 1, self.activations.len()));
        }
        let layers = self
            .widths
            .windows(2)
            .zip(&self.activations)
            .map(|(w, a)| Dense {
                weight: nalgebra::DMatrix::zeros(w[1], w[0]),
                bias: nalgebra::DVector::zeros(w[1]),
                activation: *a,
            })
            .collect();
        let mut mlp = Mlp::from_layers(layers)?;
        mlp.set_flat_params(flat)?;
        Ok(mlp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TriplaneMeta {
    resolution: usize,
    channels: usize,
    pe_bands: usize,
    decoder: MlpSpec,
}

/// Writes `triplane.json`, `planes.bin` (`[3, R, R, C]`) and `decoder.bin`.
pub fn save_triplane(dir: &Path, tp: &TriplaneSdf) -> Result<()> {
    let meta = TriplaneMeta {
        resolution: tp.resolution(),
        channels: tp.channels(),
        pe_bands: tp.pe_bands(),
        decoder: MlpSpec::of(tp.decoder()),
    };
    write_json(&dir.join("triplane.json"), &meta)?;
    let r = tp.resolution();
    let planes = Array::new(vec![3, r, r, tp.channels()], tp.planes().concat())?;
    write_array(&dir.join("planes.bin"), &planes)?;
    let dec = tp.decoder().flat_params();
    write_array(&dir.join("decoder.bin"), &Array::new(vec![dec.len()], dec)?)?;
    Ok(())
}

pub fn load_triplane(dir: &Path) -> Result<TriplaneSdf> {
    let meta: TriplaneMeta = read_json(&dir.join("triplane.json"))?;
    let planes = read_array(&dir.join("planes.bin"))?;
    let (r, c) = (meta.resolution, meta.channels);
    if planes.shape != [3, r, r, c] {
        return Err(Error::shape(format!("[3, {r}, {r}, {c}]"), format!("{:?}", planes.shape)));
    }
    let n = r * r * c;
    let split = [0, 1, 2].map(|k| planes.data[k * n..(k + 1) * n].to_vec());
    let decoder = meta.decoder.build(&read_array(&dir.join("decoder.bin"))?.data)?;
    TriplaneSdf::from_parts(r, c, meta.pe_bands, split, decoder)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DenoiserMeta {
    trunk: MlpSpec,
    head: MlpSpec,
}

/// Writes `denoiser.json`, `trunk.bin` and `head.bin`.
pub fn save_denoiser(dir: &Path, net: &DenoiserNet) -> Result<()> {
    let meta = DenoiserMeta {
        trunk: MlpSpec::of(net.trunk()),
        head: MlpSpec::of(net.head()),
    };
    write_json(&dir.join("denoiser.json"), &meta)?;
    for (file, mlp) in [("trunk.bin", net.trunk()), ("head.bin", net.head())] {
        let p = mlp.flat_params();
        write_array(&dir.join(file), &Array::new(vec![p.len()], p)?)?;
    }
    Ok(())
}

pub fn load_denoiser(dir: &Path) -> Result<DenoiserNet> {
    let path = dir.join("denoiser.json");
    if !path.exists() {
        return Err(Error::Missing(format!("denoiser checkpoint {}", path.display())));
    }
    let meta: DenoiserMeta = read_json(&path)?;
    let trunk = meta.trunk.build(&read_array(&dir.join("trunk.bin"))?.data)?;
    let head = meta.head.build(&read_array(&dir.join("head.bin"))?.data)?;
    DenoiserNet::from_parts(trunk, head)
}

/// Every regular file under `root` with its path relative to `root`, sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}
