//! On-disk sample directories.
//!
//! ```text
//! <id>/meta.json   {"version":1,"height":H,"width":W,"seed":S,"hu_range":[-1000,3000]}
//! <id>/mr.f32      z-scored MR plane
//! <id>/ct.f32      reference CT plane (HU)
//! <id>/body.u8     body mask, one byte per pixel in {0,1}
//! ```
//!
//! Planes are headerless, row-major, little-endian. Prediction directories use
//! the same `meta.json` plus `sct.f32` and optionally `bone.f32` / `mask.f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, HuImage, Image2D, MrImage, ProbMap, HU_MAX, HU_MIN};

pub const FORMAT_VERSION: u64 = 1;

pub const META_FILE: &str = "meta.json";
pub const MR_FILE: &str = "mr.f32";
pub const CT_FILE: &str = "ct.f32";
pub const BODY_FILE: &str = "body.u8";
pub const SCT_FILE: &str = "sct.f32";
pub const BONE_FILE: &str = "bone.f32";
pub const MASK_FILE: &str = "mask.f32";
pub const DIFF_FILE: &str = "diff.f32";

/// Geometry actually drawn for a phantom; informational only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub skull_thickness: f64,
    pub scalp_thickness: f64,
    pub pockets: Vec<Pocket>,
    pub pathology: Option<Blob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pocket {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub septum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: (f64, f64),
    pub radius: f64,
    pub hu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: u64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub hu_range: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// Seed of the training run that produced a prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
}

impl Meta {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        Meta {
            version: FORMAT_VERSION,
            height,
            width,
            seed,
            hu_range: [HU_MIN as f64, HU_MAX as f64],
            variant: None,
            train_seed: None,
            config_hash: None,
            geometry: None,
        }
    }
}

/// Aligned MR/CT pair with its body mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub mr: MrImage,
    pub ct: HuImage,
    pub body: BinaryMask,
    pub seed: u64,
    pub geometry: Option<Geometry>,
}

impl PhantomSample {
    pub fn dims(&self) -> (usize, usize) {
        self.ct.dims()
    }
}

/// Head outputs of one case, in HU (de-scaled).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sct: Image2D,
    pub bone: Option<Image2D>,
    pub mask: Option<ProbMap>,
}

pub fn write_meta(dir: &Path, meta: &Meta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(dir.join(META_FILE), text + "\n")?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let meta: Meta = serde_json::from_slice(&fs::read(&path)?)?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(meta.version));
    }
    if meta.height == 0 || meta.width == 0 {
        return Err(Error::contract(format!(
            "{}: zero-sized image",
            path.display()
        )));
    }
    Ok(meta)
}

pub fn write_f32_plane(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_raw(path: &Path, expected: u64) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

pub fn read_f32_plane(path: &Path, height: usize, width: usize) -> Result<Image2D> {
    let bytes = read_raw(path, (height * width * 4) as u64)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Image2D::new(height, width, values)
}

fn read_u8_plane(path: &Path, height: usize, width: usize) -> Result<BinaryMask> {
    let bytes = read_raw(path, (height * width) as u64)?;
    BinaryMask::new(height, width, bytes)
}

pub fn write_sample(sample: &PhantomSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = sample.dims();
    let mut meta = Meta::new(h, w, sample.seed);
    meta.geometry = sample.geometry.clone();
    write_meta(dir, &meta)?;
    write_f32_plane(&dir.join(MR_FILE), sample.mr.values())?;
    write_f32_plane(&dir.join(CT_FILE), sample.ct.values())?;
    fs::write(dir.join(BODY_FILE), sample.body.values())?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<PhantomSample> {
    let meta = read_meta(dir)?;
    let (h, w) = (meta.height, meta.width);
    let mr = read_f32_plane(&dir.join(MR_FILE), h, w)?;
    let ct = read_f32_plane(&dir.join(CT_FILE), h, w)?;
    let body = read_u8_plane(&dir.join(BODY_FILE), h, w)?;
    Ok(PhantomSample {
        mr: MrImage::from_normalized(mr),
        ct: HuImage::clamped(ct),
        body,
        seed: meta.seed,
        geometry: meta.geometry,
    })
}

pub fn write_prediction(pred: &Prediction, meta: &Meta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_meta(dir, meta)?;
    write_f32_plane(&dir.join(SCT_FILE), pred.sct.values())?;
    if let Some(bone) = &pred.bone {
        write_f32_plane(&dir.join(BONE_FILE), bone.values())?;
    }
    if let Some(mask) = &pred.mask {
        write_f32_plane(&dir.join(MASK_FILE), mask.values())?;
    }
    Ok(())
}

pub fn read_prediction(dir: &Path) -> Result<(Meta, Prediction)> {
    let meta = read_meta(dir)?;
    let (h, w) = (meta.height, meta.width);
    let sct = read_f32_plane(&dir.join(SCT_FILE), h, w)?;
    let optional = |name: &str| -> Result<Option<Image2D>> {
        let p = dir.join(name);
        if p.exists() {
            read_f32_plane(&p, h, w).map(Some)
        } else {
            Ok(None)
        }
    };
    let bone = optional(BONE_FILE)?;
    let mask = optional(MASK_FILE)?.map(ProbMap::new).transpose()?;
    Ok((meta, Prediction { sct, bone, mask }))
}

/// Subdirectories of `dir` that contain a `meta.json`, sorted by name.
pub fn list_case_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() && path.join(META_FILE).is_file() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// A sample together with its case id (directory name).
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub sample: PhantomSample,
}

/// Reads every case directory below `dir`, sorted by id.
pub fn read_cases(dir: &Path) -> Result<Vec<Case>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    list_case_dirs(dir)?
        .into_iter()
        .map(|(id, path)| {
            Ok(Case {
                id,
                sample: read_sample(&path)?,
            })
        })
        .collect()
}
