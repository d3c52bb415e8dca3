//! Seeded generator of paired, pre-aligned head phantoms.
//!
//! CT: air background, an elliptic body with a thin soft-tissue scalp, a
//! skull band of log-normal bone density with partial-volume edges, a smooth
//! soft-tissue interior, one to three anterior air pockets optionally walled
//! by one-pixel septa, and an occasional hyperdense skull blob.
//!
//! MR: per-class mean intensity (tissue bright, bone and air dark and
//! overlapping) plus Gaussian noise, multiplied by a quadratic bias field and
//! z-scored.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{z_score_normalize, BinaryMask, HuImage, Image2D, HU_MAX, HU_MIN};
use crate::sample::{write_sample, Blob, Geometry, PhantomSample, Pocket};

pub const DATASET_FILE: &str = "dataset.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const MIN_SIZE: usize = 32;

/// Log-normal bone density parameterized by its mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneHu {
    pub mode: f64,
    /// Standard deviation of `ln(HU)`.
    pub sigma: f64,
    pub clip: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrClassMeans {
    pub tissue: f64,
    pub bone: f64,
    pub air: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub size: usize,
    /// Full body-ellipse axes as a fraction of the canvas side.
    pub body_axes_frac: [f64; 2],
    pub center_jitter_frac: f64,
    /// Lengths in pixels (`*_px`) are given for a 96-pixel canvas and scale
    /// linearly with `size`.
    pub scalp_thickness_px: [f64; 2],
    pub skull_thickness_px: [f64; 2],
    /// Fractional thinning of the skull at the two lateral (temporal) sides.
    pub skull_thinning: f64,
    pub bone_hu: BoneHu,
    pub tissue_hu: [f64; 2],
    pub air_hu: f64,
    pub sinus_count: [usize; 2],
    pub sinus_radius_px: [f64; 2],
    pub septa: bool,
    pub septa_hu: [f64; 2],
    pub pathology_prob: f64,
    pub pathology_hu: [f64; 2],
    pub pathology_radius_px: [f64; 2],
    pub mr_class_means: MrClassMeans,
    pub mr_noise_sigma: f64,
    /// Peak relative deviation of the multiplicative bias field.
    pub bias_amplitude: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            size: 96,
            body_axes_frac: [0.6, 0.8],
            center_jitter_frac: 0.04,
            scalp_thickness_px: [1.5, 3.0],
            skull_thickness_px: [2.0, 4.0],
            skull_thinning: 0.7,
            bone_hu: BoneHu {
                mode: 900.0,
                sigma: 0.35,
                clip: [300.0, 2500.0],
            },
            tissue_hu: [0.0, 80.0],
            air_hu: -1000.0,
            sinus_count: [1, 3],
            sinus_radius_px: [3.0, 7.0],
            septa: true,
            septa_hu: [300.0, 700.0],
            pathology_prob: 0.3,
            pathology_hu: [600.0, 1200.0],
            pathology_radius_px: [2.0, 4.0],
            mr_class_means: MrClassMeans {
                tissue: 1.0,
                bone: 0.15,
                air: 0.05,
            },
            mr_noise_sigma: 0.05,
            bias_amplitude: 0.2,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("phantom params: {m}")));
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.size < MIN_SIZE {
            return bad("size must be >= 32");
        }
        for (name, r) in [
            ("body_axes_frac", self.body_axes_frac),
            ("scalp_thickness_px", self.scalp_thickness_px),
            ("skull_thickness_px", self.skull_thickness_px),
            ("bone_hu.clip", self.bone_hu.clip),
            ("tissue_hu", self.tissue_hu),
            ("sinus_radius_px", self.sinus_radius_px),
            ("septa_hu", self.septa_hu),
            ("pathology_hu", self.pathology_hu),
            ("pathology_radius_px", self.pathology_radius_px),
        ] {
            if !ordered(r) {
                return bad(&format!("{name} must be an ordered finite range"));
            }
        }
        if self.body_axes_frac[0] <= 0.0 || self.body_axes_frac[1] > 1.0 {
            return bad("body_axes_frac must lie in (0, 1]");
        }
        if self.sinus_count[0] < 1 || self.sinus_count[0] > self.sinus_count[1] {
            return bad("sinus_count must be an ordered range starting at >= 1");
        }
        if self.sinus_radius_px[0] <= 0.0 || self.skull_thickness_px[0] <= 0.0 {
            return bad("sinus radii and skull thickness must be positive");
        }
        if !(0.0..1.0).contains(&self.skull_thinning) {
            return bad("skull_thinning must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.pathology_prob) {
            return bad("pathology_prob must lie in [0, 1]");
        }
        if !(self.bone_hu.mode > 0.0) || !(self.bone_hu.sigma > 0.0) {
            return bad("bone_hu mode and sigma must be positive");
        }
        if !(self.mr_noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.bias_amplitude) {
            return bad("mr_noise_sigma must be >= 0 and bias_amplitude in [0, 1)");
        }
        if !(0.0..0.5).contains(&self.center_jitter_frac) {
            return bad("center_jitter_frac must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// A generated sample together with its MR plane before z-scoring.
#[derive(Debug, Clone)]
pub struct RenderedPhantom {
    pub sample: PhantomSample,
    pub raw_mr: Image2D,
}

pub fn generate_phantom(params: &PhantomParams, seed: u64) -> Result<PhantomSample> {
    render_phantom(params, seed).map(|r| r.sample)
}

#[derive(Clone, Copy, PartialEq)]
enum Class {
    Air,
    Tissue,
    Bone,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Length of the overlap of `[a, b]` with `[lo, hi]`.
fn overlap(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    (b.min(hi) - a.max(lo)).max(0.0)
}

pub fn render_phantom(params: &PhantomParams, seed: u64) -> Result<RenderedPhantom> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = params.size;
    let sf = s as f64;
    let scale = sf / 96.0;

    let jitter = params.center_jitter_frac * sf;
    let cx = (sf - 1.0) / 2.0 + uniform(&mut rng, [-jitter, jitter]);
    let cy = (sf - 1.0) / 2.0 + uniform(&mut rng, [-jitter, jitter]);
    let a = 0.5 * sf * uniform(&mut rng, params.body_axes_frac);
    let b = 0.5 * sf * uniform(&mut rng, params.body_axes_frac);
    let scalp = uniform(&mut rng, params.scalp_thickness_px) * scale;
    let skull = uniform(&mut rng, params.skull_thickness_px) * scale;
    let skull_end = scalp + skull;
    if a.min(b) - skull_end < 3.0 {
        return Err(Error::contract(format!(
            "canvas {s} too small for a {skull_end:.1}-pixel scalp and skull"
        )));
    }

    // normalized radius and approximate depth below the body surface
    let polar = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        let r = ((dx / a).powi(2) + (dy / b).powi(2)).sqrt();
        let depth = if r > 0.0 {
            (dx * dx + dy * dy).sqrt() * (1.0 - r) / r
        } else {
            f64::INFINITY
        };
        (r, depth)
    };

    let n_pockets = rng.random_range(params.sinus_count[0]..=params.sinus_count[1]);
    let mut pockets = Vec::with_capacity(n_pockets);
    for _ in 0..n_pockets {
        let mut placed = None;
        for _ in 0..50 {
            let theta = rng.random_range(-5.0 * PI / 6.0..-PI / 6.0);
            let q = rng.random_range(0.25..0.6);
            let px = cx + q * (a - skull_end) * theta.cos();
            let py = cy + q * (b - skull_end) * theta.sin();
            let rx = (uniform(&mut rng, params.sinus_radius_px) * scale).max(1.5);
            let ry = (uniform(&mut rng, params.sinus_radius_px) * scale).max(1.5);
            // pocket plus its septum must sit below the skull
            let fits = (0..16).all(|k| {
                let t = k as f64 * PI / 8.0;
                let (_, d) = polar(px + (rx + 1.5) * t.cos(), py + (ry + 1.5) * t.sin());
                d > skull_end + 1.0
            });
            if fits {
                placed = Some(Pocket {
                    center: (px, py),
                    radii: (rx, ry),
                    septum: params.septa,
                });
                break;
            }
        }
        match placed {
            Some(p) => pockets.push(p),
            None => {
                return Err(Error::contract(format!(
                    "canvas {s} too small to place an air pocket"
                )))
            }
        }
    }

    let pathology = if rng.random_bool(params.pathology_prob) {
        let t = rng.random_range(-PI..PI);
        let mid = scalp + 0.5 * skull;
        let radius = uniform(&mut rng, params.pathology_radius_px) * scale;
        Some(Blob {
            center: (cx + (a - mid) * t.cos(), cy + (b - mid) * t.sin()),
            radius,
            hu: uniform(&mut rng, params.pathology_hu),
        })
    } else {
        None
    };

    // smooth tissue field: a few low-frequency plane waves, rescaled to range
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let ang = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.5..2.0) * 2.0 * PI / sf;
            (freq * ang.cos(), freq * ang.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let raw_field: Vec<f64> = (0..s * s)
        .map(|i| {
            let (x, y) = ((i % s) as f64, (i / s) as f64);
            waves.iter().map(|&(u, v, p)| (u * x + v * y + p).cos()).sum()
        })
        .collect();
    let (fmin, fmax) = raw_field
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (fmax - fmin).max(1e-12);
    let tissue_at = |i: usize| {
        let t = (raw_field[i] - fmin) / span;
        params.tissue_hu[0] + t * (params.tissue_hu[1] - params.tissue_hu[0])
    };

    let bone = &params.bone_hu;
    let bone_dist = LogNormal::new(bone.mode.ln() + bone.sigma * bone.sigma, bone.sigma)
        .map_err(|e| Error::contract(format!("bone_hu: {e}")))?;

    let mut ct = vec![params.air_hu; s * s];
    let mut class = vec![Class::Air; s * s];
    let mut body = vec![0u8; s * s];
    for i in 0..s * s {
        let (x, y) = ((i % s) as f64, (i / s) as f64);
        let (r, depth) = polar(x, y);
        if r > 1.0 {
            continue;
        }
        body[i] = 1;
        let tissue = tissue_at(i);
        let lateral = ((x - cx) / a).atan2((y - cy) / b).sin().powi(2);
        let local_end = scalp + skull * (1.0 - params.skull_thinning * lateral);
        let frac = overlap(depth - 0.5, depth + 0.5, scalp, local_end);
        let mut hu = tissue;
        class[i] = Class::Tissue;
        if frac > 0.0 {
            let draw = bone_dist.sample(&mut rng).clamp(bone.clip[0], bone.clip[1]);
            hu = frac * draw + (1.0 - frac) * tissue;
            if frac >= 0.5 {
                class[i] = Class::Bone;
            }
        }
        ct[i] = hu;
    }

    for p in &pockets {
        let rmin = p.radii.0.min(p.radii.1);
        let wall = 1.0 + 1.0 / rmin;
        for i in 0..s * s {
            let (x, y) = ((i % s) as f64, (i / s) as f64);
            let q = (((x - p.center.0) / p.radii.0).powi(2) + ((y - p.center.1) / p.radii.1).powi(2))
                .sqrt();
            if p.septum && q > 1.0 && q <= wall && class[i] == Class::Tissue {
                ct[i] = uniform(&mut rng, params.septa_hu);
                class[i] = Class::Bone;
            }
        }
    }
    // pocket interiors last so touching pockets merge instead of walling
    for p in &pockets {
        for i in 0..s * s {
            let (x, y) = ((i % s) as f64, (i / s) as f64);
            let q = ((x - p.center.0) / p.radii.0).powi(2) + ((y - p.center.1) / p.radii.1).powi(2);
            if q <= 1.0 {
                ct[i] = params.air_hu;
                class[i] = Class::Air;
            }
        }
    }
    if let Some(blob) = &pathology {
        for i in 0..s * s {
            let (x, y) = ((i % s) as f64, (i / s) as f64);
            let d2 = (x - blob.center.0).powi(2) + (y - blob.center.1).powi(2);
            if body[i] == 1 && class[i] != Class::Air && d2 <= blob.radius * blob.radius {
                ct[i] = ct[i].max(blob.hu);
                class[i] = Class::Bone;
            }
        }
    }

    // MR: class mean + noise, times a quadratic bias field
    let basis: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let quad: Vec<f64> = (0..s * s)
        .map(|i| {
            let u = 2.0 * (i % s) as f64 / (sf - 1.0) - 1.0;
            let v = 2.0 * (i / s) as f64 / (sf - 1.0) - 1.0;
            basis[0] * u + basis[1] * v + basis[2] * u * u + basis[3] * v * v + basis[4] * u * v
        })
        .collect();
    let qmax = quad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let noise = Normal::new(0.0, params.mr_noise_sigma)
        .map_err(|e| Error::contract(format!("mr_noise_sigma: {e}")))?;
    let means = &params.mr_class_means;
    let raw: Vec<f32> = (0..s * s)
        .map(|i| {
            let mean = match class[i] {
                Class::Air => means.air,
                Class::Tissue => means.tissue,
                Class::Bone => means.bone,
            };
            let bias = if qmax > 0.0 {
                1.0 + params.bias_amplitude * quad[i] / qmax
            } else {
                1.0
            };
            ((mean + noise.sample(&mut rng)) * bias) as f32
        })
        .collect();

    let raw_mr = Image2D::new(s, s, raw)?;
    let mr = z_score_normalize(&raw_mr);
    let ct_img = Image2D::new(
        s,
        s,
        ct.iter()
            .map(|&v| (v as f32).clamp(HU_MIN, HU_MAX))
            .collect(),
    )?;
    let geometry = Geometry {
        center: (cx, cy),
        semi_axes: (a, b),
        skull_thickness: skull,
        scalp_thickness: scalp,
        pockets,
        pathology,
    };
    Ok(RenderedPhantom {
        sample: PhantomSample {
            mr,
            ct: HuImage::clamped(ct_img),
            body: BinaryMask::new(s, s, body)?,
            seed,
            geometry: Some(geometry),
        },
        raw_mr,
    })
}

/// Per-sample seed: the first eight bytes of
/// `SHA-256(master_seed_le ‖ split ‖ index_le)`.
pub fn sample_seed(master_seed: u64, split: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn case_id(index: usize) -> String {
    format!("case-{index:04}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub params: PhantomParams,
    pub train: Vec<SplitEntry>,
    pub val: Vec<SplitEntry>,
    pub test: Vec<SplitEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 120,
            val: 20,
            test: 40,
        }
    }
}

/// Writes `out/{train,val,test}/case-NNNN/` plus `out/dataset.json`.
pub fn generate_dataset(
    out: &Path,
    counts: SplitCounts,
    params: &PhantomParams,
    master_seed: u64,
    overwrite: bool,
) -> Result<DatasetManifest> {
    params.validate()?;
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::contract("every split needs at least one sample"));
    }
    let existing = out.exists() && fs::read_dir(out)?.next().is_some();
    if existing {
        if !overwrite {
            return Err(Error::Collision(out.to_path_buf()));
        }
        for split in SPLITS {
            let p = out.join(split);
            if p.exists() {
                fs::remove_dir_all(p)?;
            }
        }
    }
    fs::create_dir_all(out)?;

    let entries = |split: &str, n: usize| -> Vec<SplitEntry> {
        (0..n)
            .map(|i| SplitEntry {
                id: case_id(i),
                seed: sample_seed(master_seed, split, i),
            })
            .collect()
    };
    let manifest = DatasetManifest {
        master_seed,
        params: params.clone(),
        train: entries("train", counts.train),
        val: entries("val", counts.val),
        test: entries("test", counts.test),
    };
    for (split, list) in [
        ("train", &manifest.train),
        ("val", &manifest.val),
        ("test", &manifest.test),
    ] {
        let dir = out.join(split);
        list.par_iter().try_for_each(|e| -> Result<()> {
            let sample = generate_phantom(params, e.seed)?;
            write_sample(&sample, &dir.join(&e.id))
        })?;
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(out.join(DATASET_FILE), json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{count_components, derive_body_mask, fill_holes, partition_regions};

    #[test]
    fn same_seed_same_sample() {
        let p = PhantomParams::default();
        assert_eq!(generate_phantom(&p, 4).unwrap(), generate_phantom(&p, 4).unwrap());
        assert_ne!(generate_phantom(&p, 4).unwrap(), generate_phantom(&p, 5).unwrap());
    }

    #[test]
    fn structural_invariants_hold() {
        let p = PhantomParams::default();
        for seed in 0..20 {
            let s = generate_phantom(&p, seed).unwrap();
            assert!(s.ct.values().iter().all(|v| (HU_MIN..=HU_MAX).contains(v)));
            assert_eq!(count_components(&fill_holes(&s.body)), 1);
            let parts = partition_regions(&s.ct, &s.body).unwrap();
            assert!(parts.bone.count() > 0 && parts.air.count() > 0, "seed {seed}");
            let mean = s.mr.values().iter().map(|&v| v as f64).sum::<f64>() / s.mr.values().len() as f64;
            let var = s
                .mr
                .values()
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / s.mr.values().len() as f64;
            assert!(mean.abs() < 1e-5 && (var.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn derived_body_mask_recovers_ground_truth() {
        let p = PhantomParams::default();
        for seed in 0..10 {
            let s = generate_phantom(&p, seed).unwrap();
            let d = derive_body_mask(&s.ct);
            let inter = d.and(&s.body).unwrap().count() as f64;
            let dice = 2.0 * inter / (d.count() + s.body.count()) as f64;
            assert!(dice >= 0.99, "seed {seed}: {dice}");
        }
    }

    #[test]
    fn small_canvas_rejected() {
        let p = PhantomParams {
            size: 16,
            ..PhantomParams::default()
        };
        assert!(generate_phantom(&p, 0).is_err());
        let p = PhantomParams {
            size: 32,
            skull_thickness_px: [25.0, 30.0],
            ..PhantomParams::default()
        };
        assert!(generate_phantom(&p, 0).is_err());
    }

    #[test]
    fn seeds_differ_per_split_and_index() {
        let a = sample_seed(1, "train", 0);
        assert_ne!(a, sample_seed(1, "val", 0));
        assert_ne!(a, sample_seed(1, "train", 1));
        assert_ne!(a, sample_seed(2, "train", 0));
        assert_eq!(a, sample_seed(1, "train", 0));
    }

    #[test]
    fn dataset_collision_needs_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = PhantomParams {
            size: 32,
            ..PhantomParams::default()
        };
        let c = SplitCounts {
            train: 2,
            val: 1,
            test: 1,
        };
        generate_dataset(dir.path(), c, &p, 3, false).unwrap();
        assert!(matches!(
            generate_dataset(dir.path(), c, &p, 3, false),
            Err(Error::Collision(_))
        ));
        generate_dataset(dir.path(), c, &p, 3, true).unwrap();
        assert!(generate_dataset(
            &dir.path().join("x"),
            SplitCounts { train: 0, ..c },
            &p,
            3,
            false
        )
        .is_err());
    }
}
