//! Nadam training loop with joint geometric augmentation, task-weight
//! schedules and checkpoint selection.
//!
//! Per epoch the history records the running mean of the minibatch losses the
//! optimizer saw, plus eval-mode composites over the unaugmented train and
//! validation splits. The selection criterion is one of the eval-mode
//! composites (always at the configured, undecayed weights), so a reloaded
//! checkpoint reproduces it exactly.
//!
//! Run directory layout: `ckpt-<epoch>/` at every new minimum of the
//! criterion, `selected.json`, `history.json` (bit-reproducible) and
//! `timing.json` (wall-clock per epoch).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{partition_regions, BinaryMask, HuImage, Image2D, MrImage, HU_MAX, HU_MIN};
use crate::losses::{HeadPlanes, LossBreakdown, LossWeights, Objective, Targets};
use crate::network::{
    batch_from_planes, load_checkpoint, save_checkpoint, Model, ModelConfig, OutputGrads,
    ParamEntry, Real, Tensor, DEFAULT_VALUE_SCALE,
};
use crate::sample::{Case, PhantomSample};
use crate::variant::Variant;

pub const HISTORY_FILE: &str = "history.json";
pub const TIMING_FILE: &str = "timing.json";
pub const SELECTED_FILE: &str = "selected.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSchedule {
    Constant,
    /// `w1` and `w3` scaled by `1 - epoch/epochs`; `w2` fixed.
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    MinTrainComposite,
    MinValComposite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Additive Gaussian noise on the MR input, in z-score units.
    pub noise_sigma: f64,
    pub mirror: bool,
    pub rotate_max_deg: f64,
    pub scale_range: [f64; 2],
    /// Probability of applying each enabled transform.
    pub probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            noise_sigma: 0.03,
            mirror: true,
            rotate_max_deg: 10.0,
            scale_range: [0.9, 1.1],
            probability: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        AugmentPolicy {
            noise_sigma: 0.0,
            mirror: false,
            rotate_max_deg: 0.0,
            scale_range: [1.0, 1.0],
            probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma >= 0.0
            && self.rotate_max_deg >= 0.0
            && self.scale_range[0] > 0.0
            && self.scale_range[0] <= self.scale_range[1]
            && self.scale_range[1].is_finite()
            && (0.0..=1.0).contains(&self.probability);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid augmentation policy {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` takes the variant's defaults.
    pub weights: Option<LossWeights>,
    pub weight_schedule: WeightSchedule,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub selection: Selection,
    pub value_scale: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 15,
            epochs: 60,
            weights: None,
            weight_schedule: WeightSchedule::Constant,
            augment: AugmentPolicy::default(),
            seed: 0,
            selection: Selection::MinTrainComposite,
            value_scale: DEFAULT_VALUE_SCALE,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be > 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::contract("batch_size and epochs must be >= 1"));
        }
        if !(self.value_scale > 0.0 && self.value_scale.is_finite()) {
            return Err(Error::contract("value_scale must be > 0"));
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        self.augment.validate()?;
        self.model.validate()
    }

    pub fn base_weights(&self, variant: Variant) -> LossWeights {
        self.weights.unwrap_or_else(|| variant.default_weights())
    }

    /// Effective weights for 0-based `epoch`.
    pub fn weights_at(&self, variant: Variant, epoch: usize) -> LossWeights {
        let w = self.base_weights(variant);
        match self.weight_schedule {
            WeightSchedule::Constant => w,
            WeightSchedule::LinearDecay => {
                let f = 1.0 - epoch as f64 / self.epochs as f64;
                LossWeights {
                    w1: w.w1 * f,
                    w2: w.w2,
                    w3: w.w3 * f,
                }
            }
        }
    }
}

/// Nadam moments and momentum schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Running product of the momentum schedule `μ_1···μ_t`.
    pub m_schedule: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Decay of the Nesterov momentum warm-up schedule.
const SCHEDULE_DECAY: f64 = 0.004;

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            m_schedule: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    fn mu(&self, t: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * SCHEDULE_DECAY))
    }
}

/// One Nadam update (Adam with Nesterov momentum and the warm-up momentum
/// schedule `μ_t = β1·(1 - ½·0.96^(0.004·t))`).
///
/// All gradients are checked before any parameter moves; a non-finite
/// gradient is reported with the owning parameter's name.
pub fn nadam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut OptimizerState,
    lr: f64,
    manifest: &[ParamEntry],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.v.len() != state.m.len() {
        return Err(Error::contract(format!(
            "nadam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = manifest
            .iter()
            .find(|e| i >= e.offset && i < e.offset + e.len)
            .map_or_else(|| format!("index {i}"), |e| format!("{}[{}]", e.name, i - e.offset));
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    state.step += 1;
    let t = state.step;
    let mu_t = state.mu(t);
    let mu_next = state.mu(t + 1);
    let sched = state.m_schedule * mu_t;
    let sched_next = sched * mu_next;
    state.m_schedule = sched;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let v_corr = 1.0 - b2.powi(t.min(i32::MAX as u64) as i32);
    for i in 0..params.len() {
        let g: f64 = grads[i].into();
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let g_hat = g / (1.0 - sched);
        let m_hat = m / (1.0 - sched_next);
        let v_hat = v / v_corr;
        let m_bar = (1.0 - mu_t) * g_hat + mu_next * m_hat;
        let p: f64 = params[i].into();
        params[i] = T::from_f64(p - lr * m_bar / (v_hat.sqrt() + eps));
    }
    Ok(())
}

/// Seed of the augmentation stream for one sample in one epoch.
pub fn augment_seed(master_seed: u64, sample_id: &str, epoch: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"augment");
    h.update(master_seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update((epoch as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("32-byte digest"))
}

fn shuffle_seed(master_seed: u64, epoch: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"shuffle");
    h.update(master_seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("32-byte digest"))
}

/// Geometric transform drawn for one augmentation: left-right mirror, then
/// rotation by `angle_deg` and isotropic `scale` about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    pub mirror: bool,
    pub angle_deg: f64,
    pub scale: f64,
}

impl Warp {
    pub const IDENTITY: Warp = Warp {
        mirror: false,
        angle_deg: 0.0,
        scale: 1.0,
    };

    fn is_affine_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.scale == 1.0
    }

    /// Source coordinate sampled by output pixel `(y, x)`.
    fn source(&self, h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        // inverse rotation and scale
        let sx = (c * dx + s * dy) / self.scale + cx;
        let sy = (-s * dx + c * dy) / self.scale + cy;
        (sy, sx)
    }
}

fn mirror_plane<T: Copy>(v: &[T], w: usize) -> Vec<T> {
    v.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Bilinear resampling with edge replication.
pub fn warp_bilinear(img: &Image2D, warp: &Warp) -> Image2D {
    let (h, w) = img.dims();
    let src = if warp.mirror {
        mirror_plane(img.values(), w)
    } else {
        img.values().to_vec()
    };
    if warp.is_affine_identity() {
        return Image2D::new(h, w, src).expect("same shape");
    }
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        src[y * w + x] as f64
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = warp.source(h, w, y, x);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out.push(v as f32);
        }
    }
    Image2D::new(h, w, out).expect("same shape")
}

/// Nearest-neighbour resampling with edge replication.
pub fn warp_nearest<T: Copy>(values: &[T], h: usize, w: usize, warp: &Warp) -> Vec<T> {
    let src = if warp.mirror {
        mirror_plane(values, w)
    } else {
        values.to_vec()
    };
    if warp.is_affine_identity() {
        return src;
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = warp.source(h, w, y, x);
            let yi = (sy.round() as isize).clamp(0, h as isize - 1) as usize;
            let xi = (sx.round() as isize).clamp(0, w as isize - 1) as usize;
            out.push(src[yi * w + xi]);
        }
    }
    out
}

/// Draws a warp and applies it jointly to MR, CT and body; noise goes to the
/// MR only and the CT is clamped back to the HU range.
pub fn augment(sample: &PhantomSample, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> PhantomSample {
    let p = policy.probability;
    let mut draw = |enabled: bool| enabled && p > 0.0 && rng.random_bool(p);
    let mirror = draw(policy.mirror);
    let rotate = draw(policy.rotate_max_deg > 0.0);
    let scale = draw(policy.scale_range[0] != 1.0 || policy.scale_range[1] != 1.0);
    let noise = draw(policy.noise_sigma > 0.0);
    let warp = Warp {
        mirror,
        angle_deg: if rotate {
            rng.random_range(-policy.rotate_max_deg..=policy.rotate_max_deg)
        } else {
            0.0
        },
        scale: if scale {
            rng.random_range(policy.scale_range[0]..=policy.scale_range[1])
        } else {
            1.0
        },
    };
    let mut out = apply_warp(sample, &warp);
    if noise {
        let n = Normal::new(0.0, policy.noise_sigma).expect("validated sigma");
        let noisy = out.mr.values().iter().map(|&v| v + n.sample(rng) as f32).collect();
        out.mr = MrImage::from_normalized(Image2D::new(out.mr.dims().0, out.mr.dims().1, noisy).expect("same shape"));
    }
    out
}

pub fn apply_warp(sample: &PhantomSample, warp: &Warp) -> PhantomSample {
    let (h, w) = sample.dims();
    let ct = warp_bilinear(sample.ct.image(), warp)
        .map(|v| v.clamp(HU_MIN, HU_MAX))
        .expect("finite");
    PhantomSample {
        mr: MrImage::from_normalized(warp_bilinear(sample.mr.image(), warp)),
        ct: HuImage::clamped(ct),
        body: BinaryMask::new(h, w, warp_nearest(sample.body.values(), h, w, warp)).expect("binary"),
        seed: sample.seed,
        geometry: sample.geometry.clone(),
    }
}

/// One epoch of the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub weights: LossWeights,
    /// Mean of the minibatch losses seen by the optimizer.
    pub train: LossBreakdown,
    /// Eval-mode loss over the unaugmented train split at the base weights.
    pub train_eval: LossBreakdown,
    /// Eval-mode loss over the validation split at the base weights.
    pub val: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_s: Vec<f64>,
}

impl TrainHistory {
    pub fn total_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedCheckpoint {
    pub epoch: usize,
    pub criterion: Selection,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub final_model: Model<f32>,
    pub selected_model: Model<f32>,
    pub history: TrainHistory,
    pub selected: SelectedCheckpoint,
}

fn bone_target(ct: &HuImage, body: &BinaryMask) -> Result<BinaryMask> {
    Ok(partition_regions(ct, body)?.bone)
}

fn scaled(values: &[f32], s: f64) -> Vec<f32> {
    values.iter().map(|&v| (v as f64 * s) as f32).collect()
}

/// Eval-mode composite averaged over `cases`, at the given objective.
pub fn evaluate_loss(
    model: &Model<f32>,
    cases: &[Case],
    objective: &Objective,
    batch_size: usize,
) -> Result<LossBreakdown> {
    if cases.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let s = model.value_scale();
    let mut items = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch_size.max(1)) {
        let (h, w) = chunk[0].sample.dims();
        let planes: Vec<&[f32]> = chunk.iter().map(|c| c.sample.mr.values()).collect();
        let out = model.forward_eval(&batch_from_planes(&planes, h, w))?;
        for (i, c) in chunk.iter().enumerate() {
            let ct = scaled(c.sample.ct.values(), s);
            let bone = bone_target(&c.sample.ct, &c.sample.body)?;
            items.push(objective.loss(
                &heads_of(&out, i),
                &Targets {
                    ct: &ct,
                    body: c.sample.body.values(),
                    bone: bone.values(),
                },
            )?);
        }
    }
    Ok(LossBreakdown::mean(&items))
}

fn heads_of<'a>(out: &'a crate::network::TaskOutputs<f32>, i: usize) -> HeadPlanes<'a, f32> {
    HeadPlanes {
        sct: out.sct.sample(i),
        bone: out.bone.as_ref().map(|t| t.sample(i)),
        mask: out.mask.as_ref().map(|t| t.sample(i)),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn check_finite(b: &LossBreakdown, what: &str) -> Result<()> {
    if b.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss")))
    }
}

/// Trains `variant` on `train`, selecting on the configured criterion.
/// With `run_dir`, checkpoints and history are written as training proceeds.
pub fn train(
    train_cases: &[Case],
    val_cases: &[Case],
    cfg: &TrainConfig,
    variant: Variant,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_cases.is_empty() || val_cases.is_empty() {
        return Err(Error::contract("train and validation splits must be non-empty"));
    }
    let dims = train_cases[0].sample.dims();
    if let Some(c) = train_cases.iter().chain(val_cases).find(|c| c.sample.dims() != dims) {
        return Err(Error::contract(format!(
            "case {} is {:?}, expected {:?}",
            c.id,
            c.sample.dims(),
            dims
        )));
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
    }
    let (h, w) = dims;
    let base = Objective::new(variant, cfg.base_weights(variant));
    let mut model = Model::<f32>::build(&cfg.model, variant, cfg.seed)?;
    model.set_value_scale(cfg.value_scale)?;
    let mut opt = OptimizerState::new(model.param_count());
    let mut history = TrainHistory::default();
    let mut best: Option<(SelectedCheckpoint, Model<f32>)> = None;
    let s = cfg.value_scale;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let objective = Objective::new(variant, cfg.weights_at(variant, epoch));
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed, epoch)));

        let mut seen = Vec::with_capacity(train_cases.len());
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<PhantomSample> = batch
                .iter()
                .map(|&i| {
                    let c = &train_cases[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(augment_seed(cfg.seed, &c.id, epoch));
                    augment(&c.sample, &cfg.augment, &mut rng)
                })
                .collect();
            let planes: Vec<&[f32]> = samples.iter().map(|s| s.mr.values()).collect();
            let (out, cache) = model.forward_train(&batch_from_planes(&planes, h, w))?;

            let b = samples.len();
            let mut g_sct = Vec::with_capacity(b * h * w);
            let mut g_bone = Vec::with_capacity(b * h * w);
            let mut g_mask = Vec::with_capacity(b * h * w);
            let mut batch_losses = Vec::with_capacity(b);
            for (i, smp) in samples.iter().enumerate() {
                let ct = scaled(smp.ct.values(), s);
                let bone = bone_target(&smp.ct, &smp.body)?;
                let (loss, g) = objective.loss_and_gradients(
                    &heads_of(&out, i),
                    &Targets {
                        ct: &ct,
                        body: smp.body.values(),
                        bone: bone.values(),
                    },
                )?;
                check_finite(&loss, "training")?;
                batch_losses.push(loss);
                let inv_b = 1.0 / b as f64;
                g_sct.extend(g.sct.iter().map(|&v| (v * inv_b) as f32));
                if let Some(gb) = g.bone {
                    g_bone.extend(gb.iter().map(|&v| (v * inv_b) as f32));
                }
                if let Some(gm) = g.mask {
                    g_mask.extend(gm.iter().map(|&v| (v * inv_b) as f32));
                }
            }
            let as_tensor = |v: Vec<f32>| (!v.is_empty()).then(|| Tensor::from_vec(b, 1, h, w, v));
            let grads = model.backward(
                &cache,
                &OutputGrads {
                    sct: as_tensor(g_sct),
                    bone: as_tensor(g_bone),
                    mask: as_tensor(g_mask),
                },
            )?;
            let manifest = model.param_manifest().to_vec();
            nadam_step(model.params_mut(), &grads, &mut opt, cfg.learning_rate, &manifest)?;
            seen.extend(batch_losses);
            steps += 1;
        }

        let train_eval = evaluate_loss(&model, train_cases, &base, cfg.batch_size)?;
        let val = evaluate_loss(&model, val_cases, &base, cfg.batch_size)?;
        check_finite(&train_eval, "train-split evaluation")?;
        check_finite(&val, "validation")?;
        let record = EpochRecord {
            epoch: epoch + 1,
            steps,
            weights: objective.weights,
            train: LossBreakdown::mean(&seen),
            train_eval,
            val,
        };
        let value = match cfg.selection {
            Selection::MinTrainComposite => record.train_eval.total,
            Selection::MinValComposite => record.val.total,
        };
        if best.as_ref().is_none_or(|(b, _)| value < b.value) {
            let path = run_dir.map(|d| d.join(format!("ckpt-{}", epoch + 1)));
            if let Some(p) = &path {
                save_checkpoint(&model, p)?;
            }
            let sel = SelectedCheckpoint {
                epoch: epoch + 1,
                criterion: cfg.selection,
                value,
                path: path.as_ref().map(|p| PathBuf::from(p.file_name().expect("named"))),
            };
            if let Some(d) = run_dir {
                write_json(&d.join(SELECTED_FILE), &sel)?;
            }
            best = Some((sel, model.clone()));
        }
        history.epochs.push(record);
        history.wall_clock_s.push(started.elapsed().as_secs_f64());
        if let Some(d) = run_dir {
            write_json(&d.join(HISTORY_FILE), &history.epochs)?;
            write_json(&d.join(TIMING_FILE), &history.wall_clock_s)?;
        }
    }

    let (selected, selected_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_model: model,
        selected_model,
        history,
        selected,
    })
}

/// Loads the checkpoint named by `selected.json` in a run directory.
pub fn load_selected(run_dir: &Path) -> Result<(SelectedCheckpoint, Model<f32>)> {
    let path = run_dir.join(SELECTED_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let sel: SelectedCheckpoint = serde_json::from_slice(&fs::read(&path)?)?;
    let dir = sel
        .path
        .clone()
        .ok_or_else(|| Error::contract("selected.json has no checkpoint path"))?;
    let model = load_checkpoint(&run_dir.join(dir))?;
    Ok((sel, model))
}
