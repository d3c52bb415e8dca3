//! Full-resolution multi-head encoder–decoder built from parallel dilated
//! convolutions.
//!
//! Each block runs a large-kernel and a small-kernel dilated convolution side
//! by side, each followed by batch norm and ELU, and concatenates the two.
//! Level `ℓ` has `base·2^ℓ` channels and dilation `dilation_schedule[ℓ]`.
//! The decoder mirrors the encoder (deepest level first); every decoder level
//! above the deepest receives the previous decoder output concatenated with
//! the matching encoder output. No layer changes spatial size. Heads are
//! 1×1 convolutions with optional batch norm and an identity, ReLU or sigmoid
//! output.
//!
//! All trainable parameters live in one flat vector described by a manifest,
//! which is also the checkpoint layout.

mod checkpoint;
mod ops;
mod real;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, MODEL_F32, MODEL_JSON};
pub use real::Real;
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::image::{Image2D, MrImage, ProbMap};
use crate::sample::Prediction;
use crate::variant::Variant;
use ops::{BnCache, ConvShape};

/// Upper bound on the smallest spatial size accepted by `forward`.
pub const MIN_INPUT_SIZE: usize = 16;

/// HU are multiplied by this before entering the regression losses.
pub const DEFAULT_VALUE_SCALE: f64 = 1e-3;

/// Sigmoid outputs are kept this far from 0 and 1.
const SIGMOID_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub levels: usize,
    pub blocks_per_level: usize,
    pub base_channels: usize,
    /// Kernel sizes of the two parallel branches.
    pub kernel_sizes: [usize; 2],
    pub dilation_schedule: Vec<usize>,
    pub head_batchnorm: bool,
    pub bn_epsilon: f64,
    /// Running statistics: `r <- momentum·r + (1 - momentum)·batch`.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            blocks_per_level: 2,
            base_channels: 16,
            kernel_sizes: [5, 3],
            dilation_schedule: vec![1, 2, 4],
            head_batchnorm: true,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("model config: {m}")));
        if self.levels == 0 {
            return bad("levels must be >= 1");
        }
        if self.blocks_per_level == 0 {
            return bad("blocks_per_level must be >= 1");
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1");
        }
        if self.dilation_schedule.len() != self.levels {
            return bad("dilation_schedule length must equal levels");
        }
        if self.dilation_schedule.iter().any(|&d| d == 0) {
            return bad("dilations must be >= 1");
        }
        if self.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return bad("kernel sizes must be odd");
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_epsilon must be > 0 and bn_momentum in [0, 1)");
        }
        Ok(())
    }

    /// Smallest accepted input side: the widest dilated kernel extent of
    /// any level, capped at [`MIN_INPUT_SIZE`].
    pub fn min_input_size(&self) -> usize {
        let k = self.kernel_sizes.iter().copied().max().unwrap_or(1);
        let d = self.dilation_schedule.iter().copied().max().unwrap_or(1);
        ((k - 1) * d + 1).min(MIN_INPUT_SIZE)
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels given to each branch of a block of `width` channels; the
    /// large-kernel branch takes the odd channel.
    pub fn branch_split(width: usize) -> [usize; 2] {
        [width - width / 2, width / 2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Sct,
    Bone,
    Mask,
}

impl HeadKind {
    fn for_variant(v: Variant) -> Vec<HeadKind> {
        let mut h = vec![HeadKind::Sct];
        if v.has_bone_head() {
            h.push(HeadKind::Bone);
        }
        if v.has_mask_head() {
            h.push(HeadKind::Mask);
        }
        h
    }
}

/// Named slice of the flat parameter (or statistics) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct ConvDesc {
    shape: ConvShape,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone)]
struct BnDesc {
    channels: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
struct BranchDesc {
    conv: ConvDesc,
    bn: BnDesc,
}

#[derive(Debug, Clone)]
struct BlockDesc {
    cin: usize,
    cout: usize,
    branches: Vec<BranchDesc>,
}

#[derive(Debug, Clone)]
struct HeadDesc {
    kind: HeadKind,
    conv: ConvDesc,
    bn: Option<BnDesc>,
}

struct Layout {
    params: Vec<ParamEntry>,
    stats: Vec<ParamEntry>,
    param_len: usize,
    stat_len: usize,
}

impl Layout {
    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.param_len;
        self.params.push(ParamEntry {
            name,
            shape,
            offset,
            len,
        });
        self.param_len += len;
        offset
    }

    fn stat(&mut self, name: String, len: usize) -> usize {
        let offset = self.stat_len;
        self.stats.push(ParamEntry {
            name,
            shape: vec![len],
            offset,
            len,
        });
        self.stat_len += len;
        offset
    }

    fn conv(&mut self, prefix: &str, shape: ConvShape, bias: bool) -> ConvDesc {
        let weight = self.param(
            format!("{prefix}.conv.weight"),
            vec![shape.cout, shape.cin, shape.kernel, shape.kernel],
        );
        let bias = bias.then(|| self.param(format!("{prefix}.conv.bias"), vec![shape.cout]));
        ConvDesc {
            shape,
            weight,
            bias,
        }
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnDesc {
        BnDesc {
            channels,
            gamma: self.param(format!("{prefix}.bn.gamma"), vec![channels]),
            beta: self.param(format!("{prefix}.bn.beta"), vec![channels]),
            mean: self.stat(format!("{prefix}.bn.running_mean"), channels),
            var: self.stat(format!("{prefix}.bn.running_var"), channels),
        }
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, cin: usize, cout: usize, dil: usize) -> BlockDesc {
        let split = ModelConfig::branch_split(cout);
        let mut branches = Vec::new();
        for (i, (&k, &c)) in cfg.kernel_sizes.iter().zip(&split).enumerate() {
            if c == 0 {
                continue;
            }
            let p = format!("{prefix}.branch{i}");
            let conv = self.conv(
                &p,
                ConvShape {
                    cin,
                    cout: c,
                    kernel: k,
                    dilation: dil,
                },
                false,
            );
            let bn = self.bn(&p, c);
            branches.push(BranchDesc { conv, bn });
        }
        BlockDesc {
            cin,
            cout,
            branches,
        }
    }
}

/// Network weights, running statistics and structure.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    variant: Variant,
    encoder: Vec<Vec<BlockDesc>>,
    /// Indexed by level; evaluated from the deepest level down.
    decoder: Vec<Vec<BlockDesc>>,
    heads: Vec<HeadDesc>,
    params: Vec<T>,
    stats: Vec<T>,
    param_manifest: Vec<ParamEntry>,
    stat_manifest: Vec<ParamEntry>,
    value_scale: f64,
}

/// Head outputs for a batch, in the network's (scaled) value space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutputs<T> {
    pub sct: Tensor<T>,
    pub bone: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
}

/// Gradients of the objective with respect to each head output. A missing
/// head gradient is treated as zero.
#[derive(Debug, Clone)]
pub struct OutputGrads<T> {
    pub sct: Option<Tensor<T>>,
    pub bone: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
}

struct BlockCache<T> {
    output: Tensor<T>,
    bn: Vec<BnCache<T>>,
}

struct HeadCache<T> {
    output: Tensor<T>,
    bn: Option<BnCache<T>>,
}

/// Activations kept by a training-mode forward pass for `backward`.
pub struct ForwardCache<T> {
    input: Tensor<T>,
    encoder: Vec<Vec<BlockCache<T>>>,
    decoder_input: Vec<Option<Tensor<T>>>,
    decoder: Vec<Vec<BlockCache<T>>>,
    heads: Vec<HeadCache<T>>,
    param_len: usize,
}

enum Pass<'a> {
    Train { stats: &'a mut [f64], momentum: f64 },
    Eval,
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut lay = Layout {
            params: Vec::new(),
            stats: Vec::new(),
            param_len: 0,
            stat_len: 0,
        };
        let levels = config.levels;
        let bpl = config.blocks_per_level;
        let mut encoder = Vec::with_capacity(levels);
        let mut cin = 1;
        for l in 0..levels {
            let width = config.width(l);
            let dil = config.dilation_schedule[l];
            let mut blocks = Vec::with_capacity(bpl);
            for b in 0..bpl {
                blocks.push(lay.block(&format!("enc{l}.block{b}"), config, cin, width, dil));
                cin = width;
            }
            encoder.push(blocks);
        }
        let mut decoder: Vec<Vec<BlockDesc>> = vec![Vec::new(); levels];
        for l in (0..levels).rev() {
            let width = config.width(l);
            let dil = config.dilation_schedule[l];
            let mut cin = if l == levels - 1 {
                width
            } else {
                config.width(l + 1) + width
            };
            for b in 0..bpl {
                decoder[l].push(lay.block(&format!("dec{l}.block{b}"), config, cin, width, dil));
                cin = width;
            }
        }
        let head_in = config.width(0);
        let heads = HeadKind::for_variant(variant)
            .into_iter()
            .map(|kind| {
                let p = format!("head.{}", serde_json::to_value(kind).unwrap().as_str().unwrap());
                let conv = lay.conv(
                    &p,
                    ConvShape {
                        cin: head_in,
                        cout: 1,
                        kernel: 1,
                        dilation: 1,
                    },
                    !config.head_batchnorm,
                );
                let bn = config.head_batchnorm.then(|| lay.bn(&p, 1));
                HeadDesc { kind, conv, bn }
            })
            .collect();

        let mut model = Model {
            config: config.clone(),
            variant,
            encoder,
            decoder,
            heads,
            params: vec![T::zero(); lay.param_len],
            stats: vec![T::zero(); lay.stat_len],
            param_manifest: lay.params,
            stat_manifest: lay.stats,
            value_scale: DEFAULT_VALUE_SCALE,
        };
        model.initialize(seed);
        Ok(model)
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for entry in &self.param_manifest {
            let dst = &mut self.params[entry.offset..entry.offset + entry.len];
            if entry.name.ends_with("conv.weight") {
                let fan_in: usize = entry.shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                for v in dst {
                    *v = T::from_f64(normal.sample(&mut rng));
                }
            } else if entry.name.ends_with("bn.gamma") {
                dst.fill(T::one());
            } else {
                dst.fill(T::zero());
            }
        }
        for entry in &self.stat_manifest {
            let fill = if entry.name.ends_with("running_var") {
                T::one()
            } else {
                T::zero()
            };
            self.stats[entry.offset..entry.offset + entry.len].fill(fill);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Factor mapping HU to the regression heads' output space.
    pub fn value_scale(&self) -> f64 {
        self.value_scale
    }

    pub fn set_value_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::contract("value_scale must be finite and > 0"));
        }
        self.value_scale = scale;
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[T] {
        &self.stats
    }

    pub fn param_manifest(&self) -> &[ParamEntry] {
        &self.param_manifest
    }

    pub fn stat_manifest(&self) -> &[ParamEntry] {
        &self.stat_manifest
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Name of the parameter owning flat index `i`.
    pub fn param_name(&self, i: usize) -> Option<&str> {
        self.param_manifest
            .iter()
            .find(|e| i >= e.offset && i < e.offset + e.len)
            .map(|e| e.name.as_str())
    }

    /// Flat indices of parameters that feed every head (encoder + decoder).
    pub fn trunk_param_range(&self) -> std::ops::Range<usize> {
        let end = self
            .param_manifest
            .iter()
            .find(|e| e.name.starts_with("head."))
            .map_or(self.params.len(), |e| e.offset);
        0..end
    }

    /// Flat index ranges of a head's exclusive parameters.
    pub fn head_param_ranges(&self, kind: HeadKind) -> Vec<std::ops::Range<usize>> {
        let prefix = format!("head.{}.", serde_json::to_value(kind).unwrap().as_str().unwrap());
        self.param_manifest
            .iter()
            .filter(|e| e.name.starts_with(&prefix))
            .map(|e| e.offset..e.offset + e.len)
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64(x.into())).collect();
        Model {
            config: self.config.clone(),
            variant: self.variant,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads.clone(),
            params: conv(&self.params),
            stats: conv(&self.stats),
            param_manifest: self.param_manifest.clone(),
            stat_manifest: self.stat_manifest.clone(),
            value_scale: self.value_scale,
        }
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        variant: Variant,
        params: Vec<T>,
        stats: Vec<T>,
    ) -> Result<Self> {
        let mut m = Model::build(&config, variant, 0)?;
        if params.len() != m.params.len() || stats.len() != m.stats.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} parameters and {} statistics, config needs {} and {}",
                params.len(),
                stats.len(),
                m.params.len(),
                m.stats.len()
            )));
        }
        m.params = params;
        m.stats = stats;
        Ok(m)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels != 1 {
            return Err(Error::contract(format!(
                "network input must have 1 channel, got {}",
                x.channels
            )));
        }
        if x.batch == 0 {
            return Err(Error::contract("empty batch"));
        }
        let min = self.config.min_input_size();
        if x.height < min || x.width < min {
            return Err(Error::contract(format!(
                "input {}x{} is below the minimum {min}x{min}",
                x.height, x.width
            )));
        }
        Ok(())
    }

    /// Inference with running batch-norm statistics. Pure.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<TaskOutputs<T>> {
        self.check_input(x)?;
        let (out, _) = self.run(x, &mut Pass::Eval);
        Ok(out)
    }

    /// Training forward pass: batch statistics, running-statistic update and
    /// cached activations for [`Model::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(TaskOutputs<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut stats: Vec<f64> = self.stats.iter().map(|&v| v.into()).collect();
        let momentum = self.config.bn_momentum;
        let (out, cache) = self.run(
            x,
            &mut Pass::Train {
                stats: &mut stats,
                momentum,
            },
        );
        self.stats = stats.into_iter().map(T::from_f64).collect();
        Ok((out, cache.expect("training pass keeps a cache")))
    }

    fn run(&self, x: &Tensor<T>, pass: &mut Pass<'_>) -> (TaskOutputs<T>, Option<ForwardCache<T>>) {
        let levels = self.config.levels;
        let keep = matches!(pass, Pass::Train { .. });
        let mut enc_cache: Vec<Vec<BlockCache<T>>> = Vec::with_capacity(levels);
        let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(levels);
        let mut h = x.clone();
        for blocks in &self.encoder {
            let mut level = Vec::new();
            for blk in blocks {
                let (out, bn) = self.block_forward(blk, &h, pass);
                h = out.clone();
                level.push(BlockCache { output: out, bn });
            }
            enc_out.push(h.clone());
            enc_cache.push(level);
        }

        let mut dec_cache: Vec<Vec<BlockCache<T>>> = (0..levels).map(|_| Vec::new()).collect();
        let mut dec_input: Vec<Option<Tensor<T>>> = vec![None; levels];
        for l in (0..levels).rev() {
            if l != levels - 1 {
                let cat = Tensor::concat(&h, &enc_out[l]);
                if keep {
                    dec_input[l] = Some(cat.clone());
                }
                h = cat;
            }
            for blk in &self.decoder[l] {
                let (out, bn) = self.block_forward(blk, &h, pass);
                h = out.clone();
                dec_cache[l].push(BlockCache { output: out, bn });
            }
        }

        let mut sct = None;
        let mut bone = None;
        let mut mask = None;
        let mut head_cache = Vec::new();
        for head in &self.heads {
            let (out, bn) = self.head_forward(head, &h, pass);
            match head.kind {
                HeadKind::Sct => sct = Some(out.clone()),
                HeadKind::Bone => bone = Some(out.clone()),
                HeadKind::Mask => mask = Some(out.clone()),
            }
            head_cache.push(HeadCache { output: out, bn });
        }
        let outputs = TaskOutputs {
            sct: sct.expect("every variant has an sCT head"),
            bone,
            mask,
        };
        let cache = keep.then(|| ForwardCache {
            input: x.clone(),
            encoder: enc_cache,
            decoder_input: dec_input,
            decoder: dec_cache,
            heads: head_cache,
            param_len: self.params.len(),
        });
        (outputs, cache)
    }

    fn bn_forward(
        &self,
        bn: &BnDesc,
        z: &Tensor<T>,
        pass: &mut Pass<'_>,
    ) -> (Tensor<T>, Option<BnCache<T>>) {
        let c = bn.channels;
        let gamma = &self.params[bn.gamma..bn.gamma + c];
        let beta = &self.params[bn.beta..bn.beta + c];
        match pass {
            Pass::Train { stats, momentum } => {
                let (y, cache, means, vars) =
                    ops::bn_forward_train(z, gamma, beta, self.config.bn_epsilon);
                for ch in 0..c {
                    let m = &mut stats[bn.mean + ch];
                    *m = *momentum * *m + (1.0 - *momentum) * means[ch];
                    let v = &mut stats[bn.var + ch];
                    *v = *momentum * *v + (1.0 - *momentum) * vars[ch];
                }
                (y, Some(cache))
            }
            Pass::Eval => {
                let y = ops::bn_forward_eval(
                    z,
                    gamma,
                    beta,
                    &self.stats[bn.mean..bn.mean + c],
                    &self.stats[bn.var..bn.var + c],
                    self.config.bn_epsilon,
                );
                (y, None)
            }
        }
    }

    fn conv_forward(&self, conv: &ConvDesc, x: &Tensor<T>) -> Tensor<T> {
        let w = &self.params[conv.weight..conv.weight + conv.shape.weight_len()];
        let b = conv
            .bias
            .map(|o| &self.params[o..o + conv.shape.cout]);
        ops::conv_forward(x, &conv.shape, w, b)
    }

    fn block_forward(
        &self,
        blk: &BlockDesc,
        x: &Tensor<T>,
        pass: &mut Pass<'_>,
    ) -> (Tensor<T>, Vec<BnCache<T>>) {
        let mut out = Tensor::zeros(x.batch, blk.cout, x.height, x.width);
        let mut caches = Vec::new();
        let mut start = 0;
        for br in &blk.branches {
            let z = self.conv_forward(&br.conv, x);
            let (mut y, cache) = self.bn_forward(&br.bn, &z, pass);
            ops::elu_inplace(&mut y.data);
            out.scatter_channels(start, &y);
            start += y.channels;
            if let Some(c) = cache {
                caches.push(c);
            }
        }
        (out, caches)
    }

    fn head_forward(
        &self,
        head: &HeadDesc,
        x: &Tensor<T>,
        pass: &mut Pass<'_>,
    ) -> (Tensor<T>, Option<BnCache<T>>) {
        let z = self.conv_forward(&head.conv, x);
        let (mut y, cache) = match &head.bn {
            Some(bn) => self.bn_forward(bn, &z, pass),
            None => (z, None),
        };
        match head.kind {
            HeadKind::Sct => {}
            HeadKind::Bone => {
                for v in &mut y.data {
                    *v = v.max(T::zero());
                }
            }
            HeadKind::Mask => {
                let lo = T::from_f64(SIGMOID_MARGIN);
                let hi = T::one() - lo;
                for v in &mut y.data {
                    let s = T::one() / (T::one() + (-*v).exp());
                    *v = s.max(lo).min(hi);
                }
            }
        }
        (y, cache)
    }

    /// Parameter gradients for the batch cached by `forward_train`.
    pub fn backward(&self, cache: &ForwardCache<T>, grads: &OutputGrads<T>) -> Result<Vec<T>> {
        if cache.param_len != self.params.len() {
            return Err(Error::contract(
                "forward cache does not belong to this model",
            ));
        }
        let mut dparams = vec![T::zero(); self.params.len()];
        let levels = self.config.levels;
        let top = &cache.decoder[0].last().expect("decoder level 0 has blocks").output;

        let mut dh = Tensor::zeros(top.batch, top.channels, top.height, top.width);
        for (head, hc) in self.heads.iter().zip(&cache.heads) {
            let g = match head.kind {
                HeadKind::Sct => grads.sct.as_ref(),
                HeadKind::Bone => grads.bone.as_ref(),
                HeadKind::Mask => grads.mask.as_ref(),
            };
            let Some(g) = g else { continue };
            if g.data.len() != hc.output.data.len() {
                return Err(Error::contract("output gradient has the wrong shape"));
            }
            let dx = self.head_backward(head, hc, g, top, &mut dparams);
            dh.add_assign(&dx);
        }

        // decoder, level 0 upwards to the deepest
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; levels];
        for l in 0..levels {
            let blocks = &self.decoder[l];
            for b in (0..blocks.len()).rev() {
                let input = if b > 0 {
                    &cache.decoder[l][b - 1].output
                } else if l == levels - 1 {
                    &cache.encoder[levels - 1].last().unwrap().output
                } else {
                    cache.decoder_input[l].as_ref().unwrap()
                };
                dh = self.block_backward(&blocks[b], &cache.decoder[l][b], input, &dh, &mut dparams, true)
                    .unwrap();
            }
            if l != levels - 1 {
                let prev = self.config.width(l + 1);
                skip_grads[l] = Some(dh.gather_channels(prev..dh.channels));
                dh = dh.gather_channels(0..prev);
            }
        }

        // encoder, deepest level down to 0; `dh` now holds the gradient of the
        // deepest encoder output
        for l in (0..levels).rev() {
            if let Some(s) = &skip_grads[l] {
                dh.add_assign(s);
            }
            let blocks = &self.encoder[l];
            for b in (0..blocks.len()).rev() {
                let input = if b > 0 {
                    &cache.encoder[l][b - 1].output
                } else if l > 0 {
                    &cache.encoder[l - 1].last().unwrap().output
                } else {
                    &cache.input
                };
                let first = l == 0 && b == 0;
                if let Some(d) =
                    self.block_backward(&blocks[b], &cache.encoder[l][b], input, &dh, &mut dparams, !first)
                {
                    dh = d;
                }
            }
        }
        Ok(dparams)
    }

    fn bn_backward(
        &self,
        bn: &BnDesc,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        dparams: &mut [T],
    ) -> Tensor<T> {
        let c = bn.channels;
        let gamma = &self.params[bn.gamma..bn.gamma + c];
        let mut dg = dparams[bn.gamma..bn.gamma + c].to_vec();
        let mut db = dparams[bn.beta..bn.beta + c].to_vec();
        let dz = ops::bn_backward(dy, cache, gamma, &mut dg, &mut db);
        dparams[bn.gamma..bn.gamma + c].copy_from_slice(&dg);
        dparams[bn.beta..bn.beta + c].copy_from_slice(&db);
        dz
    }

    fn conv_backward(
        &self,
        conv: &ConvDesc,
        x: &Tensor<T>,
        dz: &Tensor<T>,
        dparams: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let wl = conv.shape.weight_len();
        let w = &self.params[conv.weight..conv.weight + wl];
        let mut dw = dparams[conv.weight..conv.weight + wl].to_vec();
        let mut db = conv
            .bias
            .map(|o| dparams[o..o + conv.shape.cout].to_vec());
        let dx = ops::conv_backward(x, &conv.shape, w, dz, &mut dw, db.as_deref_mut(), need_dx);
        dparams[conv.weight..conv.weight + wl].copy_from_slice(&dw);
        if let (Some(o), Some(db)) = (conv.bias, db) {
            dparams[o..o + conv.shape.cout].copy_from_slice(&db);
        }
        dx
    }

    fn block_backward(
        &self,
        blk: &BlockDesc,
        bc: &BlockCache<T>,
        input: &Tensor<T>,
        dout: &Tensor<T>,
        dparams: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let mut dx: Option<Tensor<T>> = None;
        let mut start = 0;
        for (br, bn_cache) in blk.branches.iter().zip(&bc.bn) {
            let c = br.bn.channels;
            let mut dy = dout.gather_channels(start..start + c);
            let y = bc.output.gather_channels(start..start + c);
            ops::elu_backward(&mut dy.data, &y.data);
            let dz = self.bn_backward(&br.bn, bn_cache, &dy, dparams);
            if let Some(d) = self.conv_backward(&br.conv, input, &dz, dparams, need_dx) {
                match dx.as_mut() {
                    Some(acc) => acc.add_assign(&d),
                    None => dx = Some(d),
                }
            }
            start += c;
        }
        debug_assert_eq!(start, blk.cout);
        let _ = blk.cin;
        dx
    }

    fn head_backward(
        &self,
        head: &HeadDesc,
        hc: &HeadCache<T>,
        g: &Tensor<T>,
        input: &Tensor<T>,
        dparams: &mut [T],
    ) -> Tensor<T> {
        let mut d = g.clone();
        match head.kind {
            HeadKind::Sct => {}
            HeadKind::Bone => {
                for (v, &y) in d.data.iter_mut().zip(&hc.output.data) {
                    if y <= T::zero() {
                        *v = T::zero();
                    }
                }
            }
            HeadKind::Mask => {
                let lo = T::from_f64(SIGMOID_MARGIN);
                let hi = T::one() - lo;
                for (v, &y) in d.data.iter_mut().zip(&hc.output.data) {
                    *v = if y <= lo || y >= hi {
                        T::zero()
                    } else {
                        *v * y * (T::one() - y)
                    };
                }
            }
        }
        let dz = match (&head.bn, &hc.bn) {
            (Some(bn), Some(c)) => self.bn_backward(bn, c, &d, dparams),
            _ => d,
        };
        self.conv_backward(&head.conv, input, &dz, dparams, true)
            .expect("head input gradient requested")
    }
}

impl Model<f32> {
    /// Eval-mode head outputs for a batch of same-sized MR images, de-scaled
    /// to HU. Outputs are not clamped or aggregated.
    pub fn predict(&self, mrs: &[&MrImage]) -> Result<Vec<Prediction>> {
        let Some(first) = mrs.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = first.dims();
        for m in mrs {
            crate::error::check_dims((h, w), m.dims())?;
        }
        let planes: Vec<&[f32]> = mrs.iter().map(|m| m.values()).collect();
        let out = self.forward_eval(&batch_from_planes(&planes, h, w))?;
        let inv = 1.0 / self.value_scale;
        let hu = |t: &Tensor<f32>, i: usize| {
            Image2D::new(h, w, t.sample(i).iter().map(|&v| (v as f64 * inv) as f32).collect())
        };
        (0..mrs.len())
            .map(|i| {
                Ok(Prediction {
                    sct: hu(&out.sct, i)?,
                    bone: out.bone.as_ref().map(|t| hu(t, i)).transpose()?,
                    mask: out
                        .mask
                        .as_ref()
                        .map(|t| ProbMap::new(Image2D::new(h, w, t.sample(i).to_vec())?))
                        .transpose()?,
                })
            })
            .collect()
    }
}

/// Packs single-channel planes into an `N×1×H×W` batch.
pub fn batch_from_planes<T: Real>(planes: &[&[f32]], height: usize, width: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(planes.len() * height * width);
    for p in planes {
        assert_eq!(p.len(), height * width);
        data.extend(p.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(planes.len(), 1, height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            levels: 2,
            blocks_per_level: 1,
            base_channels: 2,
            dilation_schedule: vec![1, 2],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::build(&tiny(), Variant::ThreeTask, 7).unwrap();
        let b = Model::<f32>::build(&tiny(), Variant::ThreeTask, 7).unwrap();
        let c = Model::<f32>::build(&tiny(), Variant::ThreeTask, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn one_task_has_one_head() {
        let m = Model::<f32>::build(&tiny(), Variant::OneTaskGlobal, 1).unwrap();
        assert_eq!(m.heads.len(), 1);
        let m = Model::<f32>::build(&tiny(), Variant::TwoTask, 1).unwrap();
        assert_eq!(m.heads.len(), 2);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = tiny();
        c.dilation_schedule = vec![1];
        assert!(Model::<f32>::build(&c, Variant::ThreeTask, 0).is_err());
        let mut c = tiny();
        c.kernel_sizes = [4, 3];
        assert!(Model::<f32>::build(&c, Variant::ThreeTask, 0).is_err());
        let mut c = tiny();
        c.levels = 0;
        c.dilation_schedule.clear();
        assert!(Model::<f32>::build(&c, Variant::ThreeTask, 0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::<f32>::build(&tiny(), Variant::ThreeTask, 0).unwrap();
        assert!(m.forward_eval(&Tensor::zeros(1, 2, 16, 16)).is_err());
        assert!(m.forward_eval(&Tensor::zeros(1, 1, 8, 16)).is_err());
    }

    #[test]
    fn foreign_cache_rejected() {
        let mut a = Model::<f64>::build(&tiny(), Variant::ThreeTask, 0).unwrap();
        let b = Model::<f64>::build(&tiny(), Variant::OneTaskGlobal, 0).unwrap();
        let (_, cache) = a.forward_train(&Tensor::zeros(1, 1, 16, 16)).unwrap();
        let g = OutputGrads {
            sct: None,
            bone: None,
            mask: None,
        };
        assert!(b.backward(&cache, &g).is_err());
    }
}
