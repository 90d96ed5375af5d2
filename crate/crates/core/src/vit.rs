//! A plain Vision Transformer classifier.
//!
//! Images are cut into non-overlapping patches, linearly embedded, prefixed
//! with a class token and given learned positional embeddings. `depth` pre-norm
//! blocks (LayerNorm → multi-head self-attention → residual, LayerNorm → MLP →
//! residual) follow, and the classifier head reads the normalized class token.
//!
//! Parameter names, in checkpoint order:
//!
//! | name                        | shape                 |
//! |-----------------------------|-----------------------|
//! | `patch_embed.weight`        | `[C·P², dim]`         |
//! | `patch_embed.bias`          | `[dim]`               |
//! | `cls_token`                 | `[dim]`               |
//! | `pos_embed`                 | `[N+1, dim]`          |
//! | `block{i}.norm1.gain/bias`  | `[dim]`               |
//! | `block{i}.attn.wq/wk/wv/wo` | `[dim, dim]`          |
//! | `block{i}.attn.bo`          | `[dim]`               |
//! | `block{i}.norm2.gain/bias`  | `[dim]`               |
//! | `block{i}.mlp.w1` / `b1`    | `[dim, hidden]` / `[hidden]` |
//! | `block{i}.mlp.w2` / `b2`    | `[hidden, dim]` / `[dim]` |
//! | `norm.gain/bias`            | `[dim]`               |
//! | `head.weight` / `head.bias` | `[dim, classes]` / `[classes]` |
//!
//! Head `h` of a block uses columns `h·d..(h+1)·d` of `wq`, `wk` and `wv`, and
//! the concatenated head outputs go through `wo`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
const PER_BLOCK: usize = 13;
const STEM: usize = 4;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 1,
            depth: 2,
            heads: 4,
            dim: 32,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("heads", self.heads),
            ("dim", self.dim),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// N, the number of patches.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// N + 1, patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (d, h) = (self.dim, self.mlp_hidden());
        let mut specs = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d], Init::Normal),
            ("patch_embed.bias".to_string(), vec![d], Init::Zero),
            ("cls_token".to_string(), vec![d], Init::Normal),
            ("pos_embed".to_string(), vec![self.tokens(), d], Init::Normal),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("block{i}.{s}");
            specs.extend([
                (p("norm1.gain"), vec![d], Init::One),
                (p("norm1.bias"), vec![d], Init::Zero),
                (p("attn.wq"), vec![d, d], Init::Normal),
                (p("attn.wk"), vec![d, d], Init::Normal),
                (p("attn.wv"), vec![d, d], Init::Normal),
                (p("attn.wo"), vec![d, d], Init::Normal),
                (p("attn.bo"), vec![d], Init::Zero),
                (p("norm2.gain"), vec![d], Init::One),
                (p("norm2.bias"), vec![d], Init::Zero),
                (p("mlp.w1"), vec![d, h], Init::Normal),
                (p("mlp.b1"), vec![h], Init::Zero),
                (p("mlp.w2"), vec![h, d], Init::Normal),
                (p("mlp.b2"), vec![d], Init::Zero),
            ]);
        }
        specs.extend([
            ("norm.gain".to_string(), vec![d], Init::One),
            ("norm.bias".to_string(), vec![d], Init::Zero),
            ("head.weight".to_string(), vec![d, self.num_classes], Init::Normal),
            ("head.bias".to_string(), vec![self.num_classes], Init::Zero),
        ]);
        specs
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_specs().into_iter().map(|(n, _, _)| n).collect()
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

/// Positions of named parameters within [`ViTParams`].
#[derive(Clone, Copy, Debug)]
pub enum Slot {
    PatchWeight,
    PatchBias,
    ClsToken,
    PosEmbed,
    Block(usize, BlockSlot),
    NormGain,
    NormBias,
    HeadWeight,
    HeadBias,
}

#[derive(Clone, Copy, Debug)]
pub enum BlockSlot {
    Norm1Gain,
    Norm1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Bo,
    Norm2Gain,
    Norm2Bias,
    W1,
    B1,
    W2,
    B2,
}

impl Slot {
    fn index(self, depth: usize) -> usize {
        let tail = STEM + depth * PER_BLOCK;
        match self {
            Slot::PatchWeight => 0,
            Slot::PatchBias => 1,
            Slot::ClsToken => 2,
            Slot::PosEmbed => 3,
            Slot::Block(i, b) => STEM + i * PER_BLOCK + b as usize,
            Slot::NormGain => tail,
            Slot::NormBias => tail + 1,
            Slot::HeadWeight => tail + 2,
            Slot::HeadBias => tail + 3,
        }
    }
}

/// Model weights, stored in the order of [`ViTConfig::param_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams {
    config: ViTConfig,
    tensors: Vec<Tensor>,
}

impl ViTParams {
    /// Truncated-normal (±2σ, σ = 0.02) weights, class token and positional
    /// embeddings; zero biases; unit layer-norm gains.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|(_, shape, init)| match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::One => Tensor::full(&shape, 1.0),
                Init::Normal => {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| truncated_normal(&mut rng) * INIT_STD).collect();
                    Tensor::from_parts(shape, data)
                }
            })
            .collect();
        Ok(ViTParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, slot: Slot) -> &Tensor {
        &self.tensors[slot.index(self.config.depth)]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut Tensor {
        let i = slot.index(self.config.depth);
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        let idx = self.config.param_names().iter().position(|n| n == name)?;
        Some(&self.tensors[idx])
    }

    /// Mutable access for in-place optimizer updates.
    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.config.param_names().into_iter().zip(self.tensors.iter().cloned()).collect()
    }

    /// Rebuilds parameters from named tensors, checking every name and shape
    /// against `config`.
    pub fn from_named(config: &ViTConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != named.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, config expects {}",
                named.len(),
                specs.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape, _), (got_name, tensor)) in specs.into_iter().zip(named) {
            if name != got_name || shape != tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    tensor.shape()
                )));
            }
            tensors.push(tensor);
        }
        Ok(ViTParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.to_named())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_named())
    }

    pub fn load(path: &Path, config: &ViTConfig) -> Result<Self> {
        Self::from_named(config, checkpoint::load(path)?)
    }

    /// Rounds every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    /// Order-sensitive fingerprint of the full-precision values.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw f64 bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Places every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        BoundParams {
            vars,
            config: self.config.clone(),
        }
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Parameters placed on a tape.
pub struct BoundParams {
    vars: Vec<Var>,
    config: ViTConfig,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, slot: Slot) -> Var {
        self.vars[slot.index(self.config.depth)]
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }
}

/// Post-softmax attention weights of one block, `[B×H×(N+1)×(N+1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor,
}

impl AttentionMap {
    pub fn batch(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.weights.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub last_attention: Option<AttentionMap>,
}

/// Splits `[B×C×S×S]` images into `[B×N×(C·P²)]` patch vectors.
///
/// Patches are numbered row-major over the patch grid (patch 0 is top-left).
/// Within a patch vector the layout is channel-major, then pixel row, then
/// pixel column: element `c·P² + r·P + q`.
pub fn patchify(images: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    config.validate()?;
    let s = images.shape();
    let (size, p) = (config.image_size, config.patch_size);
    if s.len() != 4 || s[1] != config.channels || s[2] != size || s[3] != size {
        return Err(Error::dim(
            "patchify",
            format!(
                "images {s:?} do not match [B×{}×{size}×{size}]",
                config.channels
            ),
        ));
    }
    let (b, c) = (s[0], config.channels);
    let (grid, n, pd) = (config.grid(), config.num_patches(), config.patch_dim());
    let src = images.data();
    let mut out = vec![0.0; b * n * pd];
    for bi in 0..b {
        for patch in 0..n {
            let (pr, pc) = (patch / grid, patch % grid);
            let dst = &mut out[(bi * n + patch) * pd..(bi * n + patch + 1) * pd];
            for ci in 0..c {
                for r in 0..p {
                    let row = ((bi * c + ci) * size + pr * p + r) * size + pc * p;
                    dst[(ci * p + r) * p..(ci * p + r + 1) * p].copy_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, n, pd], out))
}

/// Records the forward pass on `tape`. Returns the logits `[B×C]` and, when
/// requested, the final block's attention weights.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    images: &Tensor,
    capture_attention: bool,
) -> Result<(Var, Option<AttentionMap>)> {
    let cfg = params.config().clone();
    let batch = images.shape().first().copied().unwrap_or(0);
    let patches = tape.constant(patchify(images, &cfg)?);
    let tokens = tape.linear(
        patches,
        params.var(Slot::PatchWeight),
        Some(params.var(Slot::PatchBias)),
    )?;
    let cls = tape.reshape(params.var(Slot::ClsToken), &[1, cfg.dim])?;
    let cls = tape.expand_leading(cls, batch)?;
    let mut h = tape.concat(&[cls, tokens], 1)?;
    h = tape.add_bias(h, params.var(Slot::PosEmbed))?;

    let mut captured = None;
    for i in 0..cfg.depth {
        let v = |s| params.var(Slot::Block(i, s));
        let n1 = tape.layer_norm(h, v(BlockSlot::Norm1Gain), v(BlockSlot::Norm1Bias))?;
        let last = i + 1 == cfg.depth;
        let (attn_out, weights) = self_attention(tape, &cfg, n1, params, i, last && capture_attention)?;
        if weights.is_some() {
            captured = weights;
        }
        h = tape.add(h, attn_out)?;
        let n2 = tape.layer_norm(h, v(BlockSlot::Norm2Gain), v(BlockSlot::Norm2Bias))?;
        let hidden = tape.linear(n2, v(BlockSlot::W1), Some(v(BlockSlot::B1)))?;
        let hidden = tape.gelu(hidden)?;
        let mlp = tape.linear(hidden, v(BlockSlot::W2), Some(v(BlockSlot::B2)))?;
        h = tape.add(h, mlp)?;
    }

    // LayerNorm is per token, so normalizing only the class token is exact.
    let cls_out = tape.narrow(h, 1, 0, 1)?;
    let cls_out = tape.reshape(cls_out, &[batch, cfg.dim])?;
    let cls_out = tape.layer_norm(cls_out, params.var(Slot::NormGain), params.var(Slot::NormBias))?;
    let logits = tape.linear(cls_out, params.var(Slot::HeadWeight), Some(params.var(Slot::HeadBias)))?;
    Ok((logits, captured))
}

/// Multi-head self-attention: per head `softmax(Q Kᵀ/√d) V`, heads
/// concatenated and projected by `wo`.
fn self_attention(
    tape: &mut Tape,
    cfg: &ViTConfig,
    x: Var,
    params: &BoundParams,
    block: usize,
    capture: bool,
) -> Result<(Var, Option<AttentionMap>)> {
    let v = |s| params.var(Slot::Block(block, s));
    let s = tape.shape(x).to_vec();
    let (b, t) = (s[0], s[1]);
    let (heads, hd) = (cfg.heads, cfg.head_dim());

    let split = |tape: &mut Tape, w: Var| -> Result<Var> {
        let y = tape.linear(x, w, None)?;
        let y = tape.reshape(y, &[b, t, heads, hd])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[b * heads, t, hd])
    };
    let q = split(tape, v(BlockSlot::Wq))?;
    let k = split(tape, v(BlockSlot::Wk))?;
    let val = split(tape, v(BlockSlot::Wv))?;

    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.batch_matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let attn = tape.softmax_rows(scores)?;
    let captured = if capture {
        Some(AttentionMap {
            weights: tape.value(attn).reshape(&[b, heads, t, t])?,
        })
    } else {
        None
    };
    let ctx = tape.batch_matmul(attn, val)?;
    let ctx = tape.reshape(ctx, &[b, heads, t, hd])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, cfg.dim])?;
    let out = tape.linear(ctx, v(BlockSlot::Wo), Some(v(BlockSlot::Bo)))?;
    Ok((out, captured))
}

/// Gradient-free forward pass.
pub fn forward(params: &ViTParams, images: &Tensor, capture_attention: bool) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let (logits, last_attention) = forward_on_tape(&mut tape, &bound, images, capture_attention)?;
    Ok(ForwardOutput {
        logits: tape.value(logits).clone(),
        last_attention,
    })
}

/// Logits for every sample of `images`, evaluated in chunks of `batch_size`.
pub fn predict_logits(params: &ViTParams, images: &Tensor, batch_size: usize) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    let per = images.numel() / n.max(1);
    let classes = params.config().num_classes;
    let mut out = Vec::with_capacity(n * classes);
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_parts(shape, images.data()[start * per..end * per].to_vec());
        out.extend_from_slice(forward(params, &chunk, false)?.logits.data());
        start = end;
    }
    Ok(Tensor::from_parts(vec![n, classes], out))
}
