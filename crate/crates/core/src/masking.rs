//! Attention-guided patch masking.
//!
//! The class-token attention of the final block ranks patches by how much the
//! classifier looks at them; the top `k = ⌊ρ·N⌋` patches are then blanked out in
//! pixel space, either with zeros or with Gaussian draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{forward, AttentionMap, ViTConfig, ViTParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskType {
    Zero,
    Gaussian,
}

impl MaskType {
    pub fn name(self) -> &'static str {
        match self {
            MaskType::Zero => "zero",
            MaskType::Gaussian => "gaussian",
        }
    }
}

impl std::fmt::Display for MaskType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(MaskType::Zero),
            "gaussian" => Ok(MaskType::Gaussian),
            other => Err(Error::Config(format!(
                "unknown mask type {other:?}; expected zero or gaussian"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub mask_type: MaskType,
    /// Standard deviation of the replacement pixels; ignored for `Zero`.
    pub gaussian_std: f64,
    /// Base seed for Gaussian draws; sample `i` of a batch uses `seed + i`.
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            ratio: 0.05,
            mask_type: MaskType::Zero,
            gaussian_std: 1.0,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("mask ratio {} is outside [0, 1]", self.ratio)));
        }
        if self.mask_type == MaskType::Gaussian && !(self.gaussian_std.is_finite() && self.gaussian_std >= 0.0) {
            return Err(Error::Config(format!("invalid gaussian std {}", self.gaussian_std)));
        }
        Ok(())
    }
}

/// `⌊ρ·N⌋`. The product is nudged by a relative 1e-9 first so that ratios such
/// as 0.3 with N = 10 give 3 rather than 2.
pub fn mask_count(ratio: f64, patches: usize) -> usize {
    let k = (ratio * patches as f64 * (1.0 + 1e-9)).floor() as usize;
    k.min(patches)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub images: Tensor,
    /// Per sample, the masked patch indices in ascending order.
    pub masked_indices: Vec<Vec<usize>>,
}

/// Head-averaged attention from the class token to each patch, `[B×N]`.
pub fn class_token_attention(attn: &AttentionMap) -> Result<Tensor> {
    let s = attn.weights.shape();
    if s.len() != 4 || s[2] != s[3] || s[1] == 0 {
        return Err(Error::dim("class_token_attention", format!("attention map {s:?}")));
    }
    let (b, h, t) = (s[0], s[1], s[2]);
    if t < 2 {
        return Err(Error::Config("attention map holds no patch tokens".into()));
    }
    let n = t - 1;
    let w = attn.weights.data();
    let mut out = vec![0.0; b * n];
    for bi in 0..b {
        for hi in 0..h {
            let row = &w[((bi * h + hi) * t) * t..((bi * h + hi) * t + 1) * t];
            for (o, &a) in out[bi * n..(bi + 1) * n].iter_mut().zip(&row[1..]) {
                *o += a;
            }
        }
        for o in &mut out[bi * n..(bi + 1) * n] {
            *o /= h as f64;
        }
    }
    Tensor::new(vec![b, n], out)
}

/// The `⌊ρ·N⌋` highest-scoring patches of each row, ties to the lower index,
/// returned in ascending order.
pub fn select_top_k(scores: &Tensor, ratio: f64) -> Result<Vec<Vec<usize>>> {
    let s = scores.shape();
    if s.len() != 2 {
        return Err(Error::dim("select_top_k", format!("scores {s:?} are not [B×N]")));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} is outside [0, 1]")));
    }
    let n = s[1];
    let k = mask_count(ratio, n);
    let rows = if n == 0 { Vec::new() } else { scores.data().chunks(n).collect() };
    Ok(rows
        .into_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut top = order[..k].to_vec();
            top.sort_unstable();
            top
        })
        .collect())
}

/// Replaces the pixels of the listed patches. Everything else is copied
/// unchanged.
pub fn apply_mask(
    images: &Tensor,
    indices: &[Vec<usize>],
    spec: &MaskSpec,
    config: &ViTConfig,
) -> Result<MaskedBatch> {
    spec.validate()?;
    let s = images.shape();
    let (c, size, p, grid) = (config.channels, config.image_size, config.patch_size, config.grid());
    if s.len() != 4 || s[1] != c || s[2] != size || s[3] != size {
        return Err(Error::dim("apply_mask", format!("images {s:?} do not match [B×{c}×{size}×{size}]")));
    }
    if indices.len() != s[0] {
        return Err(Error::dim(
            "apply_mask",
            format!("{} index lists for a batch of {}", indices.len(), s[0]),
        ));
    }
    let n = config.num_patches();
    let per = c * size * size;
    let mut data = images.data().to_vec();
    for (bi, list) in indices.iter().enumerate() {
        if let Some(&bad) = list.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, bound: n });
        }
        let mut sampler = match spec.mask_type {
            MaskType::Zero => None,
            MaskType::Gaussian => {
                let normal = Normal::new(0.0, spec.gaussian_std)
                    .map_err(|e| Error::Config(format!("gaussian mask: {e}")))?;
                Some((normal, ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(bi as u64))))
            }
        };
        let img = &mut data[bi * per..(bi + 1) * per];
        for &patch in list {
            let (pr, pc) = (patch / grid, patch % grid);
            for ci in 0..c {
                for r in 0..p {
                    let start = (ci * size + pr * p + r) * size + pc * p;
                    for v in &mut img[start..start + p] {
                        *v = match &mut sampler {
                            None => 0.0,
                            Some((normal, rng)) => normal.sample(rng),
                        };
                    }
                }
            }
        }
    }
    Ok(MaskedBatch {
        images: Tensor::new(s.to_vec(), data)?,
        masked_indices: indices.to_vec(),
    })
}

/// Masks `images` at the patches the frozen `original` model attends to most.
pub fn build_masked_view(original: &ViTParams, images: &Tensor, spec: &MaskSpec) -> Result<MaskedBatch> {
    spec.validate()?;
    let config = original.config();
    let batch = images.shape().first().copied().unwrap_or(0);
    if mask_count(spec.ratio, config.num_patches()) == 0 {
        return apply_mask(images, &vec![Vec::new(); batch], spec, config);
    }
    let out = forward(original, images, true)?;
    let attn = out
        .last_attention
        .ok_or_else(|| Error::Contract("forward pass did not capture attention".into()))?;
    let scores = class_token_attention(&attn)?;
    let indices = select_top_k(&scores, spec.ratio)?;
    apply_mask(images, &indices, spec, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_token_scores_average_heads() {
        // H=2, tokens 3; only the class-token rows matter
        let mut w = vec![0.0; 2 * 9];
        w[0..3].copy_from_slice(&[0.2, 0.5, 0.3]);
        w[9..12].copy_from_slice(&[0.4, 0.1, 0.5]);
        let attn = AttentionMap {
            weights: Tensor::new(vec![1, 2, 3, 3], w).unwrap(),
        };
        let a = class_token_attention(&attn).unwrap();
        assert!((a.data()[0] - 0.30).abs() < 1e-12);
        assert!((a.data()[1] - 0.40).abs() < 1e-12);
    }

    #[test]
    fn no_patch_tokens_is_a_config_error() {
        let attn = AttentionMap {
            weights: Tensor::full(&[1, 1, 1, 1], 1.0),
        };
        assert!(matches!(class_token_attention(&attn), Err(Error::Config(_))));
    }

    #[test]
    fn top_k_examples() {
        let s = Tensor::new(vec![1, 2], vec![0.3, 0.4]).unwrap();
        assert_eq!(select_top_k(&s, 0.5).unwrap(), vec![vec![1]]);
        let s = Tensor::full(&[1, 4], 0.25);
        assert_eq!(select_top_k(&s, 0.5).unwrap(), vec![vec![0, 1]]);
        assert_eq!(mask_count(0.05, 196), 9);
        assert_eq!(mask_count(0.3, 10), 3);
        assert_eq!(mask_count(0.05, 64), 3);
        assert_eq!(mask_count(1.0, 64), 64);
    }

    #[test]
    fn mask_type_parses() {
        assert_eq!("gaussian".parse::<MaskType>().unwrap(), MaskType::Gaussian);
        assert!("blur".parse::<MaskType>().is_err());
    }
}
