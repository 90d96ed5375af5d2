mod common;

use common::{random_tensor, sharpened};
use lethevit::tensor::Tensor;
use lethevit::vit::{forward, BlockSlot, Slot, ViTConfig, ViTParams};

fn small() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 2,
        channels: 2,
        depth: 2,
        heads: 2,
        dim: 8,
        mlp_ratio: 2,
        num_classes: 4,
    }
}

#[test]
fn output_shapes() {
    let cfg = small();
    let p = ViTParams::init(&cfg, 1).unwrap();
    let out = forward(&p, &random_tensor(&[3, 2, 8, 8], 2), true).unwrap();
    assert_eq!(out.logits.shape(), &[3, 4]);
    let a = out.last_attention.unwrap();
    assert_eq!(a.weights.shape(), &[3, 2, 17, 17]);
    assert!(forward(&p, &random_tensor(&[3, 2, 8, 8], 2), false).unwrap().last_attention.is_none());
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small();
    let p = sharpened(&cfg, 3);
    let a = forward(&p, &random_tensor(&[2, 2, 8, 8], 4), true).unwrap().last_attention.unwrap();
    for row in a.weights.data().chunks(17) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_query_and_key_give_uniform_attention() {
    let cfg = small();
    let mut p = sharpened(&cfg, 5);
    for s in [BlockSlot::Wq, BlockSlot::Wk] {
        let t = p.get_mut(Slot::Block(cfg.depth - 1, s));
        *t = Tensor::zeros(t.shape());
    }
    let a = forward(&p, &random_tensor(&[2, 2, 8, 8], 6), true).unwrap().last_attention.unwrap();
    let uniform = 1.0 / 17.0;
    assert!(a.weights.data().iter().all(|&v| (v - uniform).abs() < 1e-12));
}

/// Moves patch `src` of every image to position `perm[src]`.
fn permute_patches(images: &Tensor, cfg: &ViTConfig, perm: &[usize]) -> Tensor {
    let (c, s, p, g) = (cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let b = images.shape()[0];
    let mut out = vec![0.0; images.numel()];
    for bi in 0..b {
        for (src, &dst) in perm.iter().enumerate() {
            for ci in 0..c {
                for r in 0..p {
                    for q in 0..p {
                        let at = |patch: usize| {
                            ((bi * c + ci) * s + (patch / g) * p + r) * s + (patch % g) * p + q
                        };
                        out[at(dst)] = images.data()[at(src)];
                    }
                }
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out).unwrap()
}

#[test]
fn without_positions_patch_order_permutes_attention() {
    let cfg = small();
    let mut p = sharpened(&cfg, 7);
    let pos = p.get_mut(Slot::PosEmbed);
    *pos = Tensor::zeros(pos.shape());
    let images = random_tensor(&[2, 2, 8, 8], 8);
    let n = cfg.num_patches();
    let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
    let base = forward(&p, &images, true).unwrap();
    let moved = forward(&p, &permute_patches(&images, &cfg, &perm), true).unwrap();
    for (x, y) in base.logits.data().iter().zip(moved.logits.data()) {
        assert!((x - y).abs() < 1e-9);
    }
    let (a, b) = (base.last_attention.unwrap(), moved.last_attention.unwrap());
    let t = cfg.tokens();
    for bi in 0..2 {
        for h in 0..cfg.heads {
            let row = |w: &Tensor, j: usize| w.data()[((bi * cfg.heads + h) * t) * t + j];
            for (src, &dst) in perm.iter().enumerate() {
                assert!((row(&a.weights, src + 1) - row(&b.weights, dst + 1)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small();
    let p = sharpened(&cfg, 9);
    let x = random_tensor(&[4, 2, 8, 8], 10);
    let a = forward(&p, &x, true).unwrap();
    let b = forward(&p, &x, true).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.last_attention, b.last_attention);
}

#[test]
fn batch_rows_are_independent() {
    let cfg = small();
    let p = sharpened(&cfg, 11);
    let x = random_tensor(&[3, 2, 8, 8], 12);
    let all = forward(&p, &x, false).unwrap().logits;
    let per = 2 * 8 * 8;
    let one = Tensor::new(vec![1, 2, 8, 8], x.data()[per..2 * per].to_vec()).unwrap();
    let single = forward(&p, &one, false).unwrap().logits;
    for j in 0..4 {
        assert!((all.data()[4 + j] - single.data()[j]).abs() < 1e-12);
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let worst = common::full_model_gradient_error(13);
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn checkpoint_round_trip_preserves_rounded_params() {
    let cfg = small();
    let mut p = sharpened(&cfg, 15);
    p.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ltvt");
    p.save(&path).unwrap();
    let q = ViTParams::load(&path, &cfg).unwrap();
    assert_eq!(p, q);
    assert_eq!(p.fingerprint(), q.fingerprint());

    let other = ViTConfig { dim: 12, ..cfg };
    assert!(ViTParams::load(&path, &other).is_err());
}
