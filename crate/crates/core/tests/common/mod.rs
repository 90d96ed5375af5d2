#![allow(dead_code)]

use lethevit::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with a floor on the denominator so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Evaluates `build` on constant inputs and returns the scalar result.
fn eval<F>(build: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).item().unwrap()
}

/// Largest relative error between autodiff gradients and central finite
/// differences over every element of every input.
pub fn max_gradient_error<F>(build: F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i] = nudge(&plus[i], j, FD_STEP);
            minus[i] = nudge(&minus[i], j, -FD_STEP);
            let numeric = (eval(&build, &plus) - eval(&build, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

pub fn nudge(t: &Tensor, j: usize, h: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[j] += h;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Reduces a tensor-valued output to a scalar with fixed random weights so
/// every output element contributes a distinct amount.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(tape.shape(out), seed);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One finite-difference case per differentiable op.
pub fn op_gradient_cases() -> Vec<(&'static str, Build, Vec<Tensor>)> {
    let t = random_tensor;
    let cases: Vec<(&'static str, Build, Vec<Tensor>)> = vec![
        (
            "add",
            Box::new(|tp, v| { let o = tp.add(v[0], v[1])?; weighted_sum(tp, o, 1) }),
            vec![t(&[2, 3], 10), t(&[2, 3], 11)],
        ),
        (
            "sub",
            Box::new(|tp, v| { let o = tp.sub(v[0], v[1])?; weighted_sum(tp, o, 2) }),
            vec![t(&[4], 12), t(&[4], 13)],
        ),
        (
            "mul",
            Box::new(|tp, v| { let o = tp.mul(v[0], v[1])?; weighted_sum(tp, o, 3) }),
            vec![t(&[3, 2], 14), t(&[3, 2], 15)],
        ),
        (
            "add_bias",
            Box::new(|tp, v| { let o = tp.add_bias(v[0], v[1])?; weighted_sum(tp, o, 4) }),
            vec![t(&[2, 3, 4], 16), t(&[3, 4], 17)],
        ),
        (
            "scale",
            Box::new(|tp, v| { let o = tp.scale(v[0], -1.7)?; weighted_sum(tp, o, 5) }),
            vec![t(&[5], 18)],
        ),
        (
            "matmul",
            Box::new(|tp, v| { let o = tp.matmul(v[0], v[1])?; tp.sum(o) }),
            vec![t(&[3, 3], 19), t(&[3, 3], 20)],
        ),
        (
            "matmul_rect",
            Box::new(|tp, v| { let o = tp.matmul(v[0], v[1])?; weighted_sum(tp, o, 6) }),
            vec![t(&[2, 4], 21), t(&[4, 3], 22)],
        ),
        (
            "batch_matmul",
            Box::new(|tp, v| { let o = tp.batch_matmul(v[0], v[1])?; weighted_sum(tp, o, 7) }),
            vec![t(&[2, 3, 2], 23), t(&[2, 2, 4], 24)],
        ),
        (
            "transpose",
            Box::new(|tp, v| { let o = tp.transpose(v[0])?; weighted_sum(tp, o, 8) }),
            vec![t(&[2, 5], 25)],
        ),
        (
            "permute",
            Box::new(|tp, v| { let o = tp.permute(v[0], &[2, 0, 1])?; weighted_sum(tp, o, 9) }),
            vec![t(&[2, 3, 4], 26)],
        ),
        (
            "reshape",
            Box::new(|tp, v| { let o = tp.reshape(v[0], &[3, 4])?; weighted_sum(tp, o, 10) }),
            vec![t(&[2, 6], 27)],
        ),
        (
            "concat",
            Box::new(|tp, v| { let o = tp.concat(&[v[0], v[1]], 1)?; weighted_sum(tp, o, 11) }),
            vec![t(&[2, 1, 3], 28), t(&[2, 4, 3], 29)],
        ),
        (
            "narrow",
            Box::new(|tp, v| { let o = tp.narrow(v[0], 1, 1, 2)?; weighted_sum(tp, o, 12) }),
            vec![t(&[2, 4, 3], 30)],
        ),
        (
            "expand_leading",
            Box::new(|tp, v| { let o = tp.expand_leading(v[0], 3)?; weighted_sum(tp, o, 13) }),
            vec![t(&[2, 2], 31)],
        ),
        (
            "softmax_rows",
            Box::new(|tp, v| { let o = tp.softmax_rows(v[0])?; weighted_sum(tp, o, 14) }),
            vec![t(&[3, 5], 32)],
        ),
        (
            "layer_norm",
            Box::new(|tp, v| { let o = tp.layer_norm(v[0], v[1], v[2])?; weighted_sum(tp, o, 15) }),
            vec![t(&[3, 6], 33), t(&[6], 34), t(&[6], 35)],
        ),
        (
            "gelu",
            Box::new(|tp, v| { let o = tp.gelu(v[0])?; weighted_sum(tp, o, 16) }),
            vec![t(&[8], 36)],
        ),
        (
            "softplus",
            Box::new(|tp, v| { let x = tp.scale(v[0], 4.0)?; let o = tp.softplus(x)?; weighted_sum(tp, o, 17) }),
            vec![t(&[8], 60)],
        ),
        (
            "sum",
            Box::new(|tp, v| { let o = tp.mul(v[0], v[0])?; tp.sum(o) }),
            vec![t(&[4], 37)],
        ),
        (
            "mean",
            Box::new(|tp, v| { let o = tp.mul(v[0], v[0])?; tp.mean(o) }),
            vec![t(&[2, 3], 38)],
        ),
        (
            "cross_entropy",
            Box::new(|tp, v| tp.cross_entropy(v[0], &[2, 0, 1])),
            vec![t(&[3, 4], 39)],
        ),
        (
            "cosine_rows",
            Box::new(|tp, v| { let o = tp.cosine_rows(v[0], v[1])?; weighted_sum(tp, o, 17) }),
            vec![t(&[3, 4], 40), t(&[3, 4], 41)],
        ),
        (
            "cosine_similarity",
            Box::new(|tp, v| tp.cosine_similarity(v[0], v[1])),
            vec![t(&[5], 42), t(&[5], 43)],
        ),
        (
            "linear",
            Box::new(|tp, v| { let o = tp.linear(v[0], v[1], Some(v[2]))?; weighted_sum(tp, o, 18) }),
            vec![t(&[2, 3, 4], 44), t(&[4, 5], 45), t(&[5], 46)],
        ),
    ];
    cases
}

/// Scales every weight up so attention is far from uniform.
pub fn sharpened(cfg: &lethevit::vit::ViTConfig, seed: u64) -> lethevit::vit::ViTParams {
    use lethevit::vit::ViTParams;
    let p = ViTParams::init(cfg, seed).unwrap();
    let named = p
        .to_named()
        .into_iter()
        .map(|(n, t)| {
            let data = t.data().iter().map(|v| v * 25.0).collect();
            (n, Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect();
    ViTParams::from_named(cfg, named).unwrap()
}

/// Worst relative error between the autodiff gradient of the cross-entropy
/// of a one-block ViT and central finite differences, over every parameter.
pub fn full_model_gradient_error(seed: u64) -> f64 {
    use lethevit::vit::{forward_on_tape, ViTConfig, ViTParams};
    let cfg = ViTConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        depth: 1,
        heads: 2,
        dim: 8,
        mlp_ratio: 2,
        num_classes: 3,
    };
    let params = sharpened(&cfg, seed);
    let images = random_tensor(&[2, 1, 4, 4], seed + 1);
    let labels = [2usize, 0];
    let loss_of = |p: &ViTParams| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let (logits, _) = forward_on_tape(&mut tape, &bound, &images, false).unwrap();
        let l = tape.cross_entropy(logits, &labels).unwrap();
        tape.value(l).item().unwrap()
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let (logits, _) = forward_on_tape(&mut tape, &bound, &images, false).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    let vars = bound.vars().to_vec();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    let named = params.to_named();
    for (i, (_, tensor)) in named.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..tensor.numel() {
            let shifted = |delta: f64| {
                let mut n = named.clone();
                n[i].1 = nudge(tensor, j, delta);
                loss_of(&ViTParams::from_named(&cfg, n).unwrap())
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Tries every observed loss, every midpoint of neighbouring distinct losses
/// and +∞, scoring each by direct counting. Returns (threshold, MIA).
pub fn brute_force_mia(forget: &[f64], members: &[f64], non_members: &[f64]) -> (f64, f64) {
    let mut values: Vec<f64> = members.iter().chain(non_members).copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut candidates = values.clone();
    candidates.extend(values.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);

    let (m, n) = (members.len() as u64, non_members.len() as u64);
    let mut best: Option<(u64, f64)> = None;
    for &t in &candidates {
        let tp = members.iter().filter(|&&l| l < t).count() as u64;
        let tn = non_members.iter().filter(|&&l| l >= t).count() as u64;
        // tp/m + tn/n scaled by m·n
        let score = tp * n + tn * m;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, t));
        }
    }
    let t = best.unwrap().1;
    let hits = forget.iter().filter(|&&l| l < t).count();
    (t, 100.0 * hits as f64 / forget.len() as f64)
}

pub mod toy {
    use lethevit::data::{generate_toy_dataset, DataSplit, ToySpec};
    use lethevit::training::{train_from_scratch, SgdConfig, TrainConfig};
    use lethevit::vit::{ViTConfig, ViTParams};

    /// 8×8 single-channel images in 2×2 patches, one small block.
    pub fn vit() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 2,
            channels: 1,
            depth: 1,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    pub fn data_spec(seed: u64) -> ToySpec {
        ToySpec {
            per_class: 20,
            image_size: 8,
            marks: 1,
            mark_size: 2,
            frequency: 4.0,
            pattern_amplitude: 0.5,
            seed,
            ..ToySpec::default()
        }
    }

    pub fn split(seed: u64) -> DataSplit {
        let train = generate_toy_dataset(&data_spec(seed)).unwrap();
        let test = generate_toy_dataset(&ToySpec {
            per_class: 10,
            ..data_spec(seed + 100)
        })
        .unwrap();
        DataSplit::random_forget(train, test, 0.2, seed).unwrap()
    }

    pub fn train_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            sgd: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            seed,
        }
    }

    /// A model trained on the full training set.
    pub fn original(split: &DataSplit, epochs: usize) -> ViTParams {
        let init = ViTParams::init(&vit(), 1).unwrap();
        train_from_scratch(init, &split.train, &train_config(epochs, 2)).unwrap().0
    }
}
