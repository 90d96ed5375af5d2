use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lethevit::data::{generate_toy_dataset, load_dataset, save_dataset, split_random_forget, DataSplit, LabeledDataset, ToySpec};
use lethevit::evaluation::{masking_sweep, report_csv, sweep_csv, MetricsReport, REPORT_HEADER};
use lethevit::masking::{MaskSpec, MaskType};
use lethevit::training::{train_from_scratch, SgdConfig, TrainConfig};
use lethevit::unlearning::{fine_tune, gradient_ascent, random_labels, retrain, unlearn as lethe_unlearn, Method, UnlearnConfig};
use lethevit::vit::{ViTConfig, ViTParams};
use serde_json::{json, Value};

use crate::config::{Config, ARCH_KEYS};
use crate::manifest::{read_all, Manifest, MANIFEST_FILE};
use crate::{CliError, Common};

const TRAIN_FILE: &str = "train.ltds";
const TEST_FILE: &str = "test.ltds";
const SPLIT_FILE: &str = "split.json";

/// Offset between the training-set seed and the test-set seed.
const TEST_SEED_OFFSET: u64 = 1_000_003;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn with_arch(keys: &[&'static str]) -> Vec<&'static str> {
    let mut all = keys.to_vec();
    all.extend(ARCH_KEYS);
    all.push("seed");
    all
}

fn vit_config(config: &Config, data: &LabeledDataset) -> Result<ViTConfig, CliError> {
    let d = ViTConfig::default();
    let vit = ViTConfig {
        image_size: data.image_size(),
        channels: data.channels(),
        num_classes: data.class_count(),
        patch_size: config.get_or("patch_size", d.patch_size)?,
        depth: config.get_or("depth", d.depth)?,
        heads: config.get_or("heads", d.heads)?,
        dim: config.get_or("dim", d.dim)?,
        mlp_ratio: config.get_or("mlp_ratio", d.mlp_ratio)?,
    };
    vit.validate()?;
    Ok(vit)
}

fn sgd(config: &Config) -> Result<SgdConfig, CliError> {
    Ok(SgdConfig {
        learning_rate: config.require("lr")?,
        momentum: config.get_or("momentum", 0.0)?,
        weight_decay: config.get_or("weight_decay", 0.0)?,
    })
}

fn load_split(data: &Path, manifest: &mut Manifest) -> Result<DataSplit, CliError> {
    let (train_path, test_path, split_path) = (data.join(TRAIN_FILE), data.join(TEST_FILE), data.join(SPLIT_FILE));
    for p in [&train_path, &test_path, &split_path] {
        manifest.input(p);
    }
    let train = load_dataset(&train_path)?;
    let test = load_dataset(&test_path)?;
    let text = fs::read_to_string(&split_path).map_err(|e| io_err(&split_path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| io_err(&split_path, e))?;
    let indices = |key: &str| -> Result<Vec<usize>, CliError> {
        value[key]
            .as_array()
            .ok_or_else(|| io_err(&split_path, format!("missing '{key}' list")))?
            .iter()
            .map(|v| {
                v.as_u64()
                    .map(|i| i as usize)
                    .ok_or_else(|| io_err(&split_path, format!("non-integer entry in '{key}'")))
            })
            .collect()
    };
    Ok(DataSplit::new(train, test, indices("forget")?, indices("retain")?)?)
}

fn load_model(path: &Path, vit: &ViTConfig, manifest: &mut Manifest) -> Result<ViTParams, CliError> {
    manifest.input(path);
    Ok(ViTParams::load(path, vit)?)
}

pub fn gen_data(common: &Common) -> Result<(), CliError> {
    let start = Instant::now();
    let config = Config::load(common.config.as_deref(), &common.overrides)?;
    config.check_keys(&[
        "classes",
        "per_class",
        "test_per_class",
        "image_size",
        "channels",
        "marks",
        "mark_size",
        "mark_amplitude",
        "pattern_amplitude",
        "frequency",
        "noise_std",
        "forget_ratio",
        "seed",
    ])?;
    let d = ToySpec::default();
    let seed = config.seed()?;
    let spec = ToySpec {
        classes: config.get_or("classes", d.classes)?,
        per_class: config.get_or("per_class", d.per_class)?,
        image_size: config.get_or("image_size", d.image_size)?,
        channels: config.get_or("channels", d.channels)?,
        marks: config.get_or("marks", d.marks)?,
        mark_size: config.get_or("mark_size", d.mark_size)?,
        mark_amplitude: config.get_or("mark_amplitude", d.mark_amplitude)?,
        pattern_amplitude: config.get_or("pattern_amplitude", d.pattern_amplitude)?,
        frequency: config.get_or("frequency", d.frequency)?,
        noise_std: config.get_or("noise_std", d.noise_std)?,
        seed,
    };
    let test_spec = ToySpec {
        per_class: config.get_or("test_per_class", 50)?,
        seed: seed.wrapping_add(TEST_SEED_OFFSET),
        ..spec.clone()
    };
    let ratio: f64 = config.get_or("forget_ratio", 0.1)?;

    let train = generate_toy_dataset(&spec)?;
    let test = generate_toy_dataset(&test_spec)?;
    let (forget, retain) = split_random_forget(train.len(), ratio, seed)?;

    prepare_out(&common.out)?;
    let mut manifest = Manifest::new("gen-data");
    let (train_path, test_path, split_path) = (
        common.out.join(TRAIN_FILE),
        common.out.join(TEST_FILE),
        common.out.join(SPLIT_FILE),
    );
    save_dataset(&train_path, &train)?;
    save_dataset(&test_path, &test)?;
    write_file(&split_path, &format!("{}\n", json!({ "forget": forget, "retain": retain })))?;
    for p in [&train_path, &test_path, &split_path] {
        manifest.output(p);
    }
    manifest.field("seed", seed);
    println!(
        "wrote {} train / {} test samples, {} forget / {} retain",
        train.len(),
        test.len(),
        forget.len(),
        retain.len()
    );
    manifest.write(&common.out, config.resolved(), start.elapsed().as_secs_f64())
}

pub fn train(common: &Common, data: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let config = Config::load(common.config.as_deref(), &common.overrides)?;
    config.check_keys(&with_arch(&["epochs", "lr", "batch", "momentum", "weight_decay"]))?;
    let seed = config.seed()?;
    let train_config = TrainConfig {
        epochs: config.require("epochs")?,
        batch_size: config.require("batch")?,
        sgd: sgd(&config)?,
        seed,
    };
    let mut manifest = Manifest::new("train");
    let split = load_split(data, &mut manifest)?;
    let vit = vit_config(&config, &split.train)?;

    let init = ViTParams::init(&vit, seed)?;
    let (params, log) = train_from_scratch(init, &split.train, &train_config)?;

    prepare_out(&common.out)?;
    let path = common.out.join("original.ltvt");
    params.save(&path)?;
    manifest.output(&path);
    manifest.field("seed", seed);
    manifest.field("checkpoint", path.display().to_string());
    manifest.field("final_loss", log.losses.last().copied().unwrap_or(f64::NAN));
    manifest.phase("train", start.elapsed().as_secs_f64());
    println!("wrote {}", path.display());
    manifest.write(&common.out, config.resolved(), start.elapsed().as_secs_f64())
}

const UNLEARN_KEYS: [&str; 12] = [
    "ef",
    "er",
    "epochs",
    "lr",
    "batch",
    "momentum",
    "weight_decay",
    "tau",
    "ratio",
    "mask_type",
    "gaussian_std",
    "mask_seed",
];

pub fn unlearn(common: &Common, method: &str, data: &Path, model: Option<&Path>) -> Result<(), CliError> {
    let start = Instant::now();
    let method: Method = method.parse()?;
    let config = Config::load(common.config.as_deref(), &common.overrides)?;
    config.check_keys(&with_arch(&UNLEARN_KEYS))?;
    let seed = config.seed()?;
    let mut manifest = Manifest::new("unlearn");
    let split = load_split(data, &mut manifest)?;
    let vit = vit_config(&config, &split.train)?;
    let original = match (method, model) {
        (Method::Retrain, _) => None,
        (_, Some(path)) => Some(load_model(path, &vit, &mut manifest)?),
        (_, None) => return Err(CliError::Usage(format!("--model is required for method {}", method.key()))),
    };
    let original = || original.as_ref().expect("checked above");
    let baseline = |config: &Config| -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            epochs: config.require("epochs")?,
            batch_size: config.require("batch")?,
            sgd: sgd(config)?,
            seed,
        })
    };

    let params = match method {
        Method::LetheViT => {
            let mask = MaskSpec {
                ratio: config.get_or("ratio", MaskSpec::default().ratio)?,
                mask_type: config.get_or("mask_type", MaskType::Zero)?,
                gaussian_std: config.get_or("gaussian_std", MaskSpec::default().gaussian_std)?,
                seed: config.get_or("mask_seed", seed)?,
            };
            let cfg = UnlearnConfig {
                forget_epochs: config.require("ef")?,
                retain_epochs: config.require("er")?,
                batch_size: config.require("batch")?,
                sgd: sgd(&config)?,
                temperature: config.get_or("tau", UnlearnConfig::default().temperature)?,
                mask,
                seed,
            };
            let outcome = lethe_unlearn(original(), &split, &cfg)?;
            manifest.phase("forget", outcome.forget_seconds);
            manifest.phase("retain", outcome.retain_seconds);
            outcome.params
        }
        Method::Retrain => retrain(&split, &vit, &baseline(&config)?)?,
        Method::FineTune => fine_tune(original(), &split, &baseline(&config)?)?,
        Method::GradientAscent => gradient_ascent(original(), &split, &baseline(&config)?)?,
        Method::RandomLabels => random_labels(original(), &split, &baseline(&config)?, seed)?,
    };
    if method != Method::LetheViT {
        manifest.phase("train", start.elapsed().as_secs_f64());
    }

    prepare_out(&common.out)?;
    let path = common.out.join(format!("{}.ltvt", method.key()));
    params.save(&path)?;
    manifest.output(&path);
    manifest.field("method", method.key());
    manifest.field("label", method.label());
    manifest.field("seed", seed);
    manifest.field("checkpoint", path.display().to_string());
    println!("wrote {}", path.display());
    manifest.write(&common.out, config.resolved(), start.elapsed().as_secs_f64())
}

pub fn evaluate(common: &Common, data: &Path, retrain_path: &Path, models: &[String]) -> Result<(), CliError> {
    let start = Instant::now();
    let config = Config::load(common.config.as_deref(), &common.overrides)?;
    config.check_keys(&with_arch(&[]))?;
    let seed = config.seed()?;
    let mut manifest = Manifest::new("evaluate");
    let split = load_split(data, &mut manifest)?;
    let vit = vit_config(&config, &split.train)?;

    let mut labelled: Vec<(String, PathBuf)> = Vec::new();
    for item in models {
        let (label, path) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--model expects LABEL=PATH, got {item:?}")))?;
        if label.is_empty() || label.contains(',') {
            return Err(CliError::Usage(format!("invalid model label {label:?}")));
        }
        labelled.push((label.to_string(), PathBuf::from(path)));
    }

    let reference = load_model(retrain_path, &vit, &mut manifest)?;
    let retrain_report = MetricsReport::measure(&reference, &split, Method::Retrain.label(), seed)?;
    let mut others = Vec::new();
    for (label, path) in &labelled {
        let model = load_model(path, &vit, &mut manifest)?;
        others.push(MetricsReport::measure(&model, &split, label, seed)?);
    }
    let csv = report_csv(&retrain_report, &others);

    prepare_out(&common.out)?;
    let path = common.out.join("report.csv");
    write_file(&path, &csv)?;
    manifest.output(&path);
    manifest.field("seed", seed);
    print!("{csv}");
    manifest.write(&common.out, config.resolved(), start.elapsed().as_secs_f64())
}

pub fn sweep_mask(common: &Common, data: &Path, model: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let config = Config::load(common.config.as_deref(), &common.overrides)?;
    config.check_keys(&with_arch(&["ratios", "types", "gaussian_std", "mask_seed"]))?;
    let seed = config.seed()?;
    let mut manifest = Manifest::new("sweep-mask");
    let split = load_split(data, &mut manifest)?;
    let vit = vit_config(&config, &split.train)?;
    let ratios: Vec<f64> = config.list_or("ratios", "0,0.05,0.1,0.2,0.3")?;
    let types: Vec<MaskType> = config.list_or("types", "zero,gaussian")?;
    let base = MaskSpec {
        gaussian_std: config.get_or("gaussian_std", MaskSpec::default().gaussian_std)?,
        seed: config.get_or("mask_seed", seed)?,
        ..MaskSpec::default()
    };
    let params = load_model(model, &vit, &mut manifest)?;
    let rows = masking_sweep(&params, &split, &ratios, &types, &base)?;
    let csv = sweep_csv(&rows);

    prepare_out(&common.out)?;
    let path = common.out.join("sweep.csv");
    write_file(&path, &csv)?;
    manifest.output(&path);
    manifest.field("seed", seed);
    print!("{csv}");
    manifest.write(&common.out, config.resolved(), start.elapsed().as_secs_f64())
}

/// Wall time of every unlearning run next to its average gap, when the run
/// directory also holds an evaluation report.
pub fn report(dir: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let mut manifest = Manifest::new("report");
    let log = dir.join(MANIFEST_FILE);
    let records = read_all(&log)?;
    let report_path = dir.join("report.csv");
    let mut gaps: BTreeMap<String, String> = BTreeMap::new();
    if report_path.exists() {
        manifest.input(&report_path);
        let text = fs::read_to_string(&report_path).map_err(|e| io_err(&report_path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(io_err(&report_path, "unexpected header"));
        }
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if let (Some(label), Some(ag)) = (cells.first(), cells.last()) {
                gaps.insert(label.to_string(), ag.to_string());
            }
        }
    }

    let phase = |r: &Value, name: &str| r["phase_seconds"][name].as_f64().map_or(String::new(), |s| format!("{s:.3}"));
    let mut csv = String::from("method,seconds,forget_seconds,retain_seconds,AG\n");
    for r in records.iter().filter(|r| r["command"] == "unlearn") {
        let label = r["label"].as_str().unwrap_or("?");
        csv.push_str(&format!(
            "{label},{:.3},{},{},{}\n",
            r["seconds"].as_f64().unwrap_or(f64::NAN),
            phase(r, "forget"),
            phase(r, "retain"),
            gaps.get(label).map_or("", String::as_str),
        ));
    }
    let path = dir.join("summary.csv");
    write_file(&path, &csv)?;
    manifest.output(&path);
    print!("{csv}");
    manifest.write(dir, BTreeMap::new(), start.elapsed().as_secs_f64())
}
