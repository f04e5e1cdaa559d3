//! Implementations behind the `sptn` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::attn;
use crate::checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::cost::count_flops;
use crate::data::{load_raw_dir, save_raw_dir, synth_dataset, Dataset};
use crate::engine::{self, EpochMetrics};
use crate::error::{Error, Result};
use crate::vit::{infer, Model};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.sptn";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";

/// Training and evaluation sets described by the `[data]` section.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let m = &cfg.model;
    match cfg.data_source()? {
        DataSource::Synthetic => {
            let d = &cfg.data;
            let all = synth_dataset(
                d.classes,
                d.samples + d.eval_samples,
                d.seed,
                m.channels,
                m.image_size,
            )?;
            Ok(all.split(d.samples))
        }
        DataSource::RawDir => {
            let train = load_raw_dir(&cfg.resolve(&cfg.data.path), m.channels, m.image_size)?;
            let eval = if cfg.data.eval_path.is_empty() {
                Dataset::new(m.channels, m.image_size)
            } else {
                load_raw_dir(&cfg.resolve(&cfg.data.eval_path), m.channels, m.image_size)?
            };
            for ds in [&train, &eval] {
                if let Some(&l) = ds.labels.iter().find(|&&l| l >= m.num_classes) {
                    return Err(Error::config(format!(
                        "label {l} is out of range for model.num_classes {}",
                        m.num_classes
                    )));
                }
            }
            Ok((train, eval))
        }
    }
}

/// Run header: the resolved configuration as `#`-prefixed TOML lines.
pub fn run_header(cfg: &RunConfig) -> String {
    let mut s = String::from("# sptn train\n");
    for line in cfg.to_toml().lines() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str("# epoch,loss,train_acc,eval_acc,seconds\n");
    s
}

pub fn metrics_line(m: &EpochMetrics, log_seconds: bool) -> String {
    let seconds = if log_seconds {
        format!("{:.3}", m.seconds)
    } else {
        "-".to_string()
    };
    format!(
        "{},{:.6},{:.4},{:.4},{}\n",
        m.epoch, m.loss, m.train_acc, m.eval_acc, seconds
    )
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.sptn"))
}

/// Per-tensor finite-ness and magnitude, for diagnosing divergence.
pub fn parameter_summary(model: &Model<f32>) -> String {
    let mut s = String::from("name,frozen,max_abs,non_finite\n");
    for (name, t) in model.params.iter() {
        let max = t
            .data()
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f32, |m, v| m.max(v.abs()));
        let bad = t.data().iter().filter(|v| !v.is_finite()).count();
        let _ = writeln!(s, "{name},{},{max},{bad}", !t.requires_grad());
    }
    s
}

/// `train <config>`: writes the metrics log, optional per-epoch
/// checkpoints and `final.sptn`; returns the output directory.
pub fn train(config_path: &Path) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path)?;
    let (train_set, eval_set) = load_datasets(&cfg)?;
    let tc = cfg.train_config();
    let mut model = Model::<f32>::init(cfg.vit_config(), cfg.model_plan()?, tc.seed)?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;
    let mut metrics = fs::File::create(out.join(METRICS_FILE))?;
    metrics.write_all(run_header(&cfg).as_bytes())?;
    let trainable = engine::freeze_parameters(&mut model.params);
    log::info!(
        "training {} samples ({} eval), {trainable} trainable parameters, into {}",
        train_set.len(),
        eval_set.len(),
        out.display()
    );
    let steps = engine::total_steps(tc.epochs, train_set.len(), tc.batch_size);
    let mut trainer = engine::Trainer::new(tc.clone(), &model, steps)?;
    for epoch in 1..=tc.epochs {
        let start = std::time::Instant::now();
        let (loss, train_acc, tokens) = match trainer.train_epoch(&mut model, &train_set, epoch) {
            Ok(v) => v,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                fs::write(
                    out.join(DIAGNOSTICS_FILE),
                    format!("{e}\n\n{}", parameter_summary(&model)),
                )?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let seconds = start.elapsed().as_secs_f64();
        let eval_acc = if eval_set.is_empty() {
            f64::NAN
        } else {
            engine::evaluate_with(&model, &eval_set, tc.batch_size, tc.workers)?
        };
        let m = EpochMetrics {
            epoch,
            loss,
            train_acc,
            eval_acc,
            seconds,
            tokens,
        };
        log::info!(
            "epoch {epoch}: loss {loss:.4} train_acc {train_acc:.4} eval_acc {eval_acc:.4} tokens {tokens}"
        );
        metrics.write_all(metrics_line(&m, cfg.output.log_seconds).as_bytes())?;
        if cfg.output.checkpoint_every > 0 && epoch.is_multiple_of(cfg.output.checkpoint_every) {
            checkpoint::save(&checkpoint_path(&out, epoch), &model.params)?;
        }
    }
    checkpoint::save(&out.join(FINAL_CHECKPOINT), &model.params)?;
    Ok(out)
}

/// Model from a config plus checkpoint weights.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<Model<f32>> {
    let params = checkpoint::load::<f32>(ckpt)?;
    Model::from_params(cfg.vit_config(), cfg.model_plan()?, params).map_err(|e| Error::Load {
        path: ckpt.to_path_buf(),
        msg: format!("checkpoint does not match the configured model: {e}"),
    })
}

/// The evaluation split, or the training split when none is configured.
fn eval_or_train(cfg: &RunConfig) -> Result<Dataset<f32>> {
    let (train, eval) = load_datasets(cfg)?;
    Ok(if eval.is_empty() { train } else { eval })
}

/// `eval <config> <ckpt>`: top-1 accuracy.
pub fn eval(config_path: &Path, ckpt: &Path) -> Result<f64> {
    let cfg = RunConfig::load(config_path)?;
    let model = load_model(&cfg, ckpt)?;
    let data = eval_or_train(&cfg)?;
    engine::evaluate_with(&model, &data, cfg.train.batch_size, cfg.train.workers)
}

/// `flops <config>`: table followed by `key=value` lines.
pub fn flops(config_path: &Path) -> Result<String> {
    let cfg = RunConfig::load(config_path)?;
    let report = count_flops(&cfg.vit_config(), &cfg.model_plan()?)?;
    Ok(format!("{}\n{}", report.to_table(), report.to_key_values()))
}

/// `attn-dump <config> <ckpt> <index>`: writes `attn.csv` and one PGM per
/// selected layer (all layers when `layers` is empty) into `out_dir`.
pub fn attn_dump(
    config_path: &Path,
    ckpt: &Path,
    index: usize,
    layers: &[usize],
    out_dir: Option<&Path>,
) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path)?;
    let model = load_model(&cfg, ckpt)?;
    let data = eval_or_train(&cfg)?;
    if index >= data.len() {
        return Err(Error::Usage(format!(
            "image index {index} out of range (dataset has {} samples)",
            data.len()
        )));
    }
    let vit = cfg.vit_config();
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > vit.num_layers) {
        return Err(Error::Usage(format!(
            "layer {l} outside 1..={}",
            vit.num_layers
        )));
    }
    let out = match out_dir {
        Some(d) => d.to_path_buf(),
        None => cfg.output_dir().join(format!("attn_{index}")),
    };
    fs::create_dir_all(&out)?;
    let (_, traces, _) = infer(&model, &data.images[index])?;
    let p = vit.num_patches();
    fs::write(out.join("attn.csv"), attn::to_csv(&traces, p))?;
    for t in traces
        .iter()
        .filter(|t| layers.is_empty() || layers.contains(&t.layer))
    {
        let pgm = attn::to_pgm(&attn::patch_scores(t, p), vit.grid());
        fs::write(out.join(format!("attn_layer{:02}.pgm", t.layer)), pgm)?;
    }
    Ok(out)
}

/// `gen-data <classes> <samples> <seed> <dir>`.
pub fn gen_data(
    classes: usize,
    samples: usize,
    seed: u64,
    dir: &Path,
    image_size: usize,
    channels: usize,
) -> Result<()> {
    let ds = synth_dataset(classes, samples, seed, channels, image_size)?;
    save_raw_dir(&ds, dir)
}
