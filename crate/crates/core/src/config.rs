//! Run configuration: a TOML file with `[model]`, `[sparsify]`,
//! `[adapter]`, `[train]`, `[data]` and `[output]` sections. Unknown keys
//! are rejected; every key is optional and falls back to the defaults
//! below.
//!
//! ```toml
//! [model]        # ViT-B/16 at 224 px, 100 classes
//! image_size = 224
//! patch_size = 16
//! channels = 3
//! embed_dim = 768
//! num_heads = 12
//! num_layers = 12
//! ffn_hidden = 3072
//! num_classes = 100
//!
//! [sparsify]
//! enabled = true
//! operator = "evit"      # evit | dynamicvit | tome
//! r = 0.7
//! positions = [4, 7, 10]
//! strategy = "merge"     # merge | drop | argmax
//!
//! [adapter]
//! enabled = true
//! variant = "inner"      # inner | input | output
//! d = 32
//! s = 1.0
//!
//! [train]
//! epochs = 10
//! batch_size = 32
//! lr = 1e-3
//! weight_decay = 0.01
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! seed = 0
//! workers = 1
//!
//! [data]
//! source = "synthetic"   # synthetic | raw-dir
//! path = ""              # raw-dir: training directory
//! eval_path = ""         # raw-dir: evaluation directory (optional)
//! classes = 4
//! samples = 400
//! eval_samples = 100
//! seed = 7
//!
//! [output]
//! dir = "runs/default"
//! checkpoint_every = 0   # epochs between checkpoints; 0 = final only
//! log_seconds = true     # false writes "-" for reproducible logs
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterPlan, AdapterVariant};
use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::sparsify::{Operator, SparsifyPlan, Strategy};
use crate::vit::{ModelPlan, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let v = ViTConfig::vit_b16(100);
        ModelSection {
            image_size: v.image_size,
            patch_size: v.patch_size,
            channels: v.channels,
            embed_dim: v.embed_dim,
            num_heads: v.num_heads,
            num_layers: v.num_layers,
            ffn_hidden: v.ffn_hidden,
            num_classes: v.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsifySection {
    pub enabled: bool,
    pub operator: String,
    pub r: f64,
    pub positions: Vec<usize>,
    pub strategy: String,
}

impl Default for SparsifySection {
    fn default() -> Self {
        let p = SparsifyPlan::default();
        SparsifySection {
            enabled: true,
            operator: p.operator.to_string(),
            r: p.keep_rate,
            positions: p.positions,
            strategy: p.strategy.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub enabled: bool,
    pub variant: String,
    pub d: usize,
    pub s: f64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let p = AdapterPlan::default();
        AdapterSection {
            enabled: true,
            variant: p.variant.to_string(),
            d: p.bottleneck,
            s: p.scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.base_lr,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: t.seed,
            workers: t.workers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: String,
    pub path: String,
    pub eval_path: String,
    pub classes: usize,
    pub samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "synthetic".into(),
            path: String::new(),
            eval_path: String::new(),
            classes: 4,
            samples: 400,
            eval_samples: 100,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    pub checkpoint_every: usize,
    pub log_seconds: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs/default".into(),
            checkpoint_every: 0,
            log_seconds: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub sparsify: SparsifySection,
    pub adapter: AdapterSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    RawDir,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut cfg = RunConfig::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Canonical TOML of the fully resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let vit = self.vit_config();
        vit.validate()?;
        let plan = self.model_plan()?;
        plan.validate(&vit)?;
        self.train_config().validate()?;
        match self.data_source()? {
            DataSource::Synthetic => {
                if self.data.classes < 2 {
                    return Err(Error::config("data.classes must be at least 2"));
                }
                if self.data.samples == 0 {
                    return Err(Error::config("data.samples must be positive"));
                }
                if self.data.classes > vit.num_classes {
                    return Err(Error::config(format!(
                        "data.classes {} exceeds model.num_classes {}",
                        self.data.classes, vit.num_classes
                    )));
                }
            }
            DataSource::RawDir => {
                if self.data.path.is_empty() {
                    return Err(Error::config(
                        "data.path is required when data.source = \"raw-dir\"",
                    ));
                }
            }
        }
        if self.output.dir.is_empty() {
            return Err(Error::config("output.dir must not be empty"));
        }
        Ok(())
    }

    pub fn vit_config(&self) -> ViTConfig {
        let m = &self.model;
        ViTConfig {
            image_size: m.image_size,
            patch_size: m.patch_size,
            channels: m.channels,
            embed_dim: m.embed_dim,
            num_heads: m.num_heads,
            num_layers: m.num_layers,
            ffn_hidden: m.ffn_hidden,
            num_classes: m.num_classes,
        }
    }

    pub fn model_plan(&self) -> Result<ModelPlan> {
        let sparsify = if self.sparsify.enabled {
            let s = &self.sparsify;
            Some(SparsifyPlan {
                operator: s.operator.parse::<Operator>()?,
                keep_rate: s.r,
                positions: s.positions.clone(),
                strategy: s.strategy.parse::<Strategy>()?,
            })
        } else {
            None
        };
        let adapter = if self.adapter.enabled {
            Some(AdapterPlan {
                variant: self.adapter.variant.parse::<AdapterVariant>()?,
                bottleneck: self.adapter.d,
                scale: self.adapter.s,
            })
        } else {
            None
        };
        Ok(ModelPlan { sparsify, adapter })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.lr,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: t.seed,
            workers: t.workers,
        }
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match self.data.source.as_str() {
            "synthetic" => Ok(DataSource::Synthetic),
            "raw-dir" => Ok(DataSource::RawDir),
            other => Err(Error::config(format!(
                "data.source: unknown source {other:?} (expected synthetic|raw-dir)"
            ))),
        }
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }
}
