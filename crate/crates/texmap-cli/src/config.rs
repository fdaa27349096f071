//! Pipeline configuration file (TOML) and its cross-field validation.
//! Command-line flags override file values after loading.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use texmap::error::{Error, Result};
use texmap::eval::{Classifier, SplitPlan};
use texmap::lbp::{LbpConfig, LbpVariant};
use texmap::net::{ConvBlockSpec, FusionMode, FusionNetSpec, TrainConfig};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub paths: PathsSection,
    #[serde(default)]
    pub lbp: LbpSection,
    pub net: Option<NetSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Raw bytes of the file, kept for provenance hashing.
    #[serde(skip)]
    pub raw: Vec<u8>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Folder-per-class RGB image root.
    pub dataset: PathBuf,
    /// Mirrored mapped-image root (required by fusion modes that use the
    /// texture stream).
    pub mapped: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("texmap_out")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbpSection {
    pub points: u32,
    pub radius: f64,
    pub variant: String,
}

impl Default for LbpSection {
    fn default() -> Self {
        LbpSection {
            points: 8,
            radius: 1.0,
            variant: "uniform2".to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub mode: String,
    pub class_count: usize,
    #[serde(default = "default_input_side")]
    pub input_side: usize,
    /// Overrides for the desk-scale defaults.
    pub conv_blocks: Option<Vec<ConvBlockSpec>>,
    pub fc_dims: Option<Vec<usize>>,
}

fn default_input_side() -> usize {
    32
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            momentum: d.momentum,
            epochs: d.epochs,
            batch_size: d.batch_size,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// One of lbp_histogram_ova, micronet_logits, micronet_features_ova.
    pub classifier: String,
    pub train_ratio: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            classifier: "lbp_histogram_ova".to_string(),
            train_ratio: 0.5,
            repetitions: 10,
            seed: 0,
        }
    }
}

impl FileConfig {
    /// Parse the file and apply flag overrides (flags win over file
    /// values). A `--seed` override applies to both training and splits.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<FileConfig> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&raw)
            .map_err(|e| Error::config(format!("{}: not UTF-8: {e}", path.display())))?;
        let mut cfg: FileConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.raw = raw;
        if let Some(seed) = seed_override {
            cfg.train.seed = seed;
            cfg.eval.seed = seed;
        }
        Ok(cfg)
    }

    pub fn config_sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(&self.raw);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn lbp_config(&self) -> Result<LbpConfig> {
        let variant = LbpVariant::parse(&self.lbp.variant)
            .map_err(|e| Error::config(format!("lbp.variant: {e}")))?;
        LbpConfig::new(self.lbp.points, self.lbp.radius, variant)
            .map_err(|e| Error::config(format!("lbp: {e}")))
    }

    /// Build the network spec, checking the mode against the configured
    /// paths so mismatches fail before any computation.
    pub fn net_spec(&self) -> Result<FusionNetSpec> {
        let net = self
            .net
            .as_ref()
            .ok_or_else(|| Error::config("net: section required for this command"))?;
        let mode = FusionMode::parse(&net.mode)
            .map_err(|e| Error::config(format!("net.mode: {e}")))?;
        if mode.needs_mapped() && self.paths.mapped.is_none() {
            return Err(Error::config(format!(
                "net.mode = {:?} consumes the texture stream; set paths.mapped \
                 to the encoded dataset root",
                net.mode
            )));
        }
        let mut spec = FusionNetSpec::desk_scale(mode, net.class_count);
        spec.input_side = net.input_side;
        if let Some(blocks) = &net.conv_blocks {
            spec.conv_blocks = blocks.clone();
        }
        if let Some(dims) = &net.fc_dims {
            spec.fc_dims = dims.clone();
        }
        spec.validate().map_err(|e| Error::config(format!("net: {e}")))?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            momentum: self.train.momentum,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
        };
        cfg.validate().map_err(|e| Error::config(format!("train: {e}")))?;
        Ok(cfg)
    }

    pub fn split_plan(&self) -> Result<SplitPlan> {
        let plan = SplitPlan {
            train_ratio: self.eval.train_ratio,
            repetitions: self.eval.repetitions,
            seed: self.eval.seed,
        };
        plan.validate().map_err(|e| Error::config(format!("eval: {e}")))?;
        Ok(plan)
    }

    pub fn classifier(&self) -> Result<Classifier> {
        match self.eval.classifier.as_str() {
            "lbp_histogram_ova" => Ok(Classifier::LbpHistogramOva {
                lbp: self.lbp_config()?,
            }),
            "micronet_logits" => Ok(Classifier::MicronetLogits {
                spec: self.net_spec()?,
                train: self.train_config()?,
            }),
            "micronet_features_ova" => Ok(Classifier::MicronetFeaturesOva {
                spec: self.net_spec()?,
                train: self.train_config()?,
            }),
            other => Err(Error::config(format!(
                "eval.classifier: unknown value {other:?} (lbp_histogram_ova, \
                 micronet_logits, micronet_features_ova)"
            ))),
        }
    }
}
