//! The TOML run configuration.

use std::path::{Path, PathBuf};

use pros_core::protocol::{ClassPartition, GalleryMode, Protocol, SplitArgs};
use pros_core::{Ablations, BackboneConfig, CapsConfig, FeatureMode, ModelSpec, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File locations. Relative paths resolve against the config file's
/// directory, or the working directory when no file was given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub samples: PathBuf,
    pub split: PathBuf,
    /// Written by the first training stage.
    pub pul_checkpoint: PathBuf,
    /// Written by the second training stage and read by retrieval commands.
    pub checkpoint: PathBuf,
    pub embeddings: PathBuf,
    pub report: PathBuf,
    pub sigma_report: PathBuf,
    /// Training logs go to `<log_dir>/train-<stage>.log`.
    pub log_dir: PathBuf,
    /// Externally supplied backbone weights (JSON); the synthetic backbone
    /// is generated from `backbone.seed` when unset.
    pub backbone_weights: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.tsv".into(),
            samples: "data/samples.bin".into(),
            split: "data/split.json".into(),
            pul_checkpoint: "runs/pul.json".into(),
            checkpoint: "runs/pros.json".into(),
            embeddings: "runs/gallery.emb".into(),
            report: "runs/report.json".into(),
            sigma_report: "runs/sigma.json".into(),
            log_dir: "runs".into(),
            backbone_weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    /// Number of learnable text prompt vectors spliced into each caption.
    pub text_prompt_len: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self { text_prompt_len: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub protocol: Protocol,
    pub held_out_domain: Option<String>,
    pub query_domain: Option<String>,
    pub gallery_mode: GalleryMode,
    pub query_fraction: Option<f64>,
    pub val_fraction: f64,
    pub real_domain: String,
    /// Class counts; both unset means the default ratios.
    pub train_classes: Option<usize>,
    pub val_classes: Option<usize>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Ucdr,
            held_out_domain: Some("infograph".into()),
            query_domain: None,
            gallery_mode: GalleryMode::Unseen,
            query_fraction: None,
            val_fraction: 0.25,
            real_domain: "real".into(),
            train_classes: None,
            val_classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Cut-offs reported for mAP@k and Prec@k.
    pub ks: Vec<usize>,
    /// Retrieval path; unset means the checkpoint's own path.
    pub mode: Option<FeatureMode>,
    /// Default list length of `search`.
    pub search_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ks: vec![10, 100, 200], mode: None, search_k: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds prompt and simulator initialization, the class partition,
    /// query subsampling and batch order.
    pub seed: u64,
    pub paths: Paths,
    pub data: SynthConfig,
    pub backbone: BackboneConfig,
    pub caps: CapsConfig,
    pub prompts: PromptSection,
    pub train: TrainConfig,
    pub protocol: ProtocolSection,
    pub eval: EvalSection,
    pub ablations: Ablations,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            data: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            caps: CapsConfig::default(),
            prompts: PromptSection::default(),
            train: TrainConfig::default(),
            protocol: ProtocolSection::default(),
            eval: EvalSection::default(),
            ablations: Ablations::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, or returns the defaults rooted at the working directory.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.base_dir.as_os_str().is_empty() {
            cfg.base_dir = PathBuf::from(".");
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    /// Turns on each comma-separated ablation flag.
    pub fn apply_ablations(&mut self, list: &str) -> Result<()> {
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            self.ablations.set(name)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.caps.validate()?;
        self.train.validate()?;
        if self.data.num_patches != self.backbone.num_patches || self.data.patch_dim != self.backbone.patch_dim {
            return Err(Error::Config(format!(
                "data renders {}x{} patch grids but the backbone expects {}x{}",
                self.data.num_patches, self.data.patch_dim, self.backbone.num_patches, self.backbone.patch_dim
            )));
        }
        if self.prompts.text_prompt_len == 0 {
            return Err(Error::Config("prompts.text_prompt_len must be at least 1".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be a non-empty list of positive cut-offs".into()));
        }
        if self.eval.search_k == 0 {
            return Err(Error::Config("eval.search_k must be positive".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut caps = self.caps.clone();
        caps.seed = self.seed;
        ModelSpec {
            caps,
            text_prompt_len: self.prompts.text_prompt_len,
            temperature: self.train.temperature,
            ablations: self.ablations,
            seed: self.seed,
        }
    }

    pub fn partition(&self, classes: &[String]) -> Result<ClassPartition> {
        let p = &self.protocol;
        Ok(match (p.train_classes, p.val_classes) {
            (None, None) => ClassPartition::default_ratios(classes, self.seed)?,
            (t, v) => {
                let n_val = v.unwrap_or(1);
                let n_train = t.unwrap_or_else(|| classes.len().saturating_sub(n_val + 1));
                ClassPartition::by_counts(classes, n_train, n_val, self.seed)?
            }
        })
    }

    pub fn split_args(&self, classes: &[String]) -> Result<SplitArgs> {
        let p = &self.protocol;
        Ok(SplitArgs {
            protocol: p.protocol,
            held_out_domain: if p.protocol == Protocol::Uccdr { None } else { p.held_out_domain.clone() },
            query_domain: p.query_domain.clone(),
            partition: self.partition(classes)?,
            gallery_mode: p.gallery_mode,
            query_fraction: p.query_fraction,
            val_fraction: p.val_fraction,
            real_domain: p.real_domain.clone(),
            seed: self.seed,
        })
    }

    /// Training settings for `stage`, seeded from the run seed.
    pub fn train_config(&self, stage: pros_core::Stage) -> TrainConfig {
        TrainConfig { stage, seed: self.seed, ..self.train.clone() }
    }
}
