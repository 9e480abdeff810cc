//! The full prompt-to-simulate model: frozen backbone, prompt units,
//! templates, and the simulator, plus its serializable checkpoint form.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{Backbone, BackboneConfig, CaptionTokens, PatchEmbeddings, PromptedSequence};
use crate::caps::{assemble_inference_input, Caps, CapsConfig};
use crate::error::{ProsError, Result};
use crate::prompts::{CaDPPair, MaskSpec, PromptTemplates, PromptUnitBank};
use crate::tensor::{normalized, Matrix};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Component ablations. Each flag is independent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Drop semantic prompt units everywhere.
    pub no_sp: bool,
    /// Drop domain prompt units everywhere.
    pub no_dp: bool,
    /// Simulator training sees every unit instead of hiding the sample's own.
    pub no_mask: bool,
    /// Retrieval bypasses the simulator and prompts with the raw unit banks.
    pub no_caps: bool,
    /// Keep the pretrained class token frozen in stage 1.
    pub no_cls_train: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = ["no_sp", "no_dp", "no_mask", "no_caps", "no_cls_train"];

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_sp" => self.no_sp = true,
            "no_dp" => self.no_dp = true,
            "no_mask" => self.no_mask = true,
            "no_caps" => self.no_caps = true,
            "no_cls_train" => self.no_cls_train = true,
            other => {
                return Err(ProsError::InvalidConfig(format!(
                    "unknown ablation '{other}' (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let flags = [self.no_sp, self.no_dp, self.no_mask, self.no_caps, self.no_cls_train];
        Self::NAMES.iter().zip(flags).filter(|(_, on)| *on).map(|(n, _)| *n).collect()
    }
}

/// How image features are produced at retrieval time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Dynamic prompts from the simulator over the full unit banks.
    Simulated,
    /// Every prompt unit injected directly; no simulator.
    Units,
    /// The untouched backbone: pretrained class token and patches only.
    Frozen,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub seed: u64,
}

/// Everything needed to rebuild a trained model except the backbone weights,
/// which are regenerated from [`BackboneConfig`] or loaded externally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    pub caps_config: CapsConfig,
    pub domain_names: Vec<String>,
    pub class_names: Vec<String>,
    pub bank: PromptUnitBank,
    pub templates: PromptTemplates,
    pub caps: Caps,
    pub temperature: f64,
    pub ablations: Ablations,
    pub prompt_seed: u64,
    pub pul_done: bool,
    pub csl_done: bool,
    /// Training configuration of each completed stage, as stored by the caller.
    pub train_configs: Vec<crate::training::TrainConfig>,
    pub history: Vec<StageRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProsModel {
    pub backbone: Backbone,
    pub domain_names: Vec<String>,
    pub class_names: Vec<String>,
    pub bank: PromptUnitBank,
    pub templates: PromptTemplates,
    pub caps: Caps,
    pub captions: Vec<CaptionTokens>,
    pub temperature: f64,
    pub ablations: Ablations,
    pub prompt_seed: u64,
    pub pul_done: bool,
    pub csl_done: bool,
    pub train_configs: Vec<crate::training::TrainConfig>,
    pub history: Vec<StageRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub caps: CapsConfig,
    /// Length of the learnable text prompt `P_t`.
    pub text_prompt_len: usize,
    pub temperature: f64,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { caps: CapsConfig::default(), text_prompt_len: 16, temperature: 0.01, ablations: Ablations::default(), seed: 0 }
    }
}

fn check_unique(what: &'static str, names: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(ProsError::Duplicate { what, name: n.clone() });
        }
    }
    Ok(())
}

impl ProsModel {
    /// Fresh model over `domain_names` (the source domains) and
    /// `class_names` (the training classes).
    pub fn new(backbone: Backbone, domain_names: Vec<String>, class_names: Vec<String>, spec: &ModelSpec) -> Result<Self> {
        check_unique("domain", &domain_names)?;
        check_unique("class", &class_names)?;
        if !(spec.temperature > 0.0) {
            return Err(ProsError::InvalidConfig(format!("temperature must be positive, got {}", spec.temperature)));
        }
        let cfg = backbone.config().clone();
        if spec.caps.width != cfg.embed_dim {
            return Err(ProsError::InvalidConfig(format!(
                "caps.width ({}) must equal backbone.embed_dim ({})",
                spec.caps.width, cfg.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let bank = PromptUnitBank::init(domain_names.len(), class_names.len(), cfg.embed_dim, &mut rng)?;
        let templates = PromptTemplates::init(
            spec.caps.n_domain,
            spec.caps.n_semantic,
            spec.text_prompt_len,
            cfg.text_dim,
            backbone.cls_token(),
            &mut rng,
        )?;
        let caps = Caps::init(spec.caps.clone(), domain_names.len(), class_names.len(), cfg.num_patches, cfg.embed_dim)?;
        let captions = Self::tokenize(&backbone, &class_names, spec.text_prompt_len)?;
        Ok(Self {
            backbone,
            domain_names,
            class_names,
            bank,
            templates,
            caps,
            captions,
            temperature: spec.temperature,
            ablations: spec.ablations,
            prompt_seed: spec.seed,
            pul_done: false,
            csl_done: false,
            train_configs: Vec::new(),
            history: Vec::new(),
        })
    }

    fn tokenize(backbone: &Backbone, class_names: &[String], n_prompts: usize) -> Result<Vec<CaptionTokens>> {
        let tok = backbone.tokenizer();
        class_names
            .iter()
            .map(|c| {
                let cap = tok.class_caption(c);
                let len = backbone.text_sequence_len(&cap, n_prompts);
                if len > backbone.config().context_length {
                    return Err(ProsError::ContextOverflow { len, max: backbone.config().context_length });
                }
                Ok(cap)
            })
            .collect()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domain_names.iter().position(|d| d == name)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Which unit rows may enter a sequence at all, given the ablations.
    pub(crate) fn unit_availability(&self) -> (bool, bool) {
        (!self.ablations.no_dp, !self.ablations.no_sp)
    }

    /// The default retrieval path for this model's ablation settings.
    pub fn retrieval_mode(&self) -> FeatureMode {
        if self.ablations.no_caps {
            FeatureMode::Units
        } else {
            FeatureMode::Simulated
        }
    }

    /// Dynamic prompts over the full (unmasked) banks.
    pub fn simulate_full(&self, patches: &PatchEmbeddings) -> Result<CaDPPair> {
        let (use_dp, use_sp) = self.unit_availability();
        let mut mask = MaskSpec::full(self.num_domains(), self.num_classes());
        if !use_dp {
            mask.domain_mask.iter_mut().for_each(|m| *m = false);
        }
        if !use_sp {
            mask.semantic_mask.iter_mut().for_each(|m| *m = false);
        }
        self.caps.simulate(&self.templates, &self.bank, &mask, patches)
    }

    /// The image-tower input for `image` under `mode`.
    pub fn retrieval_sequence(&self, image: &Matrix, mode: FeatureMode) -> Result<PromptedSequence> {
        let patches = self.backbone.embed_patches(image)?;
        let width = self.backbone.config().embed_dim;
        match mode {
            FeatureMode::Simulated => {
                if !self.csl_done {
                    return Err(ProsError::Precondition(
                        "model has no trained simulator weights (run the second training stage)".into(),
                    ));
                }
                let cadp = self.simulate_full(&patches)?;
                assemble_inference_input(&self.templates.cls, &cadp, &patches)
            }
            FeatureMode::Units => {
                let (use_dp, use_sp) = self.unit_availability();
                let mut rows: Vec<&[f64]> = Vec::new();
                if use_dp {
                    rows.extend((0..self.num_domains()).map(|i| self.bank.domain_units.row(i)));
                }
                if use_sp {
                    rows.extend((0..self.num_classes()).map(|i| self.bank.semantic_units.row(i)));
                }
                Ok(PromptedSequence {
                    cls_token: self.templates.cls.clone(),
                    prompt_tokens: Matrix::from_rows(&rows, width)?,
                    patch_tokens: patches,
                })
            }
            FeatureMode::Frozen => Ok(PromptedSequence {
                cls_token: self.backbone.cls_token().clone(),
                prompt_tokens: Matrix::zeros(0, width),
                patch_tokens: patches,
            }),
        }
    }

    /// Unit-normalized retrieval feature of one raw image grid.
    pub fn image_feature(&self, image: &Matrix, mode: FeatureMode) -> Result<Vec<f64>> {
        let seq = self.retrieval_sequence(image, mode)?;
        let f = self.backbone.forward_image(&seq)?;
        if !f.vector.iter().all(|v| v.is_finite()) {
            return Err(ProsError::NonFinite { component: "image feature", layer: self.backbone.config().num_layers });
        }
        Ok(normalized(&f.vector))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            backbone: self.backbone.config().clone(),
            caps_config: self.caps.config.clone(),
            domain_names: self.domain_names.clone(),
            class_names: self.class_names.clone(),
            bank: self.bank.clone(),
            templates: self.templates.clone(),
            caps: self.caps.clone(),
            temperature: self.temperature,
            ablations: self.ablations,
            prompt_seed: self.prompt_seed,
            pul_done: self.pul_done,
            csl_done: self.csl_done,
            train_configs: self.train_configs.clone(),
            history: self.history.clone(),
        }
    }

    /// Rebuilds a model; `backbone` must match the checkpoint's dimensions.
    pub fn from_checkpoint(ckpt: Checkpoint, backbone: Backbone) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(ProsError::Precondition(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        let cfg = backbone.config();
        let (l, k, c) = (cfg.embed_dim, ckpt.domain_names.len(), ckpt.class_names.len());
        let shape_checks = [
            ("domain units", ckpt.bank.domain_units.shape(), (k, l)),
            ("semantic units", ckpt.bank.semantic_units.shape(), (c, l)),
            ("class token", ckpt.templates.cls.shape(), (1, l)),
            ("domain template", ckpt.templates.domain_template.shape(), (ckpt.caps_config.n_domain, l)),
            ("semantic template", ckpt.templates.semantic_template.shape(), (ckpt.caps_config.n_semantic, l)),
        ];
        for (what, actual, expected) in shape_checks {
            if actual != expected {
                return Err(ProsError::Precondition(format!(
                    "checkpoint {what} has shape {actual:?}, backbone requires {expected:?}"
                )));
            }
        }
        if ckpt.templates.text_prompts.cols() != cfg.text_dim {
            return Err(ProsError::Precondition(format!(
                "checkpoint text prompts have width {}, backbone text width is {}",
                ckpt.templates.text_prompts.cols(),
                cfg.text_dim
            )));
        }
        if ckpt.caps.num_domains != k || ckpt.caps.num_classes != c || ckpt.caps.num_patches != cfg.num_patches {
            return Err(ProsError::Precondition("checkpoint simulator does not match its unit banks".into()));
        }
        let captions = Self::tokenize(&backbone, &ckpt.class_names, ckpt.templates.text_prompts.rows())?;
        Ok(Self {
            backbone,
            domain_names: ckpt.domain_names,
            class_names: ckpt.class_names,
            bank: ckpt.bank,
            templates: ckpt.templates,
            caps: ckpt.caps,
            captions,
            temperature: ckpt.temperature,
            ablations: ckpt.ablations,
            prompt_seed: ckpt.prompt_seed,
            pul_done: ckpt.pul_done,
            csl_done: ckpt.csl_done,
            train_configs: ckpt.train_configs,
            history: ckpt.history,
        })
    }

    /// Text features of every training class, unit-normalized, with the
    /// current `P_t` spliced in.
    pub fn caption_bank(&self) -> Result<crate::training::CaptionBank> {
        crate::training::build_caption_bank(&self.backbone, &self.class_names, &self.templates.text_prompts)
    }

    /// Number of tokens in the image tower input under `mode`.
    pub fn retrieval_sequence_len(&self, mode: FeatureMode) -> usize {
        let n = self.backbone.config().num_patches;
        match mode {
            FeatureMode::Simulated => 1 + self.caps.config.n_domain + self.caps.config.n_semantic + n,
            FeatureMode::Units => {
                let (dp, sp) = self.unit_availability();
                1 + if dp { self.num_domains() } else { 0 } + if sp { self.num_classes() } else { 0 } + n
            }
            FeatureMode::Frozen => 1 + n,
        }
    }
}

/// Non-differentiable caption forward used by tests and the caption bank.
pub(crate) fn encode_caption(backbone: &Backbone, caption: &CaptionTokens, prompts: &Matrix) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let tower = backbone.bind_text(&mut t);
    let p = t.constant(prompts);
    let out = backbone.text_forward(&mut t, &tower, caption, Some(p))?;
    Ok(t.value(out).as_slice().to_vec())
}
