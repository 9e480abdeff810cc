//! Content-aware prompt simulator: a small randomly initialized transformer
//! over `[PT_d, PT_s, DP…, SP…, E_0]` whose outputs at the template positions
//! become the dynamic prompts `(P_d, P_s)`.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{PatchEmbeddings, PromptedSequence};
use crate::error::{ProsError, Result};
use crate::nn::{Block, BoundBlock, BoundLayerNorm, BoundLinear, LayerNorm, Linear, Parameters};
use crate::prompts::{apply_mask, select_rows_var, stack_rows, CaDPPair, MaskSpec, PromptTemplates, PromptUnitBank};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Token width; must equal the backbone's image token width.
    pub width: usize,
    pub mlp_ratio: usize,
    /// Length of `P_d`.
    pub n_domain: usize,
    /// Length of `P_s`.
    pub n_semantic: usize,
    pub seed: u64,
}

impl Default for CapsConfig {
    fn default() -> Self {
        Self { num_layers: 2, num_heads: 8, width: 64, mlp_ratio: 4, n_domain: 1, n_semantic: 1, seed: 0 }
    }
}

impl CapsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(ProsError::InvalidConfig("caps.num_layers must be at least 1".into()));
        }
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return Err(ProsError::InvalidConfig(format!(
                "caps.num_heads ({}) must divide caps.width ({})",
                self.num_heads, self.width
            )));
        }
        if self.n_domain == 0 || self.n_semantic == 0 || self.mlp_ratio == 0 {
            return Err(ProsError::InvalidConfig("caps prompt lengths and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Simulator weights.
///
/// Positional vectors are indexed by token identity: templates first, then
/// one slot per domain unit, per semantic unit and per patch. A masked unit
/// leaves its slot unused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caps {
    pub config: CapsConfig,
    pub num_domains: usize,
    pub num_classes: usize,
    pub num_patches: usize,
    /// Maps patch tokens into the simulator width when the backbone differs.
    pub input_proj: Option<Linear>,
    pub positional: Matrix,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

impl Parameters for Caps {
    fn parameters(&self) -> Vec<&Matrix> {
        let mut v = Vec::new();
        if let Some(p) = &self.input_proj {
            v.extend(p.parameters());
        }
        v.push(&self.positional);
        for b in &self.blocks {
            v.extend(b.parameters());
        }
        v.extend(self.ln_final.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = Vec::new();
        if let Some(p) = &mut self.input_proj {
            v.extend(p.parameters_mut());
        }
        v.push(&mut self.positional);
        for b in &mut self.blocks {
            v.extend(b.parameters_mut());
        }
        v.extend(self.ln_final.parameters_mut());
        v
    }
}

pub struct BoundCaps {
    input_proj: Option<BoundLinear>,
    positional: Var,
    blocks: Vec<BoundBlock>,
    ln_final: BoundLayerNorm,
}

impl Caps {
    /// Random initialization from `config.seed`.
    pub fn init(
        config: CapsConfig,
        num_domains: usize,
        num_classes: usize,
        num_patches: usize,
        patch_width: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let input_proj = (patch_width != w).then(|| Linear::init(patch_width, w, &mut rng));
        let len = config.n_domain + config.n_semantic + num_domains + num_classes + num_patches;
        let positional = Matrix::trunc_randn(len, w, 0.02, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| Block::init(w, config.num_heads, config.mlp_ratio, false, &mut rng))
            .collect();
        Ok(Self {
            config,
            num_domains,
            num_classes,
            num_patches,
            input_proj,
            positional,
            blocks,
            ln_final: LayerNorm::new(w),
        })
    }

    pub fn max_sequence_len(&self) -> usize {
        self.positional.rows()
    }

    pub fn bind<'a>(&'a self, t: &mut Tape<'a>, trainable: bool, collect: &mut Vec<Var>) -> BoundCaps {
        let input_proj = self.input_proj.as_ref().map(|p| p.bind(t, trainable, collect));
        let positional = t.leaf(&self.positional, trainable);
        if trainable {
            collect.push(positional);
        }
        BoundCaps {
            input_proj,
            positional,
            blocks: self.blocks.iter().map(|b| b.bind(t, trainable, collect)).collect(),
            ln_final: self.ln_final.bind(t, trainable, collect),
        }
    }

    /// Differentiable simulator forward. `domain_units`/`semantic_units` are
    /// the full banks; `keep_*` select the surviving rows. Returns `(P_d, P_s)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        t: &mut Tape<'_>,
        bound: &BoundCaps,
        domain_template: Var,
        semantic_template: Var,
        domain_units: Var,
        semantic_units: Var,
        keep_domains: &[bool],
        keep_classes: &[bool],
        patches: Var,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        if keep_domains.len() != self.num_domains || keep_classes.len() != self.num_classes {
            return Err(ProsError::Shape {
                what: "simulator unit mask",
                expected: self.num_domains + self.num_classes,
                actual: keep_domains.len() + keep_classes.len(),
            });
        }
        for (what, v, rows) in [
            ("domain template", domain_template, cfg.n_domain),
            ("semantic template", semantic_template, cfg.n_semantic),
        ] {
            let m = t.value(v);
            if m.shape() != (rows, cfg.width) {
                return Err(ProsError::Shape { what, expected: cfg.width, actual: m.cols() });
            }
        }
        for (what, v) in [("domain units", domain_units), ("semantic units", semantic_units)] {
            if t.value(v).cols() != cfg.width {
                return Err(ProsError::Shape { what, expected: cfg.width, actual: t.value(v).cols() });
            }
        }
        let n_patch_rows = t.value(patches).rows();
        if n_patch_rows != self.num_patches {
            return Err(ProsError::Shape { what: "simulator patch count", expected: self.num_patches, actual: n_patch_rows });
        }
        let patches = match &bound.input_proj {
            Some(p) => p.forward(t, patches),
            None => {
                let w = t.value(patches).cols();
                if w != cfg.width {
                    return Err(ProsError::Shape { what: "simulator patch width", expected: cfg.width, actual: w });
                }
                patches
            }
        };

        let mut parts = alloc::vec![domain_template, semantic_template];
        parts.extend(select_rows_var(t, domain_units, keep_domains));
        parts.extend(select_rows_var(t, semantic_units, keep_classes));
        parts.push(patches);
        let x = t.concat_rows(&parts);

        let n_templates = cfg.n_domain + cfg.n_semantic;
        let mut keep_pos = alloc::vec![true; n_templates];
        keep_pos.extend_from_slice(keep_domains);
        keep_pos.extend_from_slice(keep_classes);
        keep_pos.extend(core::iter::repeat(true).take(self.num_patches));
        let pos_parts = select_rows_var(t, bound.positional, &keep_pos);
        let pos = t.concat_rows(&pos_parts);
        let mut x = t.add(x, pos);

        for (layer, block) in bound.blocks.iter().enumerate() {
            x = block.forward(t, x);
            if !t.value(x).is_finite() {
                return Err(ProsError::NonFinite { component: "simulator", layer: layer + 1 });
            }
        }
        let heads = t.slice_rows(x, 0, n_templates);
        let heads = bound.ln_final.forward(t, heads);
        let p_d = t.slice_rows(heads, 0, cfg.n_domain);
        let p_s = t.slice_rows(heads, cfg.n_domain, cfg.n_semantic);
        Ok((p_d, p_s))
    }

    /// Produces the dynamic prompts for one image, with the bank filtered by
    /// `mask` (use [`MaskSpec::full`] at retrieval time).
    pub fn simulate(
        &self,
        templates: &PromptTemplates,
        bank: &PromptUnitBank,
        mask: &MaskSpec,
        patches: &PatchEmbeddings,
    ) -> Result<CaDPPair> {
        // Surfaces mask/bank length errors before touching the tape.
        apply_mask(bank, mask)?;
        let mut t = Tape::new();
        let mut none = Vec::new();
        let bound = self.bind(&mut t, false, &mut none);
        let pt_d = t.constant(&templates.domain_template);
        let pt_s = t.constant(&templates.semantic_template);
        let dp = t.constant(&bank.domain_units);
        let sp = t.constant(&bank.semantic_units);
        let e0 = t.constant(&patches.tokens);
        let (p_d, p_s) = self.forward(
            &mut t,
            &bound,
            pt_d,
            pt_s,
            dp,
            sp,
            &mask.domain_mask,
            &mask.semantic_mask,
            e0,
        )?;
        Ok(CaDPPair { domain: t.value(p_d).clone(), semantic: t.value(p_s).clone() })
    }
}

/// `[cls, P_d, P_s, patches]` for the image tower.
pub fn assemble_inference_input(
    cls: &Matrix,
    cadp: &CaDPPair,
    patches: &PatchEmbeddings,
) -> Result<PromptedSequence> {
    let width = cls.cols();
    for (what, m) in [("domain prompt width", &cadp.domain), ("semantic prompt width", &cadp.semantic)] {
        if m.cols() != width {
            return Err(ProsError::Shape { what, expected: width, actual: m.cols() });
        }
    }
    if patches.tokens.cols() != width {
        return Err(ProsError::Shape { what: "patch token width", expected: width, actual: patches.tokens.cols() });
    }
    Ok(PromptedSequence {
        cls_token: cls.clone(),
        prompt_tokens: stack_rows(&[&cadp.domain, &cadp.semantic], width),
        patch_tokens: patches.clone(),
    })
}

/// Length of the simulator input for the given mask.
pub fn simulator_input_len(config: &CapsConfig, mask: &MaskSpec, num_patches: usize) -> usize {
    config.n_domain
        + config.n_semantic
        + mask.selected_domains().len()
        + mask.selected_classes().len()
        + num_patches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{build_mask, MaskMode};
    use rand::SeedableRng;

    struct Fixture {
        caps: Caps,
        templates: PromptTemplates,
        bank: PromptUnitBank,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let caps = Caps::init(CapsConfig::default(), 3, 5, 16, 64).unwrap();
        let cls = Matrix::randn(1, 64, 0.1, &mut rng);
        let templates = PromptTemplates::init(1, 1, 16, 32, &cls, &mut rng).unwrap();
        let bank = PromptUnitBank::init(3, 5, 64, &mut rng).unwrap();
        Fixture { caps, templates, bank }
    }

    fn patches(seed: u64) -> PatchEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchEmbeddings { tokens: Matrix::randn(16, 64, 1.0, &mut rng) }
    }

    #[test]
    fn one_one_cadp_shape() {
        let f = fixture();
        let cadp = f.caps.simulate(&f.templates, &f.bank, &MaskSpec::full(3, 5), &patches(1)).unwrap();
        assert_eq!(cadp.domain.shape(), (1, 64));
        assert_eq!(cadp.semantic.shape(), (1, 64));
    }

    #[test]
    fn cadp_depends_on_content_and_is_deterministic() {
        let f = fixture();
        let mask = build_mask(0, 1, 3, 5, MaskMode::Relevance).unwrap();
        let a = f.caps.simulate(&f.templates, &f.bank, &mask, &patches(1)).unwrap();
        let b = f.caps.simulate(&f.templates, &f.bank, &mask, &patches(2)).unwrap();
        assert!(a.domain.max_abs_diff(&b.domain) > 0.0);
        assert!(a.semantic.max_abs_diff(&b.semantic) > 0.0);
        let again = f.caps.simulate(&f.templates, &f.bank, &mask, &patches(1)).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn inference_layouts() {
        let f = fixture();
        let p = patches(3);
        let cadp = f.caps.simulate(&f.templates, &f.bank, &MaskSpec::full(3, 5), &p).unwrap();
        let seq = assemble_inference_input(&f.templates.cls, &cadp, &p).unwrap();
        assert_eq!(seq.len(), 19);
        let x = seq.to_matrix();
        assert_eq!(x.row(1), cadp.domain.row(0));
        assert_eq!(x.row(2), cadp.semantic.row(0));
        assert_eq!(simulator_input_len(&f.caps.config, &MaskSpec::full(3, 5), 16), 2 + 3 + 5 + 16);
        let relevance = build_mask(1, 1, 3, 5, MaskMode::Relevance).unwrap();
        assert_eq!(simulator_input_len(&f.caps.config, &relevance, 16), 2 + 2 + 4 + 16);
    }

    #[test]
    fn stage_one_tokens_fit_the_same_layout() {
        let f = fixture();
        let p = patches(3);
        let m = build_mask(1, 2, 3, 5, MaskMode::Irrelevance).unwrap();
        let (dp, sp) = apply_mask(&f.bank, &m).unwrap();
        let as_cadp = CaDPPair { domain: dp, semantic: sp };
        let seq = assemble_inference_input(&f.templates.cls, &as_cadp, &p).unwrap();
        let stage1 = crate::prompts::assemble_pul_input(&f.templates.cls, &f.bank, &m, &p).unwrap();
        assert_eq!(seq, stage1);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let f = fixture();
        let narrow = PatchEmbeddings { tokens: Matrix::zeros(16, 32) };
        assert!(f.caps.simulate(&f.templates, &f.bank, &MaskSpec::full(3, 5), &narrow).is_err());
        let cadp = CaDPPair { domain: Matrix::zeros(1, 32), semantic: Matrix::zeros(1, 64) };
        assert!(assemble_inference_input(&f.templates.cls, &cadp, &patches(1)).is_err());
    }

    #[test]
    fn narrower_backbone_gets_an_input_projection() {
        let caps = Caps::init(CapsConfig::default(), 3, 5, 16, 48).unwrap();
        assert!(caps.input_proj.is_some());
        let mut t = Tape::new();
        let mut vars = Vec::new();
        caps.bind(&mut t, true, &mut vars);
        assert_eq!(vars.len(), caps.parameters().len());
    }
}
