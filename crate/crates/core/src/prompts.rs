//! Learnable prompt parameters and the masking rules that route them.
//!
//! Masks use discard semantics: a unit whose mask entry is 0 is removed from
//! the token sequence, it is not zeroed. Surviving units keep index order.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{PatchEmbeddings, PromptedSequence};
use crate::error::{ProsError, Result};
use crate::tensor::Matrix;

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Keeps only the sample's own domain and class unit.
    Irrelevance,
    /// Hides the sample's own domain and class unit.
    Relevance,
    /// Keeps every unit.
    Full,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Irrelevance => "irrelevance",
            MaskMode::Relevance => "relevance",
            MaskMode::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub domain_mask: Vec<bool>,
    pub semantic_mask: Vec<bool>,
    pub mode: MaskMode,
}

impl MaskSpec {
    pub fn full(num_domains: usize, num_classes: usize) -> Self {
        Self {
            domain_mask: alloc::vec![true; num_domains],
            semantic_mask: alloc::vec![true; num_classes],
            mode: MaskMode::Full,
        }
    }

    pub fn selected_domains(&self) -> Vec<usize> {
        ones(&self.domain_mask)
    }

    pub fn selected_classes(&self) -> Vec<usize> {
        ones(&self.semantic_mask)
    }

    /// Checks the cardinality rule of the mask's mode.
    pub fn validate(&self) -> Result<()> {
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        let (d, s) = (count(&self.domain_mask), count(&self.semantic_mask));
        let (nd, ns) = (self.domain_mask.len(), self.semantic_mask.len());
        let ok = match self.mode {
            MaskMode::Irrelevance => d == 1 && s == 1,
            MaskMode::Relevance => d + 1 == nd && s + 1 == ns,
            MaskMode::Full => d == nd && s == ns,
        };
        if ok {
            Ok(())
        } else {
            Err(ProsError::Precondition(alloc::format!(
                "{} mask keeps {d}/{nd} domain and {s}/{ns} semantic units",
                self.mode.name()
            )))
        }
    }
}

fn ones(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

/// One-hot (irrelevance) or complement (relevance) selection for a sample
/// from `domain_idx` and `class_idx`.
pub fn build_mask(
    domain_idx: usize,
    class_idx: usize,
    num_domains: usize,
    num_classes: usize,
    mode: MaskMode,
) -> Result<MaskSpec> {
    if domain_idx >= num_domains {
        return Err(ProsError::IndexOutOfRange { what: "domain", index: domain_idx, size: num_domains });
    }
    if class_idx >= num_classes {
        return Err(ProsError::IndexOutOfRange { what: "class", index: class_idx, size: num_classes });
    }
    let keep_own = match mode {
        MaskMode::Irrelevance => true,
        MaskMode::Relevance => false,
        MaskMode::Full => return Ok(MaskSpec::full(num_domains, num_classes)),
    };
    let domain_mask = (0..num_domains).map(|i| (i == domain_idx) == keep_own).collect();
    let semantic_mask = (0..num_classes).map(|i| (i == class_idx) == keep_own).collect();
    Ok(MaskSpec { domain_mask, semantic_mask, mode })
}

/// Domain units `DP` (one row per source domain) and semantic units `SP`
/// (one row per training class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptUnitBank {
    pub domain_units: Matrix,
    pub semantic_units: Matrix,
    pub train_domain: bool,
    pub train_semantic: bool,
}

impl PromptUnitBank {
    pub fn init<R: Rng + ?Sized>(num_domains: usize, num_classes: usize, width: usize, rng: &mut R) -> Result<Self> {
        if num_domains < 2 {
            return Err(ProsError::InvalidConfig(alloc::format!(
                "need at least 2 source domains, got {num_domains}"
            )));
        }
        if num_classes < 2 {
            return Err(ProsError::InvalidConfig(alloc::format!(
                "need at least 2 training classes, got {num_classes}"
            )));
        }
        Ok(Self {
            domain_units: Matrix::trunc_randn(num_domains, width, PROMPT_INIT_STD, rng),
            semantic_units: Matrix::trunc_randn(num_classes, width, PROMPT_INIT_STD, rng),
            train_domain: true,
            train_semantic: true,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.domain_units.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.semantic_units.rows()
    }

    pub fn width(&self) -> usize {
        self.domain_units.cols()
    }

    fn check_mask(&self, mask: &MaskSpec) -> Result<()> {
        if mask.domain_mask.len() != self.num_domains() {
            return Err(ProsError::Shape {
                what: "domain mask length",
                expected: self.num_domains(),
                actual: mask.domain_mask.len(),
            });
        }
        if mask.semantic_mask.len() != self.num_classes() {
            return Err(ProsError::Shape {
                what: "semantic mask length",
                expected: self.num_classes(),
                actual: mask.semantic_mask.len(),
            });
        }
        Ok(())
    }
}

/// Keeps the units whose mask entry is set, in index order.
pub fn apply_mask(bank: &PromptUnitBank, mask: &MaskSpec) -> Result<(Matrix, Matrix)> {
    bank.check_mask(mask)?;
    Ok((
        bank.domain_units.select_rows(&mask.selected_domains()),
        bank.semantic_units.select_rows(&mask.selected_classes()),
    ))
}

/// Tape counterpart of [`apply_mask`] for a bound unit matrix: one var per
/// maximal run of kept rows, so gradients reach only the kept rows.
pub fn select_rows_var(t: &mut Tape<'_>, units: Var, keep: &[bool]) -> Vec<Var> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < keep.len() {
        if !keep[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < keep.len() && keep[i] {
            i += 1;
        }
        out.push(t.slice_rows(units, start, i - start));
    }
    out
}

/// Domain/semantic templates for the simulator, the text prompts `P_t`, and
/// the trainable class token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    /// `PT_d`, `n_d × width`
    pub domain_template: Matrix,
    /// `PT_s`, `n_s × width`
    pub semantic_template: Matrix,
    /// `P_t`, `N_t × text_dim`
    pub text_prompts: Matrix,
    /// `1 × width`
    pub cls: Matrix,
}

impl PromptTemplates {
    pub fn init<R: Rng + ?Sized>(
        n_domain: usize,
        n_semantic: usize,
        n_text: usize,
        text_dim: usize,
        pretrained_cls: &Matrix,
        rng: &mut R,
    ) -> Result<Self> {
        if n_text == 0 {
            return Err(ProsError::InvalidConfig("text prompt length must be at least 1".into()));
        }
        if n_domain == 0 || n_semantic == 0 {
            return Err(ProsError::InvalidConfig("dynamic prompt lengths must be at least 1".into()));
        }
        let width = pretrained_cls.cols();
        Ok(Self {
            domain_template: Matrix::trunc_randn(n_domain, width, PROMPT_INIT_STD, rng),
            semantic_template: Matrix::trunc_randn(n_semantic, width, PROMPT_INIT_STD, rng),
            text_prompts: Matrix::trunc_randn(n_text, text_dim, PROMPT_INIT_STD, rng),
            cls: pretrained_cls.clone(),
        })
    }
}

/// Content-aware dynamic prompts `(P_d, P_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaDPPair {
    pub domain: Matrix,
    pub semantic: Matrix,
}

impl CaDPPair {
    pub fn len(&self) -> usize {
        self.domain.rows() + self.semantic.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stack(parts: &[&Matrix], width: usize) -> Matrix {
    let rows: usize = parts.iter().map(|m| m.rows()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for p in parts {
        data.extend_from_slice(p.as_slice());
    }
    Matrix::from_vec(rows, width, data).expect("stacked widths agree")
}

/// `[cls, dp_d, sp_c, patches]` for stage-1 training.
pub fn assemble_pul_input(
    cls: &Matrix,
    bank: &PromptUnitBank,
    mask: &MaskSpec,
    patches: &PatchEmbeddings,
) -> Result<PromptedSequence> {
    if mask.mode != MaskMode::Irrelevance {
        return Err(ProsError::MaskMode { expected: "irrelevance", actual: mask.mode.name() });
    }
    mask.validate()?;
    let width = bank.width();
    if cls.shape() != (1, width) {
        return Err(ProsError::Shape { what: "cls token width", expected: width, actual: cls.cols() });
    }
    if patches.tokens.cols() != width {
        return Err(ProsError::Shape { what: "patch token width", expected: width, actual: patches.tokens.cols() });
    }
    let (dp, sp) = apply_mask(bank, mask)?;
    Ok(PromptedSequence {
        cls_token: cls.clone(),
        prompt_tokens: stack(&[&dp, &sp], width),
        patch_tokens: patches.clone(),
    })
}

pub(crate) fn stack_rows(parts: &[&Matrix], width: usize) -> Matrix {
    stack(parts, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(k: usize, c: usize) -> PromptUnitBank {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        PromptUnitBank::init(k, c, 8, &mut rng).unwrap()
    }

    #[test]
    fn irrelevance_mask_is_one_hot() {
        let m = build_mask(1, 2, 3, 4, MaskMode::Irrelevance).unwrap();
        assert_eq!(m.domain_mask, [false, true, false]);
        assert_eq!(m.semantic_mask, [false, false, true, false]);
    }

    #[test]
    fn relevance_mask_is_complement() {
        let m = build_mask(1, 2, 3, 4, MaskMode::Relevance).unwrap();
        assert_eq!(m.domain_mask, [true, false, true]);
        assert_eq!(m.semantic_mask, [true, true, false, true]);
    }

    #[test]
    fn masks_are_complementary_everywhere() {
        for d in 0..3 {
            for c in 0..4 {
                let a = build_mask(d, c, 3, 4, MaskMode::Irrelevance).unwrap();
                let b = build_mask(d, c, 3, 4, MaskMode::Relevance).unwrap();
                assert!(a.domain_mask.iter().zip(&b.domain_mask).all(|(x, y)| x ^ y));
                assert!(a.semantic_mask.iter().zip(&b.semantic_mask).all(|(x, y)| x ^ y));
                a.validate().unwrap();
                b.validate().unwrap();
            }
        }
    }

    #[test]
    fn out_of_range_indices_are_rejected() {
        assert!(build_mask(3, 0, 3, 4, MaskMode::Irrelevance).is_err());
        assert!(build_mask(0, 4, 3, 4, MaskMode::Relevance).is_err());
    }

    #[test]
    fn apply_mask_cardinalities() {
        let b = bank(3, 5);
        let (dp, sp) = apply_mask(&b, &build_mask(0, 0, 3, 5, MaskMode::Irrelevance).unwrap()).unwrap();
        assert_eq!((dp.rows(), sp.rows()), (1, 1));
        assert_eq!(dp.row(0), b.domain_units.row(0));
        let (dp, sp) = apply_mask(&b, &build_mask(0, 0, 3, 5, MaskMode::Relevance).unwrap()).unwrap();
        assert_eq!((dp.rows(), sp.rows()), (2, 4));
        assert_eq!(dp.row(0), b.domain_units.row(1));
        assert_eq!(sp.row(3), b.semantic_units.row(4));
        let (dp, sp) = apply_mask(&b, &MaskSpec::full(3, 5)).unwrap();
        assert_eq!(dp, b.domain_units);
        assert_eq!(sp, b.semantic_units);
    }

    #[test]
    fn apply_mask_rejects_length_mismatch() {
        let b = bank(3, 5);
        let m = build_mask(0, 0, 4, 5, MaskMode::Irrelevance).unwrap();
        assert!(apply_mask(&b, &m).is_err());
    }

    #[test]
    fn bank_needs_two_domains_and_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PromptUnitBank::init(1, 4, 8, &mut rng).is_err());
        assert!(PromptUnitBank::init(2, 1, 8, &mut rng).is_err());
    }

    #[test]
    fn pul_input_layout() {
        let b = bank(3, 4);
        let cls = Matrix::filled(1, 8, 0.5);
        let patches = PatchEmbeddings { tokens: Matrix::filled(16, 8, 1.0) };
        let m = build_mask(2, 1, 3, 4, MaskMode::Irrelevance).unwrap();
        let seq = assemble_pul_input(&cls, &b, &m, &patches).unwrap();
        assert_eq!(seq.len(), 19);
        let x = seq.to_matrix();
        assert_eq!(x.row(0), cls.row(0));
        assert_eq!(x.row(1), b.domain_units.row(2));
        assert_eq!(x.row(2), b.semantic_units.row(1));
        assert_eq!(x.row(3), patches.tokens.row(0));
        // Same (d, c) shares the exact prompt tokens.
        let again = assemble_pul_input(&cls, &b, &m, &patches).unwrap();
        assert_eq!(seq.prompt_tokens, again.prompt_tokens);

        let wrong = build_mask(2, 1, 3, 4, MaskMode::Relevance).unwrap();
        assert!(matches!(assemble_pul_input(&cls, &b, &wrong, &patches), Err(ProsError::MaskMode { .. })));
    }

    #[test]
    fn row_selection_on_tape_splits_runs() {
        let m = Matrix::filled(5, 2, 1.0);
        let mut t = Tape::new();
        let v = t.param(&m);
        let parts = select_rows_var(&mut t, v, &[true, true, false, true, false]);
        assert_eq!(parts.len(), 2);
        assert_eq!(t.value(parts[0]).rows(), 2);
        assert_eq!(t.value(parts[1]).rows(), 1);
    }
}
