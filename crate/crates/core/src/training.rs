//! Two-stage optimization with the shared mask-and-align objective.
//!
//! Stage one (prompt-unit learning) trains `{DP, SP, P_t, cls}` with each
//! image seeing only its own domain and class unit. Stage two (simulator
//! learning) trains `{PT_d, PT_s, simulator}` with the sample's own units
//! hidden. Everything else stays frozen in both stages.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::backbone::{Backbone, PatchEmbeddings};
use crate::error::{ProsError, Result};
use crate::model::{encode_caption, FeatureMode, ProsModel, StageRecord};
use crate::nn::Parameters;
use crate::prompts::{build_mask, MaskMode};
use crate::retrieval::{extract_features, map_at_k, rank_all, EvalImage};
use crate::tensor::{dot, normalized, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pul,
    Csl,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pul => "pul",
            Stage::Csl => "csl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub temperature: f64,
    pub seed: u64,
    /// Cut-off of the validation mAP used for early stopping.
    pub val_k: usize,
    /// Samples drawn per epoch; `None` means one pass worth of the training set.
    pub samples_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pul,
            epochs: 10,
            early_stop_patience: 2,
            batch_size: 50,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            temperature: 0.01,
            seed: 0,
            val_k: 200,
            samples_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(ProsError::InvalidConfig("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ProsError::InvalidConfig("train.batch_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(ProsError::InvalidConfig(format!("train.temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(ProsError::InvalidConfig(format!("train.lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.val_k == 0 {
            return Err(ProsError::InvalidConfig("train.val_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` of `total` (cosine decay to 0).
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Cosine => {
                let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
                self.lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
            }
        }
    }
}

/// Unit-normalized text features of every training class.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBank {
    pub features: Matrix,
}

impl CaptionBank {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Encodes `"a photo of {class} from <P_t> domain ."` for every class.
pub fn build_caption_bank(backbone: &Backbone, class_names: &[String], text_prompts: &Matrix) -> Result<CaptionBank> {
    if class_names.is_empty() {
        return Err(ProsError::Empty("class names"));
    }
    let mut seen = alloc::collections::BTreeSet::new();
    for c in class_names {
        if !seen.insert(c.as_str()) {
            return Err(ProsError::Duplicate { what: "class", name: c.clone() });
        }
    }
    let tok = backbone.tokenizer();
    let mut rows = Vec::with_capacity(class_names.len());
    for c in class_names {
        let f = encode_caption(backbone, &tok.class_caption(c), text_prompts)?;
        rows.push(normalized(&f));
    }
    Ok(CaptionBank { features: Matrix::from_rows(&rows, backbone.config().proj_dim)? })
}

/// Softmax cross-entropy over `cos(f, g_i) / τ` against `label`.
pub fn align_loss(image_feature: &[f64], bank: &CaptionBank, label: usize, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(ProsError::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    if label >= bank.len() {
        return Err(ProsError::IndexOutOfRange { what: "class label", index: label, size: bank.len() });
    }
    if image_feature.len() != bank.features.cols() {
        return Err(ProsError::Shape { what: "image feature width", expected: bank.features.cols(), actual: image_feature.len() });
    }
    if !image_feature.iter().all(|v| v.is_finite()) {
        return Err(ProsError::NonFinite { component: "image feature", layer: 0 });
    }
    let f = normalized(image_feature);
    let logits: Vec<f64> = (0..bank.len()).map(|i| dot(&f, bank.features.row(i)) / temperature).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = libm::log(logits.iter().map(|l| libm::exp(l - max)).sum::<f64>()) + max;
    Ok(lse - logits[label])
}

/// Tape form of [`align_loss`]; `bank` rows must already be unit-norm.
pub fn align_loss_var(t: &mut Tape<'_>, feature: Var, bank: Var, label: usize, temperature: f64) -> Var {
    let f = t.normalize_rows(feature);
    let logits = t.matmul_bt(f, bank);
    let logits = t.scale(logits, 1.0 / temperature);
    t.cross_entropy(logits, label)
}

/// Adam with bias correction; parameters are addressed by slot index.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<Option<(Matrix, Matrix)>>,
}

impl Adam {
    pub fn new(slots: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: (0..slots).map(|_| None).collect() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Updates every parameter that received a gradient. Slots without one
    /// are left untouched, moments included.
    pub fn update(&mut self, params: Vec<&mut Matrix>, grads: &[Option<Matrix>], lr: f64) {
        assert_eq!(params.len(), self.moments.len(), "optimizer slot count");
        assert_eq!(grads.len(), self.moments.len(), "gradient slot count");
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for ((p, g), state) in params.into_iter().zip(grads).zip(&mut self.moments) {
            let Some(g) = g else { continue };
            let (m, v) = state.get_or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let it = p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// One labelled training image, indices into the model's source domains and
/// training classes.
#[derive(Clone, Copy, Debug)]
pub struct TrainSample<'a> {
    pub image: &'a Matrix,
    pub domain: usize,
    pub class: usize,
}

#[derive(Clone, Copy, Debug)]
struct Embedded<'a> {
    patches: &'a Matrix,
    domain: usize,
    class: usize,
}

fn check_labels(model: &ProsModel, domain: usize, class: usize) -> Result<()> {
    if domain >= model.num_domains() {
        return Err(ProsError::IndexOutOfRange { what: "training domain", index: domain, size: model.num_domains() });
    }
    if class >= model.num_classes() {
        return Err(ProsError::IndexOutOfRange { what: "training class", index: class, size: model.num_classes() });
    }
    Ok(())
}

fn embed_batch(model: &ProsModel, batch: &[TrainSample<'_>]) -> Result<Vec<PatchEmbeddings>> {
    batch
        .iter()
        .map(|s| {
            check_labels(model, s.domain, s.class)?;
            model.backbone.embed_patches(s.image)
        })
        .collect()
}

/// Loss plus one gradient slot per trainable tensor of the stage.
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Option<Matrix>>,
}

fn collect(grads: &mut Gradients, vars: &[Option<Var>]) -> Vec<Option<Matrix>> {
    vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
}

/// Number of optimizer slots in stage one: DP, SP, P_t, cls.
pub const PUL_SLOTS: usize = 4;

fn pul_forward(model: &ProsModel, batch: &[Embedded<'_>], backward: bool) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(ProsError::Empty("training batch"));
    }
    let bb = &model.backbone;
    let (use_dp, use_sp) = model.unit_availability();
    let mut t = Tape::new();
    let dp = t.leaf(&model.bank.domain_units, backward && use_dp && model.bank.train_domain);
    let sp = t.leaf(&model.bank.semantic_units, backward && use_sp && model.bank.train_semantic);
    let pt = t.leaf(&model.templates.text_prompts, backward);
    let cls = t.leaf(&model.templates.cls, backward && !model.ablations.no_cls_train);

    let text = bb.bind_text(&mut t);
    let mut class_feats = Vec::with_capacity(model.num_classes());
    for cap in &model.captions {
        class_feats.push(bb.text_forward(&mut t, &text, cap, Some(pt))?);
    }
    let bank = t.concat_rows(&class_feats);
    let bank = t.normalize_rows(bank);

    let image = bb.bind_image(&mut t);
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let mask = build_mask(s.domain, s.class, model.num_domains(), model.num_classes(), MaskMode::Irrelevance)?;
        let mut prompts = Vec::with_capacity(2);
        if use_dp {
            prompts.extend(crate::prompts::select_rows_var(&mut t, dp, &mask.domain_mask));
        }
        if use_sp {
            prompts.extend(crate::prompts::select_rows_var(&mut t, sp, &mask.semantic_mask));
        }
        let patches = t.constant(s.patches);
        let feat = bb.image_forward(&mut t, &image, cls, &prompts, patches)?;
        losses.push(align_loss_var(&mut t, feat, bank, s.class, model.temperature));
    }
    let total = t.sum(&losses);
    let mean = t.scale(total, 1.0 / batch.len() as f64);
    let loss = t.value(mean).get(0, 0);
    let grads = if backward {
        let mut g = t.backward(mean);
        let vars = [dp, sp, pt, cls].map(|v| t.requires_grad(v).then_some(v));
        collect(&mut g, &vars)
    } else {
        alloc::vec![None; PUL_SLOTS]
    };
    Ok(StepOutput { loss, grads })
}

fn csl_forward(model: &ProsModel, captions: &CaptionBank, batch: &[Embedded<'_>], backward: bool) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(ProsError::Empty("training batch"));
    }
    if !model.pul_done {
        return Err(ProsError::Precondition("simulator learning needs a completed stage-one checkpoint".into()));
    }
    let bb = &model.backbone;
    let (use_dp, use_sp) = model.unit_availability();
    let mut t = Tape::new();
    let pt_d = t.leaf(&model.templates.domain_template, backward);
    let pt_s = t.leaf(&model.templates.semantic_template, backward);
    let mut caps_vars = Vec::new();
    let caps = model.caps.bind(&mut t, backward, &mut caps_vars);
    let dp = t.constant(&model.bank.domain_units);
    let sp = t.constant(&model.bank.semantic_units);
    let cls = t.constant(&model.templates.cls);
    let bank = t.constant(&captions.features);
    let image = bb.bind_image(&mut t);

    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let mode = if model.ablations.no_mask { MaskMode::Full } else { MaskMode::Relevance };
        let mut mask = build_mask(s.domain, s.class, model.num_domains(), model.num_classes(), mode)?;
        if !use_dp {
            mask.domain_mask.iter_mut().for_each(|m| *m = false);
        }
        if !use_sp {
            mask.semantic_mask.iter_mut().for_each(|m| *m = false);
        }
        let patches = t.constant(s.patches);
        let (p_d, p_s) = model.caps.forward(
            &mut t,
            &caps,
            pt_d,
            pt_s,
            dp,
            sp,
            &mask.domain_mask,
            &mask.semantic_mask,
            patches,
        )?;
        let feat = bb.image_forward(&mut t, &image, cls, &[p_d, p_s], patches)?;
        losses.push(align_loss_var(&mut t, feat, bank, s.class, model.temperature));
    }
    let total = t.sum(&losses);
    let mean = t.scale(total, 1.0 / batch.len() as f64);
    let loss = t.value(mean).get(0, 0);
    let grads = if backward {
        let mut g = t.backward(mean);
        let mut vars = alloc::vec![Some(pt_d), Some(pt_s)];
        vars.extend(caps_vars.into_iter().map(Some));
        collect(&mut g, &vars)
    } else {
        alloc::vec![None; 2 + model.caps.parameters().len()]
    };
    Ok(StepOutput { loss, grads })
}

fn pul_params(model: &mut ProsModel) -> Vec<&mut Matrix> {
    alloc::vec![
        &mut model.bank.domain_units,
        &mut model.bank.semantic_units,
        &mut model.templates.text_prompts,
        &mut model.templates.cls,
    ]
}

fn csl_params(model: &mut ProsModel) -> Vec<&mut Matrix> {
    let mut v = alloc::vec![&mut model.templates.domain_template, &mut model.templates.semantic_template];
    v.extend(model.caps.parameters_mut());
    v
}

pub fn new_optimizer(model: &ProsModel, stage: Stage) -> Adam {
    match stage {
        Stage::Pul => Adam::new(PUL_SLOTS),
        Stage::Csl => Adam::new(2 + model.caps.parameters().len()),
    }
}

fn borrow_embedded<'a>(batch: &'a [TrainSample<'_>], patches: &'a [PatchEmbeddings]) -> Vec<Embedded<'a>> {
    batch
        .iter()
        .zip(patches)
        .map(|(s, p)| Embedded { patches: &p.tokens, domain: s.domain, class: s.class })
        .collect()
}

/// Stage-one loss (mean over the batch) and gradients, without updating.
pub fn pul_loss_and_grads(model: &ProsModel, batch: &[TrainSample<'_>]) -> Result<StepOutput> {
    let patches = embed_batch(model, batch)?;
    pul_forward(model, &borrow_embedded(batch, &patches), true)
}

/// Stage-one loss without gradients.
pub fn pul_loss(model: &ProsModel, batch: &[TrainSample<'_>]) -> Result<f64> {
    let patches = embed_batch(model, batch)?;
    Ok(pul_forward(model, &borrow_embedded(batch, &patches), false)?.loss)
}

/// Stage-two loss without gradients.
pub fn csl_loss(model: &ProsModel, captions: &CaptionBank, batch: &[TrainSample<'_>]) -> Result<f64> {
    let patches = embed_batch(model, batch)?;
    Ok(csl_forward(model, captions, &borrow_embedded(batch, &patches), false)?.loss)
}

/// One stage-one optimizer step. Returns the pre-update batch loss.
pub fn pul_step(model: &mut ProsModel, batch: &[TrainSample<'_>], opt: &mut Adam, lr: f64) -> Result<f64> {
    let patches = embed_batch(model, batch)?;
    let out = pul_forward(model, &borrow_embedded(batch, &patches), true)?;
    if !out.loss.is_finite() {
        return Err(ProsError::NonFiniteLoss { step: opt.steps() as usize });
    }
    opt.update(pul_params(model), &out.grads, lr);
    Ok(out.loss)
}

/// One stage-two optimizer step against the frozen caption bank.
pub fn csl_step(
    model: &mut ProsModel,
    captions: &CaptionBank,
    batch: &[TrainSample<'_>],
    opt: &mut Adam,
    lr: f64,
) -> Result<f64> {
    let patches = embed_batch(model, batch)?;
    let out = csl_forward(model, captions, &borrow_embedded(batch, &patches), true)?;
    if !out.loss.is_finite() {
        return Err(ProsError::NonFiniteLoss { step: opt.steps() as usize });
    }
    opt.update(csl_params(model), &out.grads, lr);
    Ok(out.loss)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
}

/// Held-out queries and gallery for early stopping.
#[derive(Clone, Debug)]
pub struct Validation<'a> {
    pub queries: Vec<EvalImage<'a>>,
    pub gallery: Vec<EvalImage<'a>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    /// Validation mAP per epoch, or the negated mean loss when no
    /// validation set was given.
    pub epoch_scores: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Draws `count` samples: a (domain, class) pair uniformly, then an item of
/// that pair uniformly.
fn draw_order(samples: &[TrainSample<'_>], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry((s.domain, s.class)).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    (0..count)
        .map(|_| {
            let g = &groups[rng.random_range(0..groups.len())];
            g[rng.random_range(0..g.len())]
        })
        .collect()
}

#[derive(Clone)]
enum Snapshot {
    Pul(crate::prompts::PromptUnitBank, Matrix, Matrix),
    Csl(Matrix, Matrix, crate::caps::Caps),
}

fn snapshot(model: &ProsModel, stage: Stage) -> Snapshot {
    match stage {
        Stage::Pul => Snapshot::Pul(model.bank.clone(), model.templates.text_prompts.clone(), model.templates.cls.clone()),
        Stage::Csl => Snapshot::Csl(
            model.templates.domain_template.clone(),
            model.templates.semantic_template.clone(),
            model.caps.clone(),
        ),
    }
}

fn restore(model: &mut ProsModel, snap: Snapshot) {
    match snap {
        Snapshot::Pul(bank, pt, cls) => {
            model.bank = bank;
            model.templates.text_prompts = pt;
            model.templates.cls = cls;
        }
        Snapshot::Csl(d, s, caps) => {
            model.templates.domain_template = d;
            model.templates.semantic_template = s;
            model.caps = caps;
        }
    }
}

/// Validation mAP@k of the model's current features.
pub fn validation_map(model: &ProsModel, val: &Validation<'_>, mode: FeatureMode, k: usize) -> Result<f64> {
    let gallery = extract_features(model, &val.gallery, mode)?;
    let queries = extract_features(model, &val.queries, mode)?;
    let results = rank_all(&queries, &gallery)?;
    Ok(map_at_k(&results, k)?.value)
}

/// Runs one stage: uniform (domain, class) batches, cosine learning-rate
/// decay, validation after every epoch and early stopping on its mAP. The
/// model ends with the best epoch's parameters.
pub fn train_stage(
    model: &mut ProsModel,
    config: &TrainConfig,
    samples: &[TrainSample<'_>],
    validation: Option<&Validation<'_>>,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ProsError::Empty("training split"));
    }
    if config.stage == Stage::Csl && !model.pul_done {
        return Err(ProsError::Precondition("simulator learning needs a completed stage-one checkpoint".into()));
    }
    model.temperature = config.temperature;
    let patches = embed_batch(model, samples)?;
    let embedded = borrow_embedded(samples, &patches);
    let captions = match config.stage {
        Stage::Csl => Some(model.caption_bank()?),
        Stage::Pul => None,
    };
    let eval_mode = match config.stage {
        Stage::Pul => FeatureMode::Units,
        Stage::Csl => FeatureMode::Simulated,
    };

    let per_epoch = config.samples_per_epoch.unwrap_or(samples.len()).max(1);
    let steps_per_epoch = per_epoch.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = new_optimizer(model, config.stage);

    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut since_best = 0;
    let mut epoch_scores = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let order = draw_order(samples, per_epoch, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Embedded<'_>> = chunk.iter().map(|&i| embedded[i]).collect();
            let lr = config.lr_at(step, total_steps);
            let out = match (&captions, config.stage) {
                (Some(c), Stage::Csl) => csl_forward(model, c, &batch, true)?,
                _ => pul_forward(model, &batch, true)?,
            };
            if !out.loss.is_finite() || out.loss < 0.0 {
                return Err(ProsError::NonFiniteLoss { step });
            }
            match config.stage {
                Stage::Pul => opt.update(pul_params(model), &out.grads, lr),
                Stage::Csl => opt.update(csl_params(model), &out.grads, lr),
            }
            log(&LogRecord { epoch, step, stage: config.stage, loss: out.loss, lr });
            loss_sum += out.loss;
            step += 1;
        }
        let mean_loss = loss_sum / steps_per_epoch as f64;
        epoch_losses.push(mean_loss);

        // The simulated path needs the stage flag while validating.
        if config.stage == Stage::Csl {
            model.csl_done = true;
        }
        let score = match validation {
            Some(v) => validation_map(model, v, eval_mode, config.val_k)?,
            None => -mean_loss,
        };
        epoch_scores.push(score);
        let improved = best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved {
            best = Some((score, epoch, snapshot(model, config.stage)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }

    let (best_score, best_epoch, snap) = best.expect("at least one epoch ran");
    restore(model, snap);
    match config.stage {
        Stage::Pul => model.pul_done = true,
        Stage::Csl => model.csl_done = true,
    }
    model.train_configs.push(config.clone());
    model.history.push(StageRecord {
        stage: String::from(config.stage.name()),
        epochs_run: epoch_scores.len(),
        best_epoch,
        best_score,
        seed: config.seed,
    });
    Ok(TrainReport {
        stage: config.stage,
        epochs_run: epoch_scores.len(),
        best_epoch,
        best_score,
        epoch_scores,
        epoch_losses,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank3() -> CaptionBank {
        let mut m = Matrix::zeros(3, 4);
        m.set(0, 0, 1.0);
        m.set(1, 1, 1.0);
        m.set(2, 2, 1.0);
        CaptionBank { features: m }
    }

    #[test]
    fn align_loss_closed_form() {
        // Matching class cosine 1, others 0, τ = 1: −log(e / (e + 2)).
        let l = align_loss(&[1.0, 0.0, 0.0, 0.0], &bank3(), 0, 1.0).unwrap();
        let e = core::f64::consts::E;
        assert!((l - -libm::log(e / (e + 2.0))).abs() < 1e-12);
        assert!((l - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn uniform_cosines_give_log_c() {
        let l = align_loss(&[0.0, 0.0, 0.0, 1.0], &bank3(), 1, 0.01).unwrap();
        assert!((l - libm::log(3.0)).abs() < 1e-12);
    }

    #[test]
    fn align_loss_is_scale_invariant() {
        let f = [0.3, -0.2, 0.9, 0.1];
        let scaled: Vec<f64> = f.iter().map(|v| v * 7.5).collect();
        let a = align_loss(&f, &bank3(), 2, 0.1).unwrap();
        let b = align_loss(&scaled, &bank3(), 2, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn align_loss_rejects_bad_temperature_and_label() {
        assert!(align_loss(&[1.0, 0.0, 0.0, 0.0], &bank3(), 0, 0.0).is_err());
        assert!(align_loss(&[1.0, 0.0, 0.0, 0.0], &bank3(), 0, -1.0).is_err());
        assert!(align_loss(&[1.0, 0.0, 0.0, 0.0], &bank3(), 3, 1.0).is_err());
    }

    #[test]
    fn cosine_schedule_decays() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 100), 1e-3);
        assert!(cfg.lr_at(99, 100) < cfg.lr_at(0, 100));
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = cfg.lr_at(s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_leaves_gradient_free_rows_bit_identical() {
        let mut p = Matrix::filled(2, 2, 0.5);
        let mut g = Matrix::zeros(2, 2);
        g.set(0, 0, 1.0);
        let mut opt = Adam::new(1);
        opt.update(alloc::vec![&mut p], &[Some(g)], 0.1);
        assert!(p.get(0, 0) < 0.5);
        assert_eq!(p.row(1), &[0.5, 0.5]);
        assert_eq!(p.get(0, 1), 0.5);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Matrix::filled(2, 2, 0.5);
        let before = p.clone();
        let mut opt = Adam::new(1);
        opt.update(alloc::vec![&mut p], &[Some(Matrix::filled(2, 2, 3.0))], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
