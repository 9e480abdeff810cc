//! The end-to-end pipeline shared by the command line and the tests:
//! data on disk, model construction, training, indexing and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use pros_core::backbone::BackboneWeights;
use pros_core::retrieval::{extract_features, rank_all, SigmaReport};
use pros_core::synth::generate_synthetic_dataset;
use pros_core::training::{train_stage, LogRecord, TrainReport, TrainSample, Validation};
use pros_core::{
    build_split, map_all, map_at_k, prec_at_k, sigma_diagnostic, Backbone, Checkpoint, DatasetManifest, EmbeddingGallery,
    EvalImage, FeatureMode, GalleryMode, Matrix, ProsModel, ProtocolSplit, RankedResult, Stage,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats;

/// A manifest together with the image grid of every item.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: BTreeMap<String, Matrix>,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let (manifest, generator) = generate_synthetic_dataset(&cfg.data)?;
        let mut images = BTreeMap::new();
        for it in &manifest.items {
            images.insert(it.id.clone(), generator.render_key(&it.source)?);
        }
        Ok(Self { manifest, images })
    }

    pub fn save(&self, cfg: &RunConfig) -> Result<()> {
        let (rows, cols) = self.image_shape()?;
        formats::write_manifest(&cfg.resolve(&cfg.paths.manifest), &self.manifest)?;
        formats::write_samples(&cfg.resolve(&cfg.paths.samples), rows, cols, &self.images)
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let manifest = formats::read_manifest(&cfg.resolve(&cfg.paths.manifest))?;
        let samples_path = cfg.resolve(&cfg.paths.samples);
        let mut images = formats::read_samples(&samples_path)?;
        images.retain(|id, _| manifest.get(id).is_some());
        if let Some(missing) = manifest.items.iter().find(|it| !images.contains_key(&it.id)) {
            return Err(Error::format(&samples_path, format!("no image for manifest item {}", missing.id)));
        }
        Ok(Self { manifest, images })
    }

    fn image_shape(&self) -> Result<(usize, usize)> {
        self.images.values().next().map(Matrix::shape).ok_or_else(|| Error::Precondition("dataset is empty".into()))
    }

    pub fn eval_images<'a>(&'a self, ids: &[impl AsRef<str>]) -> Result<Vec<EvalImage<'a>>> {
        let idx = self.manifest.index();
        ids.iter()
            .map(|id| {
                let id = id.as_ref();
                let it = idx.get(id).ok_or_else(|| Error::Precondition(format!("split refers to unknown item {id}")))?;
                Ok(EvalImage { id: &it.id, image: &self.images[id], class: &it.class, domain: &it.domain })
            })
            .collect()
    }

    pub fn train_samples<'a>(&'a self, model: &ProsModel, ids: &[String]) -> Result<Vec<TrainSample<'a>>> {
        let idx = self.manifest.index();
        ids.iter()
            .map(|id| {
                let it = idx.get(id.as_str()).ok_or_else(|| Error::Precondition(format!("split refers to unknown item {id}")))?;
                let domain = model
                    .domain_index(&it.domain)
                    .ok_or_else(|| Error::Precondition(format!("item {id}: domain {} is not a training domain", it.domain)))?;
                let class = model
                    .class_index(&it.class)
                    .ok_or_else(|| Error::Precondition(format!("item {id}: class {} is not a training class", it.class)))?;
                Ok(TrainSample { image: &self.images[id], domain, class })
            })
            .collect()
    }
}

/// Generates the dataset and its split and writes both.
pub fn gen_data(cfg: &RunConfig) -> Result<(Dataset, ProtocolSplit)> {
    let data = Dataset::generate(cfg)?;
    let split = make_split(cfg, &data.manifest)?;
    data.save(cfg)?;
    formats::write_split(&cfg.resolve(&cfg.paths.split), &split)?;
    Ok((data, split))
}

pub fn make_split(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<ProtocolSplit> {
    Ok(build_split(manifest, &cfg.split_args(&manifest.classes)?)?)
}

pub fn load_split(cfg: &RunConfig) -> Result<ProtocolSplit> {
    formats::read_split(&cfg.resolve(&cfg.paths.split))
}

/// The frozen backbone: external weights when configured, else synthetic.
pub fn load_backbone(cfg: &RunConfig, config: &pros_core::BackboneConfig) -> Result<Backbone> {
    match &cfg.paths.backbone_weights {
        Some(p) => {
            let weights: BackboneWeights = formats::read_json(&cfg.resolve(p))?;
            Ok(Backbone::from_weights(config.clone(), weights)?)
        }
        None => Ok(Backbone::synthetic(config.clone())?),
    }
}

/// A fresh model over the split's training domains and classes.
pub fn new_model(cfg: &RunConfig, split: &ProtocolSplit) -> Result<ProsModel> {
    let backbone = load_backbone(cfg, &cfg.backbone)?;
    Ok(ProsModel::new(backbone, split.train_domains.clone(), split.partition.train.clone(), &cfg.model_spec())?)
}

pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<ProsModel> {
    if !path.exists() {
        return Err(Error::Precondition(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt: Checkpoint = formats::read_checkpoint(path)?;
    let backbone = load_backbone(cfg, &ckpt.backbone)?;
    Ok(ProsModel::from_checkpoint(ckpt, backbone)?)
}

pub fn save_model(path: &Path, model: &ProsModel) -> Result<()> {
    formats::write_checkpoint(path, &model.to_checkpoint())
}

/// Trains `stage` in place, writing one `epoch step stage loss lr` line per
/// step to `log`.
pub fn train(
    cfg: &RunConfig,
    model: &mut ProsModel,
    data: &Dataset,
    split: &ProtocolSplit,
    stage: Stage,
    log: Option<&Path>,
) -> Result<TrainReport> {
    let samples = data.train_samples(model, &split.train)?;
    let validation = if split.val_queries.is_empty() || split.val_gallery.is_empty() {
        None
    } else {
        Some(Validation { queries: data.eval_images(&split.val_queries)?, gallery: data.eval_images(&split.val_gallery)? })
    };
    let mut writer = match log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "# epoch step stage loss lr").map_err(|e| Error::io(p, e))?;
            Some((p, w))
        }
        None => None,
    };
    let mut io_error = None;
    let report = train_stage(model, &cfg.train_config(stage), &samples, validation.as_ref(), &mut |r: &LogRecord| {
        if let Some((p, w)) = writer.as_mut() {
            let line = writeln!(w, "{} {} {} {:.6} {:.6e}", r.epoch, r.step, r.stage.name(), r.loss, r.lr);
            if let Err(e) = line {
                io_error.get_or_insert_with(|| Error::io(p, e));
            }
        }
    })?;
    if let Some((p, mut w)) = writer {
        for (epoch, (score, loss)) in report.epoch_scores.iter().zip(&report.epoch_losses).enumerate() {
            writeln!(w, "# epoch {} mean_loss {loss:.6} val_score {score:.6}", epoch + 1).map_err(|e| Error::io(p, e))?;
        }
        writeln!(w, "# best_epoch {}", report.best_epoch).map_err(|e| Error::io(p, e))?;
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    match io_error {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// The retrieval path: the configured one, else the model's default.
pub fn feature_mode(cfg: &RunConfig, model: &ProsModel) -> FeatureMode {
    cfg.eval.mode.unwrap_or_else(|| model.retrieval_mode())
}

/// Embeds the whole gallery of `split`.
pub fn index(model: &ProsModel, data: &Dataset, split: &ProtocolSplit, mode: FeatureMode) -> Result<EmbeddingGallery> {
    Ok(extract_features(model, &data.eval_images(&split.gallery)?, mode)?)
}

/// Rejects embeddings produced under a different feature width.
pub fn check_dims(model: &ProsModel, gallery: &EmbeddingGallery) -> Result<()> {
    let dim = model.backbone.config().proj_dim;
    if gallery.dim != dim {
        return Err(Error::Precondition(format!(
            "embedding file has dimension {} but the checkpoint produces dimension {dim}",
            gallery.dim
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub queries: usize,
    /// Queries without any relevant gallery item; left out of every mean.
    pub excluded: usize,
    pub map_at: BTreeMap<String, f64>,
    pub prec_at: BTreeMap<String, f64>,
    pub map_all: f64,
    /// Cut-offs larger than the gallery, clipped to its size.
    pub clipped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryReport {
    pub gallery_size: usize,
    pub per_domain: BTreeMap<String, Metrics>,
    /// Mean of the per-domain values.
    pub average: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub held_out_domain: Option<String>,
    pub query_domains: Vec<String>,
    pub mode: FeatureMode,
    pub seed: u64,
    pub ablations: Vec<String>,
    pub unseen: GalleryReport,
    /// Present when the split's gallery also holds seen classes.
    pub mixed: Option<GalleryReport>,
}

fn metrics(results: &[RankedResult], ks: &[usize]) -> Result<Metrics> {
    let mut m = Metrics {
        queries: results.len(),
        excluded: 0,
        map_at: BTreeMap::new(),
        prec_at: BTreeMap::new(),
        map_all: 0.0,
        clipped: Vec::new(),
    };
    for &k in ks {
        let a = map_at_k(results, k)?;
        let p = prec_at_k(results, k)?;
        m.excluded = a.excluded;
        if a.clipped {
            m.clipped.push(k);
        }
        m.map_at.insert(k.to_string(), a.value);
        m.prec_at.insert(k.to_string(), p.value);
    }
    m.map_all = map_all(results)?.value;
    Ok(m)
}

fn average(per_domain: &BTreeMap<String, Metrics>) -> Metrics {
    let n = per_domain.len().max(1) as f64;
    let mut avg = Metrics {
        queries: 0,
        excluded: 0,
        map_at: BTreeMap::new(),
        prec_at: BTreeMap::new(),
        map_all: 0.0,
        clipped: Vec::new(),
    };
    for m in per_domain.values() {
        avg.queries += m.queries;
        avg.excluded += m.excluded;
        for (k, v) in &m.map_at {
            *avg.map_at.entry(k.clone()).or_default() += v / n;
        }
        for (k, v) in &m.prec_at {
            *avg.prec_at.entry(k.clone()).or_default() += v / n;
        }
        avg.map_all += m.map_all / n;
        for k in &m.clipped {
            if !avg.clipped.contains(k) {
                avg.clipped.push(*k);
            }
        }
    }
    avg
}

fn gallery_report(queries: &EmbeddingGallery, gallery: &EmbeddingGallery, ks: &[usize]) -> Result<GalleryReport> {
    let mut by_domain: BTreeMap<String, Vec<RankedResult>> = BTreeMap::new();
    for (r, domain) in rank_all(queries, gallery)?.into_iter().zip(&queries.domains) {
        by_domain.entry(domain.clone()).or_default().push(r);
    }
    let mut per_domain = BTreeMap::new();
    for (domain, results) in &by_domain {
        per_domain.insert(domain.clone(), metrics(results, ks)?);
    }
    let average = average(&per_domain);
    Ok(GalleryReport { gallery_size: gallery.len(), per_domain, average })
}

/// Embeds the test queries of `split`.
pub fn query_features(model: &ProsModel, data: &Dataset, split: &ProtocolSplit, mode: FeatureMode) -> Result<EmbeddingGallery> {
    if split.test_queries.is_empty() {
        return Err(Error::Precondition("split has no test queries".into()));
    }
    Ok(extract_features(model, &data.eval_images(&split.test_queries)?, mode)?)
}

/// Metrics of the test queries against the unseen gallery and, when the
/// split has one, the mixed gallery.
pub fn evaluate(
    cfg: &RunConfig,
    model: &ProsModel,
    data: &Dataset,
    split: &ProtocolSplit,
    gallery: &EmbeddingGallery,
    mode: FeatureMode,
) -> Result<EvalReport> {
    check_dims(model, gallery)?;
    let queries = query_features(model, data, split, mode)?;
    let unseen_ids: std::collections::BTreeSet<&str> = split.unseen_gallery(&data.manifest).into_iter().collect();
    let unseen = gallery.subset(&unseen_ids);
    if unseen.is_empty() {
        return Err(Error::Precondition("embedding file holds none of the split's gallery items".into()));
    }
    let mixed = if split.gallery_mode == GalleryMode::Mixed && unseen.len() < gallery.len() {
        Some(gallery_report(&queries, gallery, &cfg.eval.ks)?)
    } else {
        None
    };
    Ok(EvalReport {
        protocol: split.protocol.name().to_string(),
        held_out_domain: split.held_out_domain.clone(),
        query_domains: split.query_domains.clone(),
        mode,
        seed: split.seed,
        ablations: model.ablations.active().into_iter().map(String::from).collect(),
        unseen: gallery_report(&queries, &unseen, &cfg.eval.ks)?,
        mixed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSummary {
    pub mode: FeatureMode,
    pub points: usize,
    pub classes: usize,
    /// `null` when two classes share a point.
    pub sigma: Option<f64>,
    pub max_intra: f64,
    pub min_inter: f64,
    pub singleton_classes: Vec<String>,
}

impl From<(FeatureMode, usize, usize, SigmaReport)> for SigmaSummary {
    fn from((mode, points, classes, r): (FeatureMode, usize, usize, SigmaReport)) -> Self {
        Self {
            mode,
            points,
            classes,
            sigma: r.sigma.is_finite().then_some(r.sigma),
            max_intra: r.max_intra,
            min_inter: r.min_inter,
            singleton_classes: r.singleton_classes,
        }
    }
}

/// σ over the test queries together with the unseen gallery.
pub fn diagnose(model: &ProsModel, data: &Dataset, split: &ProtocolSplit, mode: FeatureMode) -> Result<(SigmaSummary, SigmaReport)> {
    let mut ids: Vec<&str> = split.test_queries.iter().map(String::as_str).collect();
    ids.extend(split.unseen_gallery(&data.manifest));
    let feats = extract_features(model, &data.eval_images(&ids)?, mode)?;
    let report = sigma_diagnostic(&feats.vectors, &feats.classes)?;
    let classes = feats.classes.iter().collect::<std::collections::BTreeSet<_>>().len();
    Ok(((mode, feats.len(), classes, report.clone()).into(), report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchHit {
    pub rank: usize,
    pub id: String,
    pub class: String,
    pub domain: String,
    pub score: f64,
}

/// Top-`k` gallery items for one manifest item. The flag reports whether
/// `k` had to be clipped to the gallery size.
pub fn search(
    model: &ProsModel,
    data: &Dataset,
    gallery: &EmbeddingGallery,
    query_id: &str,
    k: usize,
    mode: FeatureMode,
) -> Result<(Vec<SearchHit>, bool)> {
    check_dims(model, gallery)?;
    let q = data.eval_images(&[query_id])?;
    let feats = extract_features(model, &q, mode)?;
    let r = pros_core::rank(query_id, q[0].class, &feats.vectors[0], gallery)?;
    let clipped = k > r.ids.len();
    let hits = r
        .ids
        .iter()
        .zip(&r.scores)
        .take(k)
        .enumerate()
        .map(|(i, (id, score))| {
            let pos = gallery.position(id).expect("ranked ids come from the gallery");
            SearchHit {
                rank: i + 1,
                id: id.clone(),
                class: gallery.classes[pos].clone(),
                domain: gallery.domains[pos].clone(),
                score: *score,
            }
        })
        .collect();
    Ok((hits, clipped))
}
