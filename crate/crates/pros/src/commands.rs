//! Command-line definitions and their handlers.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pros_core::{FeatureMode, Stage};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::{formats, pipeline};

#[derive(Debug, Parser)]
#[command(name = "pros", version, about = "Prompt-to-simulate tuning for universal cross-domain retrieval")]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct SharedArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated ablations: no_sp, no_dp, no_mask, no_caps, no_cls_train.
    #[arg(long, global = true, value_name = "FLAG[,FLAG...]")]
    pub ablate: Option<String>,
    /// Checkpoint to start from (train) or to read (index, search, evaluate, diagnose).
    #[arg(long, global = true)]
    pub from_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pul,
    Csl,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pul => Stage::Pul,
            StageArg::Csl => Stage::Csl,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Simulated,
    Units,
    Frozen,
}

impl From<ModeArg> for FeatureMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Simulated => FeatureMode::Simulated,
            ModeArg::Units => FeatureMode::Units,
            ModeArg::Frozen => FeatureMode::Frozen,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its protocol split.
    GenData,
    /// Run one training stage and write its checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Output checkpoint; defaults to the configured path for the stage.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed the gallery.
    Index {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Rank the gallery for one or more manifest items.
    Search {
        #[arg(required = true)]
        query: Vec<String>,
        #[arg(short, long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Compute retrieval metrics of the test queries.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Compute the σ separation statistic of the unseen-class features.
    Diagnose {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
}

fn load_config(shared: &SharedArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(shared.config.as_deref())?;
    if let Some(seed) = shared.seed {
        cfg.set_seed(seed);
    }
    if let Some(list) = &shared.ablate {
        cfg.apply_ablations(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn retrieval_checkpoint(cfg: &RunConfig, shared: &SharedArgs) -> PathBuf {
    shared.from_checkpoint.clone().unwrap_or_else(|| cfg.resolve(&cfg.paths.checkpoint))
}

/// Queries must use the feature path the gallery was indexed with.
fn query_mode(cfg: &RunConfig, indexed: FeatureMode) -> Result<FeatureMode> {
    match cfg.eval.mode {
        Some(m) if m != indexed => Err(Error::Precondition(format!(
            "the gallery was indexed with {indexed:?} features but {m:?} was requested; re-run `pros index`"
        ))),
        _ => Ok(indexed),
    }
}

/// Runs one parsed command, writing human-readable output to `out` and
/// warnings to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&cli.shared)?;
    let stdout = |e: std::io::Error| Error::io(std::path::Path::new("<stdout>"), e);
    match cli.command {
        Command::GenData => {
            let (data, split) = pipeline::gen_data(&cfg)?;
            writeln!(
                out,
                "wrote {} items ({} domains, {} classes) to {}",
                data.manifest.len(),
                data.manifest.domains.len(),
                data.manifest.classes.len(),
                cfg.resolve(&cfg.paths.manifest).display()
            )
            .map_err(stdout)?;
            writeln!(
                out,
                "split {}: {} train, {} val queries, {} test queries, {} gallery",
                split.protocol.name(),
                split.train.len(),
                split.val_queries.len(),
                split.test_queries.len(),
                split.gallery.len()
            )
            .map_err(stdout)?;
        }
        Command::Train { stage, out: ckpt_out } => {
            let stage = Stage::from(stage);
            let data = pipeline::Dataset::load(&cfg)?;
            let split = pipeline::load_split(&cfg)?;
            let mut model = match (stage, &cli.shared.from_checkpoint) {
                (Stage::Csl, None) => {
                    return Err(Error::Precondition(
                        "train --stage csl needs --from-checkpoint with a completed pul checkpoint".into(),
                    ))
                }
                (_, Some(p)) => {
                    let mut m = pipeline::load_model(&cfg, p)?;
                    let a = &mut m.ablations;
                    let extra = cfg.ablations;
                    a.no_sp |= extra.no_sp;
                    a.no_dp |= extra.no_dp;
                    a.no_mask |= extra.no_mask;
                    a.no_caps |= extra.no_caps;
                    a.no_cls_train |= extra.no_cls_train;
                    cfg.ablations = *a;
                    m
                }
                (Stage::Pul, None) => pipeline::new_model(&cfg, &split)?,
            };
            let path = ckpt_out.unwrap_or_else(|| match stage {
                Stage::Pul => cfg.resolve(&cfg.paths.pul_checkpoint),
                Stage::Csl => cfg.resolve(&cfg.paths.checkpoint),
            });
            if stage == Stage::Csl && model.ablations.no_caps {
                writeln!(err, "warning: no_caps retrieves with the prompt units directly; simulator training skipped")
                    .map_err(stdout)?;
                pipeline::save_model(&path, &model)?;
                writeln!(out, "wrote {}", path.display()).map_err(stdout)?;
                return Ok(());
            }
            let log = cfg.resolve(&cfg.paths.log_dir).join(format!("train-{}.log", stage.name()));
            let report = pipeline::train(&cfg, &mut model, &data, &split, stage, Some(&log))?;
            pipeline::save_model(&path, &model)?;
            writeln!(
                out,
                "{}: {} epochs, best epoch {} (validation {:.4}); wrote {}",
                stage.name(),
                report.epochs_run,
                report.best_epoch,
                report.best_score,
                path.display()
            )
            .map_err(stdout)?;
        }
        Command::Index { mode } => {
            let model = pipeline::load_model(&cfg, &retrieval_checkpoint(&cfg, &cli.shared))?;
            cfg.eval.mode = mode.map(Into::into).or(cfg.eval.mode);
            let data = pipeline::Dataset::load(&cfg)?;
            let split = pipeline::load_split(&cfg)?;
            let mode = pipeline::feature_mode(&cfg, &model);
            let gallery = pipeline::index(&model, &data, &split, mode)?;
            let path = cfg.resolve(&cfg.paths.embeddings);
            formats::write_embeddings(&path, &gallery, mode)?;
            writeln!(out, "indexed {} items (dim {}) to {}", gallery.len(), gallery.dim, path.display()).map_err(stdout)?;
        }
        Command::Search { query, k, mode } => {
            let model = pipeline::load_model(&cfg, &retrieval_checkpoint(&cfg, &cli.shared))?;
            cfg.eval.mode = mode.map(Into::into).or(cfg.eval.mode);
            let data = pipeline::Dataset::load(&cfg)?;
            let (gallery, indexed) = formats::read_embeddings(&cfg.resolve(&cfg.paths.embeddings))?;
            let mode = query_mode(&cfg, indexed)?;
            let k = k.unwrap_or(cfg.eval.search_k);
            if k == 0 {
                return Err(Error::Config("k must be positive".into()));
            }
            for q in &query {
                let (hits, clipped) = pipeline::search(&model, &data, &gallery, q, k, mode)?;
                if clipped {
                    writeln!(err, "warning: k={k} exceeds the gallery size {}; clipped to {}", gallery.len(), hits.len())
                        .map_err(stdout)?;
                }
                writeln!(out, "query {q}").map_err(stdout)?;
                for h in hits {
                    writeln!(out, "{}\t{}\t{}\t{}\t{:.6}", h.rank, h.id, h.class, h.domain, h.score).map_err(stdout)?;
                }
            }
        }
        Command::Evaluate { mode } => {
            let model = pipeline::load_model(&cfg, &retrieval_checkpoint(&cfg, &cli.shared))?;
            cfg.eval.mode = mode.map(Into::into).or(cfg.eval.mode);
            let data = pipeline::Dataset::load(&cfg)?;
            let split = pipeline::load_split(&cfg)?;
            let emb_path = cfg.resolve(&cfg.paths.embeddings);
            if !emb_path.exists() {
                return Err(Error::Precondition(format!("{} does not exist; run `pros index` first", emb_path.display())));
            }
            let (gallery, indexed) = formats::read_embeddings(&emb_path)?;
            let mode = query_mode(&cfg, indexed)?;
            let report = pipeline::evaluate(&cfg, &model, &data, &split, &gallery, mode)?;
            let path = cfg.resolve(&cfg.paths.report);
            formats::write_json(&path, &report)?;
            for (name, g) in [("unseen", Some(&report.unseen)), ("mixed", report.mixed.as_ref())] {
                let Some(g) = g else { continue };
                let maps: Vec<String> = g.average.map_at.iter().map(|(k, v)| format!("mAP@{k} {v:.4}")).collect();
                let precs: Vec<String> = g.average.prec_at.iter().map(|(k, v)| format!("Prec@{k} {v:.4}")).collect();
                writeln!(out, "{name} gallery ({}): {} {}", g.gallery_size, maps.join(" "), precs.join(" ")).map_err(stdout)?;
                if !g.average.clipped.is_empty() {
                    writeln!(err, "warning: cut-offs {:?} exceed the {name} gallery size and were clipped", g.average.clipped)
                        .map_err(stdout)?;
                }
                if g.average.excluded > 0 {
                    writeln!(err, "warning: {} queries had no relevant gallery item and were excluded", g.average.excluded)
                        .map_err(stdout)?;
                }
            }
            writeln!(out, "wrote {}", path.display()).map_err(stdout)?;
        }
        Command::Diagnose { mode } => {
            let model = pipeline::load_model(&cfg, &retrieval_checkpoint(&cfg, &cli.shared))?;
            cfg.eval.mode = mode.map(Into::into).or(cfg.eval.mode);
            let data = pipeline::Dataset::load(&cfg)?;
            let split = pipeline::load_split(&cfg)?;
            let mode = pipeline::feature_mode(&cfg, &model);
            let (summary, _) = pipeline::diagnose(&model, &data, &split, mode)?;
            let path = cfg.resolve(&cfg.paths.sigma_report);
            formats::write_json(&path, &summary)?;
            match summary.sigma {
                Some(s) => writeln!(out, "sigma {s:.6} over {} points", summary.points).map_err(stdout)?,
                None => writeln!(out, "sigma is infinite: two classes share a point").map_err(stdout)?,
            }
            if !summary.singleton_classes.is_empty() {
                writeln!(err, "warning: singleton classes {:?} have no intra-class distance", summary.singleton_classes)
                    .map_err(stdout)?;
            }
            writeln!(out, "wrote {}", path.display()).map_err(stdout)?;
        }
    }
    Ok(())
}
