use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use pros::pipeline::{self, Dataset};
use pros::{formats, RunConfig};
use pros_core::{Checkpoint, EmbeddingGallery, FeatureMode, GalleryMode};
use tempfile::TempDir;

const SMALL: &str = "seed = 3\n[data]\nper_pair = 8\n[train]\nepochs = 1\nsamples_per_epoch = 100\nbatch_size = 25\n";

fn pros(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pros")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = pros(dir, args);
    assert!(out.status.success(), "pros {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn trained(config: &str) -> TempDir {
    let dir = workspace(config);
    let p = dir.path();
    ok(p, &["gen-data", "--config", "run.toml"]);
    ok(p, &["train", "--stage", "pul", "--config", "run.toml"]);
    ok(p, &["train", "--stage", "csl", "--config", "run.toml", "--from-checkpoint", "runs/pul.json"]);
    ok(p, &["index", "--config", "run.toml"]);
    dir
}

#[test]
fn gen_data_writes_default_dataset_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    let first = std::fs::read(dir.path().join("data/manifest.tsv")).unwrap();
    let m = formats::read_manifest(&dir.path().join("data/manifest.tsv")).unwrap();
    assert_eq!(m.len(), 4 * 10 * 50);
    ok(dir.path(), &["gen-data"]);
    assert_eq!(std::fs::read(dir.path().join("data/manifest.tsv")).unwrap(), first);
}

#[test]
fn invalid_domain_count_is_a_config_error() {
    let dir = workspace("[data]\nnum_domains = 1\n");
    let out = pros(dir.path(), &["gen-data", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("num_domains"), "{}", stderr(&out));
}

#[test]
fn unknown_ablation_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pros(dir.path(), &["gen-data", "--ablate", "no_such_flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn csl_needs_a_checkpoint() {
    let dir = workspace(SMALL);
    ok(dir.path(), &["gen-data", "--config", "run.toml"]);
    let out = pros(dir.path(), &["train", "--stage", "csl", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("--from-checkpoint"));
    let out = pros(dir.path(), &["train", "--stage", "csl", "--config", "run.toml", "--from-checkpoint", "runs/none.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pul_finishes_within_the_default_budget() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    let t = Instant::now();
    ok(dir.path(), &["train", "--stage", "pul"]);
    assert!(t.elapsed() < Duration::from_secs(300), "took {:?}", t.elapsed());
    let log = std::fs::read_to_string(dir.path().join("runs/train-pul.log")).unwrap();
    let first = log.lines().find(|l| !l.starts_with('#')).unwrap();
    let fields: Vec<&str> = first.split_whitespace().collect();
    assert_eq!(fields.len(), 5);
    assert_eq!(fields[2], "pul");
    let ckpt: Checkpoint = formats::read_checkpoint(&dir.path().join("runs/pul.json")).unwrap();
    assert!(ckpt.pul_done && !ckpt.csl_done);
}

#[test]
fn ablation_is_recorded_in_the_checkpoint() {
    let dir = workspace(SMALL);
    let p = dir.path();
    ok(p, &["gen-data", "--config", "run.toml"]);
    ok(p, &["train", "--stage", "pul", "--config", "run.toml"]);
    ok(p, &["train", "--stage", "csl", "--config", "run.toml", "--from-checkpoint", "runs/pul.json", "--ablate", "no_mask"]);
    let ckpt: Checkpoint = formats::read_checkpoint(&p.join("runs/pros.json")).unwrap();
    assert!(ckpt.ablations.no_mask);
    assert!(ckpt.csl_done);
    let pul: Checkpoint = formats::read_checkpoint(&p.join("runs/pul.json")).unwrap();
    assert!(!pul.ablations.no_mask);
}

#[test]
fn retrieval_commands_run_and_clip_k() {
    let dir = trained(SMALL);
    let p = dir.path();
    ok(p, &["evaluate", "--config", "run.toml"]);
    ok(p, &["diagnose", "--config", "run.toml"]);
    let out = ok(p, &["search", "--config", "run.toml", "-k", "100000", "sketch-class00-0000"]);
    assert!(stderr(&out).contains("clipped"), "{}", stderr(&out));
    let gallery = formats::read_embeddings(&p.join("runs/gallery.emb")).unwrap().0;
    let lines = String::from_utf8(out.stdout).unwrap().lines().count();
    assert_eq!(lines, 1 + gallery.len());

    // Byte-identical outputs on a rerun.
    let report = std::fs::read(p.join("runs/report.json")).unwrap();
    ok(p, &["index", "--config", "run.toml"]);
    ok(p, &["evaluate", "--config", "run.toml"]);
    assert_eq!(std::fs::read(p.join("runs/report.json")).unwrap(), report);
}

#[test]
fn embedding_dimension_mismatch_reports_both_dims() {
    let dir = trained(SMALL);
    let p = dir.path();
    let mut g = EmbeddingGallery::new(7);
    g.push("x", "class00", "real", &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    formats::write_embeddings(&p.join("runs/gallery.emb"), &g, FeatureMode::Simulated).unwrap();
    for cmd in [&["evaluate", "--config", "run.toml"][..], &["search", "--config", "run.toml", "real-class00-0000"]] {
        let out = pros(p, cmd);
        assert_eq!(out.status.code(), Some(3));
        let msg = stderr(&out);
        assert!(msg.contains("dimension 7") && msg.contains("dimension 32"), "{msg}");
    }
}

#[test]
fn mode_must_match_the_index() {
    let dir = trained(SMALL);
    let out = pros(dir.path(), &["evaluate", "--config", "run.toml", "--mode", "frozen"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn mixed_gallery_reports_both_galleries() {
    let dir = trained(&format!("{SMALL}[protocol]\ngallery_mode = \"mixed\"\n"));
    ok(dir.path(), &["evaluate", "--config", "run.toml"]);
    let report: pipeline::EvalReport = formats::read_json(&dir.path().join("runs/report.json")).unwrap();
    let mixed = report.mixed.expect("mixed gallery metrics");
    assert!(mixed.gallery_size > report.unseen.gallery_size);
}

#[test]
fn non_finite_inputs_exit_with_numeric_failure() {
    let dir = workspace(SMALL);
    let p = dir.path();
    ok(p, &["gen-data", "--config", "run.toml"]);
    let path = p.join("data/samples.bin");
    let mut samples = formats::read_samples(&path).unwrap();
    for m in samples.values_mut() {
        m.as_mut_slice()[0] = f64::NAN;
    }
    let (rows, cols) = samples.values().next().unwrap().shape();
    formats::write_samples(&path, rows, cols, &samples).unwrap();
    let out = pros(p, &["train", "--stage", "pul", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn self_retrieval_saturates_map() {
    let mut cfg = RunConfig::default();
    cfg.data.per_pair = 6;
    cfg.train.epochs = 1;
    cfg.train.samples_per_epoch = Some(50);
    let data = Dataset::generate(&cfg).unwrap();
    let mut split = pipeline::make_split(&cfg, &data.manifest).unwrap();
    let mut model = pipeline::new_model(&cfg, &split).unwrap();
    pipeline::train(&cfg, &mut model, &data, &split, pros_core::Stage::Pul, None).unwrap();

    // One gallery item per query class, and the queries are the gallery.
    let idx = data.manifest.index();
    let mut seen = std::collections::BTreeSet::new();
    split.gallery.retain(|id| seen.insert(idx[id.as_str()].class.clone()));
    split.test_queries = split.gallery.clone();
    split.gallery_mode = GalleryMode::Unseen;

    let gallery = pipeline::index(&model, &data, &split, FeatureMode::Units).unwrap();
    let report = pipeline::evaluate(&cfg, &model, &data, &split, &gallery, FeatureMode::Units).unwrap();
    for v in report.unseen.average.map_at.values() {
        assert_eq!(*v, 1.0);
    }
    assert_eq!(report.unseen.average.map_all, 1.0);
}
