//! Dataset manifests and the three evaluation protocols.
//!
//! All splits draw their gallery from the Real domain. UCDR holds out one
//! domain and a set of classes, UcCDR holds out classes only, UdCDR holds out
//! a domain only.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ProsError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// File path or generator key.
    pub source: String,
    pub domain: String,
    pub class: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    pub domains: Vec<String>,
    pub classes: Vec<String>,
}

impl DatasetManifest {
    /// Vocabularies are taken in order of first appearance.
    pub fn new(items: Vec<ManifestItem>) -> Result<Self> {
        let mut domains: Vec<String> = Vec::new();
        let mut classes: Vec<String> = Vec::new();
        for it in &items {
            if !domains.contains(&it.domain) {
                domains.push(it.domain.clone());
            }
            if !classes.contains(&it.class) {
                classes.push(it.class.clone());
            }
        }
        Self::with_vocabulary(items, domains, classes)
    }

    pub fn with_vocabulary(items: Vec<ManifestItem>, domains: Vec<String>, classes: Vec<String>) -> Result<Self> {
        let m = Self { items, domains, classes };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let domains: BTreeSet<&str> = self.domains.iter().map(String::as_str).collect();
        let classes: BTreeSet<&str> = self.classes.iter().map(String::as_str).collect();
        if domains.len() != self.domains.len() {
            return Err(ProsError::InvalidConfig("manifest domain vocabulary has duplicates".into()));
        }
        if classes.len() != self.classes.len() {
            return Err(ProsError::InvalidConfig("manifest class vocabulary has duplicates".into()));
        }
        let mut ids = BTreeSet::new();
        for it in &self.items {
            if !ids.insert(it.id.as_str()) {
                return Err(ProsError::Duplicate { what: "sample id", name: it.id.clone() });
            }
            if !domains.contains(it.domain.as_str()) {
                return Err(ProsError::Protocol(format!("item {} has unknown domain '{}'", it.id, it.domain)));
            }
            if !classes.contains(it.class.as_str()) {
                return Err(ProsError::Protocol(format!("item {} has unknown class '{}'", it.id, it.class)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &ManifestItem> {
        self.items.iter().map(|it| (it.id.as_str(), it)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Ucdr,
    Uccdr,
    Udcdr,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Ucdr, Protocol::Uccdr, Protocol::Udcdr];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Ucdr => "ucdr",
            Protocol::Uccdr => "uccdr",
            Protocol::Udcdr => "udcdr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ucdr" => Ok(Protocol::Ucdr),
            "uccdr" => Ok(Protocol::Uccdr),
            "udcdr" => Ok(Protocol::Udcdr),
            other => Err(ProsError::InvalidConfig(format!("unknown protocol '{other}' (expected ucdr, uccdr or udcdr)"))),
        }
    }

    fn holds_out_domain(self) -> bool {
        matches!(self, Protocol::Ucdr | Protocol::Udcdr)
    }

    fn holds_out_classes(self) -> bool {
        matches!(self, Protocol::Ucdr | Protocol::Uccdr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GalleryMode {
    Unseen,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl ClassPartition {
    /// Shuffles `classes` with `seed` and cuts it into `n_train`, `n_val`
    /// and the remainder.
    pub fn by_counts(classes: &[String], n_train: usize, n_val: usize, seed: u64) -> Result<Self> {
        if n_train + n_val >= classes.len() {
            return Err(ProsError::InvalidConfig(format!(
                "class partition {n_train} train + {n_val} val leaves no test classes out of {}",
                classes.len()
            )));
        }
        if n_train < 2 {
            return Err(ProsError::InvalidConfig("class partition needs at least 2 training classes".into()));
        }
        let mut shuffled = classes.to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut rest = shuffled.split_off(n_train);
        let test = rest.split_off(n_val);
        Ok(Self { train: shuffled, val: rest, test })
    }

    /// Roughly 71% train, 16% val and 13% test classes, with at least two test
    /// classes and one validation class.
    pub fn default_ratios(classes: &[String], seed: u64) -> Result<Self> {
        let c = classes.len();
        if c < 5 {
            return Err(ProsError::InvalidConfig(format!("need at least 5 classes to partition, got {c}")));
        }
        let n_test = (libm::round(c as f64 * 0.13) as usize).max(2);
        let n_val = (libm::round(c as f64 * 0.16) as usize).max(1);
        Self::by_counts(classes, c - n_test - n_val, n_val, seed)
    }

    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(c.as_str()) {
                return Err(ProsError::Protocol(format!("class '{c}' appears in more than one partition set")));
            }
            if !manifest.classes.contains(c) {
                return Err(ProsError::Protocol(format!("partition class '{c}' is not in the manifest")));
            }
        }
        if seen.len() != manifest.classes.len() {
            return Err(ProsError::Protocol(format!(
                "class partition covers {} of {} manifest classes",
                seen.len(),
                manifest.classes.len()
            )));
        }
        if self.train.len() < 2 {
            return Err(ProsError::Protocol("class partition needs at least 2 training classes".into()));
        }
        if self.test.is_empty() {
            return Err(ProsError::Protocol("class partition has no test classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitArgs {
    pub protocol: Protocol,
    /// Domain excluded from training (UCDR, UdCDR).
    pub held_out_domain: Option<String>,
    /// Query domain for UcCDR; must be a non-Real training domain.
    pub query_domain: Option<String>,
    pub partition: ClassPartition,
    pub gallery_mode: GalleryMode,
    /// Fraction of held-out items used as UdCDR queries; `None` picks 0.25,
    /// or 0.10 for a domain named "quickdraw".
    pub query_fraction: Option<f64>,
    /// Fraction of validation-class items used as validation queries.
    pub val_fraction: f64,
    pub real_domain: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub protocol: Protocol,
    pub held_out_domain: Option<String>,
    pub real_domain: String,
    pub train_domains: Vec<String>,
    pub query_domains: Vec<String>,
    pub partition: ClassPartition,
    pub gallery_mode: GalleryMode,
    pub query_fraction: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub val_queries: Vec<String>,
    pub val_gallery: Vec<String>,
    pub test_queries: Vec<String>,
    pub gallery: Vec<String>,
}

impl ProtocolSplit {
    /// Classes that test queries are drawn from.
    pub fn query_classes(&self) -> &[String] {
        if self.protocol.holds_out_classes() {
            &self.partition.test
        } else {
            &self.partition.train
        }
    }

    /// Gallery restricted to the query classes: the whole gallery except in
    /// mixed mode.
    pub fn unseen_gallery<'a>(&'a self, manifest: &'a DatasetManifest) -> Vec<&'a str> {
        let idx = manifest.index();
        let classes: BTreeSet<&str> = self.query_classes().iter().map(String::as_str).collect();
        self.gallery
            .iter()
            .filter(|id| idx.get(id.as_str()).is_some_and(|it| classes.contains(it.class.as_str())))
            .map(String::as_str)
            .collect()
    }
}

fn default_fraction(domain: &str) -> f64 {
    if domain.eq_ignore_ascii_case("quickdraw") {
        0.10
    } else {
        0.25
    }
}

/// Keeps `fraction` of each class (at least one item), chosen with `rng`.
fn stratified_subsample(items: Vec<&ManifestItem>, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut by_class: BTreeMap<&str, Vec<&ManifestItem>> = BTreeMap::new();
    for it in items {
        by_class.entry(it.class.as_str()).or_default().push(it);
    }
    let mut out = Vec::new();
    for (_, mut group) in by_class {
        group.sort_by(|a, b| a.id.cmp(&b.id));
        group.shuffle(rng);
        let keep = (libm::round(group.len() as f64 * fraction) as usize).clamp(1, group.len());
        let mut ids: Vec<String> = group[..keep].iter().map(|it| it.id.clone()).collect();
        ids.sort();
        out.extend(ids);
    }
    out
}

fn ids_where<'a>(manifest: &'a DatasetManifest, pred: impl Fn(&ManifestItem) -> bool) -> Vec<&'a ManifestItem> {
    manifest.items.iter().filter(|it| pred(it)).collect()
}

fn to_ids(items: Vec<&ManifestItem>) -> Vec<String> {
    items.into_iter().map(|it| it.id.clone()).collect()
}

pub fn build_split(manifest: &DatasetManifest, args: &SplitArgs) -> Result<ProtocolSplit> {
    manifest.validate()?;
    args.partition.validate(manifest)?;
    let real = args.real_domain.as_str();
    if !manifest.domains.iter().any(|d| d == real) {
        return Err(ProsError::Protocol(format!("real domain '{real}' is not in the manifest")));
    }
    if !(args.val_fraction > 0.0 && args.val_fraction <= 1.0) {
        return Err(ProsError::InvalidConfig(format!("val_fraction must be in (0, 1], got {}", args.val_fraction)));
    }

    let (held_out, query_domain) = if args.protocol.holds_out_domain() {
        let d = args
            .held_out_domain
            .as_deref()
            .ok_or_else(|| ProsError::Protocol(format!("{} needs a held-out domain", args.protocol.name())))?;
        if !manifest.domains.iter().any(|x| x == d) {
            return Err(ProsError::Protocol(format!("held-out domain '{d}' is not in the manifest")));
        }
        if d == real {
            return Err(ProsError::Protocol("the real (gallery) domain cannot be held out".into()));
        }
        (Some(d.to_string()), d.to_string())
    } else {
        if args.held_out_domain.is_some() {
            return Err(ProsError::Protocol("uccdr keeps every domain in training; held_out_domain must be unset".into()));
        }
        let d = args
            .query_domain
            .as_deref()
            .ok_or_else(|| ProsError::Protocol("uccdr needs a query domain".into()))?;
        if !manifest.domains.iter().any(|x| x == d) {
            return Err(ProsError::Protocol(format!("query domain '{d}' is not in the manifest")));
        }
        if d == real {
            return Err(ProsError::Protocol("the query domain cannot be the real (gallery) domain".into()));
        }
        (None, d.to_string())
    };

    let train_domains: Vec<String> =
        manifest.domains.iter().filter(|d| Some(d.as_str()) != held_out.as_deref()).cloned().collect();
    if train_domains.len() < 2 {
        return Err(ProsError::Protocol("training needs at least 2 source domains".into()));
    }
    let in_set = |set: &[String], v: &str| set.iter().any(|s| s == v);
    let part = &args.partition;
    let is_train_domain = |d: &str| in_set(&train_domains, d);

    let train = to_ids(ids_where(manifest, |it| is_train_domain(&it.domain) && in_set(&part.train, &it.class)));
    if train.is_empty() {
        return Err(ProsError::Empty("training split"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let val_pool = ids_where(manifest, |it| it.domain != real && is_train_domain(&it.domain) && in_set(&part.val, &it.class));
    let val_queries = stratified_subsample(val_pool, args.val_fraction, &mut rng);
    let val_gallery = to_ids(ids_where(manifest, |it| it.domain == real && in_set(&part.val, &it.class)));

    let query_fraction = match args.protocol {
        Protocol::Udcdr => args.query_fraction.unwrap_or_else(|| default_fraction(&query_domain)),
        _ => args.query_fraction.unwrap_or(1.0),
    };
    if !(query_fraction > 0.0 && query_fraction <= 1.0) {
        return Err(ProsError::InvalidConfig(format!("query_fraction must be in (0, 1], got {query_fraction}")));
    }
    let query_classes = if args.protocol.holds_out_classes() { &part.test } else { &part.train };
    let query_pool = ids_where(manifest, |it| it.domain == query_domain && in_set(query_classes, &it.class));
    let test_queries = if query_fraction < 1.0 {
        stratified_subsample(query_pool, query_fraction, &mut rng)
    } else {
        to_ids(query_pool)
    };
    if test_queries.is_empty() {
        return Err(ProsError::Empty("test queries"));
    }

    // UdCDR queries are seen classes, so its gallery is always those classes.
    let gallery_mode = if args.protocol == Protocol::Udcdr { GalleryMode::Unseen } else { args.gallery_mode };
    let gallery = to_ids(ids_where(manifest, |it| {
        it.domain == real
            && (in_set(query_classes, &it.class) || (gallery_mode == GalleryMode::Mixed && in_set(&part.train, &it.class)))
    }));
    if gallery.is_empty() {
        return Err(ProsError::Empty("gallery"));
    }

    let split = ProtocolSplit {
        protocol: args.protocol,
        held_out_domain: held_out,
        real_domain: real.to_string(),
        train_domains,
        query_domains: alloc::vec![query_domain],
        partition: part.clone(),
        gallery_mode,
        query_fraction,
        seed: args.seed,
        train,
        val_queries,
        val_gallery,
        test_queries,
        gallery,
    };
    let violations = check_leakage(manifest, &split);
    if let Some(v) = violations.first() {
        return Err(ProsError::Protocol(format!("split violates its protocol: {v}")));
    }
    Ok(split)
}

/// Every invariant breach of `split`, as readable messages. Empty when the
/// split is sound.
pub fn check_leakage(manifest: &DatasetManifest, split: &ProtocolSplit) -> Vec<String> {
    let idx = manifest.index();
    let mut out = Vec::new();
    let lookup = |id: &String, out: &mut Vec<String>| {
        let found = idx.get(id.as_str()).copied();
        if found.is_none() {
            out.push(format!("id '{id}' is not in the manifest"));
        }
        found
    };
    let train_ids: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let part = &split.partition;
    let train_classes: BTreeSet<&str> = part.train.iter().map(String::as_str).collect();
    let train_domains: BTreeSet<&str> = split.train_domains.iter().map(String::as_str).collect();

    if let Some(h) = &split.held_out_domain {
        if train_domains.contains(h.as_str()) {
            out.push(format!("held-out domain '{h}' is listed as a training domain"));
        }
    }
    for id in &split.train {
        if let Some(it) = lookup(id, &mut out) {
            if !train_classes.contains(it.class.as_str()) {
                out.push(format!("train item {id} has non-training class '{}'", it.class));
            }
            if !train_domains.contains(it.domain.as_str()) || split.held_out_domain.as_deref() == Some(it.domain.as_str()) {
                out.push(format!("train item {id} comes from excluded domain '{}'", it.domain));
            }
        }
    }
    for id in split.test_queries.iter().chain(&split.val_queries) {
        if train_ids.contains(id.as_str()) {
            out.push(format!("query {id} also appears in the training set"));
        }
    }
    for id in &split.test_queries {
        if let Some(it) = lookup(id, &mut out) {
            let class_seen = train_classes.contains(it.class.as_str());
            let domain_seen = train_domains.contains(it.domain.as_str());
            match split.protocol {
                Protocol::Ucdr => {
                    if class_seen {
                        out.push(format!("ucdr query {id} has training class '{}'", it.class));
                    }
                    if domain_seen {
                        out.push(format!("ucdr query {id} comes from training domain '{}'", it.domain));
                    }
                }
                Protocol::Uccdr => {
                    if class_seen {
                        out.push(format!("uccdr query {id} has training class '{}'", it.class));
                    }
                    if !domain_seen {
                        out.push(format!("uccdr query {id} comes from non-training domain '{}'", it.domain));
                    }
                }
                Protocol::Udcdr => {
                    if !class_seen {
                        out.push(format!("udcdr query {id} has unseen class '{}'", it.class));
                    }
                    if domain_seen {
                        out.push(format!("udcdr query {id} comes from training domain '{}'", it.domain));
                    }
                }
            }
        }
    }
    for id in &split.val_queries {
        if let Some(it) = lookup(id, &mut out) {
            if !part.val.contains(&it.class) {
                out.push(format!("validation query {id} has non-validation class '{}'", it.class));
            }
        }
    }
    let query_classes: BTreeSet<&str> = split.query_classes().iter().map(String::as_str).collect();
    for (what, ids) in [("gallery", &split.gallery), ("validation gallery", &split.val_gallery)] {
        for id in ids {
            if let Some(it) = lookup(id, &mut out) {
                if it.domain != split.real_domain {
                    out.push(format!("{what} item {id} comes from '{}', not the real domain", it.domain));
                }
            }
        }
    }
    for id in &split.gallery {
        if let Some(it) = idx.get(id.as_str()) {
            let ok = query_classes.contains(it.class.as_str())
                || (split.gallery_mode == GalleryMode::Mixed && train_classes.contains(it.class.as_str()));
            if !ok {
                out.push(format!("gallery item {id} has class '{}' outside the gallery mode", it.class));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(domains: &[&str], classes: usize, per: usize) -> DatasetManifest {
        let mut items = Vec::new();
        for d in domains {
            for c in 0..classes {
                for i in 0..per {
                    items.push(ManifestItem {
                        id: format!("{d}-c{c}-{i}"),
                        source: String::new(),
                        domain: d.to_string(),
                        class: format!("c{c}"),
                    });
                }
            }
        }
        DatasetManifest::new(items).unwrap()
    }

    fn args(m: &DatasetManifest, protocol: Protocol, held: Option<&str>) -> SplitArgs {
        SplitArgs {
            protocol,
            held_out_domain: held.map(String::from),
            query_domain: None,
            partition: ClassPartition::by_counts(&m.classes, 7, 2, 3).unwrap(),
            gallery_mode: GalleryMode::Unseen,
            query_fraction: None,
            val_fraction: 0.5,
            real_domain: "real".into(),
            seed: 1,
        }
    }

    const SIX: [&str; 6] = ["real", "sketch", "quickdraw", "infograph", "clipart", "painting"];

    #[test]
    fn holding_out_infograph_leaves_five_train_domains() {
        let m = manifest(&SIX, 12, 3);
        let s = build_split(&m, &args(&m, Protocol::Ucdr, Some("infograph"))).unwrap();
        assert_eq!(s.train_domains.len(), 5);
        assert!(!s.train_domains.iter().any(|d| d == "infograph"));
    }

    #[test]
    fn ucdr_classes_are_disjoint() {
        let m = manifest(&SIX, 12, 3);
        let s = build_split(&m, &args(&m, Protocol::Ucdr, Some("sketch"))).unwrap();
        let idx = m.index();
        for q in &s.test_queries {
            assert!(!s.partition.train.contains(&idx[q.as_str()].class));
        }
        assert!(check_leakage(&m, &s).is_empty());
    }

    #[test]
    fn mixed_gallery_adds_seen_real_items() {
        let m = manifest(&SIX, 12, 3);
        let mut a = args(&m, Protocol::Ucdr, Some("sketch"));
        let unseen = build_split(&m, &a).unwrap();
        a.gallery_mode = GalleryMode::Mixed;
        let mixed = build_split(&m, &a).unwrap();
        let seen_real = m.items.iter().filter(|it| it.domain == "real" && a.partition.train.contains(&it.class)).count();
        assert_eq!(mixed.gallery.len(), unseen.gallery.len() + seen_real);
        assert_eq!(mixed.unseen_gallery(&m).len(), unseen.gallery.len());
    }

    #[test]
    fn udcdr_subsamples_per_class() {
        let m = manifest(&SIX, 12, 20);
        let a = args(&m, Protocol::Udcdr, Some("quickdraw"));
        let s = build_split(&m, &a).unwrap();
        assert_eq!(s.query_fraction, 0.10);
        assert_eq!(s.test_queries.len(), 7 * 2);
        let s = build_split(&m, &args(&m, Protocol::Udcdr, Some("sketch"))).unwrap();
        assert_eq!(s.test_queries.len(), 7 * 5);
        assert!(check_leakage(&m, &s).is_empty());
    }

    #[test]
    fn uccdr_uses_a_training_domain() {
        let m = manifest(&SIX, 12, 3);
        let mut a = args(&m, Protocol::Uccdr, None);
        assert!(build_split(&m, &a).is_err());
        a.query_domain = Some("real".into());
        assert!(build_split(&m, &a).is_err());
        a.query_domain = Some("clipart".into());
        let s = build_split(&m, &a).unwrap();
        assert_eq!(s.train_domains.len(), 6);
        assert!(check_leakage(&m, &s).is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = manifest(&SIX, 12, 3);
        let mut a = args(&m, Protocol::Ucdr, Some("real"));
        assert!(build_split(&m, &a).is_err());
        a.held_out_domain = Some("nowhere".into());
        assert!(build_split(&m, &a).is_err());
        a.held_out_domain = Some("sketch".into());
        a.partition.val.push(a.partition.train[0].clone());
        assert!(build_split(&m, &a).is_err());
    }

    #[test]
    fn leakage_is_detected() {
        let m = manifest(&SIX, 12, 3);
        let mut s = build_split(&m, &args(&m, Protocol::Ucdr, Some("sketch"))).unwrap();
        s.train.push(s.test_queries[0].clone());
        assert!(!check_leakage(&m, &s).is_empty());
    }

    #[test]
    fn splits_are_reproducible() {
        let m = manifest(&SIX, 12, 8);
        let a = args(&m, Protocol::Udcdr, Some("painting"));
        assert_eq!(build_split(&m, &a).unwrap(), build_split(&m, &a).unwrap());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let it = ManifestItem { id: "a".into(), source: String::new(), domain: "real".into(), class: "x".into() };
        assert!(DatasetManifest::new(alloc::vec![it.clone(), it]).is_err());
    }
}
