//! Feature extraction, cosine ranking and retrieval metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ProsError, Result};
use crate::model::{FeatureMode, ProsModel};
use crate::tensor::{dot, euclidean, norm, Matrix};

/// A labelled image to embed.
#[derive(Clone, Copy, Debug)]
pub struct EvalImage<'a> {
    pub id: &'a str,
    pub image: &'a Matrix,
    pub class: &'a str,
    pub domain: &'a str,
}

/// Unit-normalized vectors with parallel id, class and domain labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingGallery {
    pub dim: usize,
    pub ids: Vec<String>,
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

pub const NORM_TOLERANCE: f64 = 1e-6;

impl EmbeddingGallery {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Adds `vector` after unit-normalizing it.
    pub fn push(&mut self, id: &str, class: &str, domain: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(ProsError::Shape { what: "embedding width", expected: self.dim, actual: vector.len() });
        }
        let n = norm(vector);
        if !n.is_finite() || !vector.iter().all(|v| v.is_finite()) {
            return Err(ProsError::NonFinite { component: "embedding", layer: 0 });
        }
        if n == 0.0 {
            return Err(ProsError::Precondition(alloc::format!("embedding for '{id}' is the zero vector")));
        }
        if self.ids.iter().any(|x| x == id) {
            return Err(ProsError::Duplicate { what: "gallery id", name: id.into() });
        }
        self.ids.push(id.into());
        self.classes.push(class.into());
        self.domains.push(domain.into());
        self.vectors.push(vector.iter().map(|v| v / n).collect());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.classes.len() != n || self.domains.len() != n || self.vectors.len() != n {
            return Err(ProsError::Precondition("embedding gallery arrays differ in length".into()));
        }
        let unique: BTreeSet<&str> = self.ids.iter().map(String::as_str).collect();
        if unique.len() != n {
            return Err(ProsError::Precondition("embedding gallery ids are not unique".into()));
        }
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            if v.len() != self.dim {
                return Err(ProsError::Shape { what: "embedding width", expected: self.dim, actual: v.len() });
            }
            if (norm(v) - 1.0).abs() > NORM_TOLERANCE {
                return Err(ProsError::Precondition(alloc::format!("embedding '{id}' is not unit-norm")));
            }
        }
        Ok(())
    }

    /// The entries whose ids are in `keep`, in gallery order.
    pub fn subset(&self, keep: &BTreeSet<&str>) -> Self {
        let mut out = Self::new(self.dim);
        for i in 0..self.len() {
            if keep.contains(self.ids[i].as_str()) {
                out.ids.push(self.ids[i].clone());
                out.classes.push(self.classes[i].clone());
                out.domains.push(self.domains[i].clone());
                out.vectors.push(self.vectors[i].clone());
            }
        }
        out
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Features of `items` under `mode`, one gallery entry each.
pub fn extract_features(model: &ProsModel, items: &[EvalImage<'_>], mode: FeatureMode) -> Result<EmbeddingGallery> {
    let mut g = EmbeddingGallery::new(model.backbone.config().proj_dim);
    for it in items {
        let f = model.image_feature(it.image, mode)?;
        g.push(it.id, it.class, it.domain, &f)?;
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub query_class: String,
    /// Gallery ids by descending score, ties by ascending id.
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Whether each ranked item shares the query's class.
    pub relevance: Vec<bool>,
    /// Relevant items in the whole gallery.
    pub num_relevant: usize,
}

/// Ranks the whole gallery against a unit-norm query.
pub fn rank(query_id: &str, query_class: &str, query: &[f64], gallery: &EmbeddingGallery) -> Result<RankedResult> {
    if gallery.is_empty() {
        return Err(ProsError::Empty("gallery"));
    }
    if query.len() != gallery.dim {
        return Err(ProsError::Shape { what: "query width", expected: gallery.dim, actual: query.len() });
    }
    let mut order: Vec<(f64, usize)> = gallery.vectors.iter().enumerate().map(|(i, v)| (dot(query, v), i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| gallery.ids[a.1].cmp(&gallery.ids[b.1])));
    let relevance: Vec<bool> = order.iter().map(|&(_, i)| gallery.classes[i] == query_class).collect();
    let num_relevant = relevance.iter().filter(|r| **r).count();
    Ok(RankedResult {
        query_id: query_id.into(),
        query_class: query_class.into(),
        ids: order.iter().map(|&(_, i)| gallery.ids[i].clone()).collect(),
        scores: order.iter().map(|&(s, _)| s).collect(),
        relevance,
        num_relevant,
    })
}

pub fn rank_all(queries: &EmbeddingGallery, gallery: &EmbeddingGallery) -> Result<Vec<RankedResult>> {
    (0..queries.len()).map(|i| rank(&queries.ids[i], &queries.classes[i], &queries.vectors[i], gallery)).collect()
}

/// A metric averaged over queries, with bookkeeping about what was skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    /// Queries contributing to the mean.
    pub evaluated: usize,
    /// Queries dropped because no gallery item shares their class.
    pub excluded: usize,
    /// Cut-off actually used (clipped to the gallery size).
    pub k: usize,
    pub clipped: bool,
}

/// Truncated AP: `(1/min(R,k)) Σ_{i≤k} rel_i · Prec@i`.
pub fn average_precision(relevance: &[bool], num_relevant: usize, k: usize) -> f64 {
    if num_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().take(k).enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / num_relevant.min(k) as f64
}

fn check_results(results: &[RankedResult], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(ProsError::InvalidConfig("k must be at least 1".into()));
    }
    let first = results.first().ok_or(ProsError::Empty("ranked results"))?;
    Ok(first.ids.len())
}

pub fn map_at_k(results: &[RankedResult], k: usize) -> Result<MetricValue> {
    let gallery = check_results(results, k)?;
    let k_eff = k.min(gallery);
    let mut sum = 0.0;
    let mut evaluated = 0;
    for r in results {
        if r.num_relevant == 0 {
            continue;
        }
        sum += average_precision(&r.relevance, r.num_relevant, k_eff);
        evaluated += 1;
    }
    let excluded = results.len() - evaluated;
    let value = if evaluated == 0 { 0.0 } else { sum / evaluated as f64 };
    Ok(MetricValue { value, evaluated, excluded, k: k_eff, clipped: k_eff < k })
}

pub fn prec_at_k(results: &[RankedResult], k: usize) -> Result<MetricValue> {
    let gallery = check_results(results, k)?;
    let k_eff = k.min(gallery);
    let sum: f64 = results
        .iter()
        .map(|r| r.relevance.iter().take(k_eff).filter(|x| **x).count() as f64 / k_eff as f64)
        .sum();
    Ok(MetricValue { value: sum / results.len() as f64, evaluated: results.len(), excluded: 0, k: k_eff, clipped: k_eff < k })
}

/// AP over the full ranking, averaged over queries.
pub fn map_all(results: &[RankedResult]) -> Result<MetricValue> {
    let gallery = check_results(results, 1)?;
    let mut m = map_at_k(results, gallery)?;
    m.clipped = false;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    /// `max D_intra / min D_inter`; infinite when two classes share a point.
    pub sigma: f64,
    pub max_intra: f64,
    pub min_inter: f64,
    /// Classes with a single sample, left out of the intra-class term.
    pub singleton_classes: Vec<String>,
}

impl SigmaReport {
    pub fn is_infinite(&self) -> bool {
        self.sigma.is_infinite()
    }
}

/// Spread-to-separation ratio of labelled vectors, with Euclidean distance.
pub fn sigma_diagnostic(vectors: &[Vec<f64>], labels: &[String]) -> Result<SigmaReport> {
    if vectors.len() != labels.len() {
        return Err(ProsError::Shape { what: "sigma labels", expected: vectors.len(), actual: labels.len() });
    }
    let mut groups: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for (v, l) in vectors.iter().zip(labels) {
        groups.entry(l.as_str()).or_default().push(v);
    }
    if groups.len() < 2 {
        return Err(ProsError::Precondition("sigma needs at least 2 classes".into()));
    }
    let singleton_classes: Vec<String> =
        groups.iter().filter(|(_, g)| g.len() < 2).map(|(c, _)| String::from(*c)).collect();
    if singleton_classes.len() == groups.len() {
        return Err(ProsError::Precondition("sigma needs a class with at least 2 samples".into()));
    }
    let mut max_intra: f64 = 0.0;
    for g in groups.values() {
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                max_intra = max_intra.max(euclidean(g[i], g[j]));
            }
        }
    }
    let groups: Vec<&Vec<&[f64]>> = groups.values().collect();
    let mut min_inter = f64::INFINITY;
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            for x in groups[a] {
                for y in groups[b] {
                    min_inter = min_inter.min(euclidean(x, y));
                }
            }
        }
    }
    let sigma = if min_inter == 0.0 { f64::INFINITY } else { max_intra / min_inter };
    Ok(SigmaReport { sigma, max_intra, min_inter, singleton_classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn gallery(vs: &[(&str, &str, [f64; 2])]) -> EmbeddingGallery {
        let mut g = EmbeddingGallery::new(2);
        for (id, c, v) in vs {
            g.push(id, c, "real", v).unwrap();
        }
        g
    }

    fn result(rel: &[bool], num_relevant: usize) -> RankedResult {
        RankedResult {
            query_id: "q".into(),
            query_class: "a".into(),
            ids: (0..rel.len()).map(|i| format!("g{i}")).collect(),
            scores: vec![0.0; rel.len()],
            relevance: rel.to_vec(),
            num_relevant,
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, true], 3, 3), 1.0);
        let ap = average_precision(&[true, false, true], 2, 3);
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false, false], 1, 3), 0.0);
    }

    #[test]
    fn map_all_of_two() {
        let m = map_all(&[result(&[false, true], 1)]).unwrap();
        assert_eq!(m.value, 0.5);
        let r = [result(&[true, false, true, false], 2)];
        assert_eq!(map_all(&r).unwrap().value, map_at_k(&r, 4).unwrap().value);
    }

    #[test]
    fn prec_examples() {
        let r = [result(&[true, false, true], 2)];
        assert!((prec_at_k(&r, 3).unwrap().value - 2.0 / 3.0).abs() < 1e-12);
        let p = prec_at_k(&[result(&[true, true], 2)], 5).unwrap();
        assert_eq!(p.value, 1.0);
        assert!(p.clipped);
        assert_eq!(p.k, 2);
    }

    #[test]
    fn zero_relevant_queries_are_excluded() {
        let m = map_at_k(&[result(&[true, false], 1), result(&[false, false], 0)], 2).unwrap();
        assert_eq!(m.value, 1.0);
        assert_eq!(m.excluded, 1);
        assert_eq!(m.evaluated, 1);
    }

    #[test]
    fn self_query_ranks_first() {
        let g = gallery(&[("a", "x", [1.0, 0.0]), ("b", "y", [0.0, 1.0]), ("c", "x", [1.0, 1.0])]);
        let r = rank("q", "y", &g.vectors[1], &g).unwrap();
        assert_eq!(r.ids[0], "b");
        assert!((r.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn known_angles_order() {
        // Gallery at 0°, 60° and 100°; a query at 20° sees cosines
        // cos 20° > cos 40° > cos 80°.
        let at = |deg: f64| {
            let r = deg.to_radians();
            [libm::cos(r), libm::sin(r)]
        };
        let g = gallery(&[("p0", "x", at(0.0)), ("p60", "x", at(60.0)), ("p100", "x", at(100.0))]);
        let q = at(20.0);
        let r = rank("q", "x", &q, &g).unwrap();
        assert_eq!(r.ids, ["p0", "p60", "p100"]);
        assert!((r.scores[1] - libm::cos(40f64.to_radians())).abs() < 1e-12);
        let neg: Vec<f64> = q.iter().map(|v| -v).collect();
        assert_eq!(rank("q", "x", &neg, &g).unwrap().ids, ["p100", "p60", "p0"]);
    }

    #[test]
    fn ties_break_by_id() {
        let g = gallery(&[("z", "x", [1.0, 0.0]), ("a", "x", [1.0, 0.0]), ("m", "x", [1.0, 0.0])]);
        assert_eq!(rank("q", "x", &[1.0, 0.0], &g).unwrap().ids, ["a", "m", "z"]);
    }

    #[test]
    fn empty_gallery_rejected() {
        assert!(rank("q", "x", &[1.0, 0.0], &EmbeddingGallery::new(2)).is_err());
    }

    #[test]
    fn push_normalizes_and_rejects_duplicates() {
        let mut g = EmbeddingGallery::new(2);
        g.push("a", "x", "real", &[3.0, 4.0]).unwrap();
        assert!((norm(&g.vectors[0]) - 1.0).abs() < 1e-12);
        assert!(g.push("a", "x", "real", &[1.0, 0.0]).is_err());
        assert!(g.push("b", "x", "real", &[0.0, 0.0]).is_err());
        assert!(g.validate().is_ok());
    }

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| String::from(*s)).collect()
    }

    #[test]
    fn sigma_examples() {
        let s = sigma_diagnostic(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]], &labels(&["a", "a", "b", "b"]))
            .unwrap();
        assert_eq!(s.sigma, 0.0);

        // Spread 0.5 inside each class, nearest cross pair 1.0 apart.
        let pts = [vec![0.0, 0.0], vec![0.0, 0.5], vec![1.0, 0.0], vec![1.0, 0.5]];
        let s = sigma_diagnostic(&pts, &labels(&["a", "a", "b", "b"])).unwrap();
        assert!((s.sigma - 0.5).abs() < 1e-12);

        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * 3.7).collect()).collect();
        let t = sigma_diagnostic(&scaled, &labels(&["a", "a", "b", "b"])).unwrap();
        assert!((t.sigma - s.sigma).abs() < 1e-12);
    }

    #[test]
    fn sigma_edge_cases() {
        let s = sigma_diagnostic(&[vec![0.0], vec![1.0], vec![0.0]], &labels(&["a", "a", "b"])).unwrap();
        assert!(s.is_infinite());
        assert_eq!(s.singleton_classes, ["b"]);
        assert!(sigma_diagnostic(&[vec![0.0], vec![1.0]], &labels(&["a", "b"])).is_err());
        assert!(sigma_diagnostic(&[vec![0.0], vec![1.0]], &labels(&["a", "a"])).is_err());
    }
}
