//! Open-set verification/identification and retrieval metrics over cosine
//! similarity.
//!
//! Thresholds are picked only from observed impostor (or non-mated) scores
//! and never interpolated. A score is accepted when it is `>=` the
//! threshold; when even the highest impostor score exceeds the allowed
//! false-accept budget, the operating point moves strictly above it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::centers::{exact_centers, weight_center_gap};
use crate::error::{Error, Result};
use crate::numerics::{cosine_angle, cosine_similarity, Matrix};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON Schema every [`EvalReport::to_json`] document conforms to.
pub const REPORT_SCHEMA: &str = include_str!("../schemas/eval_report.schema.json");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Cosine similarity of row `i` of `a` with row `i` of `b`.
pub fn score_pairs(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "score_pairs",
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    a.iter_rows().zip(b.iter_rows()).map(|(u, v)| cosine_similarity(u, v)).collect()
}

/// Every unordered pair of rows, split by label equality.
pub fn score_all_pairs(e: &Matrix, labels: &[usize]) -> Result<PairScores> {
    if labels.len() != e.rows() {
        return Err(Error::ShapeMismatch {
            context: "score_all_pairs",
            expected: format!("{} labels", e.rows()),
            got: format!("{}", labels.len()),
        });
    }
    let mut out = PairScores::default();
    for i in 0..e.rows() {
        for j in i + 1..e.rows() {
            let s = cosine_similarity(e.row(i), e.row(j))?;
            if labels[i] == labels[j] {
                out.genuine.push(s);
            } else {
                out.impostor.push(s);
            }
        }
    }
    Ok(out)
}

/// Acceptance rule at one FAR target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub far_target: f64,
    /// False-accept rate actually realized on the impostor set.
    pub far: f64,
    pub threshold: f64,
    /// `true`: accept `score >= threshold`; `false`: accept `score > threshold`.
    pub inclusive: bool,
    /// VR or DIR at this point.
    pub rate: f64,
}

impl OperatingPoint {
    #[inline]
    pub fn accepts(&self, score: f64) -> bool {
        if self.inclusive {
            score >= self.threshold
        } else {
            score > self.threshold
        }
    }
}

/// Smallest impostor score `t` with `#{s >= t} / N <= far`.
fn select_threshold(impostor: &[f64], far: f64) -> (f64, bool, f64) {
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let mut best = None;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i];
        // advance past ties: count of scores >= t
        let mut j = i;
        while j < sorted.len() && sorted[j] >= t {
            j += 1;
        }
        let rate = j as f64 / n;
        if rate <= far {
            best = Some((t, true, rate));
            i = j;
        } else {
            break;
        }
    }
    best.unwrap_or((sorted[0], false, 0.0))
}

fn check_targets(targets: &[f64]) -> Result<()> {
    for &t in targets {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("far_targets", format!("{t} is outside [0, 1]")));
        }
    }
    Ok(())
}

/// Verification rate at each FAR target.
pub fn vr_at_far(scores: &PairScores, far_targets: &[f64]) -> Result<Vec<OperatingPoint>> {
    if scores.impostor.is_empty() {
        return Err(Error::Empty("impostor scores"));
    }
    if scores.genuine.is_empty() {
        return Err(Error::Empty("genuine scores"));
    }
    check_targets(far_targets)?;
    Ok(far_targets
        .iter()
        .map(|&target| {
            let (threshold, inclusive, far) = select_threshold(&scores.impostor, target);
            let mut op = OperatingPoint {
                far_target: target,
                far,
                threshold,
                inclusive,
                rate: 0.0,
            };
            let hits = scores.genuine.iter().filter(|&&s| op.accepts(s)).count();
            op.rate = hits as f64 / scores.genuine.len() as f64;
            op
        })
        .collect())
}

/// Embeddings with identity labels.
#[derive(Debug, Clone, Copy)]
pub struct IdentitySet<'a> {
    pub embeddings: &'a Matrix,
    pub ids: &'a [usize],
}

impl<'a> IdentitySet<'a> {
    pub fn new(embeddings: &'a Matrix, ids: &'a [usize]) -> Result<Self> {
        if embeddings.rows() != ids.len() {
            return Err(Error::ShapeMismatch {
                context: "IdentitySet",
                expected: format!("{} ids", embeddings.rows()),
                got: format!("{}", ids.len()),
            });
        }
        Ok(Self { embeddings, ids })
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Similarities of every probe to every gallery entry.
fn similarity_table(gallery: &IdentitySet, probes: &IdentitySet) -> Result<Vec<Vec<f64>>> {
    if gallery.len() == 0 {
        return Err(Error::Empty("gallery"));
    }
    (0..probes.len())
        .map(|p| {
            (0..gallery.len())
                .map(|g| cosine_similarity(probes.embeddings.row(p), gallery.embeddings.row(g)))
                .collect()
        })
        .collect()
}

/// Gallery indices by descending similarity, ties by index. Equal values
/// (including 0.0 and -0.0) tie; similarities are finite.
fn ranking(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| {
        let by_sim = sims[b].partial_cmp(&sims[a]).unwrap_or(std::cmp::Ordering::Equal);
        by_sim.then(a.cmp(&b))
    });
    order
}

/// Open-set detection and identification rate at each FAR target.
///
/// Probes whose identity is absent from the gallery are non-mated; their
/// best similarities set the threshold. A mated probe counts when its best
/// match clears the threshold and carries the right identity.
pub fn dir_at_far(gallery: IdentitySet, probes: IdentitySet, far_targets: &[f64]) -> Result<Vec<OperatingPoint>> {
    check_targets(far_targets)?;
    let enrolled: BTreeSet<usize> = gallery.ids.iter().copied().collect();
    let table = similarity_table(&gallery, &probes)?;
    let mut non_mated = Vec::new();
    let mut mated = Vec::new();
    for (p, sims) in table.iter().enumerate() {
        let best = ranking(sims)[0];
        if enrolled.contains(&probes.ids[p]) {
            mated.push((sims[best], gallery.ids[best] == probes.ids[p]));
        } else {
            non_mated.push(sims[best]);
        }
    }
    if non_mated.is_empty() {
        return Err(Error::Empty("non-mated probes"));
    }
    if mated.is_empty() {
        return Err(Error::Empty("mated probes"));
    }
    Ok(far_targets
        .iter()
        .map(|&target| {
            let (threshold, inclusive, far) = select_threshold(&non_mated, target);
            let mut op = OperatingPoint {
                far_target: target,
                far,
                threshold,
                inclusive,
                rate: 0.0,
            };
            let hits = mated.iter().filter(|&&(s, ok)| ok && op.accepts(s)).count();
            op.rate = hits as f64 / mated.len() as f64;
            op
        })
        .collect())
}

fn require_mates(gallery: &IdentitySet, probes: &IdentitySet) -> Result<()> {
    if probes.len() == 0 {
        return Err(Error::Empty("probes"));
    }
    let enrolled: BTreeSet<usize> = gallery.ids.iter().copied().collect();
    if let Some(p) = (0..probes.len()).find(|&p| !enrolled.contains(&probes.ids[p])) {
        return Err(Error::invalid(
            "probes",
            format!("probe {p} (identity {}) has no gallery mate", probes.ids[p]),
        ));
    }
    Ok(())
}

/// Cumulative match curve: entry `r - 1` is the fraction of probes whose
/// identity appears within the top `r` gallery matches.
pub fn cmc(gallery: IdentitySet, probes: IdentitySet) -> Result<Vec<f64>> {
    require_mates(&gallery, &probes)?;
    let table = similarity_table(&gallery, &probes)?;
    let mut hits_at = vec![0usize; gallery.len()];
    for (p, sims) in table.iter().enumerate() {
        let first = ranking(sims)
            .iter()
            .position(|&g| gallery.ids[g] == probes.ids[p])
            .expect("mate exists");
        hits_at[first] += 1;
    }
    let total = probes.len() as f64;
    let mut acc = 0;
    Ok(hits_at
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / total
        })
        .collect())
}

/// Mean over probes of average precision across all gallery mates.
pub fn mean_average_precision(gallery: IdentitySet, probes: IdentitySet) -> Result<f64> {
    require_mates(&gallery, &probes)?;
    let table = similarity_table(&gallery, &probes)?;
    let mut total = 0.0;
    for (p, sims) in table.iter().enumerate() {
        let mut found = 0usize;
        let mut ap = 0.0;
        for (rank, &g) in ranking(sims).iter().enumerate() {
            if gallery.ids[g] == probes.ids[p] {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        total += ap / found as f64;
    }
    Ok(total / probes.len() as f64)
}

/// Angular compactness and separation of a labeled embedding set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    /// Largest pairwise angle within each class (classes with < 2 samples omitted).
    pub max_intra_angle: BTreeMap<usize, f64>,
    /// Smallest angle between two class centers.
    pub min_inter_angle: f64,
    /// Angle between each classifier row and its class's exact center.
    pub weight_center_gaps: BTreeMap<usize, f64>,
}

pub fn embedding_stats(e: &Matrix, labels: &[usize], classes: usize, rows: &Matrix) -> Result<EmbeddingStats> {
    let centers = exact_centers(e, labels, classes)?;
    let live: Vec<usize> = (0..classes).filter(|&k| !centers.is_degenerate(k)).collect();
    if live.len() < 2 {
        return Err(Error::invalid("labels", "need at least two classes with a center"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let unit: Vec<Vec<f64>> = e
        .iter_rows()
        .map(crate::numerics::l2_normalize)
        .collect::<Result<_>>()?;
    let mut max_intra = BTreeMap::new();
    for (&k, members) in &by_class {
        if members.len() < 2 {
            continue;
        }
        let mut worst: f64 = 0.0;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let c = crate::numerics::dot(&unit[i], &unit[j]).clamp(-1.0, 1.0);
                worst = worst.max(c.acos());
            }
        }
        max_intra.insert(k, worst);
    }
    let mut min_inter = f64::INFINITY;
    for (a, &i) in live.iter().enumerate() {
        for &j in &live[a + 1..] {
            min_inter = min_inter.min(cosine_angle(centers.centers().row(i), centers.centers().row(j))?);
        }
    }
    Ok(EmbeddingStats {
        max_intra_angle: max_intra,
        min_inter_angle: min_inter,
        weight_center_gaps: weight_center_gap(rows, &centers)?,
    })
}

/// Everything one evaluation emits, serialized as the run's report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub accuracy: f64,
    pub per_class_recall: BTreeMap<usize, f64>,
    pub vr_at_far: Vec<OperatingPoint>,
    pub dir_at_far: Vec<OperatingPoint>,
    /// Entry `r - 1` is the rank-`r` identification rate.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub max_intra_angle: BTreeMap<usize, f64>,
    pub min_inter_angle: f64,
    /// Classifier-row vs exact-center angle on the training embeddings.
    pub weight_center_gaps: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Fraction of correct predictions per class label present in `truth`.
pub fn per_class_recall(truth: &[usize], predicted: &[usize]) -> BTreeMap<usize, f64> {
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        let e = tally.entry(t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    tally.into_iter().map(|(k, (hit, n))| (k, hit as f64 / n as f64)).collect()
}
