//! Clustering quality against gold types, and the two retrieval tasks that
//! link clusters to type names and ontology frames.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::clustering::Clustering;
use crate::dataio::{FrameHierarchy, NameCorpus};
use crate::error::{Error, Result};
use crate::linalg::norm;

pub const NAME_HITS: [usize; 5] = [1, 3, 5, 10, 15];
pub const FRAME_HITS: [usize; 5] = [1, 5, 10, 50, 100];

pub const METRIC_CSV_HEADER: &str = "clusters,geometric_nmi,fowlkes_mallows,completeness,homogeneity,v_measure,ari,average_purity,type_representation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_clusters: usize,
    pub geometric_nmi: f64,
    pub fowlkes_mallows: f64,
    pub completeness: f64,
    pub homogeneity: f64,
    pub v_measure: f64,
    pub ari: f64,
    pub average_purity: f64,
    pub type_representation: f64,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n_clusters,
            self.geometric_nmi,
            self.fowlkes_mallows,
            self.completeness,
            self.homogeneity,
            self.v_measure,
            self.ari,
            self.average_purity,
            self.type_representation
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{METRIC_CSV_HEADER}\n{}\n", self.csv_row())
    }
}

/// Joint counts of gold type and predicted cluster.
struct Contingency {
    n: f64,
    /// (gold, cluster, count), sorted.
    cells: Vec<(usize, usize, f64)>,
    gold_sizes: Vec<f64>,
    cluster_sizes: Vec<f64>,
}

impl Contingency {
    fn new(gold: &[usize], predicted: &[usize]) -> Self {
        let (g, ng) = dense_ids(gold);
        let (p, np) = dense_ids(predicted);
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut gold_sizes = vec![0.0; ng];
        let mut cluster_sizes = vec![0.0; np];
        for (&a, &b) in g.iter().zip(&p) {
            *counts.entry((a, b)).or_default() += 1;
            gold_sizes[a] += 1.0;
            cluster_sizes[b] += 1.0;
        }
        Self {
            n: gold.len() as f64,
            cells: counts.into_iter().map(|((a, b), c)| (a, b, c as f64)).collect(),
            gold_sizes,
            cluster_sizes,
        }
    }
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

fn entropy(sizes: &[f64], n: f64) -> f64 {
    sizes
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| -(s / n) * (s / n).ln())
        .sum()
}

/// Partition agreement plus purity; `type_representation` here divides by
/// the number of distinct gold types present. Use
/// [`purity_and_representation`] to divide by another total.
pub fn clustering_metrics(gold: &[usize], predicted: &Clustering) -> Result<MetricReport> {
    let pred = predicted.assignment();
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold labels for {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.len() < 2 {
        return Err(Error::Contract("metrics need at least two samples".into()));
    }
    let t = Contingency::new(gold, pred);
    let n = t.n;

    let tp: f64 = t.cells.iter().map(|&(_, _, c)| pairs(c)).sum();
    let same_cluster: f64 = t.cluster_sizes.iter().map(|&c| pairs(c)).sum();
    let same_gold: f64 = t.gold_sizes.iter().map(|&c| pairs(c)).sum();
    let fowlkes_mallows = if tp == 0.0 {
        0.0
    } else {
        (tp / same_cluster).sqrt() * (tp / same_gold).sqrt()
    };

    let total = pairs(n);
    let expected = same_cluster * same_gold / total;
    let max_index = 0.5 * (same_cluster + same_gold);
    let ari = if max_index == expected {
        1.0
    } else {
        (tp - expected) / (max_index - expected)
    };

    let h_gold = entropy(&t.gold_sizes, n);
    let h_pred = entropy(&t.cluster_sizes, n);
    let mi: f64 = t
        .cells
        .iter()
        .map(|&(a, b, c)| (c / n) * ((c * n) / (t.gold_sizes[a] * t.cluster_sizes[b])).ln())
        .sum();
    let mi = mi.max(0.0);
    let homogeneity = if h_gold == 0.0 { 1.0 } else { (mi / h_gold).min(1.0) };
    let completeness = if h_pred == 0.0 { 1.0 } else { (mi / h_pred).min(1.0) };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    let geometric_nmi = match (h_gold == 0.0, h_pred == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => (mi / (h_gold * h_pred).sqrt()).min(1.0),
    };

    let distinct = gold.iter().collect::<BTreeSet<_>>().len();
    let (average_purity, type_representation) = purity_and_representation(gold, predicted, distinct)?;
    Ok(MetricReport {
        n_clusters: predicted.k(),
        geometric_nmi,
        fowlkes_mallows,
        completeness,
        homogeneity,
        v_measure,
        ari,
        average_purity,
        type_representation,
    })
}

fn dense_ids(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let v = ids
        .iter()
        .map(|&g| {
            let next = map.len();
            *map.entry(g).or_insert(next)
        })
        .collect();
    (v, map.len())
}

/// Most frequent gold id per cluster; ties go to the smaller id.
pub fn majority_types(gold: &[usize], predicted: &Clustering) -> Result<Vec<(usize, usize)>> {
    if gold.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "{} gold labels for {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![BTreeMap::<usize, usize>::new(); predicted.k()];
    for (&g, &c) in gold.iter().zip(predicted.assignment()) {
        *counts[c].entry(g).or_default() += 1;
    }
    Ok(counts
        .iter()
        .map(|m| {
            let mut best = (usize::MAX, 0);
            for (&g, &c) in m {
                if c > best.1 {
                    best = (g, c);
                }
            }
            best
        })
        .collect())
}

/// Macro-averaged purity and the share of `total_types` that are the
/// majority type of at least one cluster.
pub fn purity_and_representation(
    gold: &[usize],
    predicted: &Clustering,
    total_types: usize,
) -> Result<(f64, f64)> {
    if total_types == 0 {
        return Err(Error::Contract("total type count is zero".into()));
    }
    let majorities = majority_types(gold, predicted)?;
    let sizes = predicted.sizes();
    let purity = majorities
        .iter()
        .zip(&sizes)
        .map(|(&(_, count), &size)| count as f64 / size as f64)
        .sum::<f64>()
        / predicted.k() as f64;
    let represented: BTreeSet<usize> = majorities.iter().map(|&(g, _)| g).collect();
    Ok((purity, represented.len() as f64 / total_types as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    /// 1-based rank of the gold item for each cluster.
    pub ranks: Vec<usize>,
    pub mean_rank: f64,
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
}

impl RankingReport {
    pub fn from_ranks(ranks: Vec<usize>, hits_at: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Contract("no ranks to aggregate".into()));
        }
        if ranks.contains(&0) {
            return Err(Error::Contract("ranks are 1-based".into()));
        }
        let n = ranks.len() as f64;
        let mean_rank = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
        let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        let hits = hits_at
            .iter()
            .map(|&m| (m, ranks.iter().filter(|&&r| r <= m).count() as f64 / n))
            .collect();
        Ok(Self {
            ranks,
            mean_rank,
            mrr,
            hits,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut header = String::from("clusters,mean_rank,mrr");
        let mut row = format!("{},{},{}", self.ranks.len(), self.mean_rank, self.mrr);
        for (m, v) in &self.hits {
            header.push_str(&format!(",hits@{m}"));
            row.push_str(&format!(",{v}"));
        }
        format!("{header}\n{row}\n")
    }
}

/// Corpus positions sorted by descending cosine to `query`; equal scores
/// keep lexicographic label order.
pub fn rank_corpus(query: ArrayView1<'_, f64>, corpus: &NameCorpus) -> Result<Vec<usize>> {
    if query.len() != corpus.dim() {
        return Err(Error::Contract(format!(
            "query has {} dims, corpus {}",
            query.len(),
            corpus.dim()
        )));
    }
    let qn = norm(query);
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::numerics("ranking", "centroid has zero or non-finite norm"));
    }
    let mut scored = Vec::with_capacity(corpus.len());
    for (i, row) in corpus.embeddings().rows().into_iter().enumerate() {
        let rn = norm(row);
        if rn == 0.0 {
            return Err(Error::Data(format!("corpus entry {:?} has zero norm", corpus.labels()[i])));
        }
        scored.push((row.dot(&query) / (rn * qn), i));
    }
    let labels = corpus.labels();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| labels[a.1].cmp(&labels[b.1])));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

fn check_centroids(centroids: ArrayView2<'_, f64>, gold: &[String]) -> Result<()> {
    if centroids.nrows() != gold.len() {
        return Err(Error::Contract(format!(
            "{} centroids for {} gold labels",
            centroids.nrows(),
            gold.len()
        )));
    }
    Ok(())
}

/// Rank of each cluster's gold type name among all corpus names.
pub fn rank_names(
    centroids: ArrayView2<'_, f64>,
    corpus: &NameCorpus,
    gold: &[String],
    hits_at: &[usize],
) -> Result<RankingReport> {
    check_centroids(centroids, gold)?;
    let mut ranks = Vec::with_capacity(gold.len());
    for (row, label) in centroids.rows().into_iter().zip(gold) {
        let target = corpus
            .position(label)
            .ok_or_else(|| Error::Data(format!("gold label {label:?} is not in the name corpus")))?;
        let order = rank_corpus(row, corpus)?;
        ranks.push(order.iter().position(|&p| p == target).expect("every entry is ranked") + 1);
    }
    RankingReport::from_ranks(ranks, hits_at)
}

/// Frames accepted for `gold`: its mapped frames plus their direct children,
/// or all descendants when `expand_descendants` is set.
pub fn valid_frames(hierarchy: &FrameHierarchy, gold: &str, expand_descendants: bool) -> Result<BTreeSet<String>> {
    let mapped = hierarchy
        .mapped_frames(gold)
        .ok_or_else(|| Error::Data(format!("type {gold:?} has no frame mapping")))?;
    let mut valid = BTreeSet::new();
    for frame in mapped {
        valid.insert(frame.clone());
        if expand_descendants {
            valid.extend(hierarchy.descendants(frame));
        } else {
            valid.extend(hierarchy.children(frame).map(str::to_owned));
        }
    }
    Ok(valid)
}

/// Best rank among each cluster's valid frames.
pub fn rank_frames(
    centroids: ArrayView2<'_, f64>,
    frame_corpus: &NameCorpus,
    hierarchy: &FrameHierarchy,
    gold: &[String],
    expand_descendants: bool,
    hits_at: &[usize],
) -> Result<RankingReport> {
    check_centroids(centroids, gold)?;
    let mut ranks = Vec::with_capacity(gold.len());
    for (row, label) in centroids.rows().into_iter().zip(gold) {
        let valid: BTreeSet<usize> = valid_frames(hierarchy, label, expand_descendants)?
            .iter()
            .filter_map(|f| frame_corpus.position(f))
            .collect();
        if valid.is_empty() {
            return Err(Error::Data(format!(
                "no valid frame for {label:?} appears in the frame corpus"
            )));
        }
        let order = rank_corpus(row, frame_corpus)?;
        let best = order
            .iter()
            .position(|p| valid.contains(p))
            .expect("valid set is non-empty");
        ranks.push(best + 1);
    }
    RankingReport::from_ranks(ranks, hits_at)
}
