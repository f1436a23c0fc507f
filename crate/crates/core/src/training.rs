//! The epoch loop, the optimizer and the unsupervised stopping rule.
//!
//! After every pass over the data the head is evaluated without dropout on
//! the unseen rows: their attention-dot distances are clustered with average
//! linkage and scored by silhouette. Training keeps the epoch picked by
//! [`select_stop_epoch`] over those scores.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clusterer::{backward_upstream, forward, init_params, project, ClustererConfig, ClustererParams, Weights};
use crate::clustering::{agglomerative, distance_from_attention, AttentionVariant, DistanceMatrix};
use crate::dataio::{rng_for, EmbeddingDataset, NameCorpus, TypeTag};
use crate::error::{Error, Result};
use crate::losses::{auxiliary_loss, combined_contrastive, AuxTargets};
use crate::supervision::build_labels;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub window_size: usize,
    /// Cluster count for the stopping silhouette; the number of unseen gold
    /// types when absent.
    pub n_clusters_for_stopping: Option<usize>,
    pub seed: u64,
    /// Weight of the auxiliary name loss; 0 disables it.
    pub lambda_aux: f64,
    pub dropout_rate: f64,
    pub depth: usize,
    pub stopping_distance: AttentionVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            max_epochs: 10,
            learning_rate: 1e-4,
            margin: 0.5,
            window_size: 5,
            n_clusters_for_stopping: None,
            seed: 0,
            lambda_aux: 0.0,
            dropout_rate: 0.1,
            depth: 1,
            stopping_distance: AttentionVariant::Dot,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.window_size == 0 {
            return bad("window_size must be positive".into());
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return bad(format!("margin {} outside (0, 1)", self.margin));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} is invalid", self.learning_rate));
        }
        if !(self.lambda_aux >= 0.0 && self.lambda_aux.is_finite()) {
            return bad(format!("lambda_aux {} is invalid", self.lambda_aux));
        }
        Ok(())
    }

    pub fn clusterer_config(&self, d: usize) -> ClustererConfig {
        ClustererConfig::new(d, self.dropout_rate).with_depth(self.depth)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut Weights, grads: &Weights) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let mut offset = 0;
        for (p, (_, g)) in params.slices_mut().into_iter().zip(grads.slices()) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            offset += p.len();
        }
    }
}

/// Mean silhouette over samples for a precomputed distance matrix.
/// Samples in singleton clusters score 0.
pub fn silhouette(dist: &DistanceMatrix, assignment: &[usize]) -> Result<f64> {
    let n = dist.n();
    if assignment.len() != n {
        return Err(Error::Contract(format!(
            "{} assignments for {n} samples",
            assignment.len()
        )));
    }
    let mut ids = HashMap::new();
    let dense: Vec<usize> = assignment
        .iter()
        .map(|a| {
            let next = ids.len();
            *ids.entry(*a).or_insert(next)
        })
        .collect();
    let k = ids.len();
    if k < 2 {
        return Err(Error::Undefined("silhouette needs at least two clusters".into()));
    }
    let mut sizes = vec![0usize; k];
    for &c in &dense {
        sizes[c] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = dense[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[dense[j]] += dist.get(i, j);
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Epoch chosen by sliding-window smoothing.
///
/// Windows span `min(window, len)` consecutive epochs; the one with the
/// highest average wins (earliest on ties), then its best raw score
/// (earliest on ties).
pub fn select_stop_epoch(scores: &[f64], window: usize) -> usize {
    if scores.is_empty() {
        return 0;
    }
    let averages = window_averages(scores, window);
    let w = window.clamp(1, scores.len());
    let mut start = 0;
    for (s, &avg) in averages.iter().enumerate() {
        if avg > averages[start] {
            start = s;
        }
    }
    let mut best = start;
    for e in start..start + w {
        if scores[e] > scores[best] {
            best = e;
        }
    }
    best
}

/// Average of each full window, indexed by its first epoch.
pub fn window_averages(scores: &[f64], window: usize) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let w = window.clamp(1, scores.len());
    scores.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub l_c: f64,
    pub l_a: f64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub active_pairs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossMeans,
    pub silhouette: f64,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Stopping silhouette of the untrained head.
    pub initial_silhouette: f64,
    pub epochs: Vec<EpochRecord>,
    pub window_size: usize,
    pub selected_epoch: usize,
    pub skipped_batches: usize,
}

impl TrainTrace {
    pub fn silhouettes(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.silhouette).collect()
    }

    /// `epoch,raw,windowed`; `windowed` is the average of the window that
    /// starts at the epoch, empty where no full window starts.
    pub fn silhouette_csv(&self) -> String {
        let scores = self.silhouettes();
        let avgs = window_averages(&scores, self.window_size);
        let mut out = String::from("epoch,raw,windowed\n");
        for (e, s) in scores.iter().enumerate() {
            match avgs.get(e) {
                Some(a) => writeln!(out, "{e},{s},{a}"),
                None => writeln!(out, "{e},{s},"),
            }
            .expect("writing to a String");
        }
        out
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.evck")
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: ClustererParams,
    /// Parameters after each epoch, rounded to checkpoint precision.
    pub epoch_params: Vec<ClustererParams>,
    pub trace: TrainTrace,
}

impl TrainOutcome {
    pub fn selected(&self) -> &ClustererParams {
        &self.epoch_params[self.trace.selected_epoch]
    }
}

/// Silhouette of the head's attention distances over `unseen`, clustered
/// into `k` groups by average linkage.
pub fn stopping_silhouette(
    params: &ClustererParams,
    unseen: ArrayView2<'_, f64>,
    k: usize,
    variant: AttentionVariant,
) -> Result<f64> {
    let dist = head_distances(params, unseen, variant)?;
    let clusters = agglomerative(&dist, k)?;
    silhouette(&dist, clusters.assignment())
}

/// Pairwise attention distances between rows of `x` under `params`.
pub fn head_distances(
    params: &ClustererParams,
    x: ArrayView2<'_, f64>,
    variant: AttentionVariant,
) -> Result<DistanceMatrix> {
    let (q, k) = project(params, x)?;
    distance_from_attention(q.view(), k.view(), variant)
}

fn select_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Trains the head on `dataset`. Deterministic for a given config.
pub fn train(dataset: &EmbeddingDataset, config: &TrainConfig, names: Option<&NameCorpus>) -> Result<TrainOutcome> {
    config.validate()?;
    let view = dataset.training_view();
    if view.embeddings.nrows() < 2 {
        return Err(Error::Data("training needs at least two rows".into()));
    }
    let aux_targets = match (config.lambda_aux > 0.0, names) {
        (true, Some(corpus)) => Some(AuxTargets::from_corpus(corpus, dataset.seen_type_names())?),
        (true, None) => {
            return Err(Error::Config("lambda_aux > 0 requires a name corpus".into()));
        }
        (false, _) => None,
    };

    let unseen_rows = dataset.unseen_indices();
    let k_stop = match config.n_clusters_for_stopping {
        Some(k) => k,
        None => dataset.unseen_gold_type_count(),
    };
    if k_stop < 2 || k_stop > unseen_rows.len() {
        return Err(Error::Config(format!(
            "stopping needs between 2 and {} clusters, got {k_stop}",
            unseen_rows.len()
        )));
    }
    let unseen = select_rows(view.embeddings, &unseen_rows);
    let stop_score = |p: &ClustererParams| stopping_silhouette(p, unseen.view(), k_stop, config.stopping_distance);

    let mut params = init_params(config.seed, config.clusterer_config(dataset.dim()))?;
    let initial = params.rounded_to_f32();
    let initial_silhouette = stop_score(&initial)?;
    log::info!("initial stopping silhouette {initial_silhouette:.4}");

    let mut adam = Adam::new(config.learning_rate, params.weights.len());
    let mut shuffle_rng = rng_for(config.seed, 20);
    let mut dropout_rng = rng_for(config.seed, 21);
    let mut order: Vec<usize> = (0..view.embeddings.nrows()).collect();
    let mut records = Vec::with_capacity(config.max_epochs);
    let mut epoch_params = Vec::with_capacity(config.max_epochs);
    let mut skipped = 0;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossMeans {
            l_c: 0.0,
            l_a: 0.0,
            total: 0.0,
            terms: BTreeMap::new(),
            active_pairs: 0.0,
        };
        let mut steps = 0usize;
        let epoch_batches = batches(&order, config.batch_size);
        for rows in &epoch_batches {
            let x = select_rows(view.embeddings, rows);
            let tags: Vec<TypeTag> = rows.iter().map(|&r| view.tags[r]).collect();
            let tensors = build_labels(&tags, view.seen_type_count)?;
            let fwd = forward(&params, x.view(), true, dropout_rng.random())?;
            let fwd_aug = match view.augmented {
                Some(aug) => Some(forward(&params, select_rows(aug, rows).view(), true, dropout_rng.random())?),
                None => None,
            };
            let mut outcome = match combined_contrastive(&fwd, fwd_aug.as_ref(), &tensors, config.margin) {
                Err(Error::DegenerateBatch) => {
                    skipped += 1;
                    continue;
                }
                other => other?,
            };
            let mut l_a = 0.0;
            if let Some(targets) = &aux_targets {
                let (value, grad) = auxiliary_loss(fwd.aux_out.view(), targets, &tags)?;
                l_a = value;
                outcome.upstream.aux_out += &(grad * config.lambda_aux);
            }
            let mut grads = backward_upstream(&params, &fwd, &outcome.upstream)?.weights;
            if let (Some(aug), Some(up)) = (&fwd_aug, &outcome.upstream_aug) {
                let extra = backward_upstream(&params, aug, up)?.weights;
                for (g, (_, e)) in grads.slices_mut().into_iter().zip(extra.slices()) {
                    g.iter_mut().zip(e).for_each(|(a, b)| *a += b);
                }
            }
            adam.step(&mut params.weights, &grads);
            if !params.weights.all_finite() {
                return Err(Error::numerics("optimizer", format!("non-finite parameter in epoch {epoch}")));
            }

            steps += 1;
            sums.l_c += outcome.l_c;
            sums.l_a += l_a;
            sums.total += outcome.l_c + config.lambda_aux * l_a;
            sums.active_pairs += outcome.active_pair_count as f64;
            for t in &outcome.terms {
                let key = serde_json::to_value(t.pair)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                *sums.terms.entry(key).or_default() += t.value;
            }
        }
        if steps == 0 {
            log::error!("every batch of epoch {epoch} was fully masked");
            return Err(Error::DegenerateBatch);
        }
        let s = steps as f64;
        let loss = LossMeans {
            l_c: sums.l_c / s,
            l_a: sums.l_a / s,
            total: sums.total / s,
            terms: sums.terms.into_iter().map(|(k, v)| (k, v / s)).collect(),
            active_pairs: sums.active_pairs / s,
        };
        let snapshot = params.rounded_to_f32();
        let score = stop_score(&snapshot)?;
        log::info!("epoch {epoch}: loss {:.5}, silhouette {score:.4}", loss.total);
        records.push(EpochRecord {
            epoch,
            loss,
            silhouette: score,
            checkpoint: checkpoint_name(epoch),
        });
        epoch_params.push(snapshot);
    }

    let scores: Vec<f64> = records.iter().map(|r| r.silhouette).collect();
    let selected_epoch = select_stop_epoch(&scores, config.window_size);
    Ok(TrainOutcome {
        initial,
        epoch_params,
        trace: TrainTrace {
            initial_silhouette,
            epochs: records,
            window_size: config.window_size,
            selected_epoch,
            skipped_batches: skipped,
        },
    })
}
