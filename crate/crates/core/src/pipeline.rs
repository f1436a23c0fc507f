//! Run configuration and the file-level steps behind each CLI subcommand.
//!
//! Every step reads its inputs from the paths in [`RunConfig`] and writes
//! only below `output_dir`:
//!
//! ```text
//! output_dir/
//!   data/                 synthetic inputs (synth)
//!   runs/seed_<s>/        checkpoints, trace.json, silhouettes.csv (train)
//!   clusters/             assignments.jsonl, summary.json (cluster)
//!   reports/              metrics, names and frames reports (evaluate)
//!   report.csv            one row per run plus the ensemble (report)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::clusterer::{load_checkpoint, save_checkpoint, ClustererParams};
use crate::clustering::{
    affinity_propagation, agglomerative, decode_assignments, embedding_cosine_distance, encode_assignments,
    ensemble, manifold_weights, similarity_from_distance, AffinityConfig, AttentionVariant, Clustering,
    DistanceMatrix,
};
use crate::dataio::{
    load_dataset, load_frame_hierarchy, save_frame_hierarchy, CorpusKind, EmbeddingDataset, FrameHierarchy,
    NameCorpus, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    clustering_metrics, majority_types, purity_and_representation, rank_frames, rank_names, MetricReport,
    RankingReport, FRAME_HITS, METRIC_CSV_HEADER, NAME_HITS,
};
use crate::training::{checkpoint_name, head_distances, train, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub embeddings: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub augmented: Option<PathBuf>,
    pub names_embeddings: Option<PathBuf>,
    pub names_labels: Option<PathBuf>,
    pub frames_embeddings: Option<PathBuf>,
    pub frames_labels: Option<PathBuf>,
    /// `frame<TAB>definition` list for the hierarchy.
    pub frame_definitions: Option<PathBuf>,
    pub frame_edges: Option<PathBuf>,
    pub frame_mapping: Option<PathBuf>,
}

impl DataPaths {
    fn all_mut(&mut self) -> [&mut Option<PathBuf>; 10] {
        [
            &mut self.embeddings,
            &mut self.labels,
            &mut self.augmented,
            &mut self.names_embeddings,
            &mut self.names_labels,
            &mut self.frames_embeddings,
            &mut self.frames_labels,
            &mut self.frame_definitions,
            &mut self.frame_edges,
            &mut self.frame_mapping,
        ]
    }

    fn has_names(&self) -> bool {
        self.names_embeddings.is_some() && self.names_labels.is_some()
    }

    fn has_frames(&self) -> bool {
        self.frames_embeddings.is_some()
            && self.frames_labels.is_some()
            && self.frame_definitions.is_some()
            && self.frame_edges.is_some()
            && self.frame_mapping.is_some()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Agglomerative,
    Affinity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    AttnDot,
    AttnCosine,
    EmbeddingCosine,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub backend: Backend,
    pub distance: DistanceKind,
    /// Cluster count for agglomerative; the number of unseen gold types when
    /// absent. Must be absent for affinity propagation.
    pub k: Option<usize>,
    /// Pass distances through the manifold-weight transform first.
    pub manifold: bool,
    /// Neighbours for the manifold transform; all other points when absent.
    pub k_neighbors: Option<usize>,
    pub affinity: AffinityConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Training seeds, one run each; `[train.seed]` when empty.
    pub seeds: Vec<u64>,
    /// Optional run count, checked against `seeds`.
    pub runs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Use all descendants of mapped frames instead of direct children.
    pub expand_descendants: bool,
    /// Denominator for type representation; the unseen gold type count when
    /// absent.
    pub total_unseen_types: Option<usize>,
    pub name_hits: Vec<usize>,
    pub frame_hits: Vec<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            expand_descendants: false,
            total_unseen_types: None,
            name_hits: NAME_HITS.to_vec(),
            frame_hits: FRAME_HITS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
    pub ensemble: EnsembleConfig,
    pub evaluate: EvaluateConfig,
    pub synth: Option<SyntheticSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("output"),
            data: DataPaths::default(),
            train: TrainConfig::default(),
            cluster: ClusterConfig::default(),
            ensemble: EnsembleConfig::default(),
            evaluate: EvaluateConfig::default(),
            synth: None,
        }
    }
}

impl RunConfig {
    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        for p in self.data.all_mut().into_iter().flatten() {
            join(p);
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.ensemble.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.ensemble.seeds.clone()
        }
    }

    /// Checks cross-field consistency and that every configured input exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(runs) = self.ensemble.runs {
            if runs != self.seeds().len() {
                return Err(Error::Config(format!(
                    "ensemble.runs is {runs} but {} seeds are listed",
                    self.seeds().len()
                )));
            }
        }
        let c = &self.cluster;
        if c.backend == Backend::Affinity && c.k.is_some() {
            return Err(Error::Config("cluster.k is set but affinity propagation chooses k itself".into()));
        }
        if c.distance == DistanceKind::EmbeddingCosine && self.seeds().len() > 1 {
            return Err(Error::Config(
                "embedding_cosine distances do not depend on training runs; use a single seed".into(),
            ));
        }
        if c.k_neighbors.is_some() && !c.manifold {
            return Err(Error::Config("cluster.k_neighbors requires cluster.manifold = true".into()));
        }
        if let Some(k) = c.k_neighbors {
            if k < 2 {
                return Err(Error::Config(format!("cluster.k_neighbors must be at least 2, got {k}")));
            }
        }
        if c.k == Some(0) {
            return Err(Error::Config("cluster.k must be positive".into()));
        }
        let mut paths = self.data.clone();
        for p in paths.all_mut().into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("input path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.runs_dir().join(format!("seed_{seed}"))
    }

    pub fn clusters_dir(&self) -> PathBuf {
        self.output_dir.join("clusters")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    fn dataset(&self) -> Result<EmbeddingDataset> {
        let emb = required(&self.data.embeddings, "data.embeddings")?;
        let labels = required(&self.data.labels, "data.labels")?;
        load_dataset(emb, labels, self.data.augmented.as_deref())
    }

    fn names(&self) -> Result<Option<NameCorpus>> {
        if !self.data.has_names() {
            return Ok(None);
        }
        let (e, l) = (self.data.names_embeddings.as_ref(), self.data.names_labels.as_ref());
        NameCorpus::load(e.expect("checked"), l.expect("checked"), CorpusKind::TypeNames).map(Some)
    }

    fn frames(&self) -> Result<Option<(NameCorpus, FrameHierarchy)>> {
        if !self.data.has_frames() {
            return Ok(None);
        }
        let d = &self.data;
        let corpus = NameCorpus::load(
            d.frames_embeddings.as_deref().expect("checked"),
            d.frames_labels.as_deref().expect("checked"),
            CorpusKind::FrameDefinitions,
        )?;
        let h = load_frame_hierarchy(
            d.frame_definitions.as_deref().expect("checked"),
            d.frame_edges.as_deref().expect("checked"),
            d.frame_mapping.as_deref().expect("checked"),
        )?;
        Ok(Some((corpus, h)))
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is not configured")))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write(path, s)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("{} does not exist; run the earlier step first", path.display())),
        _ => Error::io(path, e),
    })
}

/// Files written by [`run_synth`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthOutputs {
    pub data: DataPaths,
}

/// Generates the synthetic dataset, name corpus and frame world from the
/// `[synth]` section into `output_dir/data`.
pub fn run_synth(cfg: &RunConfig) -> Result<SynthOutputs> {
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("the [synth] section is missing".into()))?;
    let dir = cfg.output_dir.join("data");
    create_dir(&dir)?;
    let p = |name: &str| dir.join(name);
    let ds = spec.generate()?;
    ds.save(&p("embeddings.emb"), &p("labels.jsonl"), Some(&p("augmented.emb")))?;
    spec.name_corpus()?.save(&p("names.emb"), &p("names.tsv"))?;
    let (frames, hierarchy, defs) = spec.frame_world()?;
    frames.save(&p("frames.emb"), &p("frames.tsv"))?;
    save_frame_hierarchy(
        &hierarchy,
        &defs,
        &p("frame_definitions.tsv"),
        &p("frame_edges.tsv"),
        &p("frame_mapping.tsv"),
    )?;
    Ok(SynthOutputs {
        data: DataPaths {
            embeddings: Some(p("embeddings.emb")),
            labels: Some(p("labels.jsonl")),
            augmented: Some(p("augmented.emb")),
            names_embeddings: Some(p("names.emb")),
            names_labels: Some(p("names.tsv")),
            frames_embeddings: Some(p("frames.emb")),
            frames_labels: Some(p("frames.tsv")),
            frame_definitions: Some(p("frame_definitions.tsv")),
            frame_edges: Some(p("frame_edges.tsv")),
            frame_mapping: Some(p("frame_mapping.tsv")),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub selected_epoch: usize,
    pub run_dir: PathBuf,
}

/// Trains one head per configured seed. Each run directory gets every epoch
/// checkpoint, `initial.evck`, `selected.evck`, `trace.json` and
/// `silhouettes.csv`.
pub fn run_train(cfg: &RunConfig) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let names = if cfg.train.lambda_aux > 0.0 { cfg.names()? } else { None };
    let mut out = Vec::new();
    for seed in cfg.seeds() {
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let result = train(&ds, &tc, names.as_ref())?;
        let dir = cfg.run_dir(seed);
        create_dir(&dir)?;
        for (e, p) in result.epoch_params.iter().enumerate() {
            save_checkpoint(&dir.join(checkpoint_name(e)), p)?;
        }
        save_checkpoint(&dir.join("initial.evck"), &result.initial)?;
        save_checkpoint(&dir.join("selected.evck"), result.selected())?;
        write_json(&dir.join("trace.json"), &result.trace)?;
        write(&dir.join("silhouettes.csv"), result.trace.silhouette_csv())?;
        log::info!("seed {seed}: selected epoch {}", result.trace.selected_epoch);
        out.push(TrainSummary {
            seed,
            selected_epoch: result.trace.selected_epoch,
            run_dir: dir,
        });
    }
    Ok(out)
}

fn unseen_matrix(ds: &EmbeddingDataset) -> Result<(Vec<usize>, Array2<f64>)> {
    let rows = ds.unseen_indices();
    if rows.len() < 2 {
        return Err(Error::Data("clustering needs at least two unseen rows".into()));
    }
    let x = ds.embeddings().select(Axis(0), &rows);
    Ok((rows, x))
}

fn run_distances(cfg: &RunConfig, x: &Array2<f64>, seeds: &[u64]) -> Result<DistanceMatrix> {
    let variant = match cfg.cluster.distance {
        DistanceKind::EmbeddingCosine => return embedding_cosine_distance(x.view()),
        DistanceKind::AttnDot => AttentionVariant::Dot,
        DistanceKind::AttnCosine => AttentionVariant::Cosine,
    };
    let mut all = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let params: ClustererParams = load_checkpoint(&cfg.run_dir(seed).join("selected.evck")).map_err(|e| match e {
            Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                Error::Config(format!("checkpoint {} does not exist; run train first", path.display()))
            }
            other => other,
        })?;
        all.push(head_distances(&params, x.view(), variant)?);
    }
    ensemble(&all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub backend: Backend,
    pub distance: DistanceKind,
    pub manifold: bool,
    pub runs: usize,
    pub k: usize,
    /// Affinity propagation only.
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
}

fn cluster_with(cfg: &RunConfig, ds: &EmbeddingDataset, x: &Array2<f64>, seeds: &[u64]) -> Result<(Clustering, ClusterSummary)> {
    let mut dist = run_distances(cfg, x, seeds)?;
    let c = &cfg.cluster;
    if c.manifold {
        dist = manifold_weights(&dist, c.k_neighbors.unwrap_or(dist.n()))?;
    }
    let mut summary = ClusterSummary {
        backend: c.backend,
        distance: c.distance,
        manifold: c.manifold,
        runs: seeds.len(),
        k: 0,
        converged: None,
        iterations: None,
    };
    let clustering = match c.backend {
        Backend::Agglomerative => {
            let k = match c.k {
                Some(k) => k,
                None => ds.unseen_gold_type_count(),
            };
            if k == 0 || k > dist.n() {
                return Err(Error::Config(format!(
                    "cannot form {k} clusters from {} unseen rows",
                    dist.n()
                )));
            }
            agglomerative(&dist, k)?
        }
        Backend::Affinity => {
            let r = affinity_propagation(similarity_from_distance(&dist).view(), &c.affinity)?;
            if !r.converged {
                log::warn!("affinity propagation did not converge in {} iterations", r.iterations);
            }
            summary.converged = Some(r.converged);
            summary.iterations = Some(r.iterations);
            r.clustering
        }
    };
    summary.k = clustering.k();
    Ok((clustering, summary))
}

/// Clusters the unseen rows and writes `clusters/assignments.jsonl` and
/// `clusters/summary.json`.
pub fn run_cluster(cfg: &RunConfig) -> Result<ClusterSummary> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let (rows, x) = unseen_matrix(&ds)?;
    let (clustering, summary) = cluster_with(cfg, &ds, &x, &cfg.seeds())?;
    let dir = cfg.clusters_dir();
    create_dir(&dir)?;
    write(&dir.join("assignments.jsonl"), encode_assignments(&rows, &clustering)?)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Clustering read back from `clusters/assignments.jsonl`, with gold ids.
struct Evaluated {
    x: Array2<f64>,
    gold: Vec<usize>,
    clustering: Clustering,
}

fn load_clustered(cfg: &RunConfig, ds: &EmbeddingDataset) -> Result<Evaluated> {
    let text = read_to_string(&cfg.clusters_dir().join("assignments.jsonl"))?;
    let (rows, clustering) = decode_assignments(&text)?;
    if let Some(&bad) = rows.iter().find(|&&r| r >= ds.len()) {
        return Err(Error::Data(format!("assignment row {bad} is outside the dataset")));
    }
    let gold = ds.gold().ids_for(&rows)?;
    Ok(Evaluated {
        x: ds.embeddings().select(Axis(0), &rows),
        gold,
        clustering,
    })
}

fn metrics_for(cfg: &RunConfig, ds: &EmbeddingDataset, gold: &[usize], clustering: &Clustering) -> Result<MetricReport> {
    let mut report = clustering_metrics(gold, clustering)?;
    let total = cfg
        .evaluate
        .total_unseen_types
        .unwrap_or_else(|| ds.unseen_gold_type_count());
    report.type_representation = purity_and_representation(gold, clustering, total)?.1;
    Ok(report)
}

fn majority_names(ds: &EmbeddingDataset, e: &Evaluated) -> Result<Vec<String>> {
    majority_types(&e.gold, &e.clustering)?
        .into_iter()
        .map(|(g, _)| {
            ds.gold()
                .name(g)
                .map(str::to_owned)
                .ok_or_else(|| Error::Data(format!("gold id {g} has no name")))
        })
        .collect()
}

fn write_ranking(dir: &Path, stem: &str, r: &RankingReport) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), r)?;
    write(&dir.join(format!("{stem}.csv")), r.to_csv())
}

/// Ranks the type-name corpus against each cluster centroid.
pub fn run_rank_names(cfg: &RunConfig) -> Result<RankingReport> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let corpus = cfg
        .names()?
        .ok_or_else(|| Error::Config("data.names_embeddings and data.names_labels are required".into()))?;
    let e = load_clustered(cfg, &ds)?;
    let report = rank_names(
        e.clustering.centroids(e.x.view())?.view(),
        &corpus,
        &majority_names(&ds, &e)?,
        &cfg.evaluate.name_hits,
    )?;
    create_dir(&cfg.reports_dir())?;
    write_ranking(&cfg.reports_dir(), "names", &report)?;
    Ok(report)
}

/// Ranks frame definitions against each cluster centroid.
pub fn run_rank_frames(cfg: &RunConfig) -> Result<RankingReport> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let (corpus, hierarchy) = cfg
        .frames()?
        .ok_or_else(|| Error::Config("all frame corpus and hierarchy paths are required".into()))?;
    let e = load_clustered(cfg, &ds)?;
    let report = rank_frames(
        e.clustering.centroids(e.x.view())?.view(),
        &corpus,
        &hierarchy,
        &majority_names(&ds, &e)?,
        cfg.evaluate.expand_descendants,
        &cfg.evaluate.frame_hits,
    )?;
    create_dir(&cfg.reports_dir())?;
    write_ranking(&cfg.reports_dir(), "frames", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationSummary {
    pub metrics: MetricReport,
    pub names: Option<RankingReport>,
    pub frames: Option<RankingReport>,
}

/// Scores the stored clustering; the rankings run when their corpora are
/// configured.
pub fn run_evaluate(cfg: &RunConfig) -> Result<EvaluationSummary> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let e = load_clustered(cfg, &ds)?;
    let metrics = metrics_for(cfg, &ds, &e.gold, &e.clustering)?;
    let dir = cfg.reports_dir();
    create_dir(&dir)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    write(&dir.join("metrics.csv"), metrics.to_csv())?;
    let names = if cfg.data.has_names() {
        Some(run_rank_names(cfg)?)
    } else {
        None
    };
    let frames = if cfg.data.has_frames() {
        Some(run_rank_frames(cfg)?)
    } else {
        None
    };
    Ok(EvaluationSummary { metrics, names, frames })
}

/// Re-clusters every trained run on its own, plus their ensemble when there
/// are several, and writes one metric row each to `report.csv`.
pub fn run_report(cfg: &RunConfig) -> Result<BTreeMap<String, MetricReport>> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let (rows, x) = unseen_matrix(&ds)?;
    let gold = ds.gold().ids_for(&rows)?;
    let seeds = cfg.seeds();
    let mut table = Vec::new();
    let mut groups: Vec<(String, Vec<u64>)> = seeds.iter().map(|&s| (format!("seed_{s}"), vec![s])).collect();
    if seeds.len() > 1 {
        groups.push(("ensemble".into(), seeds.clone()));
    }
    for (name, group) in groups {
        let (clustering, _) = cluster_with(cfg, &ds, &x, &group)?;
        table.push((name, metrics_for(cfg, &ds, &gold, &clustering)?));
    }
    let mut csv = format!("run,{METRIC_CSV_HEADER}\n");
    for (name, m) in &table {
        csv.push_str(&format!("{name},{}\n", m.csv_row()));
    }
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("report.csv"), csv)?;
    Ok(table.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_config(dir: &Path) -> RunConfig {
        let text = r#"
            output_dir = "out"
            [synth]
            seed = 5
            n_seen_types = 3
            n_unseen_types = 4
            per_type = 6
            d = 8
            noise_sigma = 0.05
            aug_sigma = 0.02
            [train]
            max_epochs = 2
            learning_rate = 0.001
        "#;
        RunConfig::from_toml(text, dir).unwrap()
    }

    fn with_data(mut cfg: RunConfig) -> RunConfig {
        cfg.data = run_synth(&cfg).unwrap().data;
        cfg
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = RunConfig::from_toml("output_dir = \"o\"\n[data]\nlabels = \"l.jsonl\"\n", Path::new("/base")).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/base/o"));
        assert_eq!(cfg.data.labels, Some(PathBuf::from("/base/l.jsonl")));
        assert!(matches!(RunConfig::from_toml("bogus = 1", Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let base = RunConfig::default();
        let mut c = base.clone();
        c.cluster.backend = Backend::Affinity;
        c.cluster.k = Some(3);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = base.clone();
        c.ensemble.seeds = vec![1, 2];
        c.ensemble.runs = Some(3);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = base.clone();
        c.data.embeddings = Some(PathBuf::from("/nonexistent/emb.emb"));
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("/nonexistent/emb.emb"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn full_pipeline_on_tiny_synthetic_set() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = with_data(synth_config(tmp.path()));
        let trained = run_train(&cfg).unwrap();
        assert_eq!(trained.len(), 1);
        assert!(cfg.run_dir(0).join("trace.json").exists());
        assert!(cfg.run_dir(0).join("epoch_001.evck").exists());
        let summary = run_cluster(&cfg).unwrap();
        assert_eq!(summary.k, 4);
        let eval = run_evaluate(&cfg).unwrap();
        assert_eq!(eval.metrics.n_clusters, 4);
        assert!(eval.names.is_some() && eval.frames.is_some());
        let csv = fs::read_to_string(cfg.reports_dir().join("metrics.csv")).unwrap();
        assert!(csv.starts_with(METRIC_CSV_HEADER));
        let report = run_report(&cfg).unwrap();
        assert!(report.contains_key("seed_0"));
    }

    #[test]
    fn perfect_embedding_clustering_reports_nmi_one() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = with_data(synth_config(tmp.path()));
        cfg.cluster.distance = DistanceKind::EmbeddingCosine;
        run_cluster(&cfg).unwrap();
        let eval = run_evaluate(&cfg).unwrap();
        assert_eq!(eval.metrics.geometric_nmi, 1.0);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(cfg.reports_dir().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(json["geometric_nmi"], 1.0);
    }

    #[test]
    fn missing_checkpoint_names_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = with_data(synth_config(tmp.path()));
        let err = run_cluster(&cfg).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("selected.evck")), "{err}");
    }
}
