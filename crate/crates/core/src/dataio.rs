//! On-disk formats and the in-memory dataset model.
//!
//! Embedding matrices use the `EMB1` layout: the four magic bytes `EMB1`,
//! then little-endian `u32` row count and `u32` column count, then
//! `rows * cols` little-endian `f32` values in row-major order. Everything is
//! widened to `f64` in memory; writing narrows back, so a load/save cycle is
//! byte-identical.
//!
//! Per-row labels live in a JSONL file, one object per row:
//!
//! ```text
//! {"idx": 0, "role": "seen", "type": "Attack", "gold_type": "Attack"}
//! {"idx": 1, "role": "unseen", "gold_type": "Injure"}
//! ```
//!
//! Seen type strings are interned to dense ids in order of first appearance;
//! gold type strings get their own interning table. Gold labels are kept in
//! a separate [`GoldLabels`] value that the training path never receives.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Default embedding width (MiniLM-style sentence encoders).
pub const DEFAULT_DIM: usize = 384;

/// Encode a matrix as EMB1 bytes.
pub fn encode_matrix(m: ArrayView2<'_, f64>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(12 + rows * cols * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decode EMB1 bytes. Checks the header and payload length but not finiteness.
pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 12 || &bytes[..4] != EMB_MAGIC {
        return Err(Error::Format("missing EMB1 header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("EMB1 header overflows".into()))?;
    let payload = &bytes[12..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "EMB1 payload is {} bytes, header {rows}x{cols} needs {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_matrix(path: &Path, m: ArrayView2<'_, f64>) -> Result<()> {
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

fn check_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let cols = m.ncols().max(1);
        return Err(Error::Data(format!(
            "{what} has a non-finite value at row {}, column {}",
            pos / cols,
            pos % cols
        )));
    }
    Ok(())
}

/// Training-visible label of one row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TypeTag {
    /// Annotated row with a dense seen-type id.
    Seen(usize),
    /// Row whose type is to be discovered.
    Unseen,
}

impl TypeTag {
    pub fn is_seen(&self) -> bool {
        matches!(self, TypeTag::Seen(_))
    }

    pub fn seen_id(&self) -> Option<usize> {
        match self {
            TypeTag::Seen(id) => Some(*id),
            TypeTag::Unseen => None,
        }
    }
}

/// Gold types, reserved for evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoldLabels {
    ids: Vec<Option<usize>>,
    names: Vec<String>,
}

impl GoldLabels {
    pub fn new(ids: Vec<Option<usize>>, names: Vec<String>) -> Self {
        Self { ids, names }
    }

    pub fn id(&self, row: usize) -> Option<usize> {
        self.ids.get(row).copied().flatten()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Gold ids for the given rows; fails on the first row without one.
    pub fn ids_for(&self, rows: &[usize]) -> Result<Vec<usize>> {
        rows.iter()
            .map(|&r| {
                self.id(r)
                    .ok_or_else(|| Error::Data(format!("row {r} has no gold type")))
            })
            .collect()
    }
}

/// What `training` is allowed to see of a dataset.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    pub embeddings: &'a Array2<f64>,
    pub augmented: Option<&'a Array2<f64>>,
    pub tags: &'a [TypeTag],
    pub seen_type_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    embeddings: Array2<f64>,
    augmented: Option<Array2<f64>>,
    tags: Vec<TypeTag>,
    seen_type_names: Vec<String>,
    gold: GoldLabels,
}

impl EmbeddingDataset {
    /// Validates and assembles a dataset.
    pub fn new(
        embeddings: Array2<f64>,
        augmented: Option<Array2<f64>>,
        tags: Vec<TypeTag>,
        seen_type_names: Vec<String>,
        gold: GoldLabels,
    ) -> Result<Self> {
        let (n, d) = embeddings.dim();
        if n == 0 || d == 0 {
            return Err(Error::Data(format!("dataset must be non-empty, got {n}x{d}")));
        }
        if tags.len() != n {
            return Err(Error::Format(format!(
                "{} labels for {n} embedding rows",
                tags.len()
            )));
        }
        check_finite(&embeddings, "embeddings")?;
        if let Some(aug) = &augmented {
            if aug.dim() != (n, d) {
                return Err(Error::Format(format!(
                    "augmented matrix is {:?}, embeddings are {n}x{d}",
                    aug.dim()
                )));
            }
            check_finite(aug, "augmented embeddings")?;
        }
        for (row, tag) in tags.iter().enumerate() {
            if let TypeTag::Seen(id) = tag {
                if *id >= seen_type_names.len() {
                    return Err(Error::Data(format!(
                        "row {row} has seen type id {id} but only {} seen types are named",
                        seen_type_names.len()
                    )));
                }
            }
        }
        Ok(Self {
            embeddings,
            augmented,
            tags,
            seen_type_names,
            gold,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn augmented(&self) -> Option<&Array2<f64>> {
        self.augmented.as_ref()
    }

    pub fn tags(&self) -> &[TypeTag] {
        &self.tags
    }

    pub fn seen_type_names(&self) -> &[String] {
        &self.seen_type_names
    }

    pub fn seen_type_count(&self) -> usize {
        self.seen_type_names.len()
    }

    pub fn gold(&self) -> &GoldLabels {
        &self.gold
    }

    /// Row indices tagged unseen, ascending.
    pub fn unseen_indices(&self) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_seen())
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of distinct gold types among unseen rows.
    pub fn unseen_gold_type_count(&self) -> usize {
        self.unseen_indices()
            .iter()
            .filter_map(|&r| self.gold.id(r))
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            embeddings: &self.embeddings,
            augmented: self.augmented.as_ref(),
            tags: &self.tags,
            seen_type_count: self.seen_type_names.len(),
        }
    }

    /// Writes the EMB1 matrices and labels JSONL.
    pub fn save(&self, embeddings: &Path, labels: &Path, augmented: Option<&Path>) -> Result<()> {
        write_matrix(embeddings, self.embeddings.view())?;
        if let (Some(path), Some(aug)) = (augmented, &self.augmented) {
            write_matrix(path, aug.view())?;
        }
        let mut out = String::new();
        for (idx, tag) in self.tags.iter().enumerate() {
            let record = LabelRecord {
                idx,
                role: if tag.is_seen() { Role::Seen } else { Role::Unseen },
                type_label: tag.seen_id().map(|id| self.seen_type_names[id].clone()),
                gold_type: self
                    .gold
                    .id(idx)
                    .and_then(|g| self.gold.name(g))
                    .map(str::to_owned),
            };
            out.push_str(&serde_json::to_string(&record).expect("label record serializes"));
            out.push('\n');
        }
        fs::write(labels, out).map_err(|e| Error::io(labels, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Seen,
    Unseen,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRecord {
    idx: usize,
    role: Role,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    type_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_type: Option<String>,
}

#[derive(Default)]
struct Interner {
    ids: HashMap<String, usize>,
    names: Vec<String>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.names.len();
        self.ids.insert(label.to_owned(), id);
        self.names.push(label.to_owned());
        id
    }
}

/// Parsed labels file: tags, seen-type vocabulary, gold labels.
fn parse_labels(text: &str, n_rows: usize) -> Result<(Vec<TypeTag>, Vec<String>, GoldLabels)> {
    let mut records: Vec<Option<LabelRecord>> = (0..n_rows).map(|_| None).collect();
    let mut count = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("labels line {}: {e}", line_no + 1)))?;
        count += 1;
        if rec.idx >= n_rows {
            return Err(Error::Format(format!(
                "label idx {} out of range for {n_rows} embedding rows",
                rec.idx
            )));
        }
        let slot = &mut records[rec.idx];
        if slot.is_some() {
            return Err(Error::Format(format!("duplicate label idx {}", rec.idx)));
        }
        *slot = Some(rec);
    }
    if count != n_rows {
        return Err(Error::Format(format!(
            "{count} label records for {n_rows} embedding rows"
        )));
    }

    let mut seen = Interner::default();
    let mut gold = Interner::default();
    let mut tags = Vec::with_capacity(n_rows);
    let mut gold_ids = Vec::with_capacity(n_rows);
    for (row, rec) in records.into_iter().enumerate() {
        let rec = rec.expect("every slot filled when counts match");
        let tag = match (rec.role, &rec.type_label) {
            (Role::Seen, Some(label)) => TypeTag::Seen(seen.intern(label)),
            (Role::Seen, None) => {
                return Err(Error::Data(format!("seen row {row} has no type")));
            }
            (Role::Unseen, Some(_)) => {
                return Err(Error::Data(format!(
                    "unseen row {row} carries a training type; use gold_type"
                )));
            }
            (Role::Unseen, None) => TypeTag::Unseen,
        };
        tags.push(tag);
        gold_ids.push(rec.gold_type.as_deref().map(|g| gold.intern(g)));
    }
    Ok((tags, seen.names, GoldLabels::new(gold_ids, gold.names)))
}

/// Loads and validates a dataset from EMB1 + JSONL files.
pub fn load_dataset(
    embeddings_path: &Path,
    labels_path: &Path,
    augmented_path: Option<&Path>,
) -> Result<EmbeddingDataset> {
    let embeddings = read_matrix(embeddings_path)?;
    let augmented = augmented_path.map(read_matrix).transpose()?;
    if let Some(aug) = &augmented {
        if aug.dim() != embeddings.dim() {
            return Err(Error::Format(format!(
                "augmented matrix is {:?}, embeddings are {:?}",
                aug.dim(),
                embeddings.dim()
            )));
        }
    }
    let text = fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (tags, seen_names, gold) = parse_labels(&text, embeddings.nrows())?;
    EmbeddingDataset::new(embeddings, augmented, tags, seen_names, gold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    TypeNames,
    FrameDefinitions,
}

/// Labelled reference embeddings (type names or frame definitions).
#[derive(Clone, Debug, PartialEq)]
pub struct NameCorpus {
    labels: Vec<String>,
    embeddings: Array2<f64>,
    kind: CorpusKind,
    index: HashMap<String, usize>,
}

impl NameCorpus {
    pub fn new(labels: Vec<String>, embeddings: Array2<f64>, kind: CorpusKind) -> Result<Self> {
        if labels.len() != embeddings.nrows() {
            return Err(Error::Format(format!(
                "{} corpus labels for {} embedding rows",
                labels.len(),
                embeddings.nrows()
            )));
        }
        check_finite(&embeddings, "corpus embeddings")?;
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate corpus label {l:?}")));
            }
        }
        Ok(Self {
            labels,
            embeddings,
            kind,
            index,
        })
    }

    /// Loads an EMB1 matrix plus a TSV whose first column is the row label.
    pub fn load(embeddings_path: &Path, labels_path: &Path, kind: CorpusKind) -> Result<Self> {
        let embeddings = read_matrix(embeddings_path)?;
        let text = fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
        let labels = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split('\t').next().unwrap_or("").trim().to_owned())
            .collect();
        Self::new(labels, embeddings, kind)
    }

    pub fn save(&self, embeddings_path: &Path, labels_path: &Path) -> Result<()> {
        write_matrix(embeddings_path, self.embeddings.view())?;
        let mut text = self.labels.join("\n");
        text.push('\n');
        fs::write(labels_path, text).map_err(|e| Error::io(labels_path, e))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn kind(&self) -> CorpusKind {
        self.kind
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn embedding(&self, label: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.position(label).map(|i| self.embeddings.row(i))
    }
}

/// Frame ontology: frame labels, parent/child edges and the type-to-frame map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameHierarchy {
    frames: BTreeSet<String>,
    edges: Vec<(String, String)>,
    ace_to_frames: BTreeMap<String, BTreeSet<String>>,
    children: BTreeMap<String, BTreeSet<String>>,
}

impl FrameHierarchy {
    pub fn new(
        frames: BTreeSet<String>,
        edges: Vec<(String, String)>,
        ace_to_frames: BTreeMap<String, BTreeSet<String>>,
    ) -> Result<Self> {
        let mut children: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (parent, child) in &edges {
            for f in [parent, child] {
                if !frames.contains(f) {
                    return Err(Error::Format(format!("edge references unknown frame {f:?}")));
                }
            }
            children.entry(parent.clone()).or_default().insert(child.clone());
        }
        for (ace, mapped) in &ace_to_frames {
            if mapped.is_empty() {
                return Err(Error::Format(format!("type {ace:?} maps to no frames")));
            }
            if let Some(f) = mapped.iter().find(|f| !frames.contains(*f)) {
                return Err(Error::Format(format!(
                    "type {ace:?} maps to unknown frame {f:?}"
                )));
            }
        }
        let h = Self {
            frames,
            edges,
            ace_to_frames,
            children,
        };
        if let Some(frame) = h.find_cycle() {
            return Err(Error::Data(format!("frame hierarchy has a cycle through {frame:?}")));
        }
        Ok(h)
    }

    // Iterative three-colour DFS; returns a frame on a cycle.
    fn find_cycle(&self) -> Option<&str> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: HashMap<&str, Mark> = HashMap::new();
        for root in self.children.keys() {
            if marks.contains_key(root.as_str()) {
                continue;
            }
            let mut stack: Vec<(&str, Vec<&str>)> = vec![(root, self.child_list(root))];
            marks.insert(root, Mark::Open);
            while let Some((node, pending)) = stack.last_mut() {
                match pending.pop() {
                    Some(next) => match marks.get(next) {
                        Some(Mark::Open) => return Some(next),
                        Some(Mark::Done) => {}
                        None => {
                            marks.insert(next, Mark::Open);
                            let kids = self.child_list(next);
                            stack.push((next, kids));
                        }
                    },
                    None => {
                        marks.insert(node, Mark::Done);
                        stack.pop();
                    }
                }
            }
        }
        None
    }

    fn child_list(&self, frame: &str) -> Vec<&str> {
        self.children
            .get(frame)
            .map(|c| c.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn frames(&self) -> &BTreeSet<String> {
        &self.frames
    }

    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }

    pub fn ace_to_frames(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.ace_to_frames
    }

    pub fn mapped_frames(&self, ace_type: &str) -> Option<&BTreeSet<String>> {
        self.ace_to_frames.get(ace_type)
    }

    pub fn children(&self, frame: &str) -> impl Iterator<Item = &str> {
        self.children
            .get(frame)
            .into_iter()
            .flat_map(|c| c.iter().map(String::as_str))
    }

    /// All frames reachable from `frame` through one or more edges.
    pub fn descendants(&self, frame: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<&str> = self.children(frame).collect();
        while let Some(f) = stack.pop() {
            if out.insert(f.to_owned()) {
                stack.extend(self.children(f));
            }
        }
        out
    }
}

fn read_tsv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').map(|f| f.trim().to_owned()).collect())
        .collect())
}

/// Parses one mapping line body, e.g. `Organization | Process_end`.
pub fn parse_frame_list(field: &str) -> BTreeSet<String> {
    field
        .split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Loads the hierarchy from three TSV files:
/// `frame<TAB>definition`, `parent<TAB>child` and `type<TAB>frame | frame ...`.
pub fn load_frame_hierarchy(
    frames_path: &Path,
    edges_path: &Path,
    mapping_path: &Path,
) -> Result<FrameHierarchy> {
    let frames = read_tsv_rows(frames_path)?
        .into_iter()
        .map(|row| row.into_iter().next().unwrap_or_default())
        .collect::<BTreeSet<_>>();
    let mut edges = Vec::new();
    for row in read_tsv_rows(edges_path)? {
        match row.as_slice() {
            [parent, child, ..] => edges.push((parent.clone(), child.clone())),
            _ => {
                return Err(Error::Format(format!(
                    "{}: edge rows need parent and child",
                    edges_path.display()
                )))
            }
        }
    }
    let mut mapping = BTreeMap::new();
    for row in read_tsv_rows(mapping_path)? {
        match row.as_slice() {
            [ace, list, ..] => {
                mapping.insert(ace.clone(), parse_frame_list(list));
            }
            _ => {
                return Err(Error::Format(format!(
                    "{}: mapping rows need a type and a frame list",
                    mapping_path.display()
                )))
            }
        }
    }
    FrameHierarchy::new(frames, edges, mapping)
}

/// Writes the three hierarchy TSVs. `definitions` supplies the second column
/// of the frames file (empty when missing).
pub fn save_frame_hierarchy(
    h: &FrameHierarchy,
    definitions: &BTreeMap<String, String>,
    frames_path: &Path,
    edges_path: &Path,
    mapping_path: &Path,
) -> Result<()> {
    let mut frames = String::new();
    for f in h.frames() {
        frames.push_str(f);
        frames.push('\t');
        frames.push_str(definitions.get(f).map(String::as_str).unwrap_or(""));
        frames.push('\n');
    }
    let mut edges = String::new();
    for (p, c) in h.edges() {
        edges.push_str(&format!("{p}\t{c}\n"));
    }
    let mut mapping = String::new();
    for (ace, fs_) in h.ace_to_frames() {
        let list: Vec<&str> = fs_.iter().map(String::as_str).collect();
        mapping.push_str(&format!("{ace}\t{}\n", list.join(" | ")));
    }
    for (path, body) in [(frames_path, frames), (edges_path, edges), (mapping_path, mapping)] {
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Seeded ChaCha stream; distinct `stream` values give independent sequences.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parameters of the synthetic stand-in for encoded event mentions.
///
/// Every type gets a random unit-norm center. Each row is its type center
/// plus isotropic Gaussian noise; the augmented copy adds a second, smaller
/// jitter to the same row. The first `n_seen_types` types are tagged seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_seen_types: usize,
    pub n_unseen_types: usize,
    pub per_type: usize,
    pub d: usize,
    pub noise_sigma: f64,
    pub aug_sigma: f64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_seen_types == 0 || self.n_unseen_types == 0 || self.per_type == 0 || self.d == 0
        {
            return Err(Error::Config("synthetic counts must all be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.aug_sigma >= 0.0) {
            return Err(Error::Config("synthetic sigmas must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_types(&self) -> usize {
        self.n_seen_types + self.n_unseen_types
    }

    pub fn type_label(&self, t: usize) -> String {
        if t < self.n_seen_types {
            format!("seen_{t:02}")
        } else {
            format!("unseen_{:02}", t - self.n_seen_types)
        }
    }

    /// One unit-norm center per type, seen types first.
    pub fn centers(&self) -> Array2<f64> {
        let mut rng = rng_for(self.seed, 0);
        let mut centers = Array2::<f64>::zeros((self.n_types(), self.d));
        for mut row in centers.rows_mut() {
            loop {
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                let norm = row.dot(&row).sqrt();
                if norm > 1e-12 {
                    row.mapv_inplace(|v| v / norm);
                    break;
                }
            }
        }
        centers
    }

    pub fn generate(&self) -> Result<EmbeddingDataset> {
        self.validate()?;
        let centers = self.centers();
        let n = self.n_types() * self.per_type;
        let mut noise_rng = rng_for(self.seed, 1);
        let mut aug_rng = rng_for(self.seed, 2);
        let mut x = Array2::<f64>::zeros((n, self.d));
        let mut aug = Array2::<f64>::zeros((n, self.d));
        let mut tags = Vec::with_capacity(n);
        let mut gold = Vec::with_capacity(n);
        for t in 0..self.n_types() {
            for p in 0..self.per_type {
                let row = t * self.per_type + p;
                for c in 0..self.d {
                    let e: f64 = noise_rng.sample(StandardNormal);
                    let a: f64 = aug_rng.sample(StandardNormal);
                    let v = centers[[t, c]] + self.noise_sigma * e;
                    x[[row, c]] = v;
                    aug[[row, c]] = v + self.aug_sigma * a;
                }
                tags.push(if t < self.n_seen_types {
                    TypeTag::Seen(t)
                } else {
                    TypeTag::Unseen
                });
                gold.push(Some(t));
            }
        }
        let names: Vec<String> = (0..self.n_types()).map(|t| self.type_label(t)).collect();
        let seen_names = names[..self.n_seen_types].to_vec();
        EmbeddingDataset::new(x, Some(aug), tags, seen_names, GoldLabels::new(gold, names))
    }

    /// Type-name corpus whose embedding for each type is its center.
    pub fn name_corpus(&self) -> Result<NameCorpus> {
        self.validate()?;
        let labels = (0..self.n_types()).map(|t| self.type_label(t)).collect();
        NameCorpus::new(labels, self.centers(), CorpusKind::TypeNames)
    }

    /// Frame definitions, hierarchy and mapping for the synthetic types.
    ///
    /// Each type maps to a frame near its center with one child frame; every
    /// third type additionally maps to a shared frame. Unrelated distractor
    /// frames fill the rest of the corpus.
    pub fn frame_world(&self) -> Result<(NameCorpus, FrameHierarchy, BTreeMap<String, String>)> {
        self.validate()?;
        let centers = self.centers();
        let mut rng = rng_for(self.seed, 3);
        let mut unit = |base: Option<ndarray::ArrayView1<'_, f64>>, jitter: f64| {
            let mut v = Array1::from_shape_fn(self.d, |_| rng.sample::<f64, _>(StandardNormal));
            if let Some(b) = base {
                v = &b + &(v * jitter);
            }
            let norm = v.dot(&v).sqrt().max(1e-12);
            v / norm
        };
        let mut labels = Vec::new();
        let mut rows: Vec<Array1<f64>> = Vec::new();
        let mut defs = BTreeMap::new();
        let mut edges = Vec::new();
        let mut mapping = BTreeMap::new();
        let shared = "Frame_shared".to_string();
        labels.push(shared.clone());
        rows.push(unit(None, 0.0));
        defs.insert(shared.clone(), "shared synthetic frame".to_string());
        for t in 0..self.n_types() {
            let label = self.type_label(t);
            let frame = format!("Frame_{label}");
            let child = format!("Frame_{label}_sub");
            labels.push(frame.clone());
            rows.push(unit(Some(centers.row(t)), 0.3 / (self.d as f64).sqrt()));
            labels.push(child.clone());
            rows.push(unit(Some(centers.row(t)), 1.0 / (self.d as f64).sqrt()));
            defs.insert(frame.clone(), format!("synthetic frame for {label}"));
            defs.insert(child.clone(), format!("synthetic child frame for {label}"));
            edges.push((frame.clone(), child));
            let mut mapped = BTreeSet::from([frame]);
            if t % 3 == 0 {
                mapped.insert(shared.clone());
            }
            mapping.insert(label, mapped);
        }
        for k in 0..self.n_types() {
            let label = format!("Distractor_{k:02}");
            rows.push(unit(None, 0.0));
            defs.insert(label.clone(), "unrelated synthetic frame".to_string());
            labels.push(label);
        }
        let mut emb = Array2::zeros((rows.len(), self.d));
        for (i, r) in rows.iter().enumerate() {
            emb.row_mut(i).assign(r);
        }
        let frames = labels.iter().cloned().collect();
        let corpus = NameCorpus::new(labels, emb, CorpusKind::FrameDefinitions)?;
        let hierarchy = FrameHierarchy::new(frames, edges, mapping)?;
        Ok((corpus, hierarchy, defs))
    }
}

/// Convenience wrapper over [`SyntheticSpec::generate`].
pub fn generate_synthetic(
    seed: u64,
    n_seen_types: usize,
    n_unseen_types: usize,
    per_type: usize,
    d: usize,
    noise_sigma: f64,
    aug_sigma: f64,
) -> Result<EmbeddingDataset> {
    SyntheticSpec {
        seed,
        n_seen_types,
        n_unseen_types,
        per_type,
        d,
        noise_sigma,
        aug_sigma,
    }
    .generate()
}
