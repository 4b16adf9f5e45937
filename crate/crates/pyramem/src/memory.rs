//! The pyramid memory: consolidated samples, novelty sparsification, label
//! updates, and directory persistence.
//!
//! A store holds feature pyramids that all share one schedule and per-level
//! channel layout, each paired with leaf labels. Consolidation sparsifies
//! the finest `n_sp` levels: per structural patch the most novel node (the
//! one least similar to its patch siblings) is kept, then the kept sets are
//! restricted top-down so every retained node's structural parent is
//! retained too. Every sparsified level therefore keeps exactly one node
//! per retained parent, so all sparse levels end up with as many nodes as
//! the first dense level above them.
//!
//! Labels are stored for the retained finest-level nodes only, in retained
//! order, with in-band invalid markers (class 255, scalar NaN).
//!
//! A store saved to a directory (a line-oriented `manifest.txt` plus one
//! pyramid and one label tensor file per sample) reloads bit-exactly:
//! saving the reloaded store reproduces the original bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::features::SyntheticExtractorConfig;
use crate::grid::ResolutionSchedule;
use crate::labels::{LabelKind, LabelMap};
use crate::ptns::{PtnsFile, PtnsLevel, PtnsPayload, INVALID_CLASS};
use crate::pyramid::FeaturePyramid;
use crate::search::{cosine_similarity, SampleView};
use crate::{Error, Result};

/// Leaf labels of one sample, aligned with the retained finest-level rows.
#[derive(Debug, Clone, PartialEq)]
enum StoredLabels {
    /// Class index per stored leaf; 255 marks an invalid label.
    Classes(Vec<u8>),
    /// Scalar value per stored leaf; NaN marks an invalid label.
    Scalar(Vec<f32>),
}

impl StoredLabels {
    fn len(&self) -> usize {
        match self {
            StoredLabels::Classes(v) => v.len(),
            StoredLabels::Scalar(v) => v.len(),
        }
    }
}

/// One consolidated sample.
#[derive(Debug, Clone)]
struct MemorySample {
    id: String,
    pyramid: FeaturePyramid,
    labels: StoredLabels,
    /// Free-text origin note, e.g. the extractor name and seed.
    provenance: String,
}

/// A consolidated memory of labeled feature pyramids.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    schedule: ResolutionSchedule,
    label_kind: LabelKind,
    n_sp: usize,
    /// Per-level channels, fixed by the first consolidated sample.
    channels: Option<Vec<usize>>,
    extractor: Option<SyntheticExtractorConfig>,
    samples: Vec<MemorySample>,
}

impl MemoryStore {
    /// Creates an empty store over a canonical schedule.
    ///
    /// `n_sp` is the number of finest levels to sparsify on consolidation
    /// (0 keeps samples dense); the coarsest level always stays dense.
    pub fn new(schedule: ResolutionSchedule, label_kind: LabelKind, n_sp: usize) -> Result<Self> {
        if !schedule.is_canonical() {
            return Err(Error::domain("memory needs a ceil-halving schedule"));
        }
        if n_sp >= schedule.num_levels() {
            return Err(Error::domain(format!(
                "n_sp = {n_sp} would sparsify the coarsest of {} levels",
                schedule.num_levels()
            )));
        }
        if let LabelKind::Classes(c) = label_kind {
            if c == 0 || c >= usize::from(INVALID_CLASS) {
                return Err(Error::domain(format!(
                    "class count must be 1..={}, got {c}",
                    INVALID_CLASS - 1
                )));
            }
        }
        Ok(Self {
            schedule,
            label_kind,
            n_sp,
            channels: None,
            extractor: None,
            samples: Vec::new(),
        })
    }

    /// Records the extractor configuration used to build the stored
    /// pyramids, so predictions can featurize raw inputs the same way.
    pub fn set_extractor(&mut self, config: SyntheticExtractorConfig) {
        self.extractor = Some(config);
    }

    /// The recorded extractor configuration, if any.
    pub fn extractor(&self) -> Option<&SyntheticExtractorConfig> {
        self.extractor.as_ref()
    }

    /// The shared schedule.
    pub fn schedule(&self) -> &ResolutionSchedule {
        &self.schedule
    }

    /// The label kind every sample carries.
    pub fn label_kind(&self) -> LabelKind {
        self.label_kind
    }

    /// Number of finest levels sparsified on consolidation.
    pub fn n_sp(&self) -> usize {
        self.n_sp
    }

    /// Number of stored samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Whether the store holds no samples.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    /// Insertion-order position of a sample id.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// Id of the sample at an insertion-order position.
    pub fn id_at(&self, ordinal: usize) -> &str {
        &self.samples[ordinal].id
    }

    /// Pyramid of the sample at an insertion-order position.
    pub fn pyramid_at(&self, ordinal: usize) -> &FeaturePyramid {
        &self.samples[ordinal].pyramid
    }

    /// Provenance note of the sample at an insertion-order position.
    pub fn provenance_at(&self, ordinal: usize) -> &str {
        &self.samples[ordinal].provenance
    }

    /// Stored class of a leaf node, `None` if the node was dropped by
    /// sparsification or its label is invalid.
    pub fn stored_class(&self, ordinal: usize, leaf_node: usize) -> Option<u8> {
        let sample = &self.samples[ordinal];
        let row = sample.pyramid.row_of(1, leaf_node)?;
        match &sample.labels {
            StoredLabels::Classes(idx) => (idx[row] != INVALID_CLASS).then(|| idx[row]),
            StoredLabels::Scalar(_) => None,
        }
    }

    /// Stored scalar of a leaf node, `None` if the node was dropped by
    /// sparsification or its label is invalid.
    pub fn stored_scalar(&self, ordinal: usize, leaf_node: usize) -> Option<f32> {
        let sample = &self.samples[ordinal];
        let row = sample.pyramid.row_of(1, leaf_node)?;
        match &sample.labels {
            StoredLabels::Scalar(values) => values[row].is_finite().then(|| values[row]),
            StoredLabels::Classes(_) => None,
        }
    }

    /// Dense finest-level view of a sample's stored labels. Nodes dropped by
    /// sparsification come back invalid, as do nodes stored invalid.
    pub fn stored_label_map(&self, ordinal: usize) -> LabelMap {
        let sample = &self.samples[ordinal];
        let res = self.schedule.res(1).to_vec();
        let leaves = self.schedule.node_count(1);
        let kept = sample.pyramid.retained(1);
        match &sample.labels {
            StoredLabels::Classes(stored) => {
                let mut idx = vec![INVALID_CLASS; leaves];
                match kept {
                    Some(kept) => {
                        for (row, &v) in kept.iter().enumerate() {
                            idx[v] = stored[row];
                        }
                    }
                    None => idx.copy_from_slice(stored),
                }
                let classes = match self.label_kind {
                    LabelKind::Classes(c) => c,
                    LabelKind::Scalar => unreachable!("kind is checked at insert"),
                };
                LabelMap::classes(res, classes, idx).expect("stored labels stay valid")
            }
            StoredLabels::Scalar(stored) => {
                let mut values = vec![f32::NAN; leaves];
                match kept {
                    Some(kept) => {
                        for (row, &v) in kept.iter().enumerate() {
                            values[v] = stored[row];
                        }
                    }
                    None => values.copy_from_slice(stored),
                }
                LabelMap::scalar(res, values).expect("stored labels stay valid")
            }
        }
    }

    pub(crate) fn views(&self) -> Vec<SampleView<'_>> {
        self.samples
            .iter()
            .map(|s| SampleView {
                id: &s.id,
                pyramid: &s.pyramid,
            })
            .collect()
    }

    fn check_labels(&self, labels: &LabelMap) -> Result<()> {
        if labels.res() != self.schedule.res(1) {
            return Err(Error::domain(format!(
                "labels are {:?}, finest level is {:?}",
                labels.res(),
                self.schedule.res(1)
            )));
        }
        match (self.label_kind, labels) {
            (LabelKind::Classes(c), LabelMap::Classes { classes, .. }) if *classes == c => Ok(()),
            (LabelKind::Scalar, LabelMap::Scalar { .. }) => Ok(()),
            _ => Err(Error::domain(
                "label map kind does not match the store's label kind",
            )),
        }
    }

    /// Consolidates one sample: sparsifies its pyramid, keeps labels for the
    /// retained leaves, and appends it under `id`.
    ///
    /// Ids must be unique, non-empty, and free of whitespace; the pyramid
    /// must be dense on the store's schedule with the store's channel
    /// layout. Class labels use [`LabelMap::Classes`], scalar labels
    /// [`LabelMap::Scalar`].
    pub fn consolidate_add(
        &mut self,
        id: &str,
        pyramid: &FeaturePyramid,
        labels: &LabelMap,
        provenance: &str,
    ) -> Result<()> {
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::domain(format!(
                "sample id {id:?} must be non-empty without whitespace"
            )));
        }
        if self.position(id).is_some() {
            return Err(Error::domain(format!("sample id {id:?} already stored")));
        }
        if provenance.is_empty() || provenance.contains(['\n', '\r']) {
            return Err(Error::domain(
                "provenance must be a non-empty single line",
            ));
        }
        if pyramid.schedule() != &self.schedule {
            return Err(Error::domain("pyramid schedule differs from the store's"));
        }
        if !pyramid.is_dense() {
            return Err(Error::domain("consolidation needs a dense pyramid"));
        }
        let pyr_channels: Vec<usize> = (1..=self.schedule.num_levels())
            .map(|l| pyramid.channels(l))
            .collect();
        match &self.channels {
            None => self.channels = Some(pyr_channels),
            Some(expected) => {
                if &pyr_channels != expected {
                    return Err(Error::domain(format!(
                        "pyramid channels {pyr_channels:?} differ from the store's {expected:?}"
                    )));
                }
            }
        }
        self.check_labels(labels)?;

        let sparse = sparsify(pyramid, self.n_sp)?;
        let leaf_rows: Vec<usize> = match sparse.retained(1) {
            None => (0..self.schedule.node_count(1)).collect(),
            Some(r) => r.to_vec(),
        };
        let labels = match labels {
            LabelMap::Classes { idx, .. } => {
                StoredLabels::Classes(leaf_rows.iter().map(|&v| idx[v]).collect())
            }
            LabelMap::Scalar { values, .. } => {
                StoredLabels::Scalar(leaf_rows.iter().map(|&v| values[v]).collect())
            }
            LabelMap::Categorical { .. } => unreachable!("check_labels rejects categorical"),
        };
        self.samples.push(MemorySample {
            id: id.to_string(),
            pyramid: sparse,
            labels,
            provenance: provenance.to_string(),
        });
        Ok(())
    }

    /// Removes a sample by id; later samples keep their relative order.
    pub fn consolidate_remove(&mut self, id: &str) -> Result<()> {
        match self.position(id) {
            Some(i) => {
                self.samples.remove(i);
                Ok(())
            }
            None => Err(Error::UnknownId(id.to_string())),
        }
    }

    /// Rewrites the stored labels of `id` from `labels` wherever `mask` is
    /// true (indexed by leaf node; `None` rewrites everywhere). Returns how
    /// many stored leaf labels actually changed.
    ///
    /// Only retained leaves can change; masked-in values equal to the stored
    /// ones (including invalid over invalid) do not count.
    pub fn update_labels(
        &mut self,
        id: &str,
        labels: &LabelMap,
        mask: Option<&[bool]>,
    ) -> Result<usize> {
        self.check_labels(labels)?;
        let leaves = self.schedule.node_count(1);
        if mask.is_some_and(|m| m.len() != leaves) {
            return Err(Error::domain(format!(
                "mask has {} entries, finest level has {leaves}",
                mask.unwrap().len()
            )));
        }
        let pos = self
            .position(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let sample = &mut self.samples[pos];
        let leaf_nodes: Vec<usize> = match sample.pyramid.retained(1) {
            None => (0..leaves).collect(),
            Some(r) => r.to_vec(),
        };
        let mut changed = 0usize;
        match (&mut sample.labels, labels) {
            (StoredLabels::Classes(stored), LabelMap::Classes { idx, .. }) => {
                for (row, &node) in leaf_nodes.iter().enumerate() {
                    if mask.is_none_or(|m| m[node]) && stored[row] != idx[node] {
                        stored[row] = idx[node];
                        changed += 1;
                    }
                }
            }
            (StoredLabels::Scalar(stored), LabelMap::Scalar { values, .. }) => {
                for (row, &node) in leaf_nodes.iter().enumerate() {
                    if mask.is_none_or(|m| m[node])
                        && stored[row].to_bits() != values[node].to_bits()
                    {
                        stored[row] = values[node];
                        changed += 1;
                    }
                }
            }
            _ => unreachable!("check_labels matched the kinds"),
        }
        Ok(changed)
    }

    /// Saves the store into `dir`: `manifest.txt` plus numbered pyramid and
    /// label tensor files. Existing files with the same names are replaced.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "pyramem-store 1");
        let _ = writeln!(manifest, "dim {}", self.schedule.dim());
        let _ = writeln!(manifest, "levels {}", self.schedule.num_levels());
        for l in 1..=self.schedule.num_levels() {
            let axes: Vec<String> = self.schedule.res(l).iter().map(|r| r.to_string()).collect();
            let _ = writeln!(manifest, "res {l} {}", axes.join(" "));
        }
        match self.label_kind {
            LabelKind::Classes(c) => {
                let _ = writeln!(manifest, "label-kind classes {c}");
            }
            LabelKind::Scalar => {
                let _ = writeln!(manifest, "label-kind scalar");
            }
        }
        let _ = writeln!(manifest, "nsp {}", self.n_sp);
        match &self.extractor {
            Some(cfg) => {
                let channels: Vec<String> = cfg.channels.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(
                    manifest,
                    "extractor synth {} {} {}",
                    cfg.seed,
                    cfg.smoothing_radius,
                    channels.join(" ")
                );
            }
            None => {
                let _ = writeln!(manifest, "extractor none");
            }
        }
        for (i, sample) in self.samples.iter().enumerate() {
            let pyr_name = format!("sample_{i:05}.pyr.ptns");
            let lab_name = format!("sample_{i:05}.lab.ptns");
            sample.pyramid.to_ptns()?.write_to(&dir.join(&pyr_name))?;
            self.labels_to_ptns(sample)?.write_to(&dir.join(&lab_name))?;
            let _ = writeln!(
                manifest,
                "sample {} {pyr_name} {lab_name} {}",
                sample.id, sample.provenance
            );
        }
        std::fs::write(dir.join("manifest.txt"), manifest)
            .map_err(|e| Error::io(dir.join("manifest.txt"), e))
    }

    fn labels_to_ptns(&self, sample: &MemorySample) -> Result<PtnsFile> {
        let res: Vec<u32> = self
            .schedule
            .res(1)
            .iter()
            .map(|&r| u32::try_from(r).map_err(|_| Error::domain("axis exceeds u32")))
            .collect::<Result<_>>()?;
        let retained = sample
            .pyramid
            .retained(1)
            .map(|r| r.iter().map(|&v| v as u64).collect());
        let (channels, payload) = match &sample.labels {
            StoredLabels::Classes(idx) => {
                let LabelKind::Classes(c) = self.label_kind else {
                    unreachable!("stored kind matches the store kind");
                };
                (c as u32, PtnsPayload::ClassU8(idx.clone()))
            }
            StoredLabels::Scalar(values) => (1, PtnsPayload::F32(values.clone())),
        };
        Ok(PtnsFile {
            dim: self.schedule.dim() as u8,
            levels: vec![PtnsLevel {
                res,
                channels,
                retained,
                payload,
            }],
        })
    }

    /// Loads a store saved by [`MemoryStore::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.clone(), e))?;
        let mut parser = ManifestParser::new(&text);

        parser.expect_line("pyramem-store 1")?;
        let dim: usize = parser.field_line("dim")?;
        let n_levels: usize = parser.field_line("levels")?;
        let mut res_lists = Vec::with_capacity(n_levels);
        for l in 1..=n_levels {
            let fields = parser.fields(&format!("res {l}"))?;
            let axes = fields
                .iter()
                .map(|f| f.parse::<usize>().map_err(|_| parser.err("bad axis size")))
                .collect::<Result<Vec<_>>>()?;
            res_lists.push(axes);
        }
        let schedule = ResolutionSchedule::new(dim, &res_lists)?;

        let kind_fields = parser.fields("label-kind")?;
        let label_kind = match kind_fields.first().map(String::as_str) {
            Some("classes") => {
                let c = kind_fields
                    .get(1)
                    .and_then(|f| f.parse::<usize>().ok())
                    .ok_or_else(|| parser.err("label-kind classes needs a count"))?;
                LabelKind::Classes(c)
            }
            Some("scalar") => LabelKind::Scalar,
            _ => return Err(parser.err("unknown label-kind")),
        };
        let n_sp: usize = parser.field_line("nsp")?;

        let extractor_fields = parser.fields("extractor")?;
        let extractor = match extractor_fields.first().map(String::as_str) {
            Some("none") => None,
            Some("synth") => {
                if extractor_fields.len() < 4 {
                    return Err(parser.err("extractor synth needs seed, radius, channels"));
                }
                let seed = extractor_fields[1]
                    .parse::<u64>()
                    .map_err(|_| parser.err("bad extractor seed"))?;
                let radius = extractor_fields[2]
                    .parse::<usize>()
                    .map_err(|_| parser.err("bad extractor radius"))?;
                let channels = extractor_fields[3..]
                    .iter()
                    .map(|f| {
                        f.parse::<usize>()
                            .map_err(|_| parser.err("bad extractor channel count"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(SyntheticExtractorConfig {
                    seed,
                    channels,
                    smoothing_radius: radius,
                })
            }
            _ => return Err(parser.err("unknown extractor")),
        };

        let mut store = MemoryStore::new(schedule, label_kind, n_sp)?;
        store.extractor = extractor;
        while let Some(line) = parser.next_nonempty() {
            let mut parts = line.splitn(5, ' ');
            if parts.next() != Some("sample") {
                return Err(parser.err("expected a sample line"));
            }
            let id = parts.next().ok_or_else(|| parser.err("sample line needs an id"))?;
            let pyr_name = parts
                .next()
                .ok_or_else(|| parser.err("sample line needs a pyramid file"))?;
            let lab_name = parts
                .next()
                .ok_or_else(|| parser.err("sample line needs a label file"))?;
            let provenance = parts.next().unwrap_or("").to_string();
            if provenance.is_empty() {
                return Err(parser.err("sample line needs a provenance note"));
            }
            let pyramid = FeaturePyramid::from_ptns(&PtnsFile::read_from(&dir.join(pyr_name))?)?;
            let labels = store.labels_from_ptns(
                &PtnsFile::read_from(&dir.join(lab_name))?,
                &pyramid,
                lab_name,
            )?;
            store.add_loaded(id, pyramid, labels, provenance)?;
        }
        Ok(store)
    }

    fn labels_from_ptns(
        &self,
        file: &PtnsFile,
        pyramid: &FeaturePyramid,
        name: &str,
    ) -> Result<StoredLabels> {
        let bad = |msg: &str| Error::domain(format!("label file {name}: {msg}"));
        if file.levels.len() != 1 {
            return Err(bad("must hold exactly one level"));
        }
        let level = &file.levels[0];
        let res: Vec<usize> = level.res.iter().map(|&r| r as usize).collect();
        if res != self.schedule.res(1) {
            return Err(bad("resolution differs from the finest level"));
        }
        let expected: Option<Vec<u64>> = pyramid
            .retained(1)
            .map(|r| r.iter().map(|&v| v as u64).collect());
        if level.retained != expected {
            return Err(bad("retained leaves differ from the pyramid's"));
        }
        match (&level.payload, self.label_kind) {
            (PtnsPayload::ClassU8(idx), LabelKind::Classes(c)) => {
                if level.channels as usize != c {
                    return Err(bad("class count differs from the store's"));
                }
                Ok(StoredLabels::Classes(idx.clone()))
            }
            (PtnsPayload::F32(values), LabelKind::Scalar) => {
                if level.channels != 1 {
                    return Err(bad("scalar labels need exactly one channel"));
                }
                Ok(StoredLabels::Scalar(values.clone()))
            }
            _ => Err(bad("payload kind differs from the store's label kind")),
        }
    }

    /// Appends an already-sparsified sample read back from disk.
    fn add_loaded(
        &mut self,
        id: &str,
        pyramid: FeaturePyramid,
        labels: StoredLabels,
        provenance: String,
    ) -> Result<()> {
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::domain(format!("bad sample id {id:?}")));
        }
        if self.position(id).is_some() {
            return Err(Error::domain(format!("sample id {id:?} already stored")));
        }
        if pyramid.schedule() != &self.schedule {
            return Err(Error::domain(format!(
                "sample {id:?} uses a different schedule"
            )));
        }
        if labels.len() != pyramid.stored_count(1) {
            return Err(Error::domain(format!(
                "sample {id:?} has {} labels for {} stored leaves",
                labels.len(),
                pyramid.stored_count(1)
            )));
        }
        let pyr_channels: Vec<usize> = (1..=self.schedule.num_levels())
            .map(|l| pyramid.channels(l))
            .collect();
        match &self.channels {
            None => self.channels = Some(pyr_channels),
            Some(expected) => {
                if &pyr_channels != expected {
                    return Err(Error::domain(format!(
                        "sample {id:?} channels {pyr_channels:?} differ from {expected:?}"
                    )));
                }
            }
        }
        self.samples.push(MemorySample {
            id: id.to_string(),
            pyramid,
            labels,
            provenance,
        });
        Ok(())
    }
}

/// Line-oriented manifest reader that reports byte offsets on errors.
struct ManifestParser<'a> {
    text: &'a str,
    pos: usize,
    line_start: usize,
}

impl<'a> ManifestParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            text,
            pos: 0,
            line_start: 0,
        }
    }

    fn err(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.line_start as u64,
            msg: msg.to_string(),
        }
    }

    fn next_nonempty(&mut self) -> Option<&'a str> {
        while self.pos < self.text.len() {
            self.line_start = self.pos;
            let rest = &self.text[self.pos..];
            let (line, advance) = match rest.find('\n') {
                Some(i) => (&rest[..i], i + 1),
                None => (rest, rest.len()),
            };
            self.pos += advance;
            let line = line.trim_end_matches('\r');
            if !line.is_empty() {
                return Some(line);
            }
        }
        None
    }

    fn expect_line(&mut self, expected: &str) -> Result<()> {
        match self.next_nonempty() {
            Some(line) if line == expected => Ok(()),
            _ => Err(self.err(&format!("expected {expected:?}"))),
        }
    }

    /// Reads a line that must start with `prefix`, returning the remaining
    /// whitespace-separated fields.
    fn fields(&mut self, prefix: &str) -> Result<Vec<String>> {
        let line = self
            .next_nonempty()
            .ok_or_else(|| self.err(&format!("missing {prefix:?} line")))?;
        let rest = line
            .strip_prefix(prefix)
            .ok_or_else(|| self.err(&format!("expected a {prefix:?} line")))?;
        Ok(rest.split_whitespace().map(str::to_string).collect())
    }

    fn field_line<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let fields = self.fields(key)?;
        fields
            .first()
            .and_then(|f| f.parse::<T>().ok())
            .ok_or_else(|| self.err(&format!("bad {key} value")))
    }
}

/// Sparsifies the finest `n_sp` levels of a dense pyramid by patch novelty.
///
/// Per structural patch the node least similar to its siblings (lowest mean
/// cosine; ties keep the lowest index; singletons keep their only node) is
/// selected, then the kept sets are restricted top-down so retention is
/// closed under structural parents. Every sparsified level retains exactly
/// `node_count(n_sp + 1)` nodes.
pub fn sparsify(pyramid: &FeaturePyramid, n_sp: usize) -> Result<FeaturePyramid> {
    let schedule = pyramid.schedule();
    if !pyramid.is_dense() {
        return Err(Error::domain("sparsification needs a dense pyramid"));
    }
    if !schedule.is_canonical() {
        return Err(Error::domain("sparsification needs a ceil-halving schedule"));
    }
    if n_sp >= schedule.num_levels() {
        return Err(Error::domain(format!(
            "n_sp = {n_sp} would sparsify the coarsest of {} levels",
            schedule.num_levels()
        )));
    }
    if n_sp == 0 {
        return Ok(pyramid.clone());
    }

    // Initial winners: per level-(l+1) patch, the most novel level-l child.
    let mut winners: Vec<Vec<usize>> = Vec::with_capacity(n_sp);
    let mut patch = Vec::new();
    for l in 1..=n_sp {
        let mut kept = Vec::with_capacity(schedule.node_count(l + 1));
        for parent in 0..schedule.node_count(l + 1) {
            patch.clear();
            schedule.structural_children(l + 1, parent, &mut patch)?;
            kept.push(novel_child(pyramid, l, &patch));
        }
        kept.sort_unstable();
        winners.push(kept);
    }

    // Top-down restriction: a node stays only if its structural parent did.
    for l in (1..n_sp).rev() {
        let upper = winners[l].clone();
        winners[l - 1].retain(|&v| {
            match schedule.parent_index(l, v).expect("canonical") {
                crate::grid::Parent::Node(p) => upper.binary_search(&p).is_ok(),
                crate::grid::Parent::Root => true,
            }
        });
    }

    let levels = (1..=schedule.num_levels())
        .map(|l| {
            let channels = pyramid.channels(l);
            if l > n_sp {
                return FeaturePyramid::level_parts(
                    channels,
                    None,
                    pyramid.dense_level(l).expect("dense").into_data(),
                );
            }
            let kept = &winners[l - 1];
            let mut data = Vec::with_capacity(kept.len() * channels);
            for &v in kept {
                data.extend_from_slice(pyramid.feature(l, v).expect("dense"));
            }
            FeaturePyramid::level_parts(channels, Some(kept.clone()), data)
        })
        .collect();
    FeaturePyramid::from_parts(schedule.clone(), levels)
}

/// The patch member least similar to its siblings: lowest mean cosine, ties
/// to the lowest node index. A singleton patch keeps its only member.
fn novel_child(pyramid: &FeaturePyramid, level: usize, patch: &[usize]) -> usize {
    if patch.len() == 1 {
        return patch[0];
    }
    let mut best = patch[0];
    let mut best_mean = f64::INFINITY;
    for &v in patch {
        let fv = pyramid.feature(level, v).expect("dense");
        let mut sum = 0.0f64;
        for &s in patch {
            if s != v {
                sum += cosine_similarity(fv, pyramid.feature(level, s).expect("dense"));
            }
        }
        let mean = sum / (patch.len() - 1) as f64;
        if mean < best_mean {
            best_mean = mean;
            best = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_extract, SyntheticExtractorConfig};
    use crate::grid::GridTensor;

    fn extract(seed: u64, res: &[usize], n_levels: usize) -> FeaturePyramid {
        let schedule = ResolutionSchedule::canonical(2, res, n_levels).unwrap();
        let nodes: usize = res.iter().product();
        let input = GridTensor::new(
            res.to_vec(),
            2,
            (0..nodes * 2).map(|i| ((i * 37 + seed as usize) % 101) as f32 * 0.01).collect(),
        )
        .unwrap();
        let config = SyntheticExtractorConfig::doubling(seed, 2, n_levels);
        synth_extract(&input, &schedule, &config).unwrap()
    }

    fn class_labels(res: &[usize], classes: usize, f: impl Fn(usize) -> u8) -> LabelMap {
        let nodes: usize = res.iter().product();
        LabelMap::classes(res.to_vec(), classes, (0..nodes).map(f).collect()).unwrap()
    }

    #[test]
    fn sparsify_counts_follow_the_patch_law() {
        for (res, n, n_sp) in [([16usize, 16], 3, 2), ([8, 8], 2, 1), ([7, 5], 3, 2)] {
            let p = extract(9, &res, n);
            let s = sparsify(&p, n_sp).unwrap();
            let schedule = s.schedule();
            let want = schedule.node_count(n_sp + 1);
            for l in 1..=n_sp {
                assert_eq!(s.stored_count(l), want, "level {l} of {res:?}");
                let r = s.retained(l).unwrap();
                assert!(r.windows(2).all(|w| w[0] < w[1]));
            }
            for l in n_sp + 1..=n {
                assert!(s.retained(l).is_none());
            }
        }
    }

    #[test]
    fn sparsify_keeps_parents_of_retained_nodes() {
        let p = extract(3, &[16, 16], 3);
        let s = sparsify(&p, 2).unwrap();
        let schedule = s.schedule();
        let upper = s.retained(2).unwrap();
        for &v in s.retained(1).unwrap() {
            match schedule.parent_index(1, v).unwrap() {
                crate::grid::Parent::Node(parent) => {
                    assert!(upper.binary_search(&parent).is_ok())
                }
                crate::grid::Parent::Root => unreachable!(),
            }
        }
    }

    #[test]
    fn novelty_picks_the_outlier_and_ties_pick_the_lowest_index() {
        // 4x4 -> 2x2: patch of node (1, 1) gets an orthogonal outlier at its
        // highest-index member; all other patches are constant and keep
        // their lowest-index member.
        let schedule = ResolutionSchedule::canonical(2, &[4, 4], 2).unwrap();
        let mut fine = GridTensor::new(vec![4, 4], 2, vec![1.0; 32]).unwrap();
        let outlier = schedule.index_of(1, [3, 3, 0]);
        fine.node_mut(outlier).copy_from_slice(&[1.0, -1.0]);
        let coarse = GridTensor::new(vec![2, 2], 2, vec![1.0; 8]).unwrap();
        let p = FeaturePyramid::from_dense(schedule.clone(), vec![fine, coarse]).unwrap();
        let s = sparsify(&p, 1).unwrap();
        let retained = s.retained(1).unwrap();
        assert!(retained.contains(&outlier));
        assert!(retained.contains(&schedule.index_of(1, [0, 0, 0])));
        assert!(retained.contains(&schedule.index_of(1, [0, 2, 0])));
        assert!(retained.contains(&schedule.index_of(1, [2, 0, 0])));
        assert_eq!(retained.len(), 4);
    }

    #[test]
    fn consolidation_sparsifies_and_filters_labels() {
        let p = extract(5, &[8, 8], 2);
        let schedule = p.schedule().clone();
        let mut store = MemoryStore::new(schedule.clone(), LabelKind::Classes(4), 1).unwrap();
        let labels = class_labels(&[8, 8], 4, |v| (v % 3) as u8);
        store.consolidate_add("a", &p, &labels, "test").unwrap();
        assert_eq!(store.len(), 1);
        let stored = store.pyramid_at(0);
        assert_eq!(stored.stored_count(1), 16);
        let retained = stored.retained(1).unwrap().to_vec();
        for &v in &retained {
            assert_eq!(store.stored_class(0, v), Some((v % 3) as u8));
        }
        let dropped = (0..64).find(|v| !retained.contains(v)).unwrap();
        assert_eq!(store.stored_class(0, dropped), None);
    }

    #[test]
    fn stored_label_map_is_dense_with_dropped_nodes_invalid() {
        let p = extract(5, &[8, 8], 2);
        let schedule = p.schedule().clone();
        let mut store = MemoryStore::new(schedule, LabelKind::Classes(4), 1).unwrap();
        let labels = class_labels(&[8, 8], 4, |v| if v == 0 { 255 } else { (v % 3) as u8 });
        store.consolidate_add("a", &p, &labels, "test").unwrap();
        let map = store.stored_label_map(0);
        assert_eq!(map.res(), &[8, 8]);
        let retained = store.pyramid_at(0).retained(1).unwrap().to_vec();
        for v in 0..64 {
            match (retained.contains(&v), v) {
                (true, 0) => assert!(!map.is_valid(0)),
                (true, _) => assert_eq!(map.argmax_class(v), Some((v % 3) as u8)),
                (false, _) => assert!(!map.is_valid(v)),
            }
        }
        assert_eq!(map.valid_count(), retained.len() - usize::from(retained.contains(&0)));
    }

    #[test]
    fn add_validations() {
        let p = extract(5, &[8, 8], 2);
        let schedule = p.schedule().clone();
        let mut store = MemoryStore::new(schedule.clone(), LabelKind::Classes(4), 1).unwrap();
        let labels = class_labels(&[8, 8], 4, |_| 0);
        assert!(store.consolidate_add("a b", &p, &labels, "t").is_err());
        assert!(store.consolidate_add("", &p, &labels, "t").is_err());
        store.consolidate_add("a", &p, &labels, "t").unwrap();
        assert!(store.consolidate_add("a", &p, &labels, "t").is_err());
        let scalar = LabelMap::scalar(vec![8, 8], vec![0.0; 64]).unwrap();
        assert!(store.consolidate_add("b", &p, &scalar, "t").is_err());
        let other = extract(5, &[8, 8], 2);
        let small = class_labels(&[4, 4], 4, |_| 0);
        assert!(store.consolidate_add("b", &other, &small, "t").is_err());
        assert!(matches!(
            store.consolidate_remove("zzz"),
            Err(Error::UnknownId(_))
        ));
        store.consolidate_remove("a").unwrap();
        assert!(store.is_empty());
    }

    #[test]
    fn update_labels_counts_changes_under_mask() {
        let p = extract(7, &[4, 4], 2);
        let mut store =
            MemoryStore::new(p.schedule().clone(), LabelKind::Classes(4), 0).unwrap();
        store
            .consolidate_add("a", &p, &class_labels(&[4, 4], 4, |_| 0), "t")
            .unwrap();
        let new = class_labels(&[4, 4], 4, |_| 2);
        let mut mask = vec![false; 16];
        mask[3] = true;
        mask[5] = true;
        assert_eq!(store.update_labels("a", &new, Some(&mask)).unwrap(), 2);
        assert_eq!(store.stored_class(0, 3), Some(2));
        assert_eq!(store.stored_class(0, 4), Some(0));
        // Re-applying changes nothing.
        assert_eq!(store.update_labels("a", &new, Some(&mask)).unwrap(), 0);
        assert_eq!(store.update_labels("a", &new, None).unwrap(), 14);
        assert!(store.update_labels("zzz", &new, None).is_err());
    }

    #[test]
    fn invalid_labels_survive_consolidation_as_invalid() {
        let p = extract(11, &[4, 4], 2);
        let mut store =
            MemoryStore::new(p.schedule().clone(), LabelKind::Classes(4), 0).unwrap();
        let labels = class_labels(&[4, 4], 4, |v| if v % 2 == 0 { 255 } else { 1 });
        store.consolidate_add("a", &p, &labels, "t").unwrap();
        assert_eq!(store.stored_class(0, 0), None);
        assert_eq!(store.stored_class(0, 1), Some(1));
        let scalar_store = {
            let mut s =
                MemoryStore::new(p.schedule().clone(), LabelKind::Scalar, 0).unwrap();
            let values = (0..16)
                .map(|v| if v % 2 == 0 { f32::NAN } else { v as f32 })
                .collect();
            let labels = LabelMap::scalar(vec![4, 4], values).unwrap();
            s.consolidate_add("a", &p, &labels, "t").unwrap();
            s
        };
        assert_eq!(scalar_store.stored_scalar(0, 0), None);
        assert_eq!(scalar_store.stored_scalar(0, 1), Some(1.0));
    }

    #[test]
    fn save_load_rebuilds_bytes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let p1 = extract(21, &[8, 8], 3);
        let p2 = extract(22, &[8, 8], 3);
        let mut store =
            MemoryStore::new(p1.schedule().clone(), LabelKind::Classes(5), 2).unwrap();
        store.set_extractor(SyntheticExtractorConfig::doubling(21, 2, 3));
        store
            .consolidate_add("first", &p1, &class_labels(&[8, 8], 5, |v| (v % 5) as u8), "synth seed=21")
            .unwrap();
        store
            .consolidate_add("second", &p2, &class_labels(&[8, 8], 5, |v| if v % 6 == 5 { 255 } else { (v % 5) as u8 }), "synth seed=22")
            .unwrap();
        store.save(&a).unwrap();
        let loaded = MemoryStore::load(&a).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.n_sp(), 2);
        assert_eq!(loaded.extractor().unwrap().seed, 21);
        assert_eq!(loaded.id_at(0), "first");
        assert_eq!(loaded.provenance_at(1), "synth seed=22");
        loaded.save(&b).unwrap();
        for name in std::fs::read_dir(&a).unwrap() {
            let name = name.unwrap().file_name();
            let bytes_a = std::fs::read(a.join(&name)).unwrap();
            let bytes_b = std::fs::read(b.join(&name)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{name:?} differs after a rebuild");
        }
    }

    #[test]
    fn load_rejects_mismatched_label_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let p = extract(31, &[4, 4], 2);
        let mut store =
            MemoryStore::new(p.schedule().clone(), LabelKind::Classes(3), 1).unwrap();
        store
            .consolidate_add("x", &p, &class_labels(&[4, 4], 3, |_| 1), "t")
            .unwrap();
        store.save(&a).unwrap();
        // Swap the label file for one with a different retained list.
        let other = {
            let mut s =
                MemoryStore::new(p.schedule().clone(), LabelKind::Classes(3), 0).unwrap();
            s.consolidate_add("x", &p, &class_labels(&[4, 4], 3, |_| 1), "t")
                .unwrap();
            s
        };
        other
            .labels_to_ptns(&other.samples[0])
            .unwrap()
            .write_to(&a.join("sample_00000.lab.ptns"))
            .unwrap();
        assert!(MemoryStore::load(&a).is_err());
    }
}
