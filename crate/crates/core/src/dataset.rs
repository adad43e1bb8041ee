//! Graph samples, normalization, target transforms, persistence and sensor
//! masking.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one
//! `graph_<id>.bin` record per sample. Records store raw (unnormalized)
//! features; the manifest carries the normalization statistics fitted on the
//! training split.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::psd::{self, ExcitationSpec, NodePsdMatrix, Snr, WelchConfig, FEATURE_BINS};
use crate::rng::{self, tag};
use crate::truss::{self, ModalSolution, Structure, TrussGenConfig, TrussModel};

pub const SCHEMA_VERSION: u32 = 1;
pub const RECORD_MAGIC: &[u8; 4] = b"MVGA";
pub const RECORD_VERSION: u32 = 1;
/// Log-PSD bins followed by x and y.
pub const FEATURE_DIM: usize = FEATURE_BINS + 2;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub truss_index: u64,
}

/// One truss as a graph: node features, directed edges (both directions)
/// and modal targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub id: u32,
    /// `N × 2`, metres.
    pub coords: Array2<f32>,
    pub edges: Vec<[u32; 2]>,
    /// `N × F`
    pub features: Array2<f32>,
    /// Hz
    pub frequencies: Vec<f32>,
    pub damping: Vec<f32>,
    /// `N × M`
    pub shapes: Array2<f32>,
    pub meta: SampleMeta,
}

impl GraphSample {
    pub fn n_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.frequencies.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if n < 4 {
            return Err(Error::Validation(format!("sample {} has {n} nodes (< 4)", self.id)));
        }
        if self.coords.dim() != (n, 2) || self.shapes.nrows() != n {
            return Err(Error::Shape(format!("sample {}: coords/shapes do not match {n} nodes", self.id)));
        }
        if self.damping.len() != self.n_modes() || self.shapes.ncols() != self.n_modes() {
            return Err(Error::Shape(format!("sample {}: inconsistent mode count", self.id)));
        }
        let set: BTreeSet<[u32; 2]> = self.edges.iter().copied().collect();
        for &[a, b] in &self.edges {
            if a == b {
                return Err(Error::Validation(format!("sample {}: self-loop at {a}", self.id)));
            }
            if a as usize >= n || b as usize >= n {
                return Err(Error::Validation(format!("sample {}: edge ({a}, {b}) out of range", self.id)));
            }
            if !set.contains(&[b, a]) {
                return Err(Error::Validation(format!("sample {}: edge ({a}, {b}) has no reverse", self.id)));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("sample {}: non-finite feature", self.id)));
        }
        Ok(())
    }

    pub fn log_targets(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let f: Vec<f64> = self.frequencies.iter().map(|&v| v as f64).collect();
        let z: Vec<f64> = self.damping.iter().map(|&v| v as f64).collect();
        TargetTransform::Ln.forward(&f, &z)
    }
}

/// Assembles a graph sample from a truss, its downsampled spectra and its
/// modal solution.
pub fn build_graph(id: u32, truss: &TrussModel, psd: &NodePsdMatrix, modal: &ModalSolution) -> Result<GraphSample> {
    let n = truss.n_nodes();
    if psd.values.nrows() != n {
        return Err(Error::Shape(format!("PSD has {} rows for {n} nodes", psd.values.nrows())));
    }
    if psd.values.ncols() != FEATURE_BINS {
        return Err(Error::Shape(format!("PSD has {} bins, expected {FEATURE_BINS}", psd.values.ncols())));
    }
    if modal.shapes.nrows() != n || modal.shapes.ncols() != modal.n_modes() || modal.damping.len() != modal.n_modes() {
        return Err(Error::Shape("modal solution does not match the truss".into()));
    }
    if !truss.is_connected() {
        return Err(Error::Validation("truss graph is disconnected".into()));
    }
    let logs = psd.log_features();
    let mut features = Array2::<f32>::zeros((n, FEATURE_DIM));
    for i in 0..n {
        for k in 0..FEATURE_BINS {
            features[(i, k)] = logs[(i, k)] as f32;
        }
        features[(i, FEATURE_BINS)] = truss.coords[i][0] as f32;
        features[(i, FEATURE_BINS + 1)] = truss.coords[i][1] as f32;
    }
    let mut edges = Vec::with_capacity(2 * truss.elements.len());
    for e in &truss.elements {
        let [a, b] = e.nodes;
        edges.push([a as u32, b as u32]);
        edges.push([b as u32, a as u32]);
    }
    let coords = Array2::from_shape_fn((n, 2), |(i, j)| truss.coords[i][j] as f32);
    let sample = GraphSample {
        id,
        coords,
        edges,
        features,
        frequencies: modal.frequencies.iter().map(|&v| v as f32).collect(),
        damping: modal.damping.iter().map(|&v| v as f32).collect(),
        shapes: modal.shapes.mapv(|v| v as f32),
        meta: SampleMeta::default(),
    };
    sample.validate()?;
    Ok(sample)
}

/// Per-feature standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a GraphSample>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut rows: Vec<&Array2<f32>> = Vec::new();
        for s in samples {
            if sum.is_empty() {
                sum = vec![0.0; s.feature_dim()];
            } else if s.feature_dim() != sum.len() {
                return Err(Error::Shape("feature width differs across samples".into()));
            }
            for row in s.features.rows() {
                for (acc, &v) in sum.iter_mut().zip(row) {
                    *acc += v as f64;
                }
                count += 1;
            }
            rows.push(&s.features);
        }
        if count == 0 {
            return Err(Error::Validation("cannot fit normalization on an empty split".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for feats in rows {
            for row in feats.rows() {
                for ((acc, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v as f64 - m;
                    *acc += d * d;
                }
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, sample: &GraphSample) -> Result<GraphSample> {
        if sample.feature_dim() != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalization fitted on {} features applied to {}",
                self.mean.len(),
                sample.feature_dim()
            )));
        }
        let mut out = sample.clone();
        for mut row in out.features.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(out)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Transform applied to frequencies and damping ratios before training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetTransform {
    #[default]
    Ln,
}

impl TargetTransform {
    pub fn forward(&self, freqs: &[f64], damping: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.forward_one(freqs)?, self.forward_one(damping)?))
    }

    pub fn forward_one(&self, values: &[f64]) -> Result<Vec<f64>> {
        values
            .iter()
            .map(|&v| {
                if v > 0.0 && v.is_finite() {
                    Ok(v.ln())
                } else {
                    Err(Error::InvalidParams(format!("target {v} must be positive")))
                }
            })
            .collect()
    }

    pub fn inverse(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v.exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 200, val: 50, test: 50 }
    }
}

impl SplitSizes {
    /// Rescales to `total` keeping the val/test proportions; the remainder goes to train.
    pub fn for_total(&self, total: usize) -> Self {
        let sum = self.train + self.val + self.test;
        if sum == total || sum == 0 {
            return self.clone();
        }
        let val = self.val * total / sum;
        let test = self.test * total / sum;
        Self { train: total - val - test, val, test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    pub force_std: f64,
    /// Sampling rate as a multiple of the highest target frequency in the dataset.
    pub fs_factor: f64,
    /// Fixed sampling rate; overrides `fs_factor` when set.
    pub sample_rate: Option<f64>,
    /// Welch segments per record.
    pub segments: usize,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self { force_std: 1e6, fs_factor: 8.0, sample_rate: None, segments: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub truss: TrussGenConfig,
    pub welch: WelchConfig,
    pub excitation: ExcitationConfig,
    pub splits: SplitSizes,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            truss: TrussGenConfig { nodes_max: 20, ..Default::default() },
            welch: WelchConfig::default(),
            excitation: ExcitationConfig::default(),
            splits: SplitSizes::default(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        self.truss.validate()?;
        self.welch.validate()?;
        if self.welch.bins() != 2 * FEATURE_BINS + 1 {
            return Err(Error::Config(format!(
                "segment length {} does not yield {} one-sided bins",
                self.welch.segment_len,
                2 * FEATURE_BINS + 1
            )));
        }
        if self.welch.samples_for(self.excitation.segments) < 4 * self.welch.segment_len {
            return Err(Error::Config(format!(
                "{} Welch segments give a record shorter than four segment lengths",
                self.excitation.segments
            )));
        }
        if !(self.excitation.fs_factor > 2.0) {
            return Err(Error::Config("fs_factor must exceed 2 (Nyquist)".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub total: usize,
    pub splits: Splits,
    pub n_modes: usize,
    pub feature_dim: usize,
    pub norm_stats: NormStats,
    pub target_transform: TargetTransform,
    /// Sampling rate shared by every record, Hz.
    pub sample_rate: f64,
    pub generation: GenerationConfig,
    pub generation_digest: String,
    pub mean_nodes: f64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut seen = BTreeSet::new();
        for id in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if !seen.insert(*id) {
                return Err(Error::Validation(format!("sample id {id} appears in more than one split")));
            }
        }
        let all: BTreeSet<u32> = (0..self.total as u32).collect();
        if seen != all {
            return Err(Error::Validation("splits do not cover every sample id exactly once".into()));
        }
        if self.norm_stats.mean.len() != self.feature_dim || self.norm_stats.std.len() != self.feature_dim {
            return Err(Error::Validation("normalization width differs from feature_dim".into()));
        }
        if self.norm_stats.std.iter().any(|&s| s < STD_FLOOR) {
            return Err(Error::Validation("normalization std below floor".into()));
        }
        Ok(())
    }
}

/// A dataset in memory: raw samples indexed by id plus the manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<GraphSample>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    fn pick(&self, ids: &[u32]) -> Vec<&GraphSample> {
        ids.iter().map(|&id| &self.samples[id as usize]).collect()
    }

    pub fn train(&self) -> Vec<&GraphSample> {
        self.pick(&self.manifest.splits.train)
    }

    pub fn val(&self) -> Vec<&GraphSample> {
        self.pick(&self.manifest.splits.val)
    }

    pub fn test(&self) -> Vec<&GraphSample> {
        self.pick(&self.manifest.splits.test)
    }

    /// Normalized copies of a split, ready for the model.
    pub fn normalized(&self, split: &[&GraphSample]) -> Result<Vec<GraphSample>> {
        split.iter().map(|s| self.manifest.norm_stats.apply(s)).collect()
    }
}

fn excitation_spec(cfg: &GenerationConfig, sample_rate: f64, index: u64) -> ExcitationSpec {
    ExcitationSpec {
        force_std: cfg.excitation.force_std,
        sample_rate,
        n_samples: cfg.welch.samples_for(cfg.excitation.segments),
        seed: rng::derive_seed(cfg.truss.seed, index, tag::EXCITATION),
    }
}

/// Simulates one structure's responses and turns them into a graph sample,
/// optionally injecting measurement noise before spectral estimation.
///
/// Noise is set per node relative to that node's signal power; nodes with no
/// motion (vertically supported joints) stay noise-free.
pub fn simulate_sample(
    id: u32,
    structure: &Structure,
    cfg: &GenerationConfig,
    sample_rate: f64,
    snr: Snr,
) -> Result<GraphSample> {
    let index = id as u64;
    let exc = excitation_spec(cfg, sample_rate, index);
    let mut series = psd::simulate_response(structure, &exc, &cfg.welch)?;
    if let Snr::Db(_) = snr {
        for (i, mut row) in series.rows_mut().into_iter().enumerate() {
            let x = row.to_vec();
            if x.iter().all(|&v| v == 0.0) {
                continue;
            }
            let seed = rng::derive_seed(cfg.truss.seed, index, tag::NOISE ^ i as u64);
            let noisy = psd::add_noise(&x, snr, seed)?;
            row.assign(&ndarray::Array1::from(noisy));
        }
    }
    let psd = NodePsdMatrix::from_series(&series, &cfg.welch, sample_rate)?.downsampled()?;
    let mut sample = build_graph(id, &structure.truss, &psd, &structure.modal)?;
    sample.meta = SampleMeta { seed: cfg.truss.seed, truss_index: index };
    Ok(sample)
}

/// Generates `total` samples: trusses and modes first, then one shared
/// sampling rate (`fs_factor ×` the highest target frequency, rounded up to
/// a whole Hz), then responses and spectra.
pub fn generate(cfg: &GenerationConfig, total: usize) -> Result<Dataset> {
    cfg.validate()?;
    if total == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let structures: Vec<Structure> =
        (0..total as u64).into_par_iter().map(|i| truss::synthesize(i, &cfg.truss)).collect::<Result<_>>()?;
    let sample_rate = match cfg.excitation.sample_rate {
        Some(fs) => fs,
        None => {
            let highest = structures
                .iter()
                .map(|s| *s.modal.frequencies.last().unwrap())
                .fold(0.0f64, f64::max);
            (cfg.excitation.fs_factor * highest).ceil()
        }
    };
    let samples: Vec<GraphSample> = structures
        .par_iter()
        .enumerate()
        .map(|(i, s)| simulate_sample(i as u32, s, cfg, sample_rate, Snr::Clean))
        .collect::<Result<_>>()?;

    let sizes = cfg.splits.for_total(total);
    let ids: Vec<u32> = (0..total as u32).collect();
    let splits = Splits {
        train: ids[..sizes.train].to_vec(),
        val: ids[sizes.train..sizes.train + sizes.val].to_vec(),
        test: ids[sizes.train + sizes.val..].to_vec(),
    };
    let train: Vec<&GraphSample> = splits.train.iter().map(|&i| &samples[i as usize]).collect();
    let norm_stats = if train.is_empty() { NormStats::fit(&samples)? } else { NormStats::fit(train)? };
    let mean_nodes = samples.iter().map(|s| s.n_nodes() as f64).sum::<f64>() / total as f64;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        total,
        splits,
        n_modes: cfg.truss.n_modes,
        feature_dim: FEATURE_DIM,
        norm_stats,
        target_transform: TargetTransform::Ln,
        sample_rate,
        generation: cfg.clone(),
        generation_digest: cfg.digest(),
        mean_nodes,
    };
    manifest.validate()?;
    Ok(Dataset { samples, manifest })
}

/// Rebuilds sample `id` from the generation recipe, with optional noise.
pub fn resimulate(manifest: &DatasetManifest, id: u32, snr: Snr) -> Result<GraphSample> {
    let structure = truss::synthesize(id as u64, &manifest.generation.truss)?;
    simulate_sample(id, &structure, &manifest.generation, manifest.sample_rate, snr)
}

/// Keeps PSD features on `ceil(fraction · N)` randomly chosen nodes, zeroes
/// the rest and appends an observed-flag column.
pub fn mask_sensors(sample: &GraphSample, fraction: f64, seed: u64) -> Result<GraphSample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParams(format!("sensor fraction {fraction} outside (0, 1]")));
    }
    let n = sample.n_nodes();
    let width = sample.feature_dim();
    if width < 2 {
        return Err(Error::Shape("sample has no coordinate features".into()));
    }
    let psd_bins = width - 2;
    let observed_count = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, sample.id as u64, tag::MASK);
    order.shuffle(&mut rng);
    let mut observed = vec![false; n];
    for &i in &order[..observed_count] {
        observed[i] = true;
    }
    let mut features = Array2::<f32>::zeros((n, width + 1));
    features.slice_mut(ndarray::s![.., ..width]).assign(&sample.features);
    for i in 0..n {
        if observed[i] {
            features[(i, width)] = 1.0;
        } else {
            features.slice_mut(ndarray::s![i, ..psd_bins]).fill(0.0);
        }
    }
    Ok(GraphSample { features, ..sample.clone() })
}

pub fn record_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("graph_{id}.bin"))
}

pub fn encode_record(sample: &GraphSample) -> Vec<u8> {
    let n = sample.n_nodes();
    let f = sample.feature_dim();
    let m = sample.n_modes();
    let mut payload = Vec::with_capacity(16 + 4 * (2 * n + 2 * sample.edges.len() + n * f + 2 * m + n * m));
    for v in [n as u32, sample.edges.len() as u32, f as u32, m as u32] {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for v in sample.coords.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for e in &sample.edges {
        payload.extend_from_slice(&e[0].to_le_bytes());
        payload.extend_from_slice(&e[1].to_le_bytes());
    }
    for v in sample.features.iter().chain(&sample.frequencies).chain(&sample.damping).chain(sample.shapes.iter()) {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self
            .buf
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format("truncated record".into()))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        (0..count).map(|_| self.u32().map(f32::from_bits)).collect()
    }
}

pub fn decode_record(id: u32, bytes: &[u8]) -> Result<GraphSample> {
    if bytes.len() < 12 || &bytes[..4] != RECORD_MAGIC {
        return Err(Error::Format(format!("record {id}: bad magic bytes")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != RECORD_VERSION {
        return Err(Error::Format(format!("record {id}: version {version} (expected {RECORD_VERSION})")));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut cur = Cursor { buf: payload, pos: 0 };
    let n = cur.u32()? as usize;
    let e2 = cur.u32()? as usize;
    let f = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let expected = 16 + 4 * (2 * n + 2 * e2 + n * f + 2 * m + n * m);
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "record {id}: payload has {} bytes, header implies {expected} (truncated?)",
            payload.len()
        )));
    }
    if crc32fast::hash(payload) != stored {
        return Err(Error::Format(format!("record {id}: checksum mismatch")));
    }
    let coords = Array2::from_shape_vec((n, 2), cur.f32s(2 * n)?).map_err(|e| Error::Format(e.to_string()))?;
    let mut edges = Vec::with_capacity(e2);
    for _ in 0..e2 {
        edges.push([cur.u32()?, cur.u32()?]);
    }
    let features = Array2::from_shape_vec((n, f), cur.f32s(n * f)?).map_err(|e| Error::Format(e.to_string()))?;
    let frequencies = cur.f32s(m)?;
    let damping = cur.f32s(m)?;
    let shapes = Array2::from_shape_vec((n, m), cur.f32s(n * m)?).map_err(|e| Error::Format(e.to_string()))?;
    Ok(GraphSample { id, coords, edges, features, frequencies, damping, shapes, meta: SampleMeta::default() })
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.manifest.validate()?;
    fs::create_dir_all(dir)?;
    for s in &dataset.samples {
        fs::write(record_path(dir, s.id), encode_record(s))?;
    }
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &dataset.manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let samples = (0..manifest.total as u32)
        .into_par_iter()
        .map(|id| {
            let bytes = fs::read(record_path(dir, id))?;
            let mut s = decode_record(id, &bytes)?;
            if s.feature_dim() != manifest.feature_dim || s.n_modes() != manifest.n_modes {
                return Err(Error::Validation(format!("record {id} does not match the manifest widths")));
            }
            s.meta = SampleMeta { seed: manifest.generation.truss.seed, truss_index: id as u64 };
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, manifest })
}

/// Pooled per-feature mean and population standard deviation.
pub fn feature_moments(samples: &[GraphSample]) -> (Vec<f64>, Vec<f64>) {
    let stacked: Vec<ndarray::ArrayView2<f32>> = samples.iter().map(|s| s.features.view()).collect();
    let all = ndarray::concatenate(Axis(0), &stacked).expect("equal widths").mapv(|v| v as f64);
    let mean = all.mean_axis(Axis(0)).unwrap();
    let std = all.std_axis(Axis(0), 0.0);
    (mean.to_vec(), std.to_vec())
}
