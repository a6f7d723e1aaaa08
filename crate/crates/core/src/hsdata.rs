//! On-disk activation dumps and the in-memory paired hidden-state dataset.
//!
//! A dump is a directory:
//!
//! ```text
//! manifest.json        hidden_dim, num_blocks, vocab_size, num_samples, dtype,
//!                      has_lm_head, has_final_norm, model_name, block_files
//!                      (+ final_norm_epsilon, optional final_norm_kind)
//! block_{k}.bin        k = 0..=num_blocks, row-major N x H float32 LE, no header
//! lm_head.bin          row-major V x H (only when has_lm_head)
//! final_norm.bin       H scale floats then H bias floats (only when has_final_norm)
//! samples.csv          optional: sample_index,sentence_id,token_position,split
//! ```
//!
//! Block 0 is the embedding output; block `k` is the output of the k-th
//! transformer block. Row `i` of every block file belongs to the same
//! (sentence, token position) pair.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{f32_to_le_bytes, first_non_finite, le_bytes_to_f32, write_atomic};

pub const DTYPE_F32LE: &str = "f32le";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LM_HEAD_FILE: &str = "lm_head.bin";
pub const FINAL_NORM_FILE: &str = "final_norm.bin";
pub const SAMPLES_FILE: &str = "samples.csv";

/// Fraction of samples assigned to the training split when a dump carries
/// no split of its own (9,000 / 3,000 sentences).
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.75;

/// One sampled position per sentence keeps samples as independent as possible.
pub const DEFAULT_POSITIONS_PER_SENTENCE: usize = 1;

#[derive(Debug, Error)]
pub enum HsDataError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {file}")]
    MissingFile { file: String },
    #[error("{file}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        file: String,
        expected: u64,
        actual: u64,
    },
    #[error("unsupported dtype {0:?} (only \"f32le\" is supported)")]
    UnsupportedDtype(String),
    #[error("{file}: non-finite value at byte offset {offset}")]
    NonFinite { file: String, offset: u64 },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("sentence list is empty")]
    EmptySentenceList,
    #[error("sentence {0} has length 0")]
    EmptySentence(usize),
    #[error("split of {n} items with train fraction {fraction} leaves the train set empty")]
    EmptyTrainSet { n: usize, fraction: f64 },
    #[error("train fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
}

pub type Result<T> = std::result::Result<T, HsDataError>;

/// Kind of normalization applied before the LM head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationManifest {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub vocab_size: usize,
    pub num_samples: usize,
    pub dtype: String,
    pub has_lm_head: bool,
    pub has_final_norm: bool,
    pub model_name: String,
    pub block_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_norm_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_norm_kind: Option<NormKind>,
}

impl ActivationManifest {
    pub fn block_file_name(k: usize) -> String {
        format!("block_{k}.bin")
    }

    fn validate(&self) -> Result<()> {
        if self.dtype != DTYPE_F32LE {
            return Err(HsDataError::UnsupportedDtype(self.dtype.clone()));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("num_blocks", self.num_blocks),
            ("vocab_size", self.vocab_size),
            ("num_samples", self.num_samples),
        ] {
            if v == 0 {
                return Err(HsDataError::Manifest(format!("{name} must be positive")));
            }
        }
        if self.block_files.len() != self.num_blocks + 1 {
            return Err(HsDataError::Manifest(format!(
                "block_files lists {} files, expected {} (blocks 0..={})",
                self.block_files.len(),
                self.num_blocks + 1,
                self.num_blocks
            )));
        }
        if self.has_final_norm {
            match self.final_norm_epsilon {
                Some(e) if e.is_finite() && e > 0.0 => {}
                _ => {
                    return Err(HsDataError::Manifest(
                        "has_final_norm requires a positive final_norm_epsilon".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Final normalization parameters applied before unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalNorm {
    pub kind: NormKind,
    pub scale: Vec<f32>,
    pub bias: Vec<f32>,
    pub epsilon: f64,
}

/// One sampled (sentence, token position) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleSpec {
    pub sentence_id: u64,
    pub token_position: usize,
}

/// Assignment of every sample index to train or validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    is_train: Vec<bool>,
}

impl Split {
    pub fn from_flags(is_train: Vec<bool>) -> Self {
        Self { is_train }
    }

    pub fn all_train(n: usize) -> Self {
        Self {
            is_train: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.is_train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_train.is_empty()
    }

    pub fn is_train(&self, i: usize) -> bool {
        self.is_train[i]
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.is_train.len())
            .filter(|&i| self.is_train[i])
            .collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        (0..self.is_train.len())
            .filter(|&i| !self.is_train[i])
            .collect()
    }

    pub fn indices(&self, part: SplitPart) -> Vec<usize> {
        match part {
            SplitPart::Train => self.train_indices(),
            SplitPart::Val => self.val_indices(),
            SplitPart::All => (0..self.is_train.len()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    All,
}

impl std::fmt::Display for SplitPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::All => "all",
        })
    }
}

/// Paired per-block hidden states plus the unembedding weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenPairDataset {
    pub manifest: ActivationManifest,
    /// `blocks[k]` is `N x H`, k = 0..=num_blocks.
    pub blocks: Vec<Array2<f32>>,
    /// `V x H`.
    pub lm_head: Option<Array2<f32>>,
    pub final_norm: Option<FinalNorm>,
    /// Provenance of each row, when known.
    pub samples: Option<Vec<SampleSpec>>,
    pub split: Split,
}

impl HiddenPairDataset {
    /// Builds a dataset from in-memory parts and fills in the manifest.
    /// Without an explicit split, the default one is used.
    pub fn new(
        model_name: impl Into<String>,
        blocks: Vec<Array2<f32>>,
        lm_head: Option<Array2<f32>>,
        final_norm: Option<FinalNorm>,
        samples: Option<Vec<SampleSpec>>,
        split: Option<Split>,
    ) -> Result<Self> {
        if blocks.len() < 2 {
            return Err(HsDataError::Invalid(
                "need at least the embedding output and one block".into(),
            ));
        }
        let (n, h) = blocks[0].dim();
        let vocab_size = lm_head.as_ref().map(|m| m.nrows()).unwrap_or(1);
        let manifest = ActivationManifest {
            hidden_dim: h,
            num_blocks: blocks.len() - 1,
            vocab_size,
            num_samples: n,
            dtype: DTYPE_F32LE.to_string(),
            has_lm_head: lm_head.is_some(),
            has_final_norm: final_norm.is_some(),
            model_name: model_name.into(),
            block_files: (0..blocks.len())
                .map(ActivationManifest::block_file_name)
                .collect(),
            final_norm_epsilon: final_norm.as_ref().map(|f| f.epsilon),
            final_norm_kind: final_norm.as_ref().map(|f| f.kind),
        };
        let split = match split {
            Some(s) => s,
            None => default_split(n, samples.as_deref())?,
        };
        let ds = Self {
            manifest,
            blocks,
            lm_head,
            final_norm,
            samples,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn hidden_dim(&self) -> usize {
        self.manifest.hidden_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.manifest.num_blocks
    }

    pub fn num_samples(&self) -> usize {
        self.manifest.num_samples
    }

    pub fn block(&self, k: usize) -> Result<&Array2<f32>> {
        self.blocks.get(k).ok_or_else(|| {
            HsDataError::Invalid(format!(
                "block {k} out of range 0..={}",
                self.manifest.num_blocks
            ))
        })
    }

    /// Rows `indices` of block `k`, widened to f64.
    pub fn rows_f64(&self, k: usize, indices: &[usize]) -> Result<Array2<f64>> {
        let b = self.block(k)?;
        let h = b.ncols();
        let mut out = Array2::<f64>::zeros((indices.len(), h));
        for (r, &i) in indices.iter().enumerate() {
            for (dst, src) in out.row_mut(r).iter_mut().zip(b.row(i).iter()) {
                *dst = *src as f64;
            }
        }
        Ok(out)
    }

    /// Replaces the split. The new split must cover every sample.
    pub fn with_split(mut self, split: Split) -> Result<Self> {
        if split.len() != self.num_samples() {
            return Err(HsDataError::Invalid(format!(
                "split covers {} samples, dataset has {}",
                split.len(),
                self.num_samples()
            )));
        }
        self.split = split;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        if self.blocks.len() != m.num_blocks + 1 {
            return Err(HsDataError::Invalid(format!(
                "{} block matrices for num_blocks={}",
                self.blocks.len(),
                m.num_blocks
            )));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if b.dim() != (m.num_samples, m.hidden_dim) {
                return Err(HsDataError::Invalid(format!(
                    "block {k} has shape {:?}, expected ({}, {})",
                    b.dim(),
                    m.num_samples,
                    m.hidden_dim
                )));
            }
        }
        match (&self.lm_head, m.has_lm_head) {
            (Some(w), true) if w.dim() == (m.vocab_size, m.hidden_dim) => {}
            (None, false) => {}
            _ => {
                return Err(HsDataError::Invalid(
                    "lm_head inconsistent with manifest".into(),
                ))
            }
        }
        match (&self.final_norm, m.has_final_norm) {
            (Some(f), true) if f.scale.len() == m.hidden_dim && f.bias.len() == m.hidden_dim => {}
            (None, false) => {}
            _ => {
                return Err(HsDataError::Invalid(
                    "final_norm inconsistent with manifest".into(),
                ))
            }
        }
        if let Some(s) = &self.samples {
            if s.len() != m.num_samples {
                return Err(HsDataError::Invalid(format!(
                    "{} sample specs for {} samples",
                    s.len(),
                    m.num_samples
                )));
            }
        }
        if self.split.len() != m.num_samples {
            return Err(HsDataError::Invalid(
                "split does not cover all samples".into(),
            ));
        }
        Ok(())
    }
}

/// Default split: 75/25, seed 0, grouped by sentence when provenance is known.
pub fn default_split(n: usize, samples: Option<&[SampleSpec]>) -> Result<Split> {
    if n < 2 {
        return Ok(Split::all_train(n));
    }
    match samples {
        Some(s) => {
            let groups: Vec<u64> = s.iter().map(|s| s.sentence_id).collect();
            let distinct = groups.iter().collect::<BTreeSet<_>>().len();
            if distinct < 2 {
                split_train_val(n, DEFAULT_TRAIN_FRACTION, 0)
            } else {
                split_by_group(&groups, DEFAULT_TRAIN_FRACTION, 0)
            }
        }
        None => split_train_val(n, DEFAULT_TRAIN_FRACTION, 0),
    }
}

fn train_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(HsDataError::InvalidFraction(fraction));
    }
    // Guard against 0.29 * 100 = 28.999999999999996.
    let k = (fraction * n as f64 + 1e-9).floor() as usize;
    let k = k.min(n);
    if k == 0 {
        return Err(HsDataError::EmptyTrainSet { n, fraction });
    }
    Ok(k)
}

/// Chooses `floor(train_fraction * n)` train indices uniformly at random;
/// the rest are validation.
pub fn split_train_val(n: usize, train_fraction: f64, seed: u64) -> Result<Split> {
    let k = train_count(n, train_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, k) {
        is_train[i] = true;
    }
    Ok(Split { is_train })
}

/// Splits by group key so that all samples sharing a key (e.g. a sentence
/// id) land on the same side. The fraction applies to distinct groups.
pub fn split_by_group(groups: &[u64], train_fraction: f64, seed: u64) -> Result<Split> {
    let distinct: Vec<u64> = groups
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let group_split = split_train_val(distinct.len(), train_fraction, seed)?;
    let is_train = groups
        .iter()
        .map(|g| {
            let pos = distinct.binary_search(g).expect("group present");
            group_split.is_train(pos)
        })
        .collect();
    Ok(Split { is_train })
}

/// Draws `min(per_sentence, len)` distinct positions uniformly without
/// replacement from each sentence. Output is ordered by sentence, then by
/// ascending position.
pub fn sample_token_positions(
    sentence_lengths: &[usize],
    per_sentence: usize,
    seed: u64,
) -> Result<Vec<SampleSpec>> {
    if sentence_lengths.is_empty() {
        return Err(HsDataError::EmptySentenceList);
    }
    if per_sentence == 0 {
        return Err(HsDataError::Invalid("per_sentence must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (sid, &len) in sentence_lengths.iter().enumerate() {
        if len == 0 {
            return Err(HsDataError::EmptySentence(sid));
        }
        let take = per_sentence.min(len);
        let mut positions = rand::seq::index::sample(&mut rng, len, take).into_vec();
        positions.sort_unstable();
        out.extend(positions.into_iter().map(|p| SampleSpec {
            sentence_id: sid as u64,
            token_position: p,
        }));
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HsDataError + '_ {
    move |source| HsDataError::Io {
        file: path.display().to_string(),
        source,
    }
}

fn read_tensor(dir: &Path, name: &str, count: usize) -> Result<Vec<f32>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(HsDataError::MissingFile {
            file: name.to_string(),
        });
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let expected = (count * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(HsDataError::SizeMismatch {
            file: name.to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values = le_bytes_to_f32(&bytes);
    if let Some(i) = first_non_finite(&values) {
        return Err(HsDataError::NonFinite {
            file: name.to_string(),
            offset: (i * 4) as u64,
        });
    }
    Ok(values)
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    sample_index: usize,
    sentence_id: u64,
    token_position: usize,
    split: String,
}

/// Loads and validates a dump directory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<HiddenPairDataset> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(HsDataError::MissingFile {
            file: MANIFEST_FILE.to_string(),
        });
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: ActivationManifest =
        serde_json::from_str(&text).map_err(|e| HsDataError::Manifest(e.to_string()))?;
    manifest.validate()?;
    let (n, h) = (manifest.num_samples, manifest.hidden_dim);

    let mut blocks = Vec::with_capacity(manifest.num_blocks + 1);
    for name in &manifest.block_files {
        let v = read_tensor(dir, name, n * h)?;
        blocks.push(Array2::from_shape_vec((n, h), v).expect("length checked"));
    }
    let lm_head = if manifest.has_lm_head {
        let v = read_tensor(dir, LM_HEAD_FILE, manifest.vocab_size * h)?;
        Some(Array2::from_shape_vec((manifest.vocab_size, h), v).expect("length checked"))
    } else {
        None
    };
    let final_norm = if manifest.has_final_norm {
        let v = read_tensor(dir, FINAL_NORM_FILE, 2 * h)?;
        Some(FinalNorm {
            kind: manifest.final_norm_kind.unwrap_or_default(),
            scale: v[..h].to_vec(),
            bias: v[h..].to_vec(),
            epsilon: manifest.final_norm_epsilon.expect("validated"),
        })
    } else {
        None
    };

    let samples_path = dir.join(SAMPLES_FILE);
    let (samples, split) = if samples_path.is_file() {
        let (s, split) = read_samples(&samples_path, n)?;
        (Some(s), split)
    } else {
        (None, default_split(n, None)?)
    };

    let ds = HiddenPairDataset {
        manifest,
        blocks,
        lm_head,
        final_norm,
        samples,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

fn read_samples(path: &Path, n: usize) -> Result<(Vec<SampleSpec>, Split)> {
    let bad = |msg: String| HsDataError::Invalid(format!("{SAMPLES_FILE}: {msg}"));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut samples = Vec::with_capacity(n);
    let mut is_train = Vec::with_capacity(n);
    for (i, row) in reader.deserialize::<SampleRow>().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.sample_index != i {
            return Err(bad(format!(
                "row {i} has sample_index {}",
                row.sample_index
            )));
        }
        samples.push(SampleSpec {
            sentence_id: row.sentence_id,
            token_position: row.token_position,
        });
        is_train.push(match row.split.as_str() {
            "train" => true,
            "val" => false,
            other => return Err(bad(format!("unknown split {other:?}"))),
        });
    }
    if samples.len() != n {
        return Err(bad(format!("{} rows for {n} samples", samples.len())));
    }
    Ok((samples, Split { is_train }))
}

/// Writes `dataset` to `path`; `load_dataset` of the result is bit-identical.
pub fn save_dataset(dataset: &HiddenPairDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p: PathBuf = dir.join(name);
        write_atomic(&p, bytes).map_err(io_err(&p))
    };

    for (name, block) in dataset.manifest.block_files.iter().zip(&dataset.blocks) {
        write(name, &f32_to_le_bytes(block.iter().copied()))?;
    }
    if let Some(w) = &dataset.lm_head {
        write(LM_HEAD_FILE, &f32_to_le_bytes(w.iter().copied()))?;
    }
    if let Some(f) = &dataset.final_norm {
        write(
            FINAL_NORM_FILE,
            &f32_to_le_bytes(f.scale.iter().chain(&f.bias).copied()),
        )?;
    }
    if let Some(samples) = &dataset.samples {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (i, s) in samples.iter().enumerate() {
            w.serialize(SampleRow {
                sample_index: i,
                sentence_id: s.sentence_id,
                token_position: s.token_position,
                split: if dataset.split.is_train(i) {
                    "train"
                } else {
                    "val"
                }
                .to_string(),
            })
            .map_err(|e| HsDataError::Invalid(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HsDataError::Invalid(e.to_string()))?;
        write(SAMPLES_FILE, &bytes)?;
    }
    let mut json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| HsDataError::Manifest(e.to_string()))?;
    json.push('\n');
    write(MANIFEST_FILE, json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn toy(n: usize, h: usize, blocks: usize, v: usize) -> HiddenPairDataset {
        let mk = |seed: usize, r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |(i, j)| {
                ((seed * 31 + i * 7 + j * 3) % 17) as f32 * 0.25 - 2.0
            })
        };
        let bl = (0..=blocks).map(|k| mk(k, n, h)).collect();
        let fnorm = FinalNorm {
            kind: NormKind::LayerNorm,
            scale: vec![1.0; h],
            bias: vec![0.0; h],
            epsilon: 1e-5,
        };
        HiddenPairDataset::new("toy", bl, Some(mk(99, v, h)), Some(fnorm), None, None).unwrap()
    }

    #[test]
    fn load_shapes_follow_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(4, 8, 2, 5);
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.blocks.len(), 3);
        for b in &back.blocks {
            assert_eq!(b.dim(), (4, 8));
        }
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_block_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(4, 8, 2, 5), dir.path()).unwrap();
        let p = dir.path().join("block_1.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        match load_dataset(dir.path()) {
            Err(HsDataError::SizeMismatch {
                file,
                expected,
                actual,
            }) => {
                assert_eq!(file, "block_1.bin");
                assert_eq!(expected, 4 * 8 * 4);
                assert_eq!(actual, 4 * 8 * 4 - 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_bad_dtype() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(4, 8, 2, 5), dir.path()).unwrap();
        fs::remove_file(dir.path().join("lm_head.bin")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(HsDataError::MissingFile { file }) if file == "lm_head.bin"
        ));

        save_dataset(&toy(4, 8, 2, 5), dir.path()).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).unwrap().replace("f32le", "f16le");
        fs::write(&mp, text).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(HsDataError::UnsupportedDtype(_))
        ));
    }

    #[test]
    fn non_finite_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(4, 8, 2, 5), dir.path()).unwrap();
        let p = dir.path().join("block_2.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(HsDataError::NonFinite { file, offset }) => {
                assert_eq!(file, "block_2.bin");
                assert_eq!(offset, 12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn no_lm_head_writes_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let blocks = vec![Array2::<f32>::ones((4, 3)), Array2::<f32>::zeros((4, 3))];
        let ds = HiddenPairDataset::new("x", blocks, None, None, None, None).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert!(!dir.path().join(LM_HEAD_FILE).exists());
        assert!(!dir.path().join(FINAL_NORM_FILE).exists());
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["has_lm_head"], false);
        assert_eq!(
            fs::metadata(dir.path().join("block_0.bin")).unwrap().len(),
            4 * 3 * 4
        );
    }

    #[test]
    fn manifest_keys() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(4, 8, 2, 5), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "block_files",
                "dtype",
                "final_norm_epsilon",
                "final_norm_kind",
                "has_final_norm",
                "has_lm_head",
                "hidden_dim",
                "model_name",
                "num_blocks",
                "num_samples",
                "vocab_size"
            ]
        );
    }

    #[test]
    fn samples_and_split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy(6, 4, 1, 3);
        let samples = sample_token_positions(&[3, 3], 3, 1).unwrap();
        ds.samples = Some(samples);
        let ds = ds.with_split(split_train_val(6, 0.5, 3).unwrap()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn token_positions_are_uniform() {
        // 10,000 single draws from a 1000-token sentence; the chi-square
        // statistic over 1000 bins must stay within 3 sigma of its mean.
        let bins = 1000usize;
        let draws = 10_000u64;
        let mut counts = vec![0u64; bins];
        for seed in 0..draws {
            let s = sample_token_positions(&[bins], 1, seed).unwrap();
            counts[s[0].token_position] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let df = (bins - 1) as f64;
        assert!(chi2 < df + 3.0 * (2.0 * df).sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn token_position_examples() {
        assert_eq!(
            sample_token_positions(&[1], 1, 0).unwrap(),
            vec![SampleSpec {
                sentence_id: 0,
                token_position: 0
            }]
        );
        let all = sample_token_positions(&[5, 5], 5, 9).unwrap();
        assert_eq!(all.len(), 10);
        let expected: Vec<_> = (0..2u64)
            .flat_map(|s| {
                (0..5).map(move |p| SampleSpec {
                    sentence_id: s,
                    token_position: p,
                })
            })
            .collect();
        assert_eq!(all, expected);
        assert!(matches!(
            sample_token_positions(&[], 1, 0),
            Err(HsDataError::EmptySentenceList)
        ));
        assert_eq!(
            sample_token_positions(&[7, 2, 9], 3, 42).unwrap(),
            sample_token_positions(&[7, 2, 9], 3, 42).unwrap()
        );
    }

    #[test]
    fn split_examples() {
        let s = split_train_val(12000, 0.75, 0).unwrap();
        assert_eq!(s.train_indices().len(), 9000);
        assert_eq!(s.val_indices().len(), 3000);

        let s = split_train_val(4, 1.0, 0).unwrap();
        assert_eq!(s.train_indices(), vec![0, 1, 2, 3]);
        assert!(s.val_indices().is_empty());

        assert_eq!(
            split_train_val(50, 0.3, 7).unwrap(),
            split_train_val(50, 0.3, 7).unwrap()
        );
        assert!(matches!(
            split_train_val(1, 0.5, 0),
            Err(HsDataError::EmptyTrainSet { .. })
        ));
        assert!(matches!(
            split_train_val(10, 0.0, 0),
            Err(HsDataError::InvalidFraction(_))
        ));
    }

    #[test]
    fn group_split_keeps_groups_together() {
        let groups = [0u64, 0, 1, 1, 1, 2, 3, 3];
        let s = split_by_group(&groups, 0.5, 11).unwrap();
        for i in 0..groups.len() {
            for j in 0..groups.len() {
                if groups[i] == groups[j] {
                    assert_eq!(s.is_train(i), s.is_train(j));
                }
            }
        }
        let train_groups: BTreeSet<_> = (0..groups.len())
            .filter(|&i| s.is_train(i))
            .map(|i| groups[i])
            .collect();
        assert_eq!(train_groups.len(), 2);
    }
}
