//! Evaluation of shortcut approximations: coordinate-averaged r2 in hidden
//! space, and precision / surprisal of the decoded next-token distribution.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{HeadError, HeadSet, Variant};
use crate::hsdata::{FinalNorm, HiddenPairDataset, HsDataError, NormKind, SplitPart};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("every coordinate of the true batch is constant")]
    AllConstant,
    #[error("dataset has no lm_head")]
    MissingLmHead,
    #[error("invalid cell {from}->{to}: from_block must be < to_block <= {num_blocks}")]
    InvalidCell {
        from: usize,
        to: usize,
        num_blocks: usize,
    },
    #[error("{metric} is only defined for jumps to the final block {final_block}, got {to}")]
    NotFinalBlock {
        metric: Metric,
        to: usize,
        final_block: usize,
    },
    #[error("the {0} split is empty")]
    EmptySplit(SplitPart),
    #[error("grid CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Data(#[from] HsDataError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(logits)[index]`, computed as `z_i - max - ln(sum exp(z - max))`.
pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits[index] - max - lse
}

/// Decodes hidden states into vocabulary logits: the model's final
/// normalization (when present and enabled) followed by the LM head.
#[derive(Debug, Clone)]
pub struct Unembedder {
    /// `V x H`.
    pub lm_head: Array2<f32>,
    pub final_norm: Option<FinalNorm>,
}

impl Unembedder {
    pub fn new(lm_head: Array2<f32>, final_norm: Option<FinalNorm>) -> Self {
        Self {
            lm_head,
            final_norm,
        }
    }

    /// Builds from a dump. `apply_final_norm = false` skips the stored
    /// normalization (ablation).
    pub fn from_dataset(dataset: &HiddenPairDataset, apply_final_norm: bool) -> Result<Self> {
        let lm_head = dataset.lm_head.clone().ok_or(MetricError::MissingLmHead)?;
        let final_norm = if apply_final_norm {
            dataset.final_norm.clone()
        } else {
            None
        };
        Ok(Self {
            lm_head,
            final_norm,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.lm_head.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.lm_head.ncols()
    }

    /// Applies the final normalization only.
    pub fn normalize(&self, h: ArrayView1<f64>) -> Vec<f64> {
        let Some(norm) = &self.final_norm else {
            return h.to_vec();
        };
        let n = h.len() as f64;
        match norm.kind {
            NormKind::LayerNorm => {
                let mean = h.sum() / n;
                let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + norm.epsilon).sqrt();
                h.iter()
                    .zip(norm.scale.iter().zip(&norm.bias))
                    .map(|(v, (&s, &b))| (v - mean) * inv * s as f64 + b as f64)
                    .collect()
            }
            NormKind::RmsNorm => {
                let ms = h.iter().map(|v| v * v).sum::<f64>() / n;
                let inv = 1.0 / (ms + norm.epsilon).sqrt();
                h.iter()
                    .zip(norm.scale.iter().zip(&norm.bias))
                    .map(|(v, (&s, &b))| v * inv * s as f64 + b as f64)
                    .collect()
            }
        }
    }

    /// Logits for one hidden state.
    pub fn unembed(&self, h: ArrayView1<f64>) -> Result<Vec<f64>> {
        if h.len() != self.hidden_dim() {
            return Err(MetricError::Shape(format!(
                "hidden state of width {} for lm_head of width {}",
                h.len(),
                self.hidden_dim()
            )));
        }
        let y = self.normalize(h);
        Ok(self
            .lm_head
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&y).map(|(&w, &v)| w as f64 * v).sum())
            .collect())
    }
}

/// Result of [`coordinate_averaged_r2`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R2Score {
    pub value: f64,
    /// Coordinates left out because the true batch is constant there.
    pub skipped_coordinates: usize,
}

/// Per-coordinate coefficient of determination averaged over coordinates.
/// Values below zero are legal (worse than predicting the mean).
pub fn coordinate_averaged_r2(truth: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<R2Score> {
    if truth.dim() != pred.dim() {
        return Err(MetricError::Shape(format!(
            "true {:?} vs predicted {:?}",
            truth.dim(),
            pred.dim()
        )));
    }
    let n = truth.nrows();
    if n < 2 {
        return Err(MetricError::TooFewSamples { need: 2, got: n });
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (t_col, p_col) in truth.columns().into_iter().zip(pred.columns()) {
        let first = t_col[0];
        if t_col.iter().all(|&v| v == first) {
            continue;
        }
        let mean = t_col.sum() / n as f64;
        let ss_tot: f64 = t_col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let ss_res: f64 = t_col
            .iter()
            .zip(p_col)
            .map(|(t, p)| (t - p) * (t - p))
            .sum();
        total += 1.0 - ss_res / ss_tot;
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::AllConstant);
    }
    Ok(R2Score {
        value: total / used as f64,
        skipped_coordinates: truth.ncols() - used,
    })
}

fn check_decode(truth: &ArrayView2<f64>, approx: &ArrayView2<f64>) -> Result<()> {
    if truth.dim() != approx.dim() {
        return Err(MetricError::Shape(format!(
            "true {:?} vs approximated {:?}",
            truth.dim(),
            approx.dim()
        )));
    }
    if truth.nrows() == 0 {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    Ok(())
}

/// Per-sample outcome of decoding a true and an approximated final state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedPair {
    pub true_token: usize,
    pub approx_token: usize,
    /// `-ln p_approx(true_token)`, natural log.
    pub surprisal: f64,
}

pub fn decode_pair(
    unembedder: &Unembedder,
    truth: ArrayView1<f64>,
    approx: ArrayView1<f64>,
) -> Result<DecodedPair> {
    let t_logits = unembedder.unembed(truth)?;
    let a_logits = unembedder.unembed(approx)?;
    let true_token = argmax(&t_logits);
    Ok(DecodedPair {
        true_token,
        approx_token: argmax(&a_logits),
        surprisal: -log_softmax_at(&a_logits, true_token),
    })
}

fn decode_all(
    unembedder: &Unembedder,
    truth: ArrayView2<f64>,
    approx: ArrayView2<f64>,
) -> Result<Vec<DecodedPair>> {
    check_decode(&truth, &approx)?;
    truth
        .rows()
        .into_iter()
        .zip(approx.rows())
        .map(|(t, a)| decode_pair(unembedder, t, a))
        .collect()
}

/// Fraction of samples whose approximated argmax token equals the true
/// final state's argmax token.
pub fn precision(
    truth: ArrayView2<f64>,
    approx: ArrayView2<f64>,
    unembedder: &Unembedder,
) -> Result<f64> {
    let pairs = decode_all(unembedder, truth, approx)?;
    let hits = pairs
        .iter()
        .filter(|p| p.true_token == p.approx_token)
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean negative log-likelihood (nats) of the true argmax token under the
/// approximated distribution.
pub fn surprisal(
    truth: ArrayView2<f64>,
    approx: ArrayView2<f64>,
    unembedder: &Unembedder,
) -> Result<f64> {
    let pairs = decode_all(unembedder, truth, approx)?;
    Ok(pairs.iter().map(|p| p.surprisal).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    R2,
    Precision,
    Surprisal,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::R2 => "r2",
            Metric::Precision => "precision",
            Metric::Surprisal => "surprisal",
        }
    }

    /// Decoded-token metrics only exist for jumps to the final block.
    pub fn needs_final_block(self) -> bool {
        self != Metric::R2
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r2" => Ok(Metric::R2),
            "precision" => Ok(Metric::Precision),
            "surprisal" => Ok(Metric::Surprisal),
            other => Err(format!(
                "unknown metric {other:?} (expected r2, precision or surprisal)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub from_block: usize,
    pub to_block: usize,
    pub value: f64,
    pub n: usize,
}

/// One metric over a set of (from_block, to_block) jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvalGrid {
    pub metric: Metric,
    pub variant: Variant,
    pub split: SplitPart,
    pub num_blocks: usize,
    pub cells: Vec<GridCell>,
}

impl JumpEvalGrid {
    pub fn get(&self, from_block: usize, to_block: usize) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.from_block == from_block && c.to_block == to_block)
    }

    /// Long-format CSV: `from_block,to_block,value,n`.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(c).expect("writing to memory");
        }
        w.into_inner().expect("writing to memory")
    }

    pub fn cells_from_csv(bytes: &[u8]) -> Result<Vec<GridCell>> {
        let mut r = csv::Reader::from_reader(bytes);
        r.deserialize()
            .map(|c| c.map_err(|e| MetricError::Csv(e.to_string())))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("grid serializes");
        s.push('\n');
        s
    }

    /// Values as a dense `(num_blocks + 1)^2` matrix, `NaN` for absent cells.
    pub fn dense(&self) -> Array2<f64> {
        let k = self.num_blocks + 1;
        let mut m = Array2::from_elem((k, k), f64::NAN);
        for c in &self.cells {
            m[[c.from_block, c.to_block]] = c.value;
        }
        m
    }
}

/// Every `(l, m)` with `0 <= l < m <= num_blocks`.
pub fn all_pairs(num_blocks: usize) -> Vec<(usize, usize)> {
    (0..num_blocks)
        .flat_map(|l| (l + 1..=num_blocks).map(move |m| (l, m)))
        .collect()
}

/// Every `(l, num_blocks)` with `0 <= l < num_blocks`.
pub fn to_final(num_blocks: usize) -> Vec<(usize, usize)> {
    (0..num_blocks).map(|l| (l, num_blocks)).collect()
}

/// Evaluates `metric` for each requested cell on one split (normally the
/// validation split). Cells are evaluated in parallel; the output keeps
/// the request order.
pub fn build_jump_grid(
    dataset: &HiddenPairDataset,
    heads: &HeadSet,
    metric: Metric,
    cells: &[(usize, usize)],
    unembedder: Option<&Unembedder>,
    part: SplitPart,
) -> Result<JumpEvalGrid> {
    let num_blocks = dataset.num_blocks();
    for &(l, m) in cells {
        if l >= m || m > num_blocks {
            return Err(MetricError::InvalidCell {
                from: l,
                to: m,
                num_blocks,
            });
        }
        if metric.needs_final_block() && m != num_blocks {
            return Err(MetricError::NotFinalBlock {
                metric,
                to: m,
                final_block: num_blocks,
            });
        }
    }
    let missing = heads.missing(cells);
    if !missing.is_empty() {
        return Err(HeadError::MissingHeads {
            variant: heads.variant,
            cells: missing,
        }
        .into());
    }
    let unembedder = if metric.needs_final_block() {
        Some(unembedder.ok_or(MetricError::MissingLmHead)?)
    } else {
        None
    };
    let idx = dataset.split.indices(part);
    if idx.is_empty() {
        return Err(MetricError::EmptySplit(part));
    }

    let needed: std::collections::BTreeSet<usize> =
        cells.iter().flat_map(|&(l, m)| [l, m]).collect();
    let rows: BTreeMap<usize, Array2<f64>> = needed
        .into_iter()
        .map(|k| dataset.rows_f64(k, &idx).map(|r| (k, r)))
        .collect::<std::result::Result<_, _>>()?;

    let values: Vec<Result<GridCell>> = cells
        .par_iter()
        .map(|&(l, m)| {
            let head = heads.get(l, m).expect("checked above");
            let approx = head.forward_eval(rows[&l].view())?;
            let truth = rows[&m].view();
            let value = match metric {
                Metric::R2 => coordinate_averaged_r2(truth, approx.view())?.value,
                Metric::Precision => precision(truth, approx.view(), unembedder.unwrap())?,
                Metric::Surprisal => surprisal(truth, approx.view(), unembedder.unwrap())?,
            };
            Ok(GridCell {
                from_block: l,
                to_block: m,
                value,
                n: idx.len(),
            })
        })
        .collect();
    Ok(JumpEvalGrid {
        metric,
        variant: heads.variant,
        split: part,
        num_blocks,
        cells: values.into_iter().collect::<Result<_>>()?,
    })
}
