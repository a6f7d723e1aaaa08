//! Confidence-threshold early exit, replayed offline against dumped block
//! states or run live on the toy model.
//!
//! For each token the eligible blocks are scanned in order. At block `l` the
//! shortcut head `(l, final)` predicts the final state, which is decoded to a
//! distribution. The token exits at the first block whose max softmax
//! probability reaches `lambda`; otherwise it falls through to the true final
//! output.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{HeadError, HeadSet, Variant};
use crate::hsdata::{HiddenPairDataset, SplitPart};
use crate::io::write_atomic;
use crate::metrics::{argmax, softmax, MetricError, Unembedder};
use crate::toylm::{ToyError, ToyLM};

#[derive(Debug, Error)]
pub enum ExitError {
    #[error("lambda must lie in (0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("eligible blocks must be strictly increasing")]
    NotIncreasing,
    #[error("eligible block {block} must be below the final block {num_blocks}")]
    InvalidBlock { block: usize, num_blocks: usize },
    #[error("no {variant} head to the final block for eligible block(s) {blocks:?}")]
    MissingHeads {
        variant: Variant,
        blocks: Vec<usize>,
    },
    #[error("no samples to simulate")]
    Empty,
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Toy(#[from] ToyError),
}

pub type Result<T> = std::result::Result<T, ExitError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub lambda: f64,
    /// Blocks at which an exit check runs, strictly increasing.
    pub eligible_blocks: Vec<usize>,
    pub variant: Variant,
}

impl ExitPolicy {
    pub fn new(lambda: f64, eligible_blocks: Vec<usize>, variant: Variant) -> Result<Self> {
        let policy = Self {
            lambda,
            eligible_blocks,
            variant,
        };
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(ExitError::InvalidLambda(lambda));
        }
        if policy.eligible_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ExitError::NotIncreasing);
        }
        Ok(policy)
    }

    /// Checks at every block `0..num_blocks`.
    pub fn every_block(lambda: f64, num_blocks: usize, variant: Variant) -> Result<Self> {
        Self::new(lambda, (0..num_blocks).collect(), variant)
    }

    fn check(&self, num_blocks: usize, heads: &HeadSet) -> Result<()> {
        if let Some(&block) = self.eligible_blocks.iter().find(|&&b| b >= num_blocks) {
            return Err(ExitError::InvalidBlock { block, num_blocks });
        }
        let missing: Vec<usize> = self
            .eligible_blocks
            .iter()
            .copied()
            .filter(|&l| heads.get(l, num_blocks).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(ExitError::MissingHeads {
                variant: heads.variant,
                blocks: missing,
            });
        }
        Ok(())
    }
}

/// Where block states come from.
pub enum ExitSource<'a> {
    /// Replay dumped states for one split of a dataset.
    Dataset {
        dataset: &'a HiddenPairDataset,
        part: SplitPart,
    },
    /// Run the toy model over every position of every sequence.
    Live {
        model: &'a ToyLM,
        sequences: &'a [Vec<usize>],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub sample: usize,
    pub exit_block: usize,
    /// Max softmax probability of the distribution the token exited with.
    pub confidence: f64,
    pub predicted_token: usize,
    pub full_token: usize,
    pub blocks_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    pub policy: ExitPolicy,
    pub num_blocks: usize,
    pub records: Vec<ExitRecord>,
    pub early_exits: usize,
    pub mean_exit_block: f64,
    pub agreement: f64,
    pub skipped_fraction: f64,
}

impl ExitTrace {
    fn from_records(policy: ExitPolicy, num_blocks: usize, records: Vec<ExitRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let early_exits = records.iter().filter(|r| r.exit_block < num_blocks).count();
        let mean_exit_block = records.iter().map(|r| r.exit_block as f64).sum::<f64>() / n;
        let agreement = records
            .iter()
            .filter(|r| r.predicted_token == r.full_token)
            .count() as f64
            / n;
        let mut trace = Self {
            policy,
            num_blocks,
            records,
            early_exits,
            mean_exit_block,
            agreement,
            skipped_fraction: 0.0,
        };
        trace.skipped_fraction = compute_savings(&trace, num_blocks);
        trace
    }

    /// Per-token CSV with a header row.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).expect("writing to memory");
        }
        w.into_inner().expect("writing to memory")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let io = |e: std::io::Error| ExitError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        write_atomic(&dir.join(format!("{stem}.json")), self.to_json().as_bytes()).map_err(io)?;
        write_atomic(&dir.join(format!("{stem}.csv")), &self.to_csv()).map_err(io)?;
        Ok(())
    }
}

/// Mean over tokens of `(num_blocks - exit_block) / num_blocks`.
pub fn compute_savings(trace: &ExitTrace, num_blocks: usize) -> f64 {
    if trace.records.is_empty() || num_blocks == 0 {
        return 0.0;
    }
    let total: f64 = trace
        .records
        .iter()
        .map(|r| num_blocks.saturating_sub(r.exit_block) as f64 / num_blocks as f64)
        .sum();
    total / trace.records.len() as f64
}

/// Simulates early exit for every sample of `source`. Without an explicit
/// unembedder, the dataset's LM head and final norm (or the toy model's own
/// decoder) are used.
pub fn run_early_exit(
    source: &ExitSource<'_>,
    heads: &HeadSet,
    policy: &ExitPolicy,
    unembedder: Option<&Unembedder>,
) -> Result<ExitTrace> {
    ExitPolicy::new(
        policy.lambda,
        policy.eligible_blocks.clone(),
        policy.variant,
    )?;
    let (states, owned) = match source {
        ExitSource::Dataset { dataset, part } => {
            let idx = dataset.split.indices(*part);
            let states: Vec<Array2<f64>> = (0..=dataset.num_blocks())
                .map(|k| dataset.rows_f64(k, &idx))
                .collect::<std::result::Result<_, _>>()
                .map_err(MetricError::from)?;
            let owned = match unembedder {
                Some(_) => None,
                None => Some(Unembedder::from_dataset(dataset, true)?),
            };
            (states, owned)
        }
        ExitSource::Live { model, sequences } => {
            (live_states(model, sequences)?, Some(model.unembedder()))
        }
    };
    let unembedder = unembedder
        .or(owned.as_ref())
        .expect("one decoder is always available");
    let num_blocks = states.len() - 1;
    policy.check(num_blocks, heads)?;
    let views: Vec<ArrayView2<f64>> = states.iter().map(|s| s.view()).collect();
    simulate(&views, heads, policy, unembedder)
}

fn live_states(model: &ToyLM, sequences: &[Vec<usize>]) -> Result<Vec<Array2<f64>>> {
    let nb = model.config.num_blocks;
    let h = model.config.hidden_dim;
    let total: usize = sequences.iter().map(|s| s.len()).sum();
    let mut out = vec![Array2::<f64>::zeros((total, h)); nb + 1];
    let mut row = 0;
    for seq in sequences {
        let (states, _) = model.forward_with_states(seq)?;
        for (k, block) in out.iter_mut().enumerate() {
            block
                .slice_mut(s![row..row + seq.len(), ..])
                .assign(&states.slice(s![k, .., ..]).mapv(|v| v as f64));
        }
        row += seq.len();
    }
    Ok(out)
}

/// Core replay over per-block state matrices (`num_blocks + 1` entries,
/// each `N x H`).
pub fn simulate(
    states: &[ArrayView2<f64>],
    heads: &HeadSet,
    policy: &ExitPolicy,
    unembedder: &Unembedder,
) -> Result<ExitTrace> {
    let num_blocks = states.len().saturating_sub(1);
    policy.check(num_blocks, heads)?;
    let n = states[0].nrows();
    if n == 0 {
        return Err(ExitError::Empty);
    }
    let final_states = states[num_blocks];
    let mut records: Vec<Option<ExitRecord>> = vec![None; n];
    let mut full_tokens = Vec::with_capacity(n);
    let mut full_conf = Vec::with_capacity(n);
    for row in final_states.rows() {
        let logits = unembedder.unembed(row)?;
        full_tokens.push(argmax(&logits));
        full_conf.push(max_prob(&logits));
    }
    for &l in &policy.eligible_blocks {
        let pending: Vec<usize> = (0..n).filter(|&i| records[i].is_none()).collect();
        if pending.is_empty() {
            break;
        }
        let head = heads.get(l, num_blocks).expect("checked above");
        let input = states[l].select(ndarray::Axis(0), &pending);
        let predicted = head.forward_eval(input.view())?;
        for (row, &i) in predicted.rows().into_iter().zip(&pending) {
            let logits = unembedder.unembed(row)?;
            let confidence = max_prob(&logits);
            if confidence >= policy.lambda {
                records[i] = Some(ExitRecord {
                    sample: i,
                    exit_block: l,
                    confidence,
                    predicted_token: argmax(&logits),
                    full_token: full_tokens[i],
                    blocks_skipped: num_blocks - l,
                });
            }
        }
    }
    let records = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.unwrap_or(ExitRecord {
                sample: i,
                exit_block: num_blocks,
                confidence: full_conf[i],
                predicted_token: full_tokens[i],
                full_token: full_tokens[i],
                blocks_skipped: 0,
            })
        })
        .collect();
    Ok(ExitTrace::from_records(policy.clone(), num_blocks, records))
}

fn max_prob(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().fold(0.0, f64::max)
}
