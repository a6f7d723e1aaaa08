//! Shortcut heads for early-exit transformer inference.
//!
//! A shortcut head maps the hidden state after block `l` of a transformer
//! straight to an approximation of the hidden state after a later block `m`
//! (usually the last one), so the blocks in between can be skipped. Four
//! families are provided:
//!
//! - `Identity`: reuse `h_l` as is (no parameters)
//! - `FullLinear`: `h_l W` with `W: H x H` (JTC)
//! - `LowRank`: `(h_l A) B` with `A: H x r`, `B: r x H`, `r = floor(H / 100)` (NJTC)
//! - `NormalizedLowRank`: batch normalization followed by the low-rank map (N-NJTC)
//!
//! The crate covers the whole pipeline: an on-disk activation format
//! ([`hsdata`]), the heads themselves ([`head`]), gradient fitting
//! ([`fit`]), evaluation metrics ([`metrics`]), a small reference
//! transformer that produces activation dumps ([`toylm`]), a confidence
//! threshold early-exit simulator ([`exitsim`]) and the command-line driver
//! ([`cli`]).

pub mod cli;
pub mod exitsim;
pub mod fit;
pub mod head;
pub mod hsdata;
pub mod io;
pub mod metrics;
pub mod toylm;

pub use exitsim::{compute_savings, run_early_exit, ExitPolicy, ExitSource, ExitTrace};
pub use fit::{fit_shortcut, FitConfig, FitReport, Optimizer};
pub use head::{param_count, rank_for_hidden_dim, BatchNormState, HeadSet, ShortcutHead, Variant};
pub use hsdata::{load_dataset, save_dataset, HiddenPairDataset, SampleSpec, Split};
pub use metrics::{coordinate_averaged_r2, precision, surprisal, JumpEvalGrid, Metric, Unembedder};
pub use toylm::{train_toylm, ToyLM, ToyLMConfig, TrainOptions};
