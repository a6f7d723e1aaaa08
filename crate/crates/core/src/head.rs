//! The four shortcut-head families, their forward maps and parameter counts.
//!
//! Parameters are held as f64 in memory. The `.head` file stores them as
//! float32, so a head is bit-exactly reproducible from disk only after
//! [`ShortcutHead::round_to_storage`]; fitted heads are always rounded.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{f32_to_le_bytes, write_atomic};

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

const HEAD_MAGIC: &[u8; 4] = b"SCHD";
const HEAD_VERSION: u32 = 1;
/// Size of the fixed record that precedes any tensor payload.
pub const HEAD_HEADER_BYTES: usize = 4 + 6 * 4;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("hidden_dim {hidden_dim} < 100 gives low-rank dimension 0")]
    InvalidRank { hidden_dim: usize },
    #[error("input width {got} does not match hidden_dim {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("train-mode batch normalization needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid block pair: from_block {from} must be < to_block {to}")]
    InvalidBlocks { from: usize, to: usize },
    #[error("bad shape: {0}")]
    Shape(String),
    #[error("non-finite parameter in {0}")]
    NonFinite(&'static str),
    #[error("corrupt head record: {0}")]
    Corrupt(String),
    #[error("head record truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing heads for {variant}: {}", format_cells(.cells))]
    MissingHeads {
        variant: Variant,
        cells: Vec<(usize, usize)>,
    },
}

fn format_cells(cells: &[(usize, usize)]) -> String {
    cells
        .iter()
        .map(|(l, m)| format!("{l}->{m}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, HeadError>;

/// Shortcut family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// `h_l` used directly.
    Identity,
    /// `h_l W`, JTC.
    FullLinear,
    /// `(h_l A) B`, NJTC.
    LowRank,
    /// `(BN(h_l) A) B`, N-NJTC.
    NormalizedLowRank,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Identity,
        Variant::FullLinear,
        Variant::LowRank,
        Variant::NormalizedLowRank,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::Identity => "id",
            Variant::FullLinear => "jtc",
            Variant::LowRank => "njtc",
            Variant::NormalizedLowRank => "nnjtc",
        }
    }

    pub fn is_trainable(self) -> bool {
        self != Variant::Identity
    }

    fn tag(self) -> u32 {
        match self {
            Variant::Identity => 0,
            Variant::FullLinear => 1,
            Variant::LowRank => 2,
            Variant::NormalizedLowRank => 3,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "id" | "identity" => Ok(Variant::Identity),
            "jtc" | "full" | "fulllinear" | "full-linear" => Ok(Variant::FullLinear),
            "njtc" | "lowrank" | "low-rank" => Ok(Variant::LowRank),
            "nnjtc" | "n-njtc" | "normalizedlowrank" | "normalized-low-rank" => {
                Ok(Variant::NormalizedLowRank)
            }
            other => Err(format!(
                "unknown variant {other:?} (expected id, jtc, njtc or nnjtc)"
            )),
        }
    }
}

/// Low-rank dimension `floor(H / 100)`.
pub fn rank_for_hidden_dim(hidden_dim: usize) -> Result<usize> {
    let r = hidden_dim / 100;
    if r == 0 {
        return Err(HeadError::InvalidRank { hidden_dim });
    }
    Ok(r)
}

/// Number of parameters a head of `variant` adds for hidden size `H`.
///
/// Low-rank heads use the default rank `floor(H / 100)`; the normalized
/// variant adds `4H` batch-norm values (gamma, beta, running mean and
/// running variance).
pub fn param_count(variant: Variant, hidden_dim: usize) -> Result<u64> {
    let h = hidden_dim as u64;
    Ok(match variant {
        Variant::Identity => 0,
        Variant::FullLinear => h * h,
        Variant::LowRank => 2 * h * rank_for_hidden_dim(hidden_dim)? as u64,
        Variant::NormalizedLowRank => 2 * h * rank_for_hidden_dim(hidden_dim)? as u64 + 4 * h,
    })
}

/// Per-feature batch normalization over the batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Intermediate values of a batch-statistics normalization, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mean: Array1<f64>,
    /// Biased batch variance.
    pub var: Array1<f64>,
    pub inv_std: Array1<f64>,
    pub x_hat: Array2<f64>,
}

impl BatchNormState {
    pub fn new(hidden_dim: usize, epsilon: f64, momentum: f64) -> Self {
        Self {
            gamma: Array1::ones(hidden_dim),
            beta: Array1::zeros(hidden_dim),
            running_mean: Array1::zeros(hidden_dim),
            running_var: Array1::ones(hidden_dim),
            epsilon,
            momentum,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with the statistics of `x` itself. Does not touch the
    /// running statistics.
    pub fn normalize_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, BatchNormCache)> {
        let n = x.nrows();
        if n < 2 {
            return Err(HeadError::BatchTooSmall(n));
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("n >= 2");
        let inv_std = var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        let x_hat = &centered * &inv_std;
        let y = &x_hat * &self.gamma + &self.beta;
        Ok((
            y,
            BatchNormCache {
                mean,
                var,
                inv_std,
                x_hat,
            },
        ))
    }

    /// Normalizes with the running statistics.
    pub fn normalize_running(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        let scale = &inv_std * &self.gamma;
        (&x - &self.running_mean) * &scale + &self.beta
    }

    /// Exponential moving-average update from a batch's mean and biased
    /// variance. The variance is stored unbiased.
    pub fn update_running(&mut self, batch_mean: &Array1<f64>, batch_var: &Array1<f64>, n: usize) {
        let m = self.momentum;
        let correction = n as f64 / (n as f64 - 1.0);
        self.running_mean
            .zip_mut_with(batch_mean, |r, &b| *r = (1.0 - m) * *r + m * b);
        self.running_var
            .zip_mut_with(batch_var, |r, &b| *r = (1.0 - m) * *r + m * b * correction);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Identity,
    FullLinear {
        /// `H x H`
        w: Array2<f64>,
    },
    LowRank {
        /// `H x r`
        a: Array2<f64>,
        /// `r x H`
        b: Array2<f64>,
    },
    NormalizedLowRank {
        bn: BatchNormState,
        a: Array2<f64>,
        b: Array2<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A shortcut from the output of block `from_block` to that of `to_block`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutHead {
    pub from_block: usize,
    pub to_block: usize,
    pub hidden_dim: usize,
    pub params: HeadParams,
}

fn check_blocks(from: usize, to: usize) -> Result<()> {
    if from >= to {
        return Err(HeadError::InvalidBlocks { from, to });
    }
    Ok(())
}

fn check_finite<'a>(name: &'static str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HeadError::NonFinite(name))
    }
}

impl ShortcutHead {
    pub fn identity(from_block: usize, to_block: usize, hidden_dim: usize) -> Result<Self> {
        check_blocks(from_block, to_block)?;
        Ok(Self {
            from_block,
            to_block,
            hidden_dim,
            params: HeadParams::Identity,
        })
    }

    pub fn full_linear(from_block: usize, to_block: usize, w: Array2<f64>) -> Result<Self> {
        check_blocks(from_block, to_block)?;
        let h = w.nrows();
        if w.ncols() != h {
            return Err(HeadError::Shape(format!(
                "W must be square, got {:?}",
                w.dim()
            )));
        }
        check_finite("W", w.iter())?;
        Ok(Self {
            from_block,
            to_block,
            hidden_dim: h,
            params: HeadParams::FullLinear { w },
        })
    }

    pub fn low_rank(
        from_block: usize,
        to_block: usize,
        a: Array2<f64>,
        b: Array2<f64>,
    ) -> Result<Self> {
        check_blocks(from_block, to_block)?;
        let h = check_factors(&a, &b)?;
        Ok(Self {
            from_block,
            to_block,
            hidden_dim: h,
            params: HeadParams::LowRank { a, b },
        })
    }

    pub fn normalized_low_rank(
        from_block: usize,
        to_block: usize,
        bn: BatchNormState,
        a: Array2<f64>,
        b: Array2<f64>,
    ) -> Result<Self> {
        check_blocks(from_block, to_block)?;
        let h = check_factors(&a, &b)?;
        if bn.hidden_dim() != h
            || bn.beta.len() != h
            || bn.running_mean.len() != h
            || bn.running_var.len() != h
        {
            return Err(HeadError::Shape(
                "batch-norm vectors must have length H".into(),
            ));
        }
        check_finite("gamma", bn.gamma.iter())?;
        check_finite("beta", bn.beta.iter())?;
        check_finite("running_mean", bn.running_mean.iter())?;
        check_finite("running_var", bn.running_var.iter())?;
        if bn.running_var.iter().any(|&v| v < 0.0) {
            return Err(HeadError::Shape("running_var must be non-negative".into()));
        }
        if !(bn.epsilon > 0.0 && bn.epsilon.is_finite()) {
            return Err(HeadError::Shape("epsilon must be positive".into()));
        }
        if !(bn.momentum > 0.0 && bn.momentum <= 1.0) {
            return Err(HeadError::Shape("momentum must be in (0, 1]".into()));
        }
        Ok(Self {
            from_block,
            to_block,
            hidden_dim: h,
            params: HeadParams::NormalizedLowRank { bn, a, b },
        })
    }

    /// Fresh head with weights uniform in `[-init_scale, init_scale]`,
    /// gamma = 1 and beta = 0. `rank` defaults to `floor(H / 100)`.
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        variant: Variant,
        from_block: usize,
        to_block: usize,
        hidden_dim: usize,
        rank: Option<usize>,
        init_scale: f64,
        bn_epsilon: f64,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut uniform = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || {
                rng.random_range(-init_scale..=init_scale)
            })
        };
        let rank = match variant {
            Variant::LowRank | Variant::NormalizedLowRank => match rank {
                Some(0) => return Err(HeadError::InvalidRank { hidden_dim }),
                Some(r) => r,
                None => rank_for_hidden_dim(hidden_dim)?,
            },
            _ => 0,
        };
        match variant {
            Variant::Identity => Self::identity(from_block, to_block, hidden_dim),
            Variant::FullLinear => {
                Self::full_linear(from_block, to_block, uniform(hidden_dim, hidden_dim))
            }
            Variant::LowRank => {
                let a = uniform(hidden_dim, rank);
                let b = uniform(rank, hidden_dim);
                Self::low_rank(from_block, to_block, a, b)
            }
            Variant::NormalizedLowRank => {
                let a = uniform(hidden_dim, rank);
                let b = uniform(rank, hidden_dim);
                let bn = BatchNormState::new(hidden_dim, bn_epsilon, bn_momentum);
                Self::normalized_low_rank(from_block, to_block, bn, a, b)
            }
        }
    }

    pub fn variant(&self) -> Variant {
        match self.params {
            HeadParams::Identity => Variant::Identity,
            HeadParams::FullLinear { .. } => Variant::FullLinear,
            HeadParams::LowRank { .. } => Variant::LowRank,
            HeadParams::NormalizedLowRank { .. } => Variant::NormalizedLowRank,
        }
    }

    /// Low-rank dimension, 0 for Identity and FullLinear.
    pub fn rank(&self) -> usize {
        match &self.params {
            HeadParams::LowRank { a, .. } | HeadParams::NormalizedLowRank { a, .. } => a.ncols(),
            _ => 0,
        }
    }

    /// Parameters actually stored by this head.
    pub fn num_params(&self) -> u64 {
        let h = self.hidden_dim as u64;
        let r = self.rank() as u64;
        match self.params {
            HeadParams::Identity => 0,
            HeadParams::FullLinear { .. } => h * h,
            HeadParams::LowRank { .. } => 2 * h * r,
            HeadParams::NormalizedLowRank { .. } => 2 * h * r + 4 * h,
        }
    }

    fn check_width(&self, h: &ArrayView2<f64>) -> Result<()> {
        if h.ncols() != self.hidden_dim {
            return Err(HeadError::WidthMismatch {
                expected: self.hidden_dim,
                got: h.ncols(),
            });
        }
        Ok(())
    }

    /// Eval-mode forward. Pure: uses running statistics, mutates nothing.
    pub fn forward_eval(&self, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&h)?;
        Ok(match &self.params {
            HeadParams::Identity => h.to_owned(),
            HeadParams::FullLinear { w } => h.dot(w),
            HeadParams::LowRank { a, b } => h.dot(a).dot(b),
            HeadParams::NormalizedLowRank { bn, a, b } => bn.normalize_running(h).dot(a).dot(b),
        })
    }

    /// Train-mode forward without side effects: batch statistics are used
    /// but running statistics are left alone.
    pub fn forward_batch_stats(&self, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&h)?;
        match &self.params {
            HeadParams::NormalizedLowRank { bn, a, b } => {
                let (y, _) = bn.normalize_batch(h)?;
                Ok(y.dot(a).dot(b))
            }
            _ => self.forward_eval(h),
        }
    }

    /// Forward pass. In train mode the normalized variant uses batch
    /// statistics and updates its running statistics.
    pub fn forward(&mut self, h: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        match mode {
            Mode::Eval => self.forward_eval(h),
            Mode::Train => {
                self.check_width(&h)?;
                match &mut self.params {
                    HeadParams::NormalizedLowRank { bn, a, b } => {
                        let (y, cache) = bn.normalize_batch(h)?;
                        bn.update_running(&cache.mean, &cache.var, h.nrows());
                        Ok(y.dot(a).dot(b))
                    }
                    _ => self.forward_eval(h),
                }
            }
        }
    }

    /// Rounds every parameter to float32 so that the head equals its
    /// on-disk form exactly.
    pub fn round_to_storage(&mut self) {
        let r = |x: &mut f64| *x = *x as f32 as f64;
        match &mut self.params {
            HeadParams::Identity => {}
            HeadParams::FullLinear { w } => w.map_inplace(r),
            HeadParams::LowRank { a, b } => {
                a.map_inplace(r);
                b.map_inplace(r);
            }
            HeadParams::NormalizedLowRank { bn, a, b } => {
                a.map_inplace(r);
                b.map_inplace(r);
                bn.gamma.map_inplace(r);
                bn.beta.map_inplace(r);
                bn.running_mean.map_inplace(r);
                bn.running_var.map_inplace(r);
            }
        }
    }

    /// Binary record: magic, version, variant tag, from, to, H, r (all u32
    /// LE), then the tensors as float32 LE. The normalized variant stores
    /// epsilon and momentum as f64 LE, then gamma, beta, running mean,
    /// running variance, A, B.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEAD_HEADER_BYTES + self.num_params() as usize * 4 + 16);
        out.extend_from_slice(HEAD_MAGIC);
        for v in [
            HEAD_VERSION,
            self.variant().tag(),
            self.from_block as u32,
            self.to_block as u32,
            self.hidden_dim as u32,
            self.rank() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let f32s = |m: &mut Vec<u8>, it: &mut dyn Iterator<Item = &f64>| {
            m.extend(f32_to_le_bytes(it.map(|&v| v as f32)));
        };
        match &self.params {
            HeadParams::Identity => {}
            HeadParams::FullLinear { w } => f32s(&mut out, &mut w.iter()),
            HeadParams::LowRank { a, b } => {
                f32s(&mut out, &mut a.iter());
                f32s(&mut out, &mut b.iter());
            }
            HeadParams::NormalizedLowRank { bn, a, b } => {
                out.extend_from_slice(&bn.epsilon.to_le_bytes());
                out.extend_from_slice(&bn.momentum.to_le_bytes());
                for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    f32s(&mut out, &mut v.iter());
                }
                f32s(&mut out, &mut a.iter());
                f32s(&mut out, &mut b.iter());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != HEAD_MAGIC {
            return Err(HeadError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != HEAD_VERSION {
            return Err(HeadError::Corrupt(format!("unsupported version {version}")));
        }
        let tag = r.u32()?;
        let variant = Variant::from_tag(tag)
            .ok_or_else(|| HeadError::Corrupt(format!("bad variant tag {tag}")))?;
        let from = r.u32()? as usize;
        let to = r.u32()? as usize;
        let h = r.u32()? as usize;
        let rank = r.u32()? as usize;
        if h == 0 {
            return Err(HeadError::Corrupt("hidden_dim 0".into()));
        }
        let head = match variant {
            Variant::Identity => {
                if rank != 0 {
                    return Err(HeadError::Corrupt("identity head with nonzero rank".into()));
                }
                Self::identity(from, to, h)?
            }
            Variant::FullLinear => {
                if rank != 0 {
                    return Err(HeadError::Corrupt(
                        "full-linear head with nonzero rank".into(),
                    ));
                }
                Self::full_linear(from, to, r.matrix(h, h)?)?
            }
            Variant::LowRank => {
                if rank == 0 {
                    return Err(HeadError::Corrupt("low-rank head with rank 0".into()));
                }
                let a = r.matrix(h, rank)?;
                let b = r.matrix(rank, h)?;
                Self::low_rank(from, to, a, b)?
            }
            Variant::NormalizedLowRank => {
                if rank == 0 {
                    return Err(HeadError::Corrupt("low-rank head with rank 0".into()));
                }
                let epsilon = r.f64()?;
                let momentum = r.f64()?;
                let gamma = r.vector(h)?;
                let beta = r.vector(h)?;
                let running_mean = r.vector(h)?;
                let running_var = r.vector(h)?;
                let a = r.matrix(h, rank)?;
                let b = r.matrix(rank, h)?;
                let bn = BatchNormState {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                    momentum,
                };
                Self::normalized_low_rank(from, to, bn, a, b)?
            }
        };
        if r.pos != bytes.len() {
            return Err(HeadError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()).map_err(|source| HeadError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| HeadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn check_factors(a: &Array2<f64>, b: &Array2<f64>) -> Result<usize> {
    let (h, r) = a.dim();
    if r == 0 {
        return Err(HeadError::InvalidRank { hidden_dim: h });
    }
    if b.dim() != (r, h) {
        return Err(HeadError::Shape(format!(
            "A is {:?} so B must be ({r}, {h}), got {:?}",
            a.dim(),
            b.dim()
        )));
    }
    check_finite("A", a.iter())?;
    check_finite("B", b.iter())?;
    Ok(h)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(HeadError::Truncated {
                need: self.pos.saturating_add(n),
                have: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| HeadError::Corrupt("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn vector(&mut self, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.floats(n)?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let v = self.floats(rows * cols)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length matches"))
    }
}

/// File name used for a head inside a heads directory.
pub fn head_file_name(variant: Variant, from_block: usize, to_block: usize) -> String {
    format!("{}_{}_{}.head", variant.short_name(), from_block, to_block)
}

/// Heads of one variant keyed by `(from_block, to_block)`. Identity heads
/// are synthesized on demand.
#[derive(Debug, Clone)]
pub struct HeadSet {
    pub variant: Variant,
    pub hidden_dim: usize,
    heads: BTreeMap<(usize, usize), ShortcutHead>,
}

impl HeadSet {
    pub fn new(variant: Variant, hidden_dim: usize) -> Self {
        Self {
            variant,
            hidden_dim,
            heads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, head: ShortcutHead) -> Result<()> {
        if head.variant() != self.variant {
            return Err(HeadError::Shape(format!(
                "head of variant {} inserted into {} set",
                head.variant(),
                self.variant
            )));
        }
        if head.hidden_dim != self.hidden_dim {
            return Err(HeadError::WidthMismatch {
                expected: self.hidden_dim,
                got: head.hidden_dim,
            });
        }
        self.heads.insert((head.from_block, head.to_block), head);
        Ok(())
    }

    pub fn get(&self, from_block: usize, to_block: usize) -> Option<Cow<'_, ShortcutHead>> {
        if self.variant == Variant::Identity {
            return ShortcutHead::identity(from_block, to_block, self.hidden_dim)
                .ok()
                .map(Cow::Owned);
        }
        self.heads.get(&(from_block, to_block)).map(Cow::Borrowed)
    }

    pub fn cells(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.heads.keys()
    }

    pub fn missing(&self, cells: &[(usize, usize)]) -> Vec<(usize, usize)> {
        cells
            .iter()
            .copied()
            .filter(|&(l, m)| self.get(l, m).is_none())
            .collect()
    }

    /// Loads `{variant}_{l}_{m}.head` for every requested cell. All missing
    /// files are reported together.
    pub fn load_dir(
        dir: Option<&Path>,
        variant: Variant,
        hidden_dim: usize,
        cells: &[(usize, usize)],
    ) -> Result<Self> {
        let mut set = Self::new(variant, hidden_dim);
        if variant == Variant::Identity {
            return Ok(set);
        }
        let mut missing = Vec::new();
        for &(l, m) in cells {
            let path = dir.map(|d| d.join(head_file_name(variant, l, m)));
            match path {
                Some(p) if p.is_file() => {
                    let head = ShortcutHead::load(&p)?;
                    if (head.from_block, head.to_block) != (l, m) {
                        return Err(HeadError::Corrupt(format!(
                            "{} holds a {}->{} head",
                            p.display(),
                            head.from_block,
                            head.to_block
                        )));
                    }
                    set.insert(head)?;
                }
                _ => missing.push((l, m)),
            }
        }
        if !missing.is_empty() {
            return Err(HeadError::MissingHeads {
                variant,
                cells: missing,
            });
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_head(variant: Variant, h: usize, r: usize, seed: u64) -> ShortcutHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head =
            ShortcutHead::random(variant, 1, 3, h, Some(r), 0.5, 1e-5, 0.1, &mut rng).unwrap();
        if let HeadParams::NormalizedLowRank { bn, .. } = &mut head.params {
            bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
            bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            bn.running_mean
                .mapv_inplace(|_| rng.random_range(-1.0..1.0));
            bn.running_var.mapv_inplace(|_| rng.random_range(0.1..2.0));
        }
        head
    }

    fn rand_batch(n: usize, h: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, h), || rng.random_range(-2.0..2.0))
    }

    fn rel_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        let scale = a
            .iter()
            .chain(b.iter())
            .fold(1e-12f64, |m, v| m.max(v.abs()));
        a.iter()
            .zip(b.iter())
            .all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn rank_rule() {
        assert_eq!(rank_for_hidden_dim(1600).unwrap(), 16);
        assert_eq!(rank_for_hidden_dim(3072).unwrap(), 30);
        assert_eq!(rank_for_hidden_dim(4096).unwrap(), 40);
        assert_eq!(rank_for_hidden_dim(100).unwrap(), 1);
        assert!(matches!(
            rank_for_hidden_dim(99),
            Err(HeadError::InvalidRank { .. })
        ));
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(Variant::FullLinear, 3072).unwrap(), 9_437_184);
        assert_eq!(param_count(Variant::LowRank, 1600).unwrap(), 2 * 1600 * 16);
        assert_eq!(
            param_count(Variant::NormalizedLowRank, 3072).unwrap(),
            184_320 + 12_288
        );
        assert_eq!(param_count(Variant::Identity, 12345).unwrap(), 0);
        assert!(param_count(Variant::LowRank, 50).is_err());
        assert_eq!(param_count(Variant::FullLinear, 50).unwrap(), 2500);
    }

    #[test]
    fn num_params_matches_param_count() {
        for v in Variant::ALL {
            let h = rand_head(v, 200, 2, 1);
            assert_eq!(h.num_params(), param_count(v, 200).unwrap());
        }
    }

    #[test]
    fn identity_forward_is_input() {
        let head = ShortcutHead::identity(0, 2, 3).unwrap();
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, 1.0]];
        assert_eq!(head.forward_eval(x.view()).unwrap(), x);
    }

    #[test]
    fn low_rank_hand_example() {
        let a = array![[1.0], [0.0], [0.0], [0.0]];
        let b = array![[0.0, 1.0, 0.0, 0.0]];
        let head = ShortcutHead::low_rank(0, 1, a, b).unwrap();
        let out = head
            .forward_eval(array![[3.0, 5.0, 7.0, 9.0]].view())
            .unwrap();
        assert_eq!(out, array![[0.0, 3.0, 0.0, 0.0]]);
    }

    #[test]
    fn zero_a_annihilates() {
        let a = Array2::zeros((4, 1));
        let b = array![[1.0, 2.0, 3.0, 4.0]];
        let head = ShortcutHead::low_rank(0, 1, a, b).unwrap();
        let out = head.forward_eval(rand_batch(5, 4, 2).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_normalization_reduces_to_low_rank() {
        let lr = rand_head(Variant::LowRank, 6, 2, 3);
        let HeadParams::LowRank { a, b } = lr.params.clone() else {
            unreachable!()
        };
        // zero mean, unit variance, unit scale, zero shift
        let bn = BatchNormState::new(6, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM);
        let nlr = ShortcutHead::normalized_low_rank(1, 3, bn, a, b).unwrap();
        let x = rand_batch(4, 6, 5);
        let got = nlr.forward_eval(x.view()).unwrap();
        let want = lr.forward_eval(x.view()).unwrap() / (1.0 + DEFAULT_BN_EPSILON).sqrt();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn width_and_batch_errors() {
        let mut head = rand_head(Variant::NormalizedLowRank, 6, 1, 0);
        assert!(matches!(
            head.forward_eval(rand_batch(2, 5, 0).view()),
            Err(HeadError::WidthMismatch {
                expected: 6,
                got: 5
            })
        ));
        assert!(matches!(
            head.forward(rand_batch(1, 6, 0).view(), Mode::Train),
            Err(HeadError::BatchTooSmall(1))
        ));
        // eval mode accepts a single row
        assert!(head.forward(rand_batch(1, 6, 0).view(), Mode::Eval).is_ok());
    }

    #[test]
    fn train_mode_updates_running_stats_eval_does_not() {
        let mut head = rand_head(Variant::NormalizedLowRank, 4, 1, 9);
        let before = head.clone();
        let x = rand_batch(8, 4, 1);
        let e1 = head.forward(x.view(), Mode::Eval).unwrap();
        let e2 = head.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(head, before);
        head.forward(x.view(), Mode::Train).unwrap();
        let HeadParams::NormalizedLowRank { bn, .. } = &head.params else {
            unreachable!()
        };
        let HeadParams::NormalizedLowRank { bn: old, .. } = &before.params else {
            unreachable!()
        };
        let mean = x.mean_axis(Axis(0)).unwrap();
        for j in 0..4 {
            let expect = 0.9 * old.running_mean[j] + 0.1 * mean[j];
            assert!((bn.running_mean[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_blocks() {
        assert!(matches!(
            ShortcutHead::identity(3, 3, 8),
            Err(HeadError::InvalidBlocks { from: 3, to: 3 })
        ));
    }

    #[test]
    fn identity_record_has_no_payload() {
        let head = ShortcutHead::identity(0, 4, 128).unwrap();
        let bytes = head.to_bytes();
        assert_eq!(bytes.len(), HEAD_HEADER_BYTES);
        assert_eq!(ShortcutHead::from_bytes(&bytes).unwrap(), head);
    }

    #[test]
    fn full_linear_round_trip_is_byte_identical() {
        let mut head = rand_head(Variant::FullLinear, 16, 0, 4);
        head.round_to_storage();
        let bytes = head.to_bytes();
        let back = ShortcutHead::from_bytes(&bytes).unwrap();
        assert_eq!(back, head);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_and_truncated_records() {
        let head = rand_head(Variant::NormalizedLowRank, 8, 2, 4);
        let bytes = head.to_bytes();
        assert!(matches!(
            ShortcutHead::from_bytes(&bytes[..bytes.len() - 1]),
            Err(HeadError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            ShortcutHead::from_bytes(&bad),
            Err(HeadError::Corrupt(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            ShortcutHead::from_bytes(&extra),
            Err(HeadError::Corrupt(_))
        ));
        assert!(ShortcutHead::from_bytes(b"SC").is_err());
    }

    #[test]
    fn head_set_reports_all_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut h = rand_head(Variant::LowRank, 6, 1, 0);
        h.from_block = 1;
        h.to_block = 3;
        h.save(&dir.path().join(head_file_name(Variant::LowRank, 1, 3)))
            .unwrap();
        let err = HeadSet::load_dir(
            Some(dir.path()),
            Variant::LowRank,
            6,
            &[(0, 3), (1, 3), (2, 3)],
        )
        .unwrap_err();
        match err {
            HeadError::MissingHeads { cells, .. } => assert_eq!(cells, vec![(0, 3), (2, 3)]),
            other => panic!("{other:?}"),
        }
        let ids = HeadSet::load_dir(None, Variant::Identity, 6, &[(0, 3)]).unwrap();
        assert!(ids.get(0, 3).is_some());
    }

    proptest! {
        #[test]
        fn storage_round_trip(seed in 0u64..10_000, v in 0usize..4, h in 1usize..10, r in 1usize..3) {
            let variant = Variant::ALL[v];
            let mut head = rand_head(variant, h, r, seed);
            head.round_to_storage();
            let bytes = head.to_bytes();
            let back = ShortcutHead::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &head);
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn linear_variants_are_linear(seed in 0u64..10_000, v in 0usize..3, h in 1usize..12,
                                      alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let head = rand_head(Variant::ALL[v], h, 1 + (seed as usize % 2), seed);
            let x = rand_batch(3, h, seed + 1);
            let y = rand_batch(3, h, seed + 2);
            let combo = &x * alpha + &y * beta;
            let lhs = head.forward_eval(combo.view()).unwrap();
            let rhs = head.forward_eval(x.view()).unwrap() * alpha + head.forward_eval(y.view()).unwrap() * beta;
            prop_assert!(rel_close(&lhs, &rhs, 1e-5));
        }

        #[test]
        fn low_rank_equals_product_matrix(seed in 0u64..10_000, h in 1usize..12, r in 1usize..3) {
            let head = rand_head(Variant::LowRank, h, r, seed);
            let HeadParams::LowRank { a, b } = &head.params else { unreachable!() };
            let full = ShortcutHead::full_linear(1, 3, a.dot(b)).unwrap();
            let x = rand_batch(4, h, seed ^ 7);
            prop_assert!(rel_close(&head.forward_eval(x.view()).unwrap(), &full.forward_eval(x.view()).unwrap(), 1e-5));
        }

        #[test]
        fn parameter_ratios(k in 1usize..200) {
            let h = 100 * k;
            let full = param_count(Variant::FullLinear, h).unwrap() as f64;
            prop_assert!(param_count(Variant::LowRank, h).unwrap() as f64 / full <= 0.02);
        }

        #[test]
        fn normalized_ratio_below_three_percent(h in 401usize..20_000) {
            let full = param_count(Variant::FullLinear, h).unwrap() as f64;
            prop_assert!((param_count(Variant::NormalizedLowRank, h).unwrap() as f64) < 0.03 * full);
        }
    }
}
