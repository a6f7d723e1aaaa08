//! Fitting shortcut heads by mini-batch gradient descent on the summed
//! squared error, averaged over samples.
//!
//! The loss is `(1/N) * sum_i ||h_hat_i - t_i||^2`. It is not divided by
//! the hidden size, so reported losses grow with `H`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{
    HeadError, HeadParams, ShortcutHead, Variant, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM,
};
use crate::hsdata::{HiddenPairDataset, HsDataError};

/// Ridge strength used when the design matrix is rank deficient.
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0} heads have no trainable parameters")]
    NotTrainable(Variant),
    #[error("training diverged in epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("invalid fit config: {0}")]
    Config(String),
    #[error("design matrix is rank deficient; retry with a ridge term")]
    RankDeficient,
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Data(#[from] HsDataError),
}

pub type Result<T> = std::result::Result<T, FitError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyperparameters for one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Half-width of the uniform initialization; `None` means `1/sqrt(H)`.
    pub init_scale: Option<f64>,
    pub shuffle: bool,
    /// Low-rank dimension; `None` means `floor(H / 100)`.
    pub rank: Option<usize>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 64,
            optimizer: Optimizer::default(),
            seed: 0,
            init_scale: None,
            shuffle: true,
            rank: None,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_epsilon: DEFAULT_BN_EPSILON,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FitError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad("init_scale must be positive");
            }
        }
        if self.rank == Some(0) {
            return bad("rank must be positive");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must be in (0, 1]");
        }
        if !(self.bn_epsilon > 0.0) {
            return bad("bn_epsilon must be positive");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| FitError::Config(format!("{key}: cannot parse {value:?}")))
        }
        let adam = |o: Optimizer| match o {
            Optimizer::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
            Optimizer::Sgd => (0.9, 0.999, 1e-8),
        };
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "shuffle" => self.shuffle = parse(key, value)?,
            "init_scale" => {
                self.init_scale = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "rank" => {
                self.rank = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "bn_epsilon" => self.bn_epsilon = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => Optimizer::Sgd,
                    "adam" => {
                        let (beta1, beta2, eps) = adam(self.optimizer);
                        Optimizer::Adam { beta1, beta2, eps }
                    }
                    other => {
                        return Err(FitError::Config(format!(
                            "optimizer must be sgd or adam, got {other:?}"
                        )))
                    }
                }
            }
            "adam_beta1" | "adam_beta2" | "adam_eps" => {
                let (mut beta1, mut beta2, mut eps) = adam(self.optimizer);
                let v: f64 = parse(key, value)?;
                match key {
                    "adam_beta1" => beta1 = v,
                    "adam_beta2" => beta2 = v,
                    _ => eps = v,
                }
                if let Optimizer::Adam { .. } = self.optimizer {
                    self.optimizer = Optimizer::Adam { beta1, beta2, eps };
                }
            }
            other => return Err(FitError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a plain-text `key=value` file. Blank lines and `#` comments
    /// are ignored; unspecified keys keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                FitError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        line("learning_rate", self.learning_rate.to_string());
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        match self.optimizer {
            Optimizer::Sgd => line("optimizer", "sgd".into()),
            Optimizer::Adam { beta1, beta2, eps } => {
                line("optimizer", "adam".into());
                line("adam_beta1", beta1.to_string());
                line("adam_beta2", beta2.to_string());
                line("adam_eps", eps.to_string());
            }
        }
        line("seed", self.seed.to_string());
        line(
            "init_scale",
            self.init_scale.map_or("auto".into(), |v| v.to_string()),
        );
        line("shuffle", self.shuffle.to_string());
        line("rank", self.rank.map_or("auto".into(), |v| v.to_string()));
        line("bn_momentum", self.bn_momentum.to_string());
        line("bn_epsilon", self.bn_epsilon.to_string());
        s
    }
}

/// Outcome of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub variant: Variant,
    pub from_block: usize,
    pub to_block: usize,
    pub hidden_dim: usize,
    pub rank: usize,
    pub num_params: u64,
    /// Mean per-sample loss over each epoch's mini-batches.
    pub train_loss_trace: Vec<f64>,
    /// Eval-mode loss of the returned head on the train split.
    pub final_train_loss: f64,
    /// Eval-mode loss on the validation split; `None` when it is empty.
    pub final_val_loss: Option<f64>,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub wall_time_secs: f64,
    /// Momentum-accumulated batch-norm statistics before they were
    /// replaced by a full pass over the train split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_running_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_running_var: Option<Vec<f64>>,
}

fn check_pair(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(FitError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.nrows() == 0 {
        return Err(FitError::Shape("empty batch".into()));
    }
    Ok(())
}

/// `(1/N) * sum_i ||pred_i - target_i||^2`.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check_pair(&pred, &target)?;
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite("prediction"));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite("target"));
    }
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.nrows() as f64)
}

/// Gradients of [`mse_loss`] with respect to every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Gradients {
    FullLinear {
        w: Array2<f64>,
    },
    LowRank {
        a: Array2<f64>,
        b: Array2<f64>,
    },
    NormalizedLowRank {
        gamma: Array1<f64>,
        beta: Array1<f64>,
        a: Array2<f64>,
        b: Array2<f64>,
    },
}

impl Gradients {
    /// Flat views in the order of [`trainable_slices_mut`].
    pub fn slices(&self) -> Vec<(&'static str, &[f64])> {
        fn s(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        match self {
            Gradients::FullLinear { w } => vec![("W", s(w))],
            Gradients::LowRank { a, b } => vec![("A", s(a)), ("B", s(b))],
            Gradients::NormalizedLowRank { gamma, beta, a, b } => vec![
                ("gamma", gamma.as_slice().unwrap()),
                ("beta", beta.as_slice().unwrap()),
                ("A", s(a)),
                ("B", s(b)),
            ],
        }
    }
}

/// Mutable flat views of a head's trainable tensors. Running statistics
/// are not trainable and are excluded.
pub fn trainable_slices_mut(head: &mut ShortcutHead) -> Vec<(&'static str, &mut [f64])> {
    match &mut head.params {
        HeadParams::Identity => Vec::new(),
        HeadParams::FullLinear { w } => vec![("W", w.as_slice_mut().expect("standard layout"))],
        HeadParams::LowRank { a, b } => vec![
            ("A", a.as_slice_mut().expect("standard layout")),
            ("B", b.as_slice_mut().expect("standard layout")),
        ],
        HeadParams::NormalizedLowRank { bn, a, b } => vec![
            ("gamma", bn.gamma.as_slice_mut().unwrap()),
            ("beta", bn.beta.as_slice_mut().unwrap()),
            ("A", a.as_slice_mut().expect("standard layout")),
            ("B", b.as_slice_mut().expect("standard layout")),
        ],
    }
}

struct Backward {
    loss: f64,
    grads: Gradients,
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

fn backward(head: &ShortcutHead, h: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Backward> {
    check_pair(&h, &target)?;
    if h.ncols() != head.hidden_dim {
        return Err(HeadError::WidthMismatch {
            expected: head.hidden_dim,
            got: h.ncols(),
        }
        .into());
    }
    let n = h.nrows() as f64;
    // d loss / d prediction
    let residual = |pred: &Array2<f64>| -> (f64, Array2<f64>) {
        let diff = pred - &target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        (loss, diff * (2.0 / n))
    };
    match &head.params {
        HeadParams::Identity => Err(FitError::NotTrainable(Variant::Identity)),
        HeadParams::FullLinear { w } => {
            let pred = h.dot(w);
            let (loss, g) = residual(&pred);
            Ok(Backward {
                loss,
                grads: Gradients::FullLinear { w: h.t().dot(&g) },
                batch_stats: None,
            })
        }
        HeadParams::LowRank { a, b } => {
            let z = h.dot(a);
            let pred = z.dot(b);
            let (loss, g) = residual(&pred);
            let db = z.t().dot(&g);
            let dz = g.dot(&b.t());
            let da = h.t().dot(&dz);
            Ok(Backward {
                loss,
                grads: Gradients::LowRank { a: da, b: db },
                batch_stats: None,
            })
        }
        HeadParams::NormalizedLowRank { bn, a, b } => {
            let (y, cache) = bn.normalize_batch(h)?;
            let z = y.dot(a);
            let pred = z.dot(b);
            let (loss, g) = residual(&pred);
            let db = z.t().dot(&g);
            let dz = g.dot(&b.t());
            let da = y.t().dot(&dz);
            let dy = dz.dot(&a.t());
            let dgamma = (&dy * &cache.x_hat).sum_axis(Axis(0));
            let dbeta = dy.sum_axis(Axis(0));
            Ok(Backward {
                loss,
                grads: Gradients::NormalizedLowRank {
                    gamma: dgamma,
                    beta: dbeta,
                    a: da,
                    b: db,
                },
                batch_stats: Some((cache.mean, cache.var)),
            })
        }
    }
}

/// Loss and exact analytic gradients. The normalized variant is
/// differentiated through its batch statistics (train-mode graph).
pub fn loss_gradients(
    head: &ShortcutHead,
    h: ArrayView2<f64>,
    target: ArrayView2<f64>,
) -> Result<(f64, Gradients)> {
    let b = backward(head, h, target)?;
    Ok((b.loss, b.grads))
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, head: &mut ShortcutHead) -> Self {
        let sizes: Vec<usize> = trainable_slices_mut(head)
            .iter()
            .map(|(_, s)| s.len())
            .collect();
        Self {
            kind,
            lr,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn apply(&mut self, head: &mut ShortcutHead, grads: &Gradients) {
        self.step += 1;
        let lr = self.lr;
        let grads = grads.slices();
        for (k, ((_, param), (_, grad))) in trainable_slices_mut(head)
            .into_iter()
            .zip(grads)
            .enumerate()
        {
            match self.kind {
                Optimizer::Sgd => {
                    for (p, g) in param.iter_mut().zip(grad) {
                        *p -= lr * g;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..param.len() {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn gather(src: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    src.select(Axis(0), idx)
}

/// Splits an epoch's sample order into mini-batches. When `min_batch` is 2
/// a trailing single sample is folded into the previous batch.
fn batches(order: &[usize], batch_size: usize, min_batch: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().map(|b| b.len()).unwrap_or(0) < min_batch {
        let last = out.pop().unwrap().len();
        let prev = out.pop().unwrap().len();
        let start = order.len() - last - prev;
        out.push(&order[start..]);
    }
    out
}

/// Fits a shortcut head from block `from_block` to block `to_block` on the
/// dataset's train split. Deterministic for a given `config.seed`.
pub fn fit_shortcut(
    dataset: &HiddenPairDataset,
    from_block: usize,
    to_block: usize,
    variant: Variant,
    config: &FitConfig,
) -> Result<(ShortcutHead, FitReport)> {
    let started = Instant::now();
    if from_block >= to_block {
        return Err(HeadError::InvalidBlocks {
            from: from_block,
            to: to_block,
        }
        .into());
    }
    if to_block > dataset.num_blocks() {
        return Err(FitError::Shape(format!(
            "to_block {to_block} exceeds num_blocks {}",
            dataset.num_blocks()
        )));
    }
    let hidden = dataset.hidden_dim();
    let train_idx = dataset.split.train_indices();
    let val_idx = dataset.split.val_indices();
    let x_train = dataset.rows_f64(from_block, &train_idx)?;
    let t_train = dataset.rows_f64(to_block, &train_idx)?;
    let val = if val_idx.is_empty() {
        None
    } else {
        Some((
            dataset.rows_f64(from_block, &val_idx)?,
            dataset.rows_f64(to_block, &val_idx)?,
        ))
    };
    let eval_loss = |head: &ShortcutHead, x: &Array2<f64>, t: &Array2<f64>| -> Result<f64> {
        mse_loss(head.forward_eval(x.view())?.view(), t.view())
    };

    if variant == Variant::Identity {
        let head = ShortcutHead::identity(from_block, to_block, hidden)?;
        let final_train_loss = eval_loss(&head, &x_train, &t_train)?;
        let final_val_loss = match &val {
            Some((x, t)) => Some(eval_loss(&head, x, t)?),
            None => None,
        };
        let report = FitReport {
            variant,
            from_block,
            to_block,
            hidden_dim: hidden,
            rank: 0,
            num_params: 0,
            train_loss_trace: Vec::new(),
            final_train_loss,
            final_val_loss,
            epochs_run: 0,
            steps_run: 0,
            wall_time_secs: started.elapsed().as_secs_f64(),
            ema_running_mean: None,
            ema_running_var: None,
        };
        return Ok((head, report));
    }

    config.validate()?;
    let n_train = train_idx.len();
    if config.batch_size > n_train {
        return Err(FitError::Config(format!(
            "batch_size {} exceeds {n_train} training samples",
            config.batch_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init_scale = config
        .init_scale
        .unwrap_or_else(|| 1.0 / (hidden as f64).sqrt());
    let mut head = ShortcutHead::random(
        variant,
        from_block,
        to_block,
        hidden,
        config.rank,
        init_scale,
        config.bn_epsilon,
        config.bn_momentum,
        &mut rng,
    )?;
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, &mut head);
    let min_batch = if variant == Variant::NormalizedLowRank {
        2
    } else {
        1
    };

    let mut order: Vec<usize> = (0..n_train).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_sum = 0.0;
        for batch in batches(&order, config.batch_size, min_batch) {
            let xb = gather(&x_train, batch);
            let tb = gather(&t_train, batch);
            let step = backward(&head, xb.view(), tb.view())?;
            let grads_finite = step
                .grads
                .slices()
                .iter()
                .all(|(_, s)| s.iter().all(|v| v.is_finite()));
            if !step.loss.is_finite() || !grads_finite {
                return Err(FitError::Diverged { epoch });
            }
            if let (Some((mean, var)), HeadParams::NormalizedLowRank { bn, .. }) =
                (&step.batch_stats, &mut head.params)
            {
                bn.update_running(mean, var, batch.len());
            }
            opt.apply(&mut head, &step.grads);
            epoch_sum += step.loss * batch.len() as f64;
            steps += 1;
        }
        let epoch_loss = epoch_sum / n_train as f64;
        if !epoch_loss.is_finite() {
            return Err(FitError::Diverged { epoch });
        }
        trace.push(epoch_loss);
    }

    let (mut ema_mean, mut ema_var) = (None, None);
    if let HeadParams::NormalizedLowRank { bn, .. } = &mut head.params {
        ema_mean = Some(bn.running_mean.to_vec());
        ema_var = Some(bn.running_var.to_vec());
        let (mean, var) = full_pass_stats(&x_train);
        bn.running_mean = mean;
        bn.running_var = var;
    }
    head.round_to_storage();
    if head.params_iter().any(|v| !v.is_finite()) {
        return Err(FitError::Diverged {
            epoch: config.epochs.saturating_sub(1),
        });
    }

    let final_train_loss = eval_loss(&head, &x_train, &t_train)?;
    let final_val_loss = match &val {
        Some((x, t)) => Some(eval_loss(&head, x, t)?),
        None => None,
    };
    let report = FitReport {
        variant,
        from_block,
        to_block,
        hidden_dim: hidden,
        rank: head.rank(),
        num_params: head.num_params(),
        train_loss_trace: trace,
        final_train_loss,
        final_val_loss,
        epochs_run: config.epochs,
        steps_run: steps,
        wall_time_secs: started.elapsed().as_secs_f64(),
        ema_running_mean: ema_mean,
        ema_running_var: ema_var,
    };
    Ok((head, report))
}

/// Mean and unbiased variance of every column over the whole matrix.
fn full_pass_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty train split");
    let centered = x - &mean;
    let denom = if n > 1.0 { n - 1.0 } else { 1.0 };
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / denom;
    (mean, var)
}

impl ShortcutHead {
    fn params_iter(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match &self.params {
            HeadParams::Identity => Box::new(std::iter::empty()),
            HeadParams::FullLinear { w } => Box::new(w.iter()),
            HeadParams::LowRank { a, b } => Box::new(a.iter().chain(b.iter())),
            HeadParams::NormalizedLowRank { bn, a, b } => Box::new(
                a.iter()
                    .chain(b.iter())
                    .chain(bn.gamma.iter())
                    .chain(bn.beta.iter())
                    .chain(bn.running_mean.iter())
                    .chain(bn.running_var.iter()),
            ),
        }
    }
}

/// Solves `min_W sum_i ||x_i W - t_i||^2 + ridge * ||W||_F^2` through the
/// normal equations `(X^T X + ridge I) W = X^T T`.
pub fn least_squares(x: ArrayView2<f64>, t: ArrayView2<f64>, ridge: f64) -> Result<Array2<f64>> {
    if x.nrows() != t.nrows() {
        return Err(FitError::Shape(format!(
            "{} inputs vs {} targets",
            x.nrows(),
            t.nrows()
        )));
    }
    let mut gram = x.t().dot(&x);
    for i in 0..gram.nrows() {
        gram[[i, i]] += ridge;
    }
    let rhs = x.t().dot(&t);
    let chol = cholesky(&gram).ok_or(FitError::RankDeficient)?;
    Ok(cholesky_solve(&chol, &rhs))
}

/// Closed-form JTC optimum on the train split. `ridge = None` fails on a
/// rank-deficient design; pass `Some(DEFAULT_RIDGE)` to regularize.
pub fn least_squares_oracle(
    dataset: &HiddenPairDataset,
    from_block: usize,
    to_block: usize,
    ridge: Option<f64>,
) -> Result<Array2<f64>> {
    let idx = dataset.split.train_indices();
    let x = dataset.rows_f64(from_block, &idx)?;
    let t = dataset.rows_f64(to_block, &idx)?;
    least_squares(x.view(), t.view(), ridge.unwrap_or(0.0))
}

/// Lower-triangular `L` with `L L^T = a`, or `None` when `a` is not
/// numerically positive definite.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0f64, f64::max);
    let tol = max_diag * 1e-12;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > tol) {
            return None;
        }
        let ljj = d.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Array2<f64>, rhs: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = rhs.clone();
    for c in 0..rhs.ncols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in i + 1..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Optimizer::Sgd => f.write_str("sgd"),
            Optimizer::Adam { beta1, beta2, eps } => write!(f, "adam({beta1}, {beta2}, {eps})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsdata::{split_train_val, HiddenPairDataset};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn dataset_from(x: &Array2<f64>, t: &Array2<f64>, train_fraction: f64) -> HiddenPairDataset {
        let blocks = vec![x.mapv(|v| v as f32), t.mapv(|v| v as f32)];
        let split = split_train_val(x.nrows(), train_fraction, 5).unwrap();
        HiddenPairDataset::new("synthetic", blocks, None, None, None, Some(split)).unwrap()
    }

    /// Central difference of the loss along every trainable coordinate.
    fn finite_difference(
        head: &ShortcutHead,
        x: &Array2<f64>,
        t: &Array2<f64>,
        step: f64,
    ) -> Vec<Vec<f64>> {
        let mut work = head.clone();
        let sizes: Vec<usize> = trainable_slices_mut(&mut work)
            .iter()
            .map(|(_, s)| s.len())
            .collect();
        let loss = |h: &ShortcutHead| {
            mse_loss(h.forward_batch_stats(x.view()).unwrap().view(), t.view()).unwrap()
        };
        let mut out = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            let mut g = vec![0.0; n];
            for (i, gi) in g.iter_mut().enumerate() {
                let orig = trainable_slices_mut(&mut work)[k].1[i];
                trainable_slices_mut(&mut work)[k].1[i] = orig + step;
                let up = loss(&work);
                trainable_slices_mut(&mut work)[k].1[i] = orig - step;
                let down = loss(&work);
                trainable_slices_mut(&mut work)[k].1[i] = orig;
                *gi = (up - down) / (2.0 * step);
            }
            out.push(g);
        }
        out
    }

    fn max_rel_error(head: &ShortcutHead, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
        let (_, grads) = loss_gradients(head, x.view(), t.view()).unwrap();
        let fd = finite_difference(head, x, t, 1e-4);
        let mut worst = 0.0f64;
        for ((_, analytic), numeric) in grads.slices().into_iter().zip(&fd) {
            for (a, n) in analytic.iter().zip(numeric) {
                let denom = a.abs().max(n.abs()).max(1e-8);
                worst = worst.max((a - n).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn mse_examples() {
        let p = array![[1.0, 2.0]];
        let t = array![[0.0, 0.0]];
        assert_eq!(mse_loss(p.view(), t.view()).unwrap(), 5.0);
        assert_eq!(mse_loss(p.view(), p.view()).unwrap(), 0.0);
        let c = 3.0;
        let scaled = mse_loss((&p * c).view(), (&t * c).view()).unwrap();
        assert!((scaled - 9.0 * 5.0).abs() < 1e-12);
        assert!(mse_loss(p.view(), array![[1.0]].view()).is_err());
        assert!(matches!(
            mse_loss(array![[f64::NAN, 0.0]].view(), t.view()),
            Err(FitError::NonFinite(_))
        ));
    }

    #[test]
    fn identity_is_not_trainable() {
        let head = ShortcutHead::identity(0, 1, 3).unwrap();
        let x = Array2::zeros((2, 3));
        assert!(matches!(
            loss_gradients(&head, x.view(), x.view()),
            Err(FitError::NotTrainable(Variant::Identity))
        ));
    }

    #[test]
    fn zero_a_gives_zero_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ShortcutHead::low_rank(0, 1, Array2::zeros((5, 2)), rand_matrix(2, 5, &mut rng))
            .unwrap();
        let x = rand_matrix(4, 5, &mut rng);
        let t = rand_matrix(4, 5, &mut rng);
        let (_, g) = loss_gradients(&head, x.view(), t.view()).unwrap();
        let Gradients::LowRank { b, .. } = g else {
            unreachable!()
        };
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weight_is_stationary_on_copy_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(8, 4, &mut rng);
        let head = ShortcutHead::full_linear(0, 1, Array2::eye(4)).unwrap();
        let (loss, g) = loss_gradients(&head, x.view(), x.view()).unwrap();
        assert_eq!(loss, 0.0);
        let Gradients::FullLinear { w } = g else {
            unreachable!()
        };
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn low_rank_gradient_check_h6() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head =
            ShortcutHead::random(Variant::LowRank, 0, 1, 6, Some(1), 0.5, 1e-5, 0.1, &mut rng)
                .unwrap();
        let x = rand_matrix(4, 6, &mut rng);
        let t = rand_matrix(4, 6, &mut rng);
        assert!(max_rel_error(&head, &x, &t) < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn gradients_match_finite_differences(seed in 0u64..100_000, v in 1usize..4,
                                              h in 2usize..=12, r in 1usize..=2, n in 2usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut head = ShortcutHead::random(Variant::ALL[v], 0, 1, h, Some(r), 0.7, 1e-5, 0.1, &mut rng).unwrap();
            if let HeadParams::NormalizedLowRank { bn, .. } = &mut head.params {
                bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
                bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            let x = rand_matrix(n, h, &mut rng);
            let t = rand_matrix(n, h, &mut rng);
            prop_assert!(max_rel_error(&head, &x, &t) < 1e-4);
        }

        #[test]
        fn mse_matches_double_loop(seed in 0u64..100_000, n in 1usize..10, h in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_matrix(n, h, &mut rng) * 10.0;
            let t = rand_matrix(n, h, &mut rng);
            let mut total = 0.0;
            for i in 0..n {
                let mut sq = 0.0;
                for j in 0..h {
                    sq += (p[[i, j]] - t[[i, j]]).powi(2);
                }
                total += sq;
            }
            let naive = total / n as f64;
            let fast = mse_loss(p.view(), t.view()).unwrap();
            prop_assert!((fast - naive).abs() <= 1e-6 * naive.max(1e-12));
        }
    }

    #[test]
    fn least_squares_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(20, 5, &mut rng);
        let w = least_squares(x.view(), x.view(), 0.0).unwrap();
        assert!((&w - &Array2::<f64>::eye(5))
            .iter()
            .all(|v| v.abs() < 1e-10));

        let h = array![[1.0], [2.0], [-1.5]];
        let t = array![[2.5], [3.0], [0.5]];
        let w = least_squares(h.view(), t.view(), 0.0).unwrap();
        let expected = (1.0 * 2.5 + 2.0 * 3.0 - 1.5 * 0.5) / (1.0 + 4.0 + 2.25);
        assert!((w[[0, 0]] - expected).abs() < 1e-12);

        let dup = Array2::from_shape_fn(
            (10, 3),
            |(i, j)| if j == 2 { i as f64 } else { (i + j) as f64 },
        );
        let mut dup = dup;
        for i in 0..10 {
            dup[[i, 1]] = dup[[i, 0]];
        }
        assert!(matches!(
            least_squares(dup.view(), dup.view(), 0.0),
            Err(FitError::RankDeficient)
        ));
        assert!(least_squares(dup.view(), dup.view(), DEFAULT_RIDGE).is_ok());
    }

    #[test]
    fn least_squares_is_optimal_against_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_matrix(40, 8, &mut rng);
        let t = rand_matrix(40, 8, &mut rng);
        let w_star = least_squares(x.view(), t.view(), 0.0).unwrap();
        let best = mse_loss(x.dot(&w_star).view(), t.view()).unwrap();
        for _ in 0..100 {
            let w = &w_star + &(rand_matrix(8, 8, &mut rng) * 0.1);
            assert!(best <= mse_loss(x.dot(&w).view(), t.view()).unwrap());
            let w = rand_matrix(8, 8, &mut rng);
            assert!(best <= mse_loss(x.dot(&w).view(), t.view()).unwrap());
        }
    }

    #[test]
    fn rank_one_map_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = rand_matrix(10, 1, &mut rng);
        let v = rand_matrix(1, 10, &mut rng);
        let x = rand_matrix(400, 10, &mut rng);
        let t = x.dot(&u).dot(&v);
        let ds = dataset_from(&x, &t, 0.75);
        let cfg = FitConfig {
            rank: Some(1),
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 32,
            ..FitConfig::default()
        };
        let (_, report) = fit_shortcut(&ds, 0, 1, Variant::LowRank, &cfg).unwrap();
        let val = ds.split.val_indices();
        let tv = ds.rows_f64(1, &val).unwrap();
        let zero = mse_loss(Array2::zeros(tv.dim()).view(), tv.view()).unwrap();
        assert!(
            report.final_val_loss.unwrap() < 1e-3 * zero,
            "{report:?} zero={zero}"
        );
    }

    #[test]
    fn copy_task_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_matrix(300, 8, &mut rng);
        let ds = dataset_from(&x, &x, 0.8);
        let cfg = FitConfig {
            learning_rate: 1e-2,
            epochs: 150,
            batch_size: 30,
            ..FitConfig::default()
        };
        let (head, _) = fit_shortcut(&ds, 0, 1, Variant::FullLinear, &cfg).unwrap();
        let HeadParams::FullLinear { w } = &head.params else {
            unreachable!()
        };
        let eye = Array2::<f64>::eye(8);
        let rel = (w - &eye).mapv(|v| v * v).sum().sqrt() / (8f64).sqrt();
        assert!(rel < 0.05, "rel {rel}");
    }

    #[test]
    fn identity_fit_only_evaluates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_matrix(20, 4, &mut rng);
        let ds = dataset_from(&x, &x, 0.5);
        let (head, report) =
            fit_shortcut(&ds, 0, 1, Variant::Identity, &FitConfig::default()).unwrap();
        assert_eq!(head.variant(), Variant::Identity);
        assert!(report.train_loss_trace.is_empty());
        assert_eq!(report.epochs_run, 0);
        assert_eq!(report.final_val_loss, Some(0.0));
    }

    #[test]
    fn fit_is_deterministic_and_counts_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_matrix(101, 6, &mut rng);
        let t = rand_matrix(101, 6, &mut rng);
        let ds = dataset_from(&x, &t, 1.0);
        let cfg = FitConfig {
            epochs: 3,
            batch_size: 10,
            rank: Some(2),
            ..FitConfig::default()
        };
        for v in [Variant::FullLinear, Variant::LowRank] {
            let (h1, r1) = fit_shortcut(&ds, 0, 1, v, &cfg).unwrap();
            let (h2, _) = fit_shortcut(&ds, 0, 1, v, &cfg).unwrap();
            assert_eq!(h1.to_bytes(), h2.to_bytes());
            assert_eq!(r1.steps_run, 3 * 11);
            assert_eq!(r1.train_loss_trace.len(), 3);
        }
        // a trailing batch of one is folded into its predecessor
        let (h1, r1) = fit_shortcut(&ds, 0, 1, Variant::NormalizedLowRank, &cfg).unwrap();
        let (h2, _) = fit_shortcut(&ds, 0, 1, Variant::NormalizedLowRank, &cfg).unwrap();
        assert_eq!(h1.to_bytes(), h2.to_bytes());
        assert_eq!(r1.steps_run, 3 * 10);
        assert!(r1.ema_running_mean.is_some());
    }

    #[test]
    fn normalized_head_uses_full_pass_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_matrix(50, 4, &mut rng) + 3.0;
        let t = rand_matrix(50, 4, &mut rng);
        let ds = dataset_from(&x, &t, 1.0);
        let cfg = FitConfig {
            epochs: 2,
            batch_size: 8,
            rank: Some(1),
            ..FitConfig::default()
        };
        let (head, _) = fit_shortcut(&ds, 0, 1, Variant::NormalizedLowRank, &cfg).unwrap();
        let HeadParams::NormalizedLowRank { bn, .. } = &head.params else {
            unreachable!()
        };
        let xs = ds.rows_f64(0, &ds.split.train_indices()).unwrap();
        let mean = xs.mean_axis(Axis(0)).unwrap();
        for j in 0..4 {
            assert!((bn.running_mean[j] - mean[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_matrix(64, 4, &mut rng) * 1e3;
        let ds = dataset_from(&x, &x, 1.0);
        let cfg = FitConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 10.0,
            epochs: 50,
            batch_size: 16,
            ..FitConfig::default()
        };
        assert!(matches!(
            fit_shortcut(&ds, 0, 1, Variant::FullLinear, &cfg),
            Err(FitError::Diverged { .. })
        ));
    }

    #[test]
    fn config_file_round_trip_and_errors() {
        let cfg = FitConfig::from_kv_str(
            "# comment\nlearning_rate = 0.01\nepochs=5\noptimizer=sgd\nrank=2\n",
        )
        .unwrap();
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.optimizer, Optimizer::Sgd);
        assert_eq!(cfg.rank, Some(2));
        assert_eq!(FitConfig::from_kv_str(&cfg.to_kv_string()).unwrap(), cfg);
        let d = FitConfig::default();
        assert_eq!(FitConfig::from_kv_str(&d.to_kv_string()).unwrap(), d);
        assert!(FitConfig::from_kv_str("nope=1").is_err());
        assert!(FitConfig::from_kv_str("batch_size=1").is_err());
        assert!(FitConfig::from_kv_str("epochs").is_err());
    }

    #[test]
    fn batch_size_larger_than_train_split_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_matrix(10, 3, &mut rng);
        let ds = dataset_from(&x, &x, 1.0);
        assert!(matches!(
            fit_shortcut(&ds, 0, 1, Variant::FullLinear, &FitConfig::default()),
            Err(FitError::Config(_))
        ));
        assert!(matches!(
            fit_shortcut(&ds, 1, 1, Variant::FullLinear, &FitConfig::default()),
            Err(FitError::Head(HeadError::InvalidBlocks { .. }))
        ));
    }
}
