//! RSFT and DPO fine-tuning, and the three training pipelines built from them.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::seqmodel::{adamw_step, grad_log_prob, log_prob, sigmoid, softplus, AdamWConfig, ModelParams, Objective, OptimizerState};
use crate::tensor::{self, Tensor};

pub const DEFAULT_LR: f64 = 5e-5;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_EPOCHS: usize = 1;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "rsft")]
    Rsft,
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "rsft+dpo")]
    RsftDpo,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rsft => "rsft",
            Method::Dpo => "dpo",
            Method::RsftDpo => "rsft+dpo",
        }
    }

    pub fn uses_dpo(self) -> bool {
        !matches!(self, Method::Rsft)
    }

    pub fn uses_rsft(self) -> bool {
        !matches!(self, Method::Dpo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsft" => Ok(Method::Rsft),
            "dpo" => Ok(Method::Dpo),
            "rsft+dpo" => Ok(Method::RsftDpo),
            other => Err(Error::invalid(format!("unknown method {other:?} (expected rsft, dpo or rsft+dpo)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub seed: u64,
    /// DPO-stage learning rate; `lr` when unset.
    #[serde(default)]
    pub dpo_lr: Option<f64>,
    /// DPO-stage epochs; `epochs` when unset.
    #[serde(default)]
    pub dpo_epochs: Option<usize>,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            beta: DEFAULT_BETA,
            seed,
            dpo_lr: None,
            dpo_epochs: None,
        }
    }

    pub fn dpo_lr(&self) -> f64 {
        self.dpo_lr.unwrap_or(self.lr)
    }

    pub fn dpo_epochs(&self) -> usize {
        self.dpo_epochs.unwrap_or(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.dpo_lr() > 0.0 && self.dpo_lr().is_finite()) {
            return Err(Error::invalid(format!("DPO learning rate must be > 0, got {}", self.dpo_lr())));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.method.uses_dpo() && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// A tokenized supervised example: BOS + prompt tokens, and target tokens ending in EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqExample {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// A tokenized preference pair sharing one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqPair {
    pub prompt: Vec<TokenId>,
    pub best: Vec<TokenId>,
    pub worst: Vec<TokenId>,
}

/// A pair with the frozen reference log-probabilities attached.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoItem {
    pub pair: SeqPair,
    pub ref_best: f64,
    pub ref_worst: f64,
}

/// `-sum log P(target | prompt)` over the batch and its gradient.
pub fn rsft_loss(params: &ModelParams, batch: &[SeqExample]) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = params.zero_grads();
    let mut loss = 0.0;
    for ex in batch {
        loss -= crate::seqmodel::accumulate_grad_log_prob(params, &ex.prompt, &ex.target, -1.0, &mut grads)?;
    }
    Ok((loss, grads))
}

/// The scaled margin `beta * [(lp_best - ref_best) - (lp_worst - ref_worst)]`.
pub fn dpo_margin(lp_best: f64, lp_worst: f64, ref_best: f64, ref_worst: f64, beta: f64) -> f64 {
    beta * ((lp_best - ref_best) - (lp_worst - ref_worst))
}

/// `-log sigmoid(z)` computed as `softplus(-z)`.
pub fn dpo_term(z: f64) -> f64 {
    softplus(-z)
}

/// Reference log-probabilities for each pair, computed in parallel.
pub fn attach_reference(ref_params: &ModelParams, pairs: &[SeqPair]) -> Result<Vec<DpoItem>> {
    pairs
        .par_iter()
        .map(|p| {
            Ok(DpoItem {
                ref_best: log_prob(ref_params, &p.prompt, &p.best)?,
                ref_worst: log_prob(ref_params, &p.prompt, &p.worst)?,
                pair: p.clone(),
            })
        })
        .collect()
}

/// Mean DPO loss over the batch and its gradient with respect to `params` only.
pub fn dpo_loss(params: &ModelParams, batch: &[DpoItem], beta: f64) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    let n = batch.len() as f64;
    let mut grads = params.zero_grads();
    let mut loss = 0.0;
    for item in batch {
        let p = &item.pair;
        let (lb, gb) = grad_log_prob(params, &p.prompt, &p.best)?;
        let (lw, gw) = grad_log_prob(params, &p.prompt, &p.worst)?;
        let z = dpo_margin(lb, lw, item.ref_best, item.ref_worst, beta);
        loss += dpo_term(z) / n;
        // d softplus(-z) / dz = -sigmoid(-z)
        let dz = -sigmoid(-z) / n;
        tensor::add_scaled(&mut grads, &gb, dz * beta);
        tensor::add_scaled(&mut grads, &gw, -dz * beta);
    }
    Ok((loss, grads))
}

/// [`dpo_loss`] with the reference log-probabilities computed from `ref_params`.
pub fn dpo_loss_with_ref(
    params: &ModelParams,
    ref_params: &ModelParams,
    batch: &[SeqPair],
    beta: f64,
) -> Result<(f64, Vec<Tensor>)> {
    dpo_loss(params, &attach_reference(ref_params, batch)?, beta)
}

/// Mean loss and mean scaled margin over all items, without gradients.
pub fn dpo_stats(params: &ModelParams, items: &[DpoItem], beta: f64) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::invalid("no preference pairs"));
    }
    let zs: Vec<f64> = items
        .par_iter()
        .map(|it| {
            let lb = log_prob(params, &it.pair.prompt, &it.pair.best)?;
            let lw = log_prob(params, &it.pair.prompt, &it.pair.worst)?;
            Ok(dpo_margin(lb, lw, it.ref_best, it.ref_worst, beta))
        })
        .collect::<Result<_>>()?;
    let n = zs.len() as f64;
    Ok((zs.iter().map(|&z| dpo_term(z)).sum::<f64>() / n, zs.iter().sum::<f64>() / n))
}

/// Shuffled mini-batches of indices for one epoch.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch", epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Per-step mean loss (per example) recorded during training.
pub type LossTrace = Vec<f64>;

/// Minimizes the mean negative log-likelihood of the targets with AdamW.
pub fn train_rsft(params: &ModelParams, set: &[SeqExample], cfg: &TrainConfig) -> Result<(ModelParams, LossTrace)> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("empty RSFT set"));
    }
    let mut p = params.clone();
    let mut opt = OptimizerState::new(AdamWConfig::with_lr(cfg.lr), &p.tensors);
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(set.len(), cfg.batch_size, cfg.seed, epoch) {
            let examples: Vec<SeqExample> = batch.iter().map(|&i| set[i].clone()).collect();
            let (loss, mut g) = rsft_loss(&p, &examples)?;
            let b = examples.len() as f64;
            tensor::scale(&mut g, 1.0 / b);
            adamw_step(&mut opt, &mut p.tensors, &g, Objective::Minimize)?;
            trace.push(loss / b);
        }
    }
    Ok((p, trace))
}

/// Minimizes the DPO loss against a frozen reference whose log-probabilities are
/// computed once up front.
pub fn train_dpo(
    params: &ModelParams,
    ref_params: &ModelParams,
    pairs: &[SeqPair],
    cfg: &TrainConfig,
) -> Result<(ModelParams, LossTrace)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no preference pairs to train on"));
    }
    let items = attach_reference(ref_params, pairs)?;
    let mut p = params.clone();
    let mut opt = OptimizerState::new(AdamWConfig::with_lr(cfg.dpo_lr()), &p.tensors);
    let mut trace = Vec::new();
    for epoch in 0..cfg.dpo_epochs() {
        for batch in epoch_batches(items.len(), cfg.batch_size, cfg.seed, epoch) {
            let b: Vec<DpoItem> = batch.iter().map(|&i| items[i].clone()).collect();
            let (loss, g) = dpo_loss(&p, &b, cfg.beta)?;
            adamw_step(&mut opt, &mut p.tensors, &g, Objective::Minimize)?;
            trace.push(loss);
        }
    }
    Ok((p, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRun {
    pub config: TrainConfig,
    pub params: ModelParams,
    /// The intermediate RSFT model of a two-stage run.
    pub rsft_params: Option<ModelParams>,
    /// Parameter digest of the DPO reference model.
    pub reference: Option<String>,
    pub rsft_trace: LossTrace,
    pub dpo_trace: LossTrace,
}

/// `rsft`: RSFT only. `dpo`: DPO against the base model. `rsft+dpo`: RSFT, then DPO
/// with the RSFT model as both the starting point and the reference.
pub fn run_pipeline(
    base: &ModelParams,
    rsft_set: &[SeqExample],
    pairs: Option<&[SeqPair]>,
    cfg: &TrainConfig,
) -> Result<AlignmentRun> {
    cfg.validate()?;
    let pairs = if cfg.method.uses_dpo() {
        Some(pairs.ok_or_else(|| Error::invalid(format!("method {} needs preference pairs", cfg.method)))?)
    } else {
        None
    };
    let mut run = AlignmentRun {
        config: *cfg,
        params: base.clone(),
        rsft_params: None,
        reference: None,
        rsft_trace: Vec::new(),
        dpo_trace: Vec::new(),
    };
    if cfg.method.uses_rsft() {
        let (p, trace) = train_rsft(base, rsft_set, cfg)?;
        run.rsft_trace = trace;
        run.params = p;
    }
    if let Some(pairs) = pairs {
        let reference = run.params.clone();
        let (p, trace) = train_dpo(&reference, &reference, pairs, cfg)?;
        run.reference = Some(reference.digest());
        if cfg.method == Method::RsftDpo {
            run.rsft_params = Some(reference);
        }
        run.dpo_trace = trace;
        run.params = p;
    }
    Ok(run)
}
