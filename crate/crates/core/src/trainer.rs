//! Head training: AdamW with warmup plus cosine decay, the defensive loop,
//! and the plain SFT phase that produces the initial teacher head.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_by_delimiters, Segment, Token, TokenSequence, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::model::{FrozenBase, HeadParams, ModelBundle};
use crate::numerics::{RealMatrix, SeededRng};
use crate::objective::{masked_head_gradient, AdvConfig, PositionBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    CosineDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Student distillation passes.
    pub epochs: usize,
    pub alg1_shared_temp: bool,
    /// Abort once `|total_loss|` exceeds this multiple of its step-0 magnitude.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 128,
            peak_lr: 5e-5,
            lambda: 3e-5,
            alpha: 2.0,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            schedule: Schedule::CosineDecay,
            seed: 233,
            epochs: 2,
            alg1_shared_temp: false,
            divergence_factor: 10.0,
        }
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "steps",
        "batch_size",
        "peak_lr",
        "lambda",
        "alpha",
        "warmup_ratio",
        "weight_decay",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "schedule",
        "seed",
        "epochs",
        "alg1_shared_temp",
        "divergence_factor",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str| Err(Error::Config(format!("invalid value for key `{k}`")));
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor");
        }
        Ok(())
    }

    /// Sets one field by name. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse_field(key, value)?,
            "batch_size" => self.batch_size = parse_field(key, value)?,
            "peak_lr" => self.peak_lr = parse_field(key, value)?,
            "lambda" => self.lambda = parse_field(key, value)?,
            "alpha" => self.alpha = parse_field(key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse_field(key, value)?,
            "weight_decay" => self.weight_decay = parse_field(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_field(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_field(key, value)?,
            "adam_eps" => self.adam_eps = parse_field(key, value)?,
            "schedule" => match value.trim() {
                "CosineDecay" | "cosine" => self.schedule = Schedule::CosineDecay,
                _ => return Err(Error::Config(format!("bad value {value:?} for key `schedule`"))),
            },
            "seed" => self.seed = parse_field(key, value)?,
            "epochs" => self.epochs = parse_field(key, value)?,
            "alg1_shared_temp" => self.alg1_shared_temp = parse_field(key, value)?,
            "divergence_factor" => self.divergence_factor = parse_field(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text (blank lines and `#` comments allowed).
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv_text(text)? {
            self.set(&key, &value)?;
        }
        self.validate()
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let schedule = match self.schedule {
            Schedule::CosineDecay => "CosineDecay",
        };
        let pairs: [(&str, String); 15] = [
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("peak_lr", format!("{:e}", self.peak_lr)),
            ("lambda", format!("{:e}", self.lambda)),
            ("alpha", self.alpha.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", format!("{:e}", self.adam_eps)),
            ("schedule", schedule.into()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("alg1_shared_temp", self.alg1_shared_temp.to_string()),
            ("divergence_factor", self.divergence_factor.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_schedule(step, self.steps, self.peak_lr, self.warmup_ratio)
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Ordered `(key, value)` pairs from flat config text.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Linear warmup over `round(warmup_ratio · steps)` steps, then cosine decay
/// reaching 0 at `steps`.
pub fn lr_schedule(step: usize, steps: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let warm = (warmup_ratio * steps as f64).round() as usize;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    if steps <= warm {
        return peak;
    }
    let progress = (step.min(steps) - warm) as f64 / (steps - warm) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_at(step)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: HeadParams,
    pub v: HeadParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &HeadParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay applied first.
pub fn adamw_step(
    params: &mut HeadParams,
    grads: &HeadParams,
    state: &mut OptimizerState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if params.num_params() != grads.num_params() || state.m.num_params() != params.num_params() {
        return Err(invalid("optimizer shapes do not match parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::TrainingDiverged {
            step: state.step as usize,
            reason: "non-finite gradient".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - lr * opt.weight_decay;
    let blocks = params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.m.blocks_mut().into_iter().zip(state.v.blocks_mut()));
    for ((p, g), (m, v)) in blocks {
        for i in 0..p.len() {
            if opt.weight_decay != 0.0 {
                p[i] *= decay;
            }
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub sft_loss: f64,
    pub adv_loss: f64,
    pub total_loss: f64,
    pub masked_kl: f64,
}

pub fn write_metrics_jsonl(log: &[StepMetrics], mut w: impl Write) -> Result<()> {
    for m in log {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_metrics_jsonl(r: impl BufRead) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Response positions of one sequence: hidden state at `t − 1`, target
/// token at `t`, and the reasoning mask bit at `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRows {
    pub hidden: RealMatrix,
    pub targets: Vec<Token>,
    pub mask: Vec<bool>,
}

/// Which response positions a sequence contributes (non-Prompt, non-Pad).
pub fn response_positions(seq: &TokenSequence) -> Vec<usize> {
    (1..seq.len())
        .filter(|&t| !matches!(seq.tags()[t], Segment::Prompt | Segment::Pad))
        .collect()
}

/// Base features at the positions that predict each response token.
pub fn sequence_rows(base: &FrozenBase, seq: &TokenSequence, mask: &[bool]) -> Result<SequenceRows> {
    let pos = response_positions(seq);
    if pos.is_empty() {
        return Err(invalid("sequence has no response positions"));
    }
    let last = *pos.last().expect("nonempty");
    let feats = base.forward_tokens(&seq.tokens()[..last])?;
    let d = base.hidden_dim();
    let mut hidden = RealMatrix::zeros(pos.len(), d);
    for (r, &t) in pos.iter().enumerate() {
        hidden.row_mut(r).copy_from_slice(feats.row(t - 1));
    }
    Ok(SequenceRows {
        hidden,
        targets: pos.iter().map(|&t| seq.tokens()[t]).collect(),
        mask: pos.iter().map(|&t| mask[t]).collect(),
    })
}

/// Cached teacher features and proxy logits for a pool of sequences. The
/// base and proxies are frozen, so both are computed once.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    rows: Vec<SequenceRows>,
    proxy_logits: Vec<Vec<RealMatrix>>,
}

impl FeatureCache {
    pub fn build(
        vocab: &Vocabulary,
        base: &FrozenBase,
        proxies: &[ModelBundle],
        seqs: &[TokenSequence],
    ) -> Result<Self> {
        let built: Vec<Result<(SequenceRows, Vec<RealMatrix>)>> = seqs
            .par_iter()
            .map(|seq| {
                let mask = mask_by_delimiters(vocab, seq)?;
                let rows = sequence_rows(base, seq, mask.as_slice())?;
                let mut plogits = Vec::with_capacity(proxies.len());
                for p in proxies {
                    let prow = sequence_rows(&p.base, seq, mask.as_slice())?;
                    plogits.push(p.head.forward_batch(&prow.hidden).1);
                }
                Ok((rows, plogits))
            })
            .collect();
        let mut rows = Vec::with_capacity(seqs.len());
        let mut proxy_logits = Vec::with_capacity(seqs.len());
        for b in built {
            let (r, p) = b?;
            rows.push(r);
            proxy_logits.push(p);
        }
        Ok(Self { rows, proxy_logits })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_proxies(&self) -> usize {
        self.proxy_logits.first().map_or(0, Vec::len)
    }

    /// Concatenates the rows of the listed sequences, in order.
    pub fn batch(&self, indices: &[usize]) -> PositionBatch {
        let d = self.rows[0].hidden.cols();
        let n: usize = indices.iter().map(|&i| self.rows[i].targets.len()).sum();
        let mut hidden = Vec::with_capacity(n * d);
        let mut targets = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        let np = self.num_proxies();
        let mut proxies: Vec<Vec<f64>> = vec![Vec::new(); np];
        for &i in indices {
            let r = &self.rows[i];
            hidden.extend_from_slice(r.hidden.as_slice());
            targets.extend_from_slice(&r.targets);
            mask.extend_from_slice(&r.mask);
            for (k, p) in self.proxy_logits[i].iter().enumerate() {
                proxies[k].extend_from_slice(p.as_slice());
            }
        }
        let v = self.proxy_logits[indices[0]].first().map_or(0, RealMatrix::cols);
        PositionBatch {
            hidden: RealMatrix::from_vec(n, d, hidden).expect("finite features"),
            targets,
            mask,
            proxy_logits: proxies
                .into_iter()
                .map(|p| RealMatrix::from_vec(n, v, p).expect("finite proxy logits"))
                .collect(),
        }
    }
}

/// Outcome of a training run that may have tripped the divergence guard.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub head: HeadParams,
    pub log: Vec<StepMetrics>,
    /// `(step, reason)` when the run aborted.
    pub diverged: Option<(usize, String)>,
}

/// Sequence indices for every step, drawn with replacement.
pub fn batch_schedule(pool: usize, cfg: &TrainConfig, stream: &str) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::new(cfg.seed, stream);
    (0..cfg.steps)
        .map(|_| (0..cfg.batch_size).map(|_| rng.below(pool)).collect())
        .collect()
}

fn run_loop(
    head: &HeadParams,
    cache: &FeatureCache,
    schedule: &[Vec<usize>],
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let opt = cfg.adamw();
    let mut params = head.clone();
    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut base_total = None;
    for (step, indices) in schedule.iter().enumerate() {
        let batch = cache.batch(indices);
        let lr = cfg.lr_at(step);
        let (b, grad) = masked_head_gradient(&params, &batch, lambda, cfg.alpha, cfg.alg1_shared_temp)?;
        log.push(StepMetrics {
            step,
            lr,
            sft_loss: b.sft_loss,
            adv_loss: b.adv_loss,
            total_loss: b.total_loss,
            masked_kl: b.masked_kl(),
        });
        let t0: f64 = *base_total.get_or_insert(b.total_loss.abs());
        let reason = if !b.total_loss.is_finite() {
            Some("non-finite total loss".to_string())
        } else if b.total_loss.abs() > cfg.divergence_factor * t0.max(f64::MIN_POSITIVE) {
            Some(format!(
                "|total_loss| {:.4e} exceeds {}x its step-0 value {:.4e}",
                b.total_loss.abs(),
                cfg.divergence_factor,
                t0
            ))
        } else {
            None
        };
        if let Some(reason) = reason {
            return Ok(TrainOutcome {
                head: params,
                log,
                diverged: Some((step, reason)),
            });
        }
        if let Err(Error::TrainingDiverged { reason, .. }) =
            adamw_step(&mut params, &grad, &mut state, lr, &opt)
        {
            return Ok(TrainOutcome {
                head: params,
                log,
                diverged: Some((step, reason)),
            });
        }
    }
    Ok(TrainOutcome {
        head: params,
        log,
        diverged: None,
    })
}

fn check_shared_vocab(teacher: &ModelBundle, adv: &AdvConfig) -> Result<()> {
    adv.check_vocab(teacher.vocab_size())?;
    if let Some(p) = adv.proxies.iter().find(|p| p.base.config().vocab_size != teacher.base.config().vocab_size) {
        return Err(Error::Config(format!(
            "proxy base vocabulary {} != teacher base vocabulary {}",
            p.base.config().vocab_size,
            teacher.base.config().vocab_size
        )));
    }
    Ok(())
}

/// Defensive training that reports, rather than raises, a tripped
/// divergence guard.
pub fn defensive_train_report(
    teacher: &ModelBundle,
    vocab: &Vocabulary,
    train: &[TokenSequence],
    cfg: &TrainConfig,
    adv: &AdvConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    adv.validate()?;
    check_shared_vocab(teacher, adv)?;
    if teacher.vocab_size() != vocab.len() {
        return Err(Error::Config("teacher vocabulary differs from corpus vocabulary".into()));
    }
    let schedule = batch_schedule(train.len(), cfg, "defense/batches");
    // Only sequences that the schedule touches need features.
    let mut used: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in schedule.iter().flatten() {
        let next = used.len();
        used.entry(i).or_insert(next);
    }
    let mut order: Vec<(usize, usize)> = used.iter().map(|(&k, &v)| (v, k)).collect();
    order.sort_unstable();
    let seqs: Vec<TokenSequence> = order.iter().map(|&(_, i)| train[i].clone()).collect();
    let proxies = if adv.lambda > 0.0 || !adv.proxies.is_empty() {
        adv.proxies.as_slice()
    } else {
        &[]
    };
    if seqs.is_empty() {
        return Ok(TrainOutcome {
            head: teacher.head.clone(),
            log: Vec::new(),
            diverged: None,
        });
    }
    let cache = FeatureCache::build(vocab, &teacher.base, proxies, &seqs)?;
    let remapped: Vec<Vec<usize>> = schedule
        .iter()
        .map(|b| b.iter().map(|i| used[i]).collect())
        .collect();
    let cfg = TrainConfig {
        alg1_shared_temp: cfg.alg1_shared_temp || adv.alg1_shared_temp,
        alpha: adv.alpha,
        ..cfg.clone()
    };
    run_loop(&teacher.head, &cache, &remapped, &cfg, adv.lambda)
}

/// Masked defensive training of the teacher head; the base and proxies
/// are read-only.
pub fn defensive_train(
    teacher: &ModelBundle,
    vocab: &Vocabulary,
    train: &[TokenSequence],
    cfg: &TrainConfig,
    adv: &AdvConfig,
) -> Result<(HeadParams, Vec<StepMetrics>)> {
    let out = defensive_train_report(teacher, vocab, train, cfg, adv)?;
    match out.diverged {
        Some((step, reason)) => Err(Error::TrainingDiverged { step, reason }),
        None => Ok((out.head, out.log)),
    }
}

/// Supervised settings for fitting a head from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub steps: usize,
    /// Sequences per batch.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Sequences drawn from the front of the training split.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 128,
            peak_lr: 2e-3,
            weight_decay: 0.0,
            pool_size: 4000,
            seed: 233,
        }
    }
}

/// Plain token cross-entropy training of a head on labelled responses.
/// Returns the trained head and the per-step log.
pub fn sft_train(
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    train: &[TokenSequence],
    sft: &SftConfig,
    stream: &str,
) -> Result<(HeadParams, Vec<StepMetrics>)> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pool = &train[..sft.pool_size.clamp(1, train.len())];
    let cfg = TrainConfig {
        steps: sft.steps,
        batch_size: sft.batch_size,
        peak_lr: sft.peak_lr,
        lambda: 0.0,
        weight_decay: sft.weight_decay,
        seed: sft.seed,
        divergence_factor: f64::MAX,
        ..TrainConfig::default()
    };
    let cache = FeatureCache::build(vocab, &bundle.base, &[], pool)?;
    let schedule = batch_schedule(pool.len(), &cfg, stream);
    let out = run_loop(&bundle.head, &cache, &schedule, &cfg, 0.0)?;
    match out.diverged {
        Some((step, reason)) => Err(Error::TrainingDiverged { step, reason }),
        None => Ok((out.head, out.log)),
    }
}
