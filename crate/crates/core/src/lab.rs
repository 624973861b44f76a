//! End-to-end desk experiment: corpus, SFT teacher and proxies, defensive
//! training, distillation and the four-way comparison.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusConfig, Vocabulary};
use crate::distill::{defense_gap, DefenseGapReport, KdSettings, StudentTemplate, StudentTrainConfig};
use crate::error::{Error, Result};
use crate::model::{BaseConfig, DecodingStrategy, FrozenBase, HeadParams, ModelBundle, Role};
use crate::objective::AdvConfig;
use crate::trainer::{defensive_train_report, sft_train, SftConfig, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxySpec {
    pub base_seed: u64,
    pub hidden_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub corpus: CorpusConfig,
    pub teacher_base_seed: u64,
    pub teacher_hidden: usize,
    pub proxies: Vec<ProxySpec>,
    pub sft: SftConfig,
    pub train: TrainConfig,
    pub kd: KdSettings,
    pub student: StudentTemplate,
    pub seeds: Vec<u64>,
    pub teacher_tolerance: f64,
    /// Evaluation instances used (front of the eval split); 0 means all.
    pub eval_limit: usize,
}

/// λ used by the desk pipeline in place of 3e-5 (see the calibration sweep).
pub const CALIBRATED_LAMBDA: f64 = 0.1;

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig {
                size: 40_000,
                ..CorpusConfig::default()
            },
            teacher_base_seed: 11,
            teacher_hidden: 512,
            proxies: vec![
                ProxySpec { base_seed: 22, hidden_dim: 192 },
                ProxySpec { base_seed: 44, hidden_dim: 384 },
            ],
            sft: SftConfig::default(),
            train: TrainConfig {
                lambda: CALIBRATED_LAMBDA,
                ..TrainConfig::default()
            },
            kd: KdSettings {
                strategy: DecodingStrategy::top_k(5, 1.0, 24, 233),
                student: StudentTrainConfig::default(),
            },
            student: StudentTemplate {
                base_seed: 33,
                hidden_dim: 384,
                mlp_hidden: None,
                init_std: 0.0,
            },
            seeds: vec![233, 234, 235],
            teacher_tolerance: 0.02,
            eval_limit: 0,
        }
    }
}

/// Frozen base with a zero head.
pub fn fresh_bundle(vocab: &Vocabulary, seed: u64, hidden: usize, role: Role) -> Result<ModelBundle> {
    let base = FrozenBase::new(BaseConfig::new(seed, vocab.len(), hidden))?;
    ModelBundle::new(base, HeadParams::zeros_linear(vocab.len(), hidden), role)
}

/// Fits a zero-initialised head on the training split.
pub fn sft_model(
    vocab: &Vocabulary,
    corpus: &Corpus,
    seed: u64,
    hidden: usize,
    role: Role,
    sft: &SftConfig,
) -> Result<ModelBundle> {
    let mut m = fresh_bundle(vocab, seed, hidden, role)?;
    let train = corpus.train_set();
    let (head, _) = sft_train(&m, vocab, &train, sft, &format!("sft/{seed}"))?;
    m.head = head;
    Ok(m)
}

/// Corpus plus the SFT teacher and proxies, shared by every λ.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub teacher: ModelBundle,
    pub proxies: Vec<ModelBundle>,
}

impl Prepared {
    pub fn build(cfg: &LabConfig) -> Result<Self> {
        Self::from_corpus(cfg, Corpus::generate(&Vocabulary::arithmetic(), &cfg.corpus)?)
    }

    pub fn from_corpus(cfg: &LabConfig, corpus: Corpus) -> Result<Self> {
        let vocab = corpus.vocab.clone();
        let teacher = sft_model(
            &vocab,
            &corpus,
            cfg.teacher_base_seed,
            cfg.teacher_hidden,
            Role::Teacher,
            &cfg.sft,
        )?;
        let proxies = cfg
            .proxies
            .iter()
            .map(|p| sft_model(&vocab, &corpus, p.base_seed, p.hidden_dim, Role::ProxyStudent, &cfg.sft))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            corpus,
            teacher,
            proxies,
        })
    }

    pub fn eval_set(&self, cfg: &LabConfig) -> Vec<crate::corpus::TokenSequence> {
        let mut e = self.corpus.eval_set();
        if cfg.eval_limit > 0 {
            e.truncate(cfg.eval_limit);
        }
        e
    }

    /// Defensive training of a copy of the teacher at `lambda`.
    pub fn defend(&self, cfg: &LabConfig, lambda: f64) -> Result<(ModelBundle, TrainOutcome)> {
        let adv = AdvConfig {
            lambda,
            alpha: cfg.train.alpha,
            proxies: self.proxies.clone(),
            alg1_shared_temp: cfg.train.alg1_shared_temp,
        };
        let tcfg = TrainConfig {
            lambda,
            ..cfg.train.clone()
        };
        let out = defensive_train_report(
            &self.teacher,
            &self.corpus.vocab,
            &self.corpus.train_set(),
            &tcfg,
            &adv,
        )?;
        let mut defended = self.teacher.clone();
        defended.head = out.head.clone();
        Ok((defended, out))
    }

    pub fn gap(&self, cfg: &LabConfig, defensive: &ModelBundle, lambda: f64) -> Result<DefenseGapReport> {
        let mut r = defense_gap(
            &self.teacher,
            defensive,
            &cfg.student,
            &self.corpus.vocab,
            &self.corpus.kd_prompts(),
            &self.eval_set(cfg),
            &cfg.seeds,
            &cfg.kd,
            cfg.teacher_tolerance,
        )?;
        r.lambda = Some(lambda);
        Ok(r)
    }
}

/// One row of a λ sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub diverged: Option<String>,
    pub report: Option<DefenseGapReport>,
}

/// Runs the full pipeline for each λ; diverged runs are recorded, not fatal.
pub fn lambda_sweep(cfg: &LabConfig, prepared: &Prepared, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let (defended, out) = prepared.defend(cfg, lambda)?;
        if let Some((step, reason)) = out.diverged {
            rows.push(SweepRow {
                lambda,
                diverged: Some(format!("step {step}: {reason}")),
                report: None,
            });
            continue;
        }
        rows.push(SweepRow {
            lambda,
            diverged: None,
            report: Some(prepared.gap(cfg, &defended, lambda)?),
        });
    }
    Ok(rows)
}

/// Smallest swept λ whose report meets both goals, if any.
pub fn pick_lambda(rows: &[SweepRow], min_student_drop: f64) -> Result<f64> {
    rows.iter()
        .filter_map(|r| r.report.as_ref().map(|rep| (r.lambda, rep)))
        .find(|(_, rep)| rep.teacher_preserved() && rep.student_delta <= -min_student_drop)
        .map(|(l, _)| l)
        .ok_or_else(|| Error::Estimation("no swept lambda met both goals".into()))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl LabConfig {
    /// Sets the run seed on every stream that derives from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.sft.seed = seed;
        self.train.seed = seed;
        self.kd.strategy.seed = seed;
        self.kd.student.seed = seed;
    }

    /// Sets one namespaced key (`section.field`). Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::model::DecodeKind;
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        match (section, field) {
            ("run", "seed") => self.set_seed(parse(key, value)?),
            ("corpus", "size") => self.corpus.size = parse(key, value)?,
            ("corpus", "difficulties") => self.corpus.difficulties = parse_list(key, value)?,
            ("corpus", "moduli") => self.corpus.moduli = parse_list(key, value)?,
            ("corpus", "seed") => self.corpus.seed = parse(key, value)?,
            ("teacher", "hidden") => self.teacher_hidden = parse(key, value)?,
            ("teacher", "base_seed") => self.teacher_base_seed = parse(key, value)?,
            ("proxies", "dims") | ("proxies", "base_seeds") => {
                let nums: Vec<u64> = parse_list(key, value)?;
                if field == "dims" {
                    let seeds: Vec<u64> = self.proxies.iter().map(|p| p.base_seed).collect();
                    self.proxies = nums
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| ProxySpec {
                            base_seed: seeds.get(i).copied().unwrap_or(22 * (i as u64 + 1)),
                            hidden_dim: d as usize,
                        })
                        .collect();
                } else {
                    if nums.len() != self.proxies.len() {
                        return Err(Error::Config(format!(
                            "key `{key}` needs {} entries",
                            self.proxies.len()
                        )));
                    }
                    for (p, s) in self.proxies.iter_mut().zip(nums) {
                        p.base_seed = s;
                    }
                }
            }
            ("sft", "steps") => self.sft.steps = parse(key, value)?,
            ("sft", "batch_size") => self.sft.batch_size = parse(key, value)?,
            ("sft", "peak_lr") => self.sft.peak_lr = parse(key, value)?,
            ("sft", "weight_decay") => self.sft.weight_decay = parse(key, value)?,
            ("sft", "pool_size") => self.sft.pool_size = parse(key, value)?,
            ("sft", "seed") => self.sft.seed = parse(key, value)?,
            ("train", f) => self.train.set(f, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(m.replace(&format!("`{f}`"), &format!("`{key}`"))),
                other => other,
            })?,
            ("kd", "decode") => match value.trim() {
                "greedy" => self.kd.strategy.kind = DecodeKind::Greedy,
                "topk" => {
                    if self.kd.strategy.kind == DecodeKind::Greedy {
                        self.kd.strategy.kind = DecodeKind::TopK { k: 5, sample_temp: 1.0 };
                    }
                }
                _ => return Err(Error::Config(format!("bad value {value:?} for key `{key}`"))),
            },
            ("kd", "k") | ("kd", "sample_temp") => {
                let DecodeKind::TopK { k, sample_temp } = &mut self.kd.strategy.kind else {
                    return Err(Error::Config(format!("key `{key}` requires kd.decode = topk")));
                };
                if field == "k" {
                    *k = parse(key, value)?;
                } else {
                    *sample_temp = parse(key, value)?;
                }
            }
            ("kd", "max_new_tokens") => self.kd.strategy.max_new_tokens = parse(key, value)?,
            ("kd", "seed") => self.kd.strategy.seed = parse(key, value)?,
            ("student", "hidden") => self.student.hidden_dim = parse(key, value)?,
            ("student", "base_seed") => self.student.base_seed = parse(key, value)?,
            ("student", "mlp_hidden") => {
                let n: usize = parse(key, value)?;
                self.student.mlp_hidden = (n > 0).then_some(n);
            }
            ("student", "init_std") => self.student.init_std = parse(key, value)?,
            ("student", "epochs") => self.kd.student.epochs = parse(key, value)?,
            ("student", "peak_lr") => self.kd.student.peak_lr = parse(key, value)?,
            ("student", "batch_size") => self.kd.student.batch_size = parse(key, value)?,
            ("student", "weight_decay") => self.kd.student.weight_decay = parse(key, value)?,
            ("student", "seed") => self.kd.student.seed = parse(key, value)?,
            ("gap", "seeds") => self.seeds = parse_list(key, value)?,
            ("gap", "teacher_tolerance") => self.teacher_tolerance = parse(key, value)?,
            ("eval", "limit") => self.eval_limit = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("key `gap.seeds` must list at least one seed".into()));
        }
        if self.teacher_hidden == 0 || self.student.hidden_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.proxies.iter().any(|p| p.hidden_dim == 0) {
            return Err(Error::Config("key `proxies.dims` entries must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.teacher_tolerance) {
            return Err(Error::Config("key `gap.teacher_tolerance` must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value; `apply_kv_text` of this text
    /// reproduces `self`.
    pub fn to_kv_text(&self) -> String {
        use crate::model::DecodeKind;
        use std::fmt::Write as _;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("corpus.size", self.corpus.size.to_string());
        put("corpus.difficulties", join(&self.corpus.difficulties));
        put("corpus.moduli", join(&self.corpus.moduli));
        put("corpus.seed", self.corpus.seed.to_string());
        put("teacher.hidden", self.teacher_hidden.to_string());
        put("teacher.base_seed", self.teacher_base_seed.to_string());
        put("proxies.dims", join(&self.proxies.iter().map(|p| p.hidden_dim).collect::<Vec<_>>()));
        put("proxies.base_seeds", join(&self.proxies.iter().map(|p| p.base_seed).collect::<Vec<_>>()));
        put("sft.steps", self.sft.steps.to_string());
        put("sft.batch_size", self.sft.batch_size.to_string());
        put("sft.peak_lr", format!("{:e}", self.sft.peak_lr));
        put("sft.weight_decay", self.sft.weight_decay.to_string());
        put("sft.pool_size", self.sft.pool_size.to_string());
        put("sft.seed", self.sft.seed.to_string());
        for line in self.train.to_kv_text().lines() {
            let (k, v) = line.split_once(" = ").expect("kv line");
            put(&format!("train.{k}"), v.to_string());
        }
        match self.kd.strategy.kind {
            DecodeKind::Greedy => put("kd.decode", "greedy".into()),
            DecodeKind::TopK { k, sample_temp } => {
                put("kd.decode", "topk".into());
                put("kd.k", k.to_string());
                put("kd.sample_temp", sample_temp.to_string());
            }
        }
        put("kd.max_new_tokens", self.kd.strategy.max_new_tokens.to_string());
        put("kd.seed", self.kd.strategy.seed.to_string());
        put("student.hidden", self.student.hidden_dim.to_string());
        put("student.base_seed", self.student.base_seed.to_string());
        put("student.mlp_hidden", self.student.mlp_hidden.unwrap_or(0).to_string());
        put("student.init_std", self.student.init_std.to_string());
        put("student.epochs", self.kd.student.epochs.to_string());
        put("student.peak_lr", format!("{:e}", self.kd.student.peak_lr));
        put("student.batch_size", self.kd.student.batch_size.to_string());
        put("student.weight_decay", self.kd.student.weight_decay.to_string());
        put("student.seed", self.kd.student.seed.to_string());
        put("gap.seeds", join(&self.seeds));
        put("gap.teacher_tolerance", self.teacher_tolerance.to_string());
        put("eval.limit", self.eval_limit.to_string());
        s
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in crate::trainer::parse_kv_text(text)? {
            self.set(&k, &v)?;
        }
        self.validate()
    }
}
