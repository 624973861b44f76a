//! Sequence-level distillation: sample outputs from a teacher, fit a student
//! head on those tokens only, and score answer accuracy.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, TokenSequence, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::model::{decode, DecodingStrategy, HeadParams, ModelBundle};
use crate::numerics::{RealMatrix, SeededRng};
use crate::objective::sft_loss_and_grad;
use crate::trainer::{adamw_step, lr_schedule, AdamW, OptimizerState};

/// Short content id of a model: FNV-1a over its checkpoint bytes.
pub fn model_id(model: &ModelBundle) -> String {
    let mut bytes = Vec::new();
    model
        .write_checkpoint(&mut bytes)
        .expect("writing to memory cannot fail");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_id: String,
    pub strategy: DecodingStrategy,
}

/// Prompts paired with the teacher's generated continuations.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillDataset {
    pub pairs: Vec<(TokenSequence, TokenSequence)>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prompt: Vec<Token>,
    output: Vec<Token>,
}

impl DistillDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.provenance.teacher_id.is_empty() || self.provenance.strategy.stream.is_empty() {
            return Err(invalid("distillation dataset lacks provenance"));
        }
        for (p, o) in &self.pairs {
            if o.len() < p.len() || o.tokens()[..p.len()] != *p.tokens() {
                return Err(invalid("teacher output does not extend its prompt"));
            }
        }
        Ok(())
    }

    /// One JSON record per line; provenance goes to a sidecar document.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for (p, o) in &self.pairs {
            let rec = PairRecord {
                prompt: p.tokens().to_vec(),
                output: o.tokens()[p.len()..].to_vec(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead, provenance: Provenance) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PairRecord = serde_json::from_str(&line)?;
            let prompt = TokenSequence::prompt_only(rec.prompt);
            let mut out = prompt.clone();
            for t in rec.output {
                out.push_generated(t);
            }
            pairs.push((prompt, out));
        }
        let ds = Self { pairs, provenance };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        std::fs::write(
            provenance_path(path),
            serde_json::to_string_pretty(&self.provenance)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let prov: Provenance = serde_json::from_str(&std::fs::read_to_string(provenance_path(path))?)?;
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_jsonl(f, prov)
    }
}

/// Sidecar holding a dataset's provenance.
pub fn provenance_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    s.into()
}

/// Decodes one continuation per prompt; item `i` samples from its own stream.
pub fn generate_kd_dataset(
    teacher: &ModelBundle,
    prompts: &[TokenSequence],
    end_token: Token,
    strategy: &DecodingStrategy,
) -> Result<DistillDataset> {
    if prompts.is_empty() {
        return Err(invalid("no prompts to distill from"));
    }
    let pairs = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let prompt = p.prompt();
            let out = decode(teacher, &prompt, end_token, &strategy.for_item(i))?;
            Ok((prompt, out))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistillDataset {
        pairs,
        provenance: Provenance {
            teacher_id: model_id(teacher),
            strategy: strategy.clone(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentTrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    /// Token positions per step.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for StudentTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            peak_lr: 1e-2,
            batch_size: 64,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            seed: 233,
        }
    }
}

/// Student-side rows for every generated token: features at `t − 1` and the
/// token at `t`.
fn student_rows(student: &ModelBundle, data: &DistillDataset) -> Result<(RealMatrix, Vec<Token>)> {
    let per: Vec<Result<(Vec<f64>, Vec<Token>)>> = data
        .pairs
        .par_iter()
        .map(|(p, o)| {
            if o.len() <= p.len() {
                return Ok((Vec::new(), Vec::new()));
            }
            let feats = student.base.forward_tokens(&o.tokens()[..o.len() - 1])?;
            let mut h = Vec::with_capacity((o.len() - p.len()) * feats.cols());
            for t in p.len()..o.len() {
                h.extend_from_slice(feats.row(t - 1));
            }
            Ok((h, o.tokens()[p.len()..].to_vec()))
        })
        .collect();
    let d = student.base.hidden_dim();
    let mut hidden = Vec::new();
    let mut targets = Vec::new();
    for r in per {
        let (h, t) = r?;
        hidden.extend(h);
        targets.extend(t);
    }
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = targets.len();
    Ok((RealMatrix::from_vec(n, d, hidden)?, targets))
}

fn gather(hidden: &RealMatrix, targets: &[Token], idx: &[usize]) -> (RealMatrix, Vec<Token>) {
    let d = hidden.cols();
    let mut h = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        h.extend_from_slice(hidden.row(i));
    }
    (
        RealMatrix::from_vec(idx.len(), d, h).expect("finite rows"),
        idx.iter().map(|&i| targets[i]).collect(),
    )
}

/// Mean token NLL of `head` over rows.
fn mean_nll(head: &HeadParams, hidden: &RealMatrix, targets: &[Token]) -> Result<f64> {
    let (_, z) = head.forward_batch(hidden);
    Ok(sft_loss_and_grad(&z, targets)?.0)
}

/// Mean token NLL of the student on the dataset's generated tokens.
pub fn dataset_nll(student: &ModelBundle, data: &DistillDataset) -> Result<f64> {
    let (h, y) = student_rows(student, data)?;
    mean_nll(&student.head, &h, &y)
}

/// Fits the student head by token NLL on teacher outputs. Each epoch visits
/// every generated position once in a seeded order.
pub fn train_student(
    student: &ModelBundle,
    data: &DistillDataset,
    cfg: &StudentTrainConfig,
) -> Result<ModelBundle> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let vocab = student.vocab_size();
    if data
        .pairs
        .iter()
        .any(|(_, o)| o.tokens().iter().any(|&t| usize::from(t) >= vocab))
    {
        return Err(Error::Config(
            "dataset tokens fall outside the student vocabulary".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Ok(student.clone());
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch_size must be positive"));
    }
    let (hidden, targets) = student_rows(student, data)?;
    let n = targets.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let steps = cfg.epochs * per_epoch;
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut head = student.head.clone();
    let mut state = OptimizerState::new(&head);
    let mut rng = SeededRng::new(cfg.seed, "student/order");
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.below(i + 1));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let (h, y) = gather(&hidden, &targets, chunk);
            let (acts, z) = head.forward_batch(&h);
            let (_, dz) = sft_loss_and_grad(&z, &y)?;
            let mut grad = head.zeros_like();
            head.backprop_batch(&h, acts.as_ref(), &dz, &mut grad);
            let lr = lr_schedule(step, steps, cfg.peak_lr, cfg.warmup_ratio);
            adamw_step(&mut head, &grad, &mut state, lr, &opt)?;
            step += 1;
        }
    }
    let mut out = student.clone();
    out.head = head;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub accuracy: f64,
    pub n_eval: usize,
    pub correct: Vec<bool>,
}

/// Greedy-decodes every prompt; an instance is correct iff the tokens after
/// the first answer marker (up to the end token) equal the label's.
pub fn evaluate_accuracy(
    model: &ModelBundle,
    vocab: &Vocabulary,
    eval_set: &[TokenSequence],
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let marker = vocab.answer_marker()?;
    let end = vocab.end_token()?;
    let correct = eval_set
        .par_iter()
        .map(|seq| {
            let gold = seq
                .answer_tokens(marker, end)
                .ok_or_else(|| invalid("evaluation label lacks an answer marker"))?;
            let budget = seq.len() - seq.prompt_len() + 4;
            let out = decode(model, &seq.prompt(), end, &DecodingStrategy::greedy(budget))?;
            Ok(out.answer_tokens(marker, end) == Some(gold))
        })
        .collect::<Result<Vec<bool>>>()?;
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(EvalReport {
        model_id: model_id(model),
        accuracy: hits as f64 / correct.len() as f64,
        n_eval: correct.len(),
        correct,
    })
}

/// How distillation data is produced and how students are fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdSettings {
    pub strategy: DecodingStrategy,
    pub student: StudentTrainConfig,
}

/// Template from which each seed's student is instantiated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentTemplate {
    pub base_seed: u64,
    pub hidden_dim: usize,
    /// Width of a tanh hidden layer in the head; `None` for a linear head.
    pub mlp_hidden: Option<usize>,
    pub init_std: f64,
}

impl StudentTemplate {
    pub fn instantiate(&self, vocab_size: usize, seed: u64) -> Result<ModelBundle> {
        use crate::model::{BaseConfig, FrozenBase, Role};
        let base = FrozenBase::new(BaseConfig::new(self.base_seed, vocab_size, self.hidden_dim))?;
        let mut rng = SeededRng::new(seed, "student/init");
        let head = match self.mlp_hidden {
            None => HeadParams::random_linear(vocab_size, self.hidden_dim, self.init_std, &mut rng),
            Some(h) => HeadParams::random_mlp(
                vocab_size,
                self.hidden_dim,
                h,
                base.config().output_gain,
                &mut rng,
            ),
        };
        ModelBundle::new(base, head, Role::TargetStudent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseGapReport {
    pub teacher_sft_acc: f64,
    pub teacher_defensive_acc: f64,
    pub student_from_sft_acc: f64,
    pub student_from_defensive_acc: f64,
    pub teacher_delta: f64,
    pub student_delta: f64,
    pub seeds: Vec<u64>,
    pub teacher_tolerance: f64,
    pub per_seed_student_from_sft: Vec<f64>,
    pub per_seed_student_from_defensive: Vec<f64>,
    pub n_eval: usize,
    pub lambda: Option<f64>,
    /// Direction observed at paper scale, kept for context only.
    pub reference_note: String,
}

impl DefenseGapReport {
    pub fn teacher_preserved(&self) -> bool {
        self.teacher_delta >= -self.teacher_tolerance
    }
}

pub const REFERENCE_NOTE: &str = "at LLM scale a misled student's accuracy drops sharply \
(e.g. -12.9% on GSM8K) while the defensive teacher stays within a small margin";

/// Distils one student per seed from each teacher and compares all four
/// accuracies. Teachers are evaluated once; students are averaged.
pub fn defense_gap(
    sft_teacher: &ModelBundle,
    defensive_teacher: &ModelBundle,
    template: &StudentTemplate,
    vocab: &Vocabulary,
    kd_prompts: &[TokenSequence],
    eval_set: &[TokenSequence],
    seeds: &[u64],
    kd: &KdSettings,
    teacher_tolerance: f64,
) -> Result<DefenseGapReport> {
    if seeds.is_empty() {
        return Err(invalid("defense gap needs at least one seed"));
    }
    for t in [sft_teacher, defensive_teacher] {
        if t.vocab_size() != vocab.len() {
            return Err(Error::Config("teacher vocabulary differs from the corpus".into()));
        }
    }
    let end = vocab.end_token()?;
    let t_sft = evaluate_accuracy(sft_teacher, vocab, eval_set)?.accuracy;
    let t_def = evaluate_accuracy(defensive_teacher, vocab, eval_set)?.accuracy;
    let mut from_sft = Vec::new();
    let mut from_def = Vec::new();
    for &seed in seeds {
        let strategy = DecodingStrategy {
            seed,
            ..kd.strategy.clone()
        };
        let scfg = StudentTrainConfig {
            seed,
            ..kd.student.clone()
        };
        let fresh = template.instantiate(vocab.len(), seed)?;
        for (teacher, acc) in [(sft_teacher, &mut from_sft), (defensive_teacher, &mut from_def)] {
            let data = generate_kd_dataset(teacher, kd_prompts, end, &strategy)?;
            let student = train_student(&fresh, &data, &scfg)?;
            acc.push(evaluate_accuracy(&student, vocab, eval_set)?.accuracy);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (s_sft, s_def) = (mean(&from_sft), mean(&from_def));
    Ok(DefenseGapReport {
        teacher_sft_acc: t_sft,
        teacher_defensive_acc: t_def,
        student_from_sft_acc: s_sft,
        student_from_defensive_acc: s_def,
        teacher_delta: t_def - t_sft,
        student_delta: s_def - s_sft,
        seeds: seeds.to_vec(),
        teacher_tolerance,
        per_seed_student_from_sft: from_sft,
        per_seed_student_from_defensive: from_def,
        n_eval: eval_set.len(),
        lambda: None,
        reference_note: REFERENCE_NOTE.into(),
    })
}
