//! One function per subcommand. Each reads its inputs from the resolved
//! config, writes outputs under the run directory, and returns a one-line
//! summary plus an exit status.

use std::path::{Path, PathBuf};

use serde::Serialize;

use doge_core::corpus::{Corpus, Vocabulary};
use doge_core::distill::{dataset_nll, evaluate_accuracy, generate_kd_dataset, provenance_path, train_student};
use doge_core::lab::{sft_model, Prepared};
use doge_core::landscape::{export_training_curves, kl_trend, landscape_batch, slice_loss_surface};
use doge_core::model::{ModelBundle, Role};
use doge_core::objective::AdvConfig;
use doge_core::theory::{
    attained_divergence_cap, divergence_range_report, quoted_divergence_cap, verify_discrepancy,
    verify_divergence_range, verify_one_step, BoundReport, KindTally,
};
use doge_core::trainer::{defensive_train_report, read_metrics_jsonl, write_metrics_jsonl};
use doge_core::{Error, Result};

use crate::config::RunConfig;
use crate::report::{emit_report, render_bounds};

/// Exit status when an asserted bound is violated.
pub const EXIT_VIOLATION: i32 = 2;

/// Exit status of `verify-bounds`: nonzero iff any asserted inequality fails.
pub fn bounds_status(b: &BoundReport) -> i32 {
    if b.entries.iter().any(|e| e.violated) {
        EXIT_VIOLATION
    } else {
        0
    }
}

/// Files read and written by one command.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub out: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub struct Outcome {
    pub summary: String,
    pub status: i32,
}

fn ok(summary: String) -> Result<Outcome> {
    Ok(Outcome { summary, status: 0 })
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, out: &Path) -> Self {
        Self {
            cfg,
            out: out.to_owned(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn out_path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(PathBuf::from(name));
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.out_path(name);
        std::fs::write(p, contents)?;
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn model(&mut self, key: &str) -> Result<ModelBundle> {
        let p = self.cfg.input(key)?;
        self.inputs.push(p.clone());
        ModelBundle::load(&p).map_err(|e| Error::Config(format!("key `input.{key}`: {e}")))
    }

    fn models(&mut self, key: &str) -> Result<Vec<ModelBundle>> {
        self.cfg
            .input_list(key)?
            .into_iter()
            .map(|p| {
                self.inputs.push(p.clone());
                ModelBundle::load(&p).map_err(|e| Error::Config(format!("key `input.{key}`: {e}")))
            })
            .collect()
    }

    /// The corpus named by `input.corpus`, or a fresh one from the config.
    fn corpus(&mut self) -> Result<Corpus> {
        let vocab = Vocabulary::arithmetic();
        match self.cfg.inputs.get("corpus") {
            Some(p) => {
                let p = PathBuf::from(p);
                self.inputs.push(p.clone());
                Corpus::load(&vocab, &p, self.cfg.lab.corpus.seed)
            }
            None => Corpus::generate(&vocab, &self.cfg.lab.corpus),
        }
    }

    fn eval_split(&self, corpus: &Corpus) -> Vec<doge_core::corpus::TokenSequence> {
        let mut e = corpus.eval_set();
        if self.cfg.lab.eval_limit > 0 {
            e.truncate(self.cfg.lab.eval_limit);
        }
        e
    }

    pub fn dispatch(&mut self, command: &str) -> Result<Outcome> {
        match command {
            "gen-corpus" => self.gen_corpus(),
            "train-sft" => self.train_sft(),
            "train-defense" => self.train_defense(),
            "distill" => self.distill(),
            "eval" => self.eval(),
            "gap-report" => self.gap_report(),
            "verify-bounds" => self.verify_bounds(),
            "landscape" => self.landscape(),
            other => Err(Error::Config(format!("unknown command `{other}`"))),
        }
    }

    fn gen_corpus(&mut self) -> Result<Outcome> {
        let corpus = Corpus::generate(&Vocabulary::arithmetic(), &self.cfg.lab.corpus)?;
        corpus.save(&self.out_path("corpus.txt"))?;
        ok(format!(
            "gen-corpus: {} instances ({} train, {} kd, {} eval)",
            corpus.instances.len(),
            corpus.train.len(),
            corpus.kd.len(),
            corpus.eval.len()
        ))
    }

    fn train_sft(&mut self) -> Result<Outcome> {
        let lab = &self.cfg.lab;
        let corpus = self.corpus()?;
        let vocab = &corpus.vocab;
        let teacher = sft_model(vocab, &corpus, lab.teacher_base_seed, lab.teacher_hidden, Role::Teacher, &lab.sft)?;
        teacher.save(&self.out_path("teacher.ckpt"))?;
        for (i, p) in lab.proxies.iter().enumerate() {
            let proxy = sft_model(vocab, &corpus, p.base_seed, p.hidden_dim, Role::ProxyStudent, &lab.sft)?;
            proxy.save(&self.out_path(&format!("proxy_{i}.ckpt")))?;
        }
        ok(format!(
            "train-sft: teacher (d={}) and {} proxies over {} steps",
            lab.teacher_hidden,
            lab.proxies.len(),
            lab.sft.steps
        ))
    }

    fn train_defense(&mut self) -> Result<Outcome> {
        let teacher = self.model("teacher")?;
        let proxies = self.models("proxies")?;
        let corpus = self.corpus()?;
        let t = &self.cfg.lab.train;
        let adv = AdvConfig {
            lambda: t.lambda,
            alpha: t.alpha,
            proxies,
            alg1_shared_temp: t.alg1_shared_temp,
        };
        let out = defensive_train_report(&teacher, &corpus.vocab, &corpus.train_set(), t, &adv)?;
        let mut defended = teacher.clone();
        defended.head = out.head.clone();
        defended.save(&self.out_path("defended.ckpt"))?;
        let mut log = Vec::new();
        write_metrics_jsonl(&out.log, &mut log)?;
        let p = self.out_path("train_log.jsonl");
        std::fs::write(p, log)?;
        if !out.log.is_empty() {
            self.write("training_curves.csv", &export_training_curves(&out.log)?)?;
        }
        #[derive(Serialize)]
        struct Summary {
            lambda: f64,
            steps_run: usize,
            diverged_at: Option<usize>,
            divergence_reason: Option<String>,
            masked_kl_first_window: Option<f64>,
            masked_kl_last_window: Option<f64>,
        }
        let trend = kl_trend(&out.log, 25).ok();
        let summary = Summary {
            lambda: t.lambda,
            steps_run: out.log.len(),
            diverged_at: out.diverged.as_ref().map(|d| d.0),
            divergence_reason: out.diverged.as_ref().map(|d| d.1.clone()),
            masked_kl_first_window: trend.map(|t| t.0),
            masked_kl_last_window: trend.map(|t| t.1),
        };
        self.write_json("train_summary.json", &summary)?;
        let line = match &out.diverged {
            Some((step, reason)) => format!("train-defense: lambda {} diverged at step {step}: {reason}", t.lambda),
            None => {
                let last = out.log.last().map_or(f64::NAN, |m| m.total_loss);
                format!("train-defense: lambda {} ran {} steps, final total loss {last:.6}", t.lambda, out.log.len())
            }
        };
        ok(line)
    }

    fn distill(&mut self) -> Result<Outcome> {
        let teacher = self.model("teacher")?;
        let corpus = self.corpus()?;
        let kd = &self.cfg.lab.kd;
        let data = generate_kd_dataset(&teacher, &corpus.kd_prompts(), corpus.vocab.end_token()?, &kd.strategy)?;
        let path = self.out_path("kd_data.jsonl");
        data.save(&path)?;
        self.outputs.push(provenance_path(Path::new("kd_data.jsonl")));
        let fresh = self.cfg.lab.student.instantiate(corpus.vocab.len(), kd.student.seed)?;
        let student = train_student(&fresh, &data, &kd.student)?;
        student.save(&self.out_path("student.ckpt"))?;
        ok(format!(
            "distill: {} pairs, student nll {:.4} -> {:.4}",
            data.len(),
            dataset_nll(&fresh, &data)?,
            dataset_nll(&student, &data)?
        ))
    }

    fn eval(&mut self) -> Result<Outcome> {
        let model = self.model("model")?;
        let corpus = self.corpus()?;
        let report = evaluate_accuracy(&model, &corpus.vocab, &self.eval_split(&corpus))?;
        self.write_json("eval.json", &report)?;
        ok(format!("eval: accuracy {:.4} on {} instances", report.accuracy, report.n_eval))
    }

    fn bounds(&self) -> Result<BoundReport> {
        let th = &self.cfg.theory;
        let mut b = verify_discrepancy(&th.harness, th.discrepancy_trials)?;
        b.merge(verify_one_step(&th.harness, th.one_step_trials, th.eta_frac)?);
        b.merge(divergence_range_report(th.range_trials, th.harness.seed)?);
        Ok(b)
    }

    fn gap_report(&mut self) -> Result<Outcome> {
        let lab = &self.cfg.lab;
        let lambda = lab.train.lambda;
        let given = self.cfg.inputs.contains_key("teacher") || self.cfg.inputs.contains_key("defended");
        let gap = if given {
            let teacher = self.model("teacher")?;
            let defended = self.model("defended")?;
            let corpus = self.corpus()?;
            let prepared = Prepared {
                corpus,
                teacher,
                proxies: Vec::new(),
            };
            prepared.gap(lab, &defended, lambda)?
        } else {
            let prepared = match self.cfg.inputs.get("corpus") {
                Some(_) => {
                    let corpus = self.corpus()?;
                    Prepared::from_corpus(lab, corpus)?
                }
                None => Prepared::build(lab)?,
            };
            let (defended, out) = prepared.defend(lab, lambda)?;
            if let Some((step, reason)) = out.diverged {
                return Err(Error::TrainingDiverged { step, reason });
            }
            prepared.gap(lab, &defended, lambda)?
        };
        let bounds = self.bounds()?;
        self.write_json("gap_report.json", &gap)?;
        self.write_json("bounds_summary.json", &BoundsDocument::new(&bounds, self.cfg)?)?;
        let text = emit_report(&gap, &bounds);
        self.write("report.txt", &text)?;
        ok(format!(
            "gap-report: teacher delta {:+.4}, student delta {:+.4}, {} bound violations",
            gap.teacher_delta, gap.student_delta, bounds.violations
        ))
    }

    fn verify_bounds(&mut self) -> Result<Outcome> {
        let bounds = self.bounds()?;
        let doc = BoundsDocument::new(&bounds, self.cfg)?;
        self.write_json("bounds.json", &doc)?;
        self.write("bounds.txt", &render_bounds(&bounds))?;
        let status = bounds_status(&bounds);
        let flagged: Vec<&str> = bounds
            .summary()
            .into_iter()
            .filter(|(_, t)| t.violations > 0)
            .map(|(k, _)| k.label())
            .collect();
        let summary = if flagged.is_empty() {
            format!("verify-bounds: {} checks, no violations", bounds.trials)
        } else {
            format!(
                "verify-bounds: {} violations of {} checks ({})",
                bounds.violations,
                bounds.trials,
                flagged.join(", ")
            )
        };
        Ok(Outcome { summary, status })
    }

    fn landscape(&mut self) -> Result<Outcome> {
        let key = if self.cfg.inputs.contains_key("model") { "model" } else { "teacher" };
        let model = self.model(key)?;
        let lambda = self.cfg.lab.train.lambda;
        let proxies = if lambda == 0.0 && !self.cfg.inputs.contains_key("proxies") {
            Vec::new()
        } else {
            self.models("proxies")?
        };
        let corpus = self.corpus()?;
        let ls = &self.cfg.landscape;
        let batch = landscape_batch(&corpus.vocab, &model, &proxies, &corpus.train_set(), ls.batch, ls.seed)?;
        let grid = slice_loss_surface(&model.head, &batch, lambda, self.cfg.lab.train.alpha, &ls.grid)?;
        self.write("landscape.csv", &grid.to_csv())?;
        #[derive(Serialize)]
        struct Meta {
            lambda: f64,
            grid_size: usize,
            radius: f64,
            direction_seeds: (u64, u64),
            center_loss: f64,
            non_finite_cells: usize,
        }
        self.write_json(
            "landscape.json",
            &Meta {
                lambda,
                grid_size: grid.grid_size,
                radius: grid.radius,
                direction_seeds: grid.direction_seeds,
                center_loss: grid.center(),
                non_finite_cells: grid.non_finite_cells(),
            },
        )?;
        if let Some(p) = self.cfg.inputs.get("log") {
            let p = PathBuf::from(p);
            self.inputs.push(p.clone());
            let log = read_metrics_jsonl(std::io::BufReader::new(std::fs::File::open(&p)?))?;
            self.write("training_curves.csv", &export_training_curves(&log)?)?;
        }
        ok(format!(
            "landscape: {n}x{n} grid at lambda {lambda}, center loss {:.6}",
            grid.center(),
            n = grid.grid_size
        ))
    }
}

/// JSON form of a bound run: per-inequality tallies, constants, every
/// violated entry, and the range check against the quoted cap for
/// comparison (not asserted).
#[derive(Serialize)]
pub struct BoundsDocument {
    pub trials: usize,
    pub violations: usize,
    pub g_hat: f64,
    pub l_hat: f64,
    pub tallies: Vec<(String, KindTally)>,
    pub violated_entries: Vec<doge_core::theory::BoundEntry>,
    pub quoted_cap_exceedances: usize,
    pub quoted_cap_worst_ratio: f64,
    pub attained_cap_worst_ratio: f64,
}

impl BoundsDocument {
    pub fn new(b: &BoundReport, cfg: &RunConfig) -> Result<Self> {
        let th = &cfg.theory;
        let (quoted, q_worst) = verify_divergence_range(th.range_trials, th.harness.seed, quoted_divergence_cap)?;
        let (_, a_worst) = verify_divergence_range(th.range_trials, th.harness.seed, attained_divergence_cap)?;
        Ok(Self {
            trials: b.trials,
            violations: b.violations,
            g_hat: b.g_hat,
            l_hat: b.l_hat,
            tallies: b.summary().into_iter().map(|(k, t)| (k.label().to_string(), t)).collect(),
            violated_entries: b.entries.iter().filter(|e| e.violated).cloned().collect(),
            quoted_cap_exceedances: quoted,
            quoted_cap_worst_ratio: q_worst,
            attained_cap_worst_ratio: a_worst,
        })
    }
}
