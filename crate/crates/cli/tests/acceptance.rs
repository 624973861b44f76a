//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always shown.
//! The process fails on any FAIL outside `KNOWN_UNATTAINABLE`.

use std::time::Instant;

use doge_cli::config::RunConfig;
use doge_cli::{execute, rerun};
use doge_core::corpus::{mask_by_delimiters, Corpus, CorpusConfig, Segment, Vocabulary};
use doge_core::lab::{fresh_bundle, LabConfig, Prepared, CALIBRATED_LAMBDA};
use doge_core::landscape::{kl_trend, landscape_batch, slice_loss_surface, slice_sft_surface, GridConfig};
use doge_core::model::{HeadParams, ModelBundle, Role};
use doge_core::numerics::{RealMatrix, SeededRng};
use doge_core::objective::{
    masked_head_gradient, masked_logit_gradient, position_contribution, sft_loss_and_grad, total_loss, AdvConfig,
    PositionBatch,
};
use doge_core::theory::{
    attained_divergence_cap, quoted_divergence_cap, verify_discrepancy, verify_divergence_range, verify_one_step,
    BoundKind, HarnessConfig,
};
use doge_core::trainer::{
    adamw_step, batch_schedule, defensive_train, response_positions, sequence_rows, FeatureCache, OptimizerState,
    StepMetrics, TrainConfig,
};

/// Criteria that cannot hold as stated; they still print FAIL.
/// 6: `log V − log(εV) = −log ε` is not an upper bound on the smoothed KL;
/// opposing one-hots reach `(1 − ε) log(1 + V(1 − ε)/ε)`, which is larger.
const KNOWN_UNATTAINABLE: [u32; 1] = [6];

struct Verdict {
    id: u32,
    pass: bool,
    detail: String,
}

fn verdict(id: u32, pass: bool, detail: String) -> Verdict {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2}: {tag} {detail}");
    Verdict { id, pass, detail }
}

fn flat_eq(a: &HeadParams, b: &HeadParams) -> bool {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .all(|(x, y)| x.to_bits() == y.to_bits())
}

// 1 -------------------------------------------------------------------

fn random_head(rng: &mut SeededRng, v: usize, d: usize, mlp: bool) -> HeadParams {
    if mlp {
        let mut h = HeadParams::random_mlp(v, d, 5, 1.0, rng);
        h.weights = RealMatrix::random_normal(v, 5, 1.0, rng);
        h.bias = (0..v).map(|_| rng.normal()).collect();
        h
    } else {
        let mut h = HeadParams::random_linear(v, d, 1.0, rng);
        h.bias = (0..v).map(|_| rng.normal()).collect();
        h
    }
}

fn gradient_check() -> Verdict {
    let t0 = Instant::now();
    let (v, d, n) = (6, 4, 3);
    let mut rng = SeededRng::new(233, "acceptance/fd");
    let mut worst = 0.0f64;
    let (mut mlp_cases, mut adv_cases) = (0, 0);
    for case in 0..100 {
        let mlp = case % 2 == 1;
        let head = random_head(&mut rng, v, d, mlp);
        let nproxies = 1 + rng.below(2);
        let batch = PositionBatch {
            hidden: RealMatrix::random_normal(n, d, 1.0, &mut rng),
            targets: (0..n).map(|_| rng.below(v) as u16).collect(),
            mask: (0..n).map(|_| rng.below(2) == 0).collect(),
            proxy_logits: (0..nproxies).map(|_| RealMatrix::random_normal(n, v, 2.0, &mut rng)).collect(),
        };
        let lambda = if case % 10 == 0 { 0.0 } else { 0.1 + 2.0 * rng.uniform() };
        let alpha = 0.5 + 2.5 * rng.uniform();
        mlp_cases += usize::from(mlp);
        adv_cases += usize::from(lambda > 0.0);
        let (_, grad) = masked_head_gradient(&head, &batch, lambda, alpha, false).expect("gradient");
        let theta = head.flatten();
        let analytic = grad.flatten();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut probe = head.clone();
            let mut x = theta.clone();
            x[i] = theta[i] + h;
            probe.set_flat(&x);
            let up = total_loss(&probe, &batch, lambda, alpha).expect("loss");
            x[i] = theta[i] - h;
            probe.set_flat(&x);
            let down = total_loss(&probe, &batch, lambda, alpha).expect("loss");
            let fd = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        1,
        worst <= 1e-5 && secs < 30.0,
        format!(
            "max rel err {worst:.2e} (<= 1e-5) over 100 cases ({mlp_cases} MLP heads, {adv_cases} with lambda > 0) in {secs:.1}s (< 30s)"
        ),
    )
}

// 2 -------------------------------------------------------------------

/// Small real setup: corpus, random teacher head, one random proxy.
fn small_setup(size: usize) -> (Corpus, ModelBundle, ModelBundle) {
    let vocab = Vocabulary::arithmetic();
    let corpus = Corpus::generate(
        &vocab,
        &CorpusConfig {
            size,
            ..CorpusConfig::default()
        },
    )
    .expect("corpus");
    let mut teacher = fresh_bundle(&vocab, 11, 48, Role::Teacher).expect("teacher");
    let mut rng = SeededRng::new(5, "acceptance/teacher");
    teacher.head = HeadParams::random_linear(vocab.len(), 48, 0.05, &mut rng);
    let mut proxy = fresh_bundle(&vocab, 22, 24, Role::ProxyStudent).expect("proxy");
    proxy.head = HeadParams::random_linear(vocab.len(), 24, 0.05, &mut rng);
    (corpus, teacher, proxy)
}

/// SFT-only AdamW trajectory written out step by step.
fn sft_reference(teacher: &ModelBundle, corpus: &Corpus, cfg: &TrainConfig) -> (HeadParams, Vec<f64>) {
    let train = corpus.train_set();
    let cache = FeatureCache::build(&corpus.vocab, &teacher.base, &[], &train).expect("cache");
    let opt = cfg.adamw();
    let mut head = teacher.head.clone();
    let mut state = OptimizerState::new(&head);
    let mut losses = Vec::new();
    for (step, idx) in batch_schedule(train.len(), cfg, "defense/batches").iter().enumerate() {
        let batch = cache.batch(idx);
        let (acts, z) = head.forward_batch(&batch.hidden);
        let (loss, dz) = sft_loss_and_grad(&z, &batch.targets).expect("sft");
        let mut grad = head.zeros_like();
        head.backprop_batch(&batch.hidden, acts.as_ref(), &dz, &mut grad);
        adamw_step(&mut head, &grad, &mut state, cfg.lr_at(step), &opt).expect("step");
        losses.push(loss);
    }
    (head, losses)
}

fn degenerate_lambda() -> Verdict {
    let (corpus, teacher, proxy) = small_setup(400);
    let cfg = TrainConfig {
        steps: 100,
        batch_size: 8,
        peak_lr: 1e-2,
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let adv = AdvConfig::new(0.0, cfg.alpha, vec![proxy]).expect("adv");
    let (head, log) = defensive_train(&teacher, &corpus.vocab, &corpus.train_set(), &cfg, &adv).expect("train");
    let (want, losses) = sft_reference(&teacher, &corpus, &cfg);
    let same_loss = log.len() == 100
        && log
            .iter()
            .zip(&losses)
            .all(|(m, l)| m.total_loss.to_bits() == l.to_bits() && m.sft_loss.to_bits() == l.to_bits());
    let same_head = flat_eq(&head, &want);
    let moved = !flat_eq(&head, &teacher.head);
    verdict(
        2,
        same_loss && same_head && moved,
        format!("lambda=0 with a proxy vs hand-rolled SFT AdamW over 100 steps: losses bitwise {same_loss}, head bitwise {same_head}, head moved {moved}"),
    )
}

// 3 -------------------------------------------------------------------

fn mask_guarantee() -> Verdict {
    let (corpus, teacher, proxy) = small_setup(1000);
    let vocab = &corpus.vocab;
    let (mut checked, mut bad, mut thinking_changed) = (0, 0, 0);
    for seq in corpus.train_set() {
        if checked >= 1000 {
            break;
        }
        let mask = mask_by_delimiters(vocab, &seq).expect("mask");
        let rows = sequence_rows(&teacher.base, &seq, mask.as_slice()).expect("rows");
        let prow = sequence_rows(&proxy.base, &seq, mask.as_slice()).expect("proxy rows");
        let pz = proxy.head.forward_batch(&prow.hidden).1;
        let (_, z) = teacher.head.forward_batch(&rows.hidden);
        let b = masked_logit_gradient(&z, &rows.targets, &rows.mask, &[pz], 0.7, 2.0, false).expect("grad");
        let (_, sft) = sft_loss_and_grad(&z, &rows.targets).expect("sft");
        for (r, &t) in response_positions(&seq).iter().enumerate() {
            let h = rows.hidden.row(r);
            if seq.tags()[t] == Segment::Answer {
                if checked >= 1000 {
                    break;
                }
                checked += 1;
                let full = position_contribution(&teacher.head, h, b.per_position_logit_grads.row(r));
                let sft_only = position_contribution(&teacher.head, h, sft.row(r));
                if !flat_eq(&full, &sft_only) || rows.mask[r] {
                    bad += 1;
                }
            } else if rows.mask[r] && b.per_position_logit_grads.row(r) != sft.row(r) {
                thinking_changed += 1;
            }
        }
    }
    verdict(
        3,
        checked == 1000 && bad == 0 && thinking_changed > 0,
        format!(
            "{checked} Answer positions, {bad} differ from the SFT contribution bitwise; {thinking_changed} reasoning positions do change (sanity)"
        ),
    )
}

// 4, 5, 6 -------------------------------------------------------------

fn lemma_suite() -> Verdict {
    let t0 = Instant::now();
    let rep = verify_discrepancy(&HarnessConfig::default(), 1000).expect("harness");
    let secs = t0.elapsed().as_secs_f64();
    let t = |k| rep.tally(k);
    let (g, p, j) = (t(BoundKind::GradientDiscrepancy), t(BoundKind::Pinsker), t(BoundKind::Jensen));
    verdict(
        4,
        g.trials == 1000 && g.violations + p.violations + j.violations == 0 && secs < 60.0,
        format!(
            "gradient discrepancy {}/{} violations, Pinsker {}/{}, Jensen {}/{} at tol 1e-12 in {secs:.1}s (< 60s)",
            g.violations, g.trials, p.violations, p.trials, j.violations, j.trials
        ),
    )
}

fn one_step_suite() -> Verdict {
    let rep = verify_one_step(&HarnessConfig::default(), 500, 0.1).expect("harness");
    let t = |k| rep.tally(k);
    let (d, m, c) = (t(BoundKind::OneStepDescent), t(BoundKind::MasterBound), t(BoundKind::ThresholdConsistency));
    verdict(
        5,
        m.trials == 500 && d.violations + m.violations + c.violations == 0,
        format!(
            "eta <= 0.1/L_hat: master bound {}/{} violations, descent step {}/{}, threshold consistency {}/{} (instances past the threshold)",
            m.violations, m.trials, d.violations, d.trials, c.violations, c.trials
        ),
    )
}

fn divergence_range() -> Verdict {
    let (outside, worst) = verify_divergence_range(10_000, 233, quoted_divergence_cap).expect("range");
    let (outside_sup, worst_sup) = verify_divergence_range(10_000, 233, attained_divergence_cap).expect("range");
    verdict(
        6,
        outside == 0,
        format!(
            "{outside}/10000 outputs outside [0, log V - log(eps V)] (worst ratio {worst:.3}); \
             against the attained supremum (1-eps)log(1+V(1-eps)/eps): {outside_sup}/10000 outside, worst ratio {worst_sup:.4}"
        ),
    )
}

// 7, 8, 9 -------------------------------------------------------------

/// A run is unstable when it ends with |total loss| over twice the
/// smallest value it reached.
fn unstable(log: &[StepMetrics]) -> Option<String> {
    let best = log.iter().map(|m| m.total_loss.abs()).fold(f64::INFINITY, f64::min);
    let (start, end) = (log.first()?.total_loss, log.last()?.total_loss);
    (end.abs() > 2.0 * best).then(|| {
        format!("total loss runs from {start:.3e} to {end:.3e}, |end| over twice the smallest |total| {best:.3e}")
    })
}

fn desk_pipeline() -> Vec<Verdict> {
    let cfg = LabConfig::default();
    let t0 = Instant::now();
    let prepared = Prepared::build(&cfg).expect("prepare");
    let (defended, out) = prepared.defend(&cfg, cfg.train.lambda).expect("defend");
    let gap = match &out.diverged {
        None => Some(prepared.gap(&cfg, &defended, cfg.train.lambda).expect("gap")),
        Some(_) => None,
    };
    let secs = t0.elapsed().as_secs_f64();
    let mut v = Vec::new();
    v.push(match &gap {
        Some(g) => verdict(
            7,
            g.teacher_delta >= -0.02 && g.student_delta <= -0.10 && secs < 300.0,
            format!(
                "lambda {} seeds {:?}: teacher {:.4} -> {:.4} (delta {:+.4} >= -0.02), student {:.4} -> {:.4} (delta {:+.4} <= -0.10), {} eval, {secs:.0}s (< 300s)",
                cfg.train.lambda,
                g.seeds,
                g.teacher_sft_acc,
                g.teacher_defensive_acc,
                g.teacher_delta,
                g.student_from_sft_acc,
                g.student_from_defensive_acc,
                g.student_delta,
                g.n_eval
            ),
        ),
        None => verdict(7, false, format!("default run diverged: {:?}", out.diverged)),
    });

    // Same ratio to the default as 1e-4 is to 3e-5.
    let hot = CALIBRATED_LAMBDA * (1e-4 / 3e-5);
    let (first, last) = kl_trend(&out.log, 25).expect("trend");
    let (_, hot_out) = prepared.defend(&cfg, hot).expect("defend hot");
    let which = match (&hot_out.diverged, unstable(&hot_out.log)) {
        (Some((step, reason)), _) => Some(format!("divergence guard tripped at step {step} ({reason})")),
        (None, Some(why)) => Some(format!("total-loss instability: {why}")),
        (None, None) => None,
    };
    v.push(verdict(
        8,
        last > first && which.is_some(),
        format!(
            "lambda {}: masked KL last-25 mean {last:.4e} vs first-25 {first:.4e}; lambda {hot:.4}: {}",
            cfg.train.lambda,
            which.unwrap_or_else(|| "stable, no guard".into())
        ),
    ));

    let vocab = &prepared.corpus.vocab;
    let batch = landscape_batch(vocab, &defended, &prepared.proxies, &prepared.corpus.train_set(), 64, 233)
        .expect("batch");
    let grid = GridConfig::default();
    let a = cfg.train.alpha;
    let surface = slice_loss_surface(&defended.head, &batch, cfg.train.lambda, a, &grid).expect("grid");
    let direct = total_loss(&defended.head, &batch, cfg.train.lambda, a).expect("loss");
    let center_err = (surface.center() - direct).abs();
    let zero = slice_loss_surface(&defended.head, &batch, 0.0, a, &grid).expect("grid");
    let sft = slice_sft_surface(&defended.head, &batch, &grid).expect("grid");
    let zero_err = zero
        .values
        .iter()
        .zip(&sft.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let cells = surface.values.len();
    let rows = surface.to_csv().lines().count() - 1;
    v.push(verdict(
        9,
        cells == 41 * 41 && rows == cells && center_err <= 1e-9 && zero_err <= 1e-12,
        format!("{cells} cells / {rows} csv rows, center error {center_err:.1e} (<= 1e-9), lambda=0 vs SFT grid max diff {zero_err:.1e} (<= 1e-12)"),
    ));
    v
}

// 10 ------------------------------------------------------------------

const TINY: &str = "\
corpus.size = 300
teacher.hidden = 32
proxies.dims = 16
sft.steps = 40
sft.batch_size = 16
sft.pool_size = 120
train.steps = 8
train.batch_size = 8
student.hidden = 16
student.epochs = 1
gap.seeds = 1,2
eval.limit = 20
theory.discrepancy_trials = 50
theory.one_step_trials = 20
theory.range_trials = 500
landscape.grid_size = 7
landscape.batch = 4
";

fn reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path();
    let run = |cmd: &str, extra: &[(&str, String)]| {
        let mut cfg = RunConfig::default();
        cfg.apply_kv_text(TINY).expect("config");
        for (k, v) in extra {
            cfg.set(k, v).expect("set");
        }
        cfg.validate().expect("valid");
        let out = root.join(cmd);
        execute(cmd, &cfg, &out).expect(cmd);
        out.join(format!("{cmd}.manifest.json"))
    };
    let p = |s: &str| root.join(s).display().to_string();
    let mut manifests = vec![run("gen-corpus", &[])];
    let corpus = ("input.corpus", p("gen-corpus/corpus.txt"));
    manifests.push(run("train-sft", &[corpus.clone()]));
    let teacher = ("input.teacher", p("train-sft/teacher.ckpt"));
    let proxies = ("input.proxies", p("train-sft/proxy_0.ckpt"));
    manifests.push(run("train-defense", &[corpus.clone(), teacher.clone(), proxies.clone()]));
    let defended = p("train-defense/defended.ckpt");
    manifests.push(run("distill", &[corpus.clone(), ("input.teacher", defended.clone())]));
    manifests.push(run("eval", &[corpus.clone(), ("input.model", p("distill/student.ckpt"))]));
    manifests.push(run("gap-report", &[corpus.clone(), teacher.clone(), ("input.defended", defended.clone())]));
    manifests.push(run("verify-bounds", &[]));
    manifests.push(run("landscape", &[corpus, ("input.teacher", defended), proxies]));
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (i, m) in manifests.iter().enumerate() {
        let (_, bad) = rerun(m, Some(&root.join(format!("replay{i}")))).expect("rerun");
        files += doge_cli::manifest::RunManifest::load(m).expect("manifest").outputs.len();
        mismatched.extend(bad);
    }
    verdict(
        10,
        mismatched.is_empty(),
        format!(
            "{} commands rerun from their manifests, {files} output files, {} differ bitwise",
            manifests.len(),
            mismatched.len()
        ),
    )
}

fn main() {
    let mut all = vec![
        gradient_check(),
        degenerate_lambda(),
        mask_guarantee(),
        lemma_suite(),
        one_step_suite(),
        divergence_range(),
    ];
    all.extend(desk_pipeline());
    all.push(reproducibility());
    let unexpected: Vec<&Verdict> = all
        .iter()
        .filter(|v| !v.pass && !KNOWN_UNATTAINABLE.contains(&v.id))
        .collect();
    let known = all.iter().filter(|v| !v.pass && KNOWN_UNATTAINABLE.contains(&v.id)).count();
    println!(
        "acceptance: {} PASS, {} FAIL ({known} documented as unattainable as stated)",
        all.iter().filter(|v| v.pass).count(),
        all.iter().filter(|v| !v.pass).count()
    );
    if !unexpected.is_empty() {
        for v in unexpected {
            eprintln!("unexpected failure {}: {}", v.id, v.detail);
        }
        std::process::exit(1);
    }
}
