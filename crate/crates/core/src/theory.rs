//! Numerical checks of the one-step analysis: smoothed bounded divergence,
//! empirical gradient and smoothness constants, the gradient-discrepancy
//! bound, the one-step descent bound and the non-improvement threshold.
//!
//! Student gradients are exact expectations over the vocabulary, taken with
//! respect to the head parameters at fixed hidden-state contexts.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::HeadParams;
use crate::numerics::{kl_slices, softmax_unchecked, total_variation, ProbVector, RealMatrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    pub alpha: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            alpha: 2.0,
        }
    }
}

impl SmoothingConfig {
    pub fn new(epsilon: f64, alpha: f64) -> Result<Self> {
        let c = Self { epsilon, alpha };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha must be positive"));
        }
        Ok(())
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(invalid(format!("smoothing epsilon {eps} outside (0, 0.5)")));
    }
    Ok(())
}

/// `(1 − ε) p + ε u`.
pub fn smooth(p: &ProbVector, epsilon: f64) -> Result<ProbVector> {
    check_epsilon(epsilon)?;
    Ok(smooth_unchecked(p.as_slice(), epsilon))
}

fn smooth_unchecked(p: &[f64], epsilon: f64) -> ProbVector {
    let u = epsilon / p.len() as f64;
    ProbVector::new(p.iter().map(|x| (1.0 - epsilon) * x + u).collect()).expect("convex mix of distributions")
}

/// `KL(smooth(softmax(z/α)) ‖ smooth(q))`.
pub fn bounded_divergence(teacher_logits: &[f64], student: &ProbVector, cfg: &SmoothingConfig) -> Result<f64> {
    cfg.validate()?;
    if teacher_logits.len() != student.len() {
        return Err(invalid("teacher logits and student distribution differ in length"));
    }
    if teacher_logits.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite teacher logits"));
    }
    let p = smooth_unchecked(&softmax_unchecked(teacher_logits, cfg.alpha), cfg.epsilon);
    let q = smooth_unchecked(student.as_slice(), cfg.epsilon);
    kl_slices(p.as_slice(), q.as_slice())
}

/// `log V − log(εV)`, the range quoted for the bounded divergence.
pub fn quoted_divergence_cap(vocab: usize, epsilon: f64) -> f64 {
    (vocab as f64).ln() - (epsilon * vocab as f64).ln()
}

/// `(1 − ε) log(1 + V(1 − ε)/ε)`: the supremum of the bounded divergence,
/// attained by two distinct one-hot inputs.
pub fn attained_divergence_cap(vocab: usize, epsilon: f64) -> f64 {
    (1.0 - epsilon) * (1.0 + vocab as f64 * (1.0 - epsilon) / epsilon).ln()
}

/// Hidden-state contexts plus one distribution per context.
pub type Dists = Vec<ProbVector>;

fn student_probs(head: &HeadParams, contexts: &RealMatrix) -> (Option<RealMatrix>, Vec<Vec<f64>>) {
    let (acts, z) = head.forward_batch(contexts);
    let probs = (0..z.rows()).map(|r| softmax_unchecked(z.row(r), 1.0)).collect();
    (acts, probs)
}

fn check_dists(contexts: &RealMatrix, head: &HeadParams, r: &[ProbVector]) -> Result<()> {
    if contexts.rows() == 0 {
        return Err(Error::Estimation("no contexts".into()));
    }
    if r.len() != contexts.rows() {
        return Err(invalid("one distribution per context required"));
    }
    if r.iter().any(|d| d.len() != head.vocab_size()) {
        return Err(invalid("distribution length differs from vocabulary"));
    }
    Ok(())
}

/// `∇θ log p_S(y | c)` for one context row and token.
pub fn token_log_prob_grad(head: &HeadParams, context: &[f64], token: usize) -> HeadParams {
    let (acts, z) = head.forward_batch(&RealMatrix::from_vec(1, context.len(), context.to_vec()).expect("finite"));
    let p = softmax_unchecked(z.row(0), 1.0);
    let mut d: Vec<f64> = p.iter().map(|x| -x).collect();
    d[token] += 1.0;
    let mut g = head.zeros_like();
    let h = RealMatrix::from_vec(1, context.len(), context.to_vec()).expect("finite");
    let dz = RealMatrix::from_vec(1, d.len(), d).expect("finite");
    head.backprop_batch(&h, acts.as_ref(), &dz, &mut g);
    g
}

/// Exact `g(r) = E_t E_{y∼r_t}[−∇ log p_S(y|c_t)] = E_t J_tᵀ (p_t − r_t)`.
pub fn kd_gradient(head: &HeadParams, contexts: &RealMatrix, r: &[ProbVector]) -> Result<HeadParams> {
    check_dists(contexts, head, r)?;
    let (acts, probs) = student_probs(head, contexts);
    let n = contexts.rows();
    let mut dz = RealMatrix::zeros(n, head.vocab_size());
    for t in 0..n {
        for (k, slot) in dz.row_mut(t).iter_mut().enumerate() {
            *slot = (probs[t][k] - r[t].as_slice()[k]) / n as f64;
        }
    }
    let mut g = head.zeros_like();
    head.backprop_batch(contexts, acts.as_ref(), &dz, &mut g);
    Ok(g)
}

/// Exact `L_KD(θ; r) = E_t E_{y∼r_t}[−log p_S(y|c_t)]`.
pub fn kd_loss(head: &HeadParams, contexts: &RealMatrix, r: &[ProbVector]) -> Result<f64> {
    check_dists(contexts, head, r)?;
    let (_, z) = head.forward_batch(contexts);
    let mut total = 0.0;
    for t in 0..contexts.rows() {
        let lp = crate::numerics::log_softmax_unchecked(z.row(t), 1.0);
        for (rk, lk) in r[t].as_slice().iter().zip(&lp) {
            if *rk > 0.0 {
                total -= rk * lk;
            }
        }
    }
    Ok(total / contexts.rows() as f64)
}

/// Settings for the empirical smoothness estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsConfig {
    pub pairs: usize,
    pub smoothness_safety: f64,
    pub seed: u64,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        Self {
            pairs: 64,
            smoothness_safety: 2.0,
            seed: 233,
        }
    }
}

/// `G_hat`: raw max of `‖∇θ log p_S(y|c)‖` over every sampled context and
/// every token.
pub fn estimate_gradient_bound(head: &HeadParams, contexts: &RealMatrix) -> Result<f64> {
    if contexts.rows() == 0 {
        return Err(Error::Estimation("no contexts".into()));
    }
    let mut g_hat: f64 = 0.0;
    for t in 0..contexts.rows() {
        for y in 0..head.vocab_size() {
            g_hat = g_hat.max(token_log_prob_grad(head, contexts.row(t), y).norm());
        }
    }
    if !g_hat.is_finite() {
        return Err(Error::Estimation("non-finite gradient norm".into()));
    }
    Ok(g_hat)
}

/// `L_hat`: safety factor times the max of `‖g(θ; r) − g(θ′; r)‖ / ‖θ − θ′‖`
/// over sampled pairs. Partners of `θ` lie along random directions at
/// several radii and along `−g(θ; r)` for each probe distribution set.
pub fn estimate_smoothness(
    head: &HeadParams,
    contexts: &RealMatrix,
    probes: &[Dists],
    cfg: &ConstantsConfig,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Estimation("no probe distributions".into()));
    }
    let mut rng = SeededRng::new(cfg.seed, "theory/smoothness");
    let mut best: f64 = 0.0;
    let scale = head.norm().max(1.0);
    let radii = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
    let pair_ratio = |dir: &HeadParams, radius: f64, r: &Dists| -> Result<f64> {
        let dn = dir.norm();
        if dn == 0.0 || radius == 0.0 {
            return Ok(0.0);
        }
        let mut other = head.clone();
        other.add_scaled(radius / dn, dir);
        let mut diff = kd_gradient(&other, contexts, r)?;
        diff.add_scaled(-1.0, &kd_gradient(head, contexts, r)?);
        let ratio = diff.norm() / radius;
        Ok(if ratio.is_finite() { ratio } else { 0.0 })
    };
    for i in 0..cfg.pairs {
        let r = &probes[i % probes.len()];
        let mut dir = head.zeros_like();
        let flat: Vec<f64> = (0..dir.num_params()).map(|_| rng.normal()).collect();
        dir.set_flat(&flat);
        best = best.max(pair_ratio(&dir, radii[i % radii.len()] * scale, r)?);
    }
    for r in probes {
        let g = kd_gradient(head, contexts, r)?;
        let mut dir = g.clone();
        dir.scale(-1.0);
        for radius in radii {
            best = best.max(pair_ratio(&dir, radius * scale, r)?);
        }
    }
    // Second pass at the step lengths a step of 1/L would take.
    if best > 0.0 {
        for r in probes {
            let g = kd_gradient(head, contexts, r)?;
            let len = g.norm() / (best * cfg.smoothness_safety);
            let mut dir = g;
            dir.scale(-1.0);
            for f in [0.25, 0.5, 1.0] {
                best = best.max(pair_ratio(&dir, len * f, r)?);
            }
        }
    }
    if best <= 0.0 {
        return Err(Error::Estimation("degenerate smoothness sample".into()));
    }
    Ok(best * cfg.smoothness_safety)
}

/// `(G_hat, L_hat)` for a student head on sampled contexts.
pub fn estimate_constants(
    head: &HeadParams,
    contexts: &RealMatrix,
    probes: &[Dists],
    cfg: &ConstantsConfig,
) -> Result<(f64, f64)> {
    Ok((
        estimate_gradient_bound(head, contexts)?,
        estimate_smoothness(head, contexts, probes, cfg)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    GradientDiscrepancy,
    Pinsker,
    Jensen,
    OneStepDescent,
    MasterBound,
    ThresholdConsistency,
    DivergenceRange,
}

impl BoundKind {
    pub fn label(self) -> &'static str {
        match self {
            BoundKind::GradientDiscrepancy => "gradient discrepancy",
            BoundKind::Pinsker => "Pinsker",
            BoundKind::Jensen => "Jensen",
            BoundKind::OneStepDescent => "one-step descent",
            BoundKind::MasterBound => "one-step master bound",
            BoundKind::ThresholdConsistency => "threshold consistency",
            BoundKind::DivergenceRange => "bounded divergence range",
        }
    }
}

/// One checked inequality `lhs ≤ rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub kind: BoundKind,
    pub lhs: f64,
    pub rhs: f64,
    pub violated: bool,
}

impl BoundEntry {
    fn new(kind: BoundKind, lhs: f64, rhs: f64, tol: f64) -> Self {
        Self {
            kind,
            lhs,
            rhs,
            violated: !(lhs <= rhs + tol),
        }
    }

    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindTally {
    pub trials: usize,
    pub violations: usize,
    pub min_slack: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub g_hat: f64,
    pub l_hat: f64,
    pub d_bar: f64,
    pub threshold: f64,
    pub trials: usize,
    pub violations: usize,
    pub entries: Vec<BoundEntry>,
}

impl BoundReport {
    pub fn empty() -> Self {
        Self {
            g_hat: 0.0,
            l_hat: 0.0,
            d_bar: 0.0,
            threshold: 0.0,
            trials: 0,
            violations: 0,
            entries: Vec::new(),
        }
    }

    fn from_entries(entries: Vec<BoundEntry>) -> Self {
        let violations = entries.iter().filter(|e| e.violated).count();
        Self {
            trials: entries.len(),
            violations,
            entries,
            ..Self::empty()
        }
    }

    /// Appends another report; scalar estimates keep the running maximum.
    pub fn merge(&mut self, other: BoundReport) {
        self.g_hat = self.g_hat.max(other.g_hat);
        self.l_hat = self.l_hat.max(other.l_hat);
        self.d_bar = self.d_bar.max(other.d_bar);
        self.threshold = self.threshold.max(other.threshold);
        self.trials += other.trials;
        self.violations += other.violations;
        self.entries.extend(other.entries);
    }

    pub fn tally(&self, kind: BoundKind) -> KindTally {
        let mut t = KindTally::default();
        for e in self.entries.iter().filter(|e| e.kind == kind) {
            t.trials += 1;
            t.violations += usize::from(e.violated);
            let s = e.slack();
            t.min_slack = Some(t.min_slack.map_or(s, |m: f64| m.min(s)));
        }
        t
    }

    /// Drops per-entry detail, keeping a summary per inequality.
    pub fn summary(&self) -> Vec<(BoundKind, KindTally)> {
        use BoundKind::*;
        [
            GradientDiscrepancy,
            Pinsker,
            Jensen,
            OneStepDescent,
            MasterBound,
            ThresholdConsistency,
            DivergenceRange,
        ]
            .into_iter()
            .map(|k| (k, self.tally(k)))
            .filter(|(_, t)| t.trials > 0)
            .collect()
    }
}

pub const BOUND_TOL: f64 = 1e-12;

fn mean_kl(r: &[ProbVector], s: &[ProbVector]) -> Result<(f64, Vec<f64>)> {
    let kls = r
        .iter()
        .zip(s)
        .map(|(a, b)| kl_slices(a.as_slice(), b.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    Ok((kls.iter().sum::<f64>() / kls.len() as f64, kls))
}

/// Checks `‖g(r) − g(s)‖ ≤ G_hat √(2 E_t KL(r_t‖s_t))`, together with the
/// Pinsker step per context and the Jensen step over contexts.
pub fn gradient_discrepancy_check(
    r: &[ProbVector],
    s: &[ProbVector],
    head: &HeadParams,
    contexts: &RealMatrix,
    g_hat: f64,
) -> Result<BoundReport> {
    let mut diff = kd_gradient(head, contexts, r)?;
    diff.add_scaled(-1.0, &kd_gradient(head, contexts, s)?);
    let (kl, kls) = mean_kl(r, s)?;
    let lhs = diff.norm();
    let rhs = g_hat * (2.0 * kl).sqrt();
    let mut entries = vec![BoundEntry::new(BoundKind::GradientDiscrepancy, lhs, rhs, BOUND_TOL)];
    for ((a, b), k) in r.iter().zip(s).zip(&kls) {
        let tv = total_variation(a, b)?;
        entries.push(BoundEntry::new(BoundKind::Pinsker, tv, (k / 2.0).sqrt(), BOUND_TOL));
    }
    let mean_sqrt = kls.iter().map(|k| k.sqrt()).sum::<f64>() / kls.len() as f64;
    entries.push(BoundEntry::new(BoundKind::Jensen, mean_sqrt, kl.sqrt(), BOUND_TOL));
    let mut rep = BoundReport::from_entries(entries);
    rep.g_hat = g_hat;
    rep.d_bar = kl;
    Ok(rep)
}

/// `(‖g(q)‖ / (G √2)) · (1 − L η ‖g(p)‖² / (2 ‖g(q)‖²))`.
pub fn divergence_threshold(g_q_norm: f64, g_p_norm: f64, g_hat: f64, l_hat: f64, eta: f64) -> Result<f64> {
    if !(g_hat > 0.0) {
        return Err(Error::Domain("threshold needs a positive gradient bound".into()));
    }
    if g_q_norm == 0.0 {
        return Err(Error::Domain("threshold undefined for a zero reference gradient".into()));
    }
    Ok(g_q_norm / (g_hat * 2f64.sqrt()) * (1.0 - l_hat * eta * g_p_norm * g_p_norm / (2.0 * g_q_norm * g_q_norm)))
}

/// Upper bound on `L(θ⁺; q) − L(θ; q)` from the master inequality.
pub fn master_bound(g_q_norm: f64, g_p_norm: f64, g_hat: f64, l_hat: f64, eta: f64, d_bar: f64) -> f64 {
    -eta * g_q_norm * g_q_norm
        + eta * g_q_norm * g_hat * (2.0 * d_bar).sqrt()
        + 0.5 * l_hat * eta * eta * g_p_norm * g_p_norm
}

/// Takes `θ⁺ = θ − η g(p)` and checks the descent inequality for
/// `L(·; q)`, the master bound with `D̄ = E_t KL(p_t‖q_t)`, and (when
/// `√D̄` clears the threshold) that the master bound is nonnegative.
pub fn one_step_bound_check(
    head: &HeadParams,
    p: &[ProbVector],
    q: &[ProbVector],
    eta: f64,
    g_hat: f64,
    l_hat: f64,
    contexts: &RealMatrix,
) -> Result<BoundReport> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(invalid("step size must be nonnegative"));
    }
    let gp = kd_gradient(head, contexts, p)?;
    let gq = kd_gradient(head, contexts, q)?;
    let mut next = head.clone();
    next.add_scaled(-eta, &gp);
    let before = kd_loss(head, contexts, q)?;
    let after = kd_loss(&next, contexts, q)?;
    let tol = BOUND_TOL * before.abs().max(1.0);
    let (gpn, gqn) = (gp.norm(), gq.norm());
    let descent_rhs = before - eta * gq.dot(&gp) + 0.5 * l_hat * eta * eta * gpn * gpn;
    let (d_bar, _) = mean_kl(p, q)?;
    let master = master_bound(gqn, gpn, g_hat, l_hat, eta, d_bar);
    let mut entries = vec![
        BoundEntry::new(BoundKind::OneStepDescent, after, descent_rhs, tol),
        BoundEntry::new(BoundKind::MasterBound, after - before, master, tol),
    ];
    let mut threshold = 0.0;
    if gqn > 0.0 && g_hat > 0.0 {
        threshold = divergence_threshold(gqn, gpn, g_hat, l_hat, eta)?;
        if d_bar.sqrt() >= threshold {
            entries.push(BoundEntry::new(BoundKind::ThresholdConsistency, 0.0, master, BOUND_TOL));
        }
    }
    let mut rep = BoundReport::from_entries(entries);
    rep.g_hat = g_hat;
    rep.l_hat = l_hat;
    rep.d_bar = d_bar;
    rep.threshold = threshold;
    Ok(rep)
}

/// Random instance family for the verification harness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub vocab: usize,
    pub input_dim: usize,
    pub contexts: usize,
    pub seed: u64,
    /// Every `mlp_every`-th instance uses a tanh-MLP head (0 disables).
    pub mlp_every: usize,
    pub smoothing: SmoothingConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            vocab: 6,
            input_dim: 4,
            contexts: 3,
            seed: 233,
            mlp_every: 4,
            smoothing: SmoothingConfig::default(),
        }
    }
}

/// A random student head, its contexts, and a random distribution family.
pub struct Instance {
    pub head: HeadParams,
    pub contexts: RealMatrix,
}

pub fn random_instance(cfg: &HarnessConfig, index: usize, rng: &mut SeededRng) -> Instance {
    let (v, d) = (cfg.vocab, cfg.input_dim);
    let head = if cfg.mlp_every > 0 && index % cfg.mlp_every == cfg.mlp_every - 1 {
        let mut h = HeadParams::random_mlp(v, d, 5, 1.0, rng);
        h.weights = RealMatrix::random_normal(v, 5, 1.0, rng);
        h
    } else {
        let mut h = HeadParams::random_linear(v, d, 1.0, rng);
        h.bias = (0..v).map(|_| rng.normal()).collect();
        h
    };
    let scale = 0.1 + 3.0 * rng.uniform();
    let contexts = RealMatrix::random_normal(cfg.contexts, d, scale, rng);
    Instance { head, contexts }
}

/// Random distribution per context: temperature-scaled softmax of normal
/// logits, with occasional one-hot or uniform extremes.
pub fn random_dists(n: usize, v: usize, rng: &mut SeededRng) -> Dists {
    (0..n)
        .map(|_| match rng.below(10) {
            0 => ProbVector::one_hot(v, rng.below(v)),
            1 => ProbVector::uniform(v),
            _ => {
                let s = 0.2 + 4.0 * rng.uniform();
                let z: Vec<f64> = (0..v).map(|_| rng.normal() * s).collect();
                ProbVector::new(softmax_unchecked(&z, 1.0)).expect("softmax")
            }
        })
        .collect()
}

/// Smoothed teacher-side distribution per context.
pub fn smoothed_dists(n: usize, v: usize, cfg: &SmoothingConfig, rng: &mut SeededRng) -> Dists {
    random_dists(n, v, rng)
        .into_iter()
        .map(|p| smooth_unchecked(p.as_slice(), cfg.epsilon))
        .collect()
}

/// Gradient-discrepancy harness over `trials` random instances.
pub fn verify_discrepancy(cfg: &HarnessConfig, trials: usize) -> Result<BoundReport> {
    let mut rng = SeededRng::new(cfg.seed, "theory/discrepancy");
    let mut report = BoundReport::empty();
    for i in 0..trials {
        let inst = random_instance(cfg, i, &mut rng);
        let r = random_dists(cfg.contexts, cfg.vocab, &mut rng);
        // s must cover r's support for a finite KL.
        let s = smoothed_dists(cfg.contexts, cfg.vocab, &cfg.smoothing, &mut rng);
        let g_hat = estimate_gradient_bound(&inst.head, &inst.contexts)?;
        report.merge(gradient_discrepancy_check(&r, &s, &inst.head, &inst.contexts, g_hat)?);
    }
    Ok(report)
}

/// One-step harness: `η` is drawn uniformly from `(0, eta_frac / L_hat]`.
pub fn verify_one_step(cfg: &HarnessConfig, trials: usize, eta_frac: f64) -> Result<BoundReport> {
    let mut rng = SeededRng::new(cfg.seed, "theory/one-step");
    let mut report = BoundReport::empty();
    for i in 0..trials {
        let inst = random_instance(cfg, i, &mut rng);
        let p = smoothed_dists(cfg.contexts, cfg.vocab, &cfg.smoothing, &mut rng);
        let q = smoothed_dists(cfg.contexts, cfg.vocab, &cfg.smoothing, &mut rng);
        let ccfg = ConstantsConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            pairs: 16,
            ..ConstantsConfig::default()
        };
        let (g_hat, l_hat) = estimate_constants(&inst.head, &inst.contexts, &[p.clone(), q.clone()], &ccfg)?;
        let eta = eta_frac / l_hat * (1.0 - rng.uniform());
        report.merge(one_step_bound_check(&inst.head, &p, &q, eta, g_hat, l_hat, &inst.contexts)?);
    }
    Ok(report)
}

/// Bounded-divergence samples `(d, V, ε)` over random vocabularies,
/// smoothing factors, temperatures, teacher logits and student
/// distributions.
pub fn divergence_range_samples(trials: usize, seed: u64) -> Result<Vec<(f64, usize, f64)>> {
    let mut rng = SeededRng::new(seed, "theory/range");
    (0..trials)
        .map(|_| {
            let v = 2 + rng.below(31);
            let eps = 0.001 + 0.498 * rng.uniform();
            let alpha = 0.5 + 3.5 * rng.uniform();
            let cfg = SmoothingConfig::new(eps, alpha)?;
            let s = 5.0 * rng.uniform();
            let z: Vec<f64> = (0..v).map(|_| rng.normal() * s).collect();
            let q = random_dists(1, v, &mut rng).remove(0);
            Ok((bounded_divergence(&z, &q, &cfg)?, v, eps))
        })
        .collect()
}

/// Counts samples outside `[0, cap(V, ε)]` and returns the largest `d / cap`.
pub fn verify_divergence_range(
    trials: usize,
    seed: u64,
    cap: impl Fn(usize, f64) -> f64,
) -> Result<(usize, f64)> {
    let mut outside = 0;
    let mut worst = 0.0f64;
    for (d, v, eps) in divergence_range_samples(trials, seed)? {
        let c = cap(v, eps);
        worst = worst.max(d / c);
        if !(d >= 0.0 && d <= c) {
            outside += 1;
        }
    }
    Ok((outside, worst))
}

/// Range harness as a report against the attained supremum, with no
/// tolerance on either end.
pub fn divergence_range_report(trials: usize, seed: u64) -> Result<BoundReport> {
    let entries = divergence_range_samples(trials, seed)?
        .into_iter()
        .map(|(d, v, eps)| {
            let cap = attained_divergence_cap(v, eps);
            BoundEntry {
                kind: BoundKind::DivergenceRange,
                lhs: d,
                rhs: cap,
                violated: !(d >= 0.0 && d <= cap),
            }
        })
        .collect();
    Ok(BoundReport::from_entries(entries))
}
