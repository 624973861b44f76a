//! The defensive loss family with closed-form gradients.
//!
//! `L_total = L_sft + λ · L_adv`, where `L_adv` is the negative mean KL from
//! the teacher's temperature-`α` distribution to each proxy's, averaged over
//! thinking positions only. The adversarial part of the logit gradient is
//! gated per position by the reasoning mask before being chained onto the
//! head parameters.

use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{invalid, Error, Result};
use crate::model::{HeadParams, ModelBundle};
use crate::numerics::{kl_slices, log_softmax_unchecked, RealMatrix};

/// Adversarial-term settings.
#[derive(Clone, Debug)]
pub struct AdvConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub proxies: Vec<ModelBundle>,
    /// Divide teacher logits by `α` before the SFT term as well.
    pub alg1_shared_temp: bool,
}

impl AdvConfig {
    pub fn new(lambda: f64, alpha: f64, proxies: Vec<ModelBundle>) -> Result<Self> {
        let cfg = Self {
            lambda,
            alpha,
            proxies,
            alg1_shared_temp: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda must be a nonnegative real"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha must be positive"));
        }
        if self.lambda > 0.0 && self.proxies.is_empty() {
            return Err(invalid("lambda > 0 requires at least one proxy"));
        }
        Ok(())
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if let Some(p) = self.proxies.iter().find(|p| p.vocab_size() != vocab_size) {
            return Err(Error::Config(format!(
                "proxy vocabulary size {} != teacher vocabulary size {vocab_size}",
                p.vocab_size()
            )));
        }
        Ok(())
    }
}

/// Per-batch losses and the logit-space gradient of the total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft_loss: f64,
    pub adv_loss: f64,
    pub total_loss: f64,
    pub lambda: f64,
    pub per_position_logit_grads: RealMatrix,
    pub positions_counted: usize,
    pub masked_positions: usize,
}

impl LossBreakdown {
    /// Mean masked KL to the proxies, `−adv_loss`.
    pub fn masked_kl(&self) -> f64 {
        -self.adv_loss
    }
}

fn softmax_rows(logits: &RealMatrix, temp: f64) -> (RealMatrix, RealMatrix) {
    let (n, v) = logits.shape();
    let mut logp = RealMatrix::zeros(n, v);
    let mut p = RealMatrix::zeros(n, v);
    for r in 0..n {
        let lp = log_softmax_unchecked(logits.row(r), temp);
        for (k, x) in lp.iter().enumerate() {
            p.set(r, k, x.exp());
        }
        logp.row_mut(r).copy_from_slice(&lp);
    }
    (p, logp)
}

fn check_grid(logits: &RealMatrix, what: &str) -> Result<()> {
    if !logits.is_finite() {
        return Err(invalid(format!("{what}: non-finite logits")));
    }
    Ok(())
}

/// Mean token cross-entropy at temperature `temp` and its gradient with
/// respect to the logits.
pub fn sft_loss_and_grad_temp(
    logits: &RealMatrix,
    targets: &[Token],
    temp: f64,
) -> Result<(f64, RealMatrix)> {
    let (n, v) = logits.shape();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != n {
        return Err(invalid(format!(
            "sft: {n} logit rows but {} targets",
            targets.len()
        )));
    }
    check_grid(logits, "sft")?;
    if let Some(t) = targets.iter().find(|&&t| usize::from(t) >= v) {
        return Err(invalid(format!("target {t} outside vocabulary")));
    }
    let (p, logp) = softmax_rows(logits, temp);
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = p;
    for (r, &y) in targets.iter().enumerate() {
        let y = usize::from(y);
        loss -= logp.get(r, y);
        grad.set(r, y, grad.get(r, y) - 1.0);
        for g in grad.row_mut(r) {
            *g *= inv / temp;
        }
    }
    Ok((loss * inv, grad))
}

/// Mean token cross-entropy at temperature 1 and its logit gradient.
pub fn sft_loss_and_grad(logits: &RealMatrix, targets: &[Token]) -> Result<(f64, RealMatrix)> {
    sft_loss_and_grad_temp(logits, targets, 1.0)
}

/// Adversarial loss over the rows flagged in `weights` (all rows when
/// `None`), returning `(loss, per-row gradient, masked rows)`.
fn adversarial_masked(
    teacher: &RealMatrix,
    proxies: &[RealMatrix],
    alpha: f64,
    mask: Option<&[bool]>,
) -> Result<(f64, RealMatrix, usize)> {
    if proxies.is_empty() {
        return Err(invalid("adversarial loss needs at least one proxy"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha must be positive"));
    }
    let (n, v) = teacher.shape();
    if proxies.iter().any(|q| q.shape() != (n, v)) {
        return Err(invalid("proxy logits shape differs from teacher logits"));
    }
    check_grid(teacher, "adversarial")?;
    for q in proxies {
        check_grid(q, "adversarial proxy")?;
    }
    let active = |r: usize| mask.is_none_or(|m| m[r]);
    let count = (0..n).filter(|&r| active(r)).count();
    let mut grad = RealMatrix::zeros(n, v);
    if count == 0 {
        return Ok((0.0, grad, 0));
    }
    let (p, logp) = softmax_rows(teacher, alpha);
    let scale = 1.0 / (count as f64 * proxies.len() as f64);
    let mut kl_sum = 0.0;
    for q in proxies {
        let (qp, logq) = softmax_rows(q, alpha);
        for r in (0..n).filter(|&r| active(r)) {
            let kl = kl_slices(p.row(r), qp.row(r))?;
            kl_sum += kl;
            // ∂KL/∂z_k = p_k (ln p_k − ln q_k − KL) / α; the loss is −KL.
            let g = grad.row_mut(r);
            for k in 0..v {
                let pk = p.get(r, k);
                g[k] -= scale * pk * (logp.get(r, k) - logq.get(r, k) - kl) / alpha;
            }
        }
    }
    Ok((-kl_sum * scale, grad, count))
}

/// `−(1/N) Σ_i mean_t KL(softmax(L_T/α) ‖ softmax(L_{S_i}/α))` over all rows,
/// with its gradient with respect to the teacher logits.
pub fn adversarial_loss_and_grad(
    teacher_logits: &RealMatrix,
    proxy_logits: &[RealMatrix],
    alpha: f64,
) -> Result<(f64, RealMatrix)> {
    let (loss, grad, _) = adversarial_masked(teacher_logits, proxy_logits, alpha, None)?;
    Ok((loss, grad))
}

/// Rows of one training batch: hidden states that predict each counted
/// target, the target token, and the reasoning mask bit.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionBatch {
    pub hidden: RealMatrix,
    pub targets: Vec<Token>,
    pub mask: Vec<bool>,
    pub proxy_logits: Vec<RealMatrix>,
}

impl PositionBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn validate(&self, head: &HeadParams) -> Result<()> {
        let n = self.targets.len();
        if self.hidden.rows() != n || self.mask.len() != n {
            return Err(invalid("batch rows disagree on position count"));
        }
        if self.hidden.cols() != head.input_dim() {
            return Err(invalid("hidden width does not match head input"));
        }
        Ok(())
    }
}

/// Teacher logits for every row of `hidden`, plus the head's hidden-layer
/// activations when it has one.
pub fn head_logits_batch(head: &HeadParams, hidden: &RealMatrix) -> (Option<RealMatrix>, RealMatrix) {
    head.forward_batch(hidden)
}

/// Losses and logit gradients without chaining onto parameters.
pub fn masked_logit_gradient(
    teacher_logits: &RealMatrix,
    targets: &[Token],
    mask: &[bool],
    proxy_logits: &[RealMatrix],
    lambda: f64,
    alpha: f64,
    alg1_shared_temp: bool,
) -> Result<LossBreakdown> {
    let sft_temp = if alg1_shared_temp { alpha } else { 1.0 };
    let (sft, sft_grad) = sft_loss_and_grad_temp(teacher_logits, targets, sft_temp)?;
    let (adv, adv_grad, masked) = if proxy_logits.is_empty() {
        if lambda > 0.0 {
            return Err(invalid("lambda > 0 requires proxy logits"));
        }
        (0.0, RealMatrix::zeros(teacher_logits.rows(), teacher_logits.cols()), 0)
    } else {
        adversarial_masked(teacher_logits, proxy_logits, alpha, Some(mask))?
    };
    let mut grads = sft_grad;
    for (r, &m) in mask.iter().enumerate() {
        // Unmasked rows keep the SFT gradient untouched.
        if m {
            let row = grads.row_mut(r);
            for (g, a) in row.iter_mut().zip(adv_grad.row(r)) {
                *g += lambda * a;
            }
        }
    }
    Ok(LossBreakdown {
        sft_loss: sft,
        adv_loss: adv,
        total_loss: sft + lambda * adv,
        lambda,
        per_position_logit_grads: grads,
        positions_counted: targets.len(),
        masked_positions: masked,
    })
}

/// Full masked gradient: per-position logit gradient
/// `g_sft + λ · m_t · g_adv`, chained through the head.
pub fn masked_head_gradient(
    head: &HeadParams,
    batch: &PositionBatch,
    lambda: f64,
    alpha: f64,
    alg1_shared_temp: bool,
) -> Result<(LossBreakdown, HeadParams)> {
    batch.validate(head)?;
    let (acts, z) = head.forward_batch(&batch.hidden);
    let breakdown = masked_logit_gradient(
        &z,
        &batch.targets,
        &batch.mask,
        &batch.proxy_logits,
        lambda,
        alpha,
        alg1_shared_temp,
    )?;
    let mut grad = head.zeros_like();
    head.backprop_batch(&batch.hidden, acts.as_ref(), &breakdown.per_position_logit_grads, &mut grad);
    Ok((breakdown, grad))
}

/// Contribution of one position to the head gradient, `∂z_t/∂θ · dlogits_t`.
pub fn position_contribution(head: &HeadParams, hidden: &[f64], dlogits: &[f64]) -> HeadParams {
    let (act, _) = head.forward_cached(hidden);
    let mut grad = head.zeros_like();
    head.backprop(hidden, &act, dlogits, &mut grad);
    grad
}

/// Loss value only, for finite differences and landscape slices.
pub fn total_loss(head: &HeadParams, batch: &PositionBatch, lambda: f64, alpha: f64) -> Result<f64> {
    masked_head_gradient(head, batch, lambda, alpha, false).map(|(b, _)| b.total_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax_temp, SeededRng};

    fn random_grid(rng: &mut SeededRng, n: usize, v: usize, scale: f64) -> RealMatrix {
        RealMatrix::random_normal(n, v, scale, rng)
    }

    #[test]
    fn sft_uniform_and_confident_limits() {
        let z = RealMatrix::zeros(3, 4);
        let (loss, _) = sft_loss_and_grad(&z, &[0, 1, 2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);

        let mut z = RealMatrix::zeros(2, 4);
        z.set(0, 1, 20.0);
        z.set(1, 3, 20.0);
        let (loss, _) = sft_loss_and_grad(&z, &[1, 3]).unwrap();
        assert!(loss <= 1e-6, "{loss}");
        assert!(matches!(
            sft_loss_and_grad(&RealMatrix::zeros(0, 4), &[]),
            Err(Error::EmptyBatch)
        ));
    }

    fn central_diff(f: impl Fn(&RealMatrix) -> f64, at: &RealMatrix, h: f64) -> RealMatrix {
        let mut out = RealMatrix::zeros(at.rows(), at.cols());
        for r in 0..at.rows() {
            for c in 0..at.cols() {
                let mut plus = at.clone();
                plus.set(r, c, at.get(r, c) + h);
                let mut minus = at.clone();
                minus.set(r, c, at.get(r, c) - h);
                out.set(r, c, (f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
        out
    }

    fn max_rel_err(a: &RealMatrix, b: &RealMatrix) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(1, "sft-fd");
        let z = random_grid(&mut rng, 3, 6, 1.5);
        let y = [2, 0, 5];
        let (_, g) = sft_loss_and_grad(&z, &y).unwrap();
        let fd = central_diff(|m| sft_loss_and_grad(m, &y).unwrap().0, &z, 1e-5);
        assert!(max_rel_err(&g, &fd) <= 1e-6);
    }

    // Softmax both sides, sum KL terms by hand, negate and average.
    fn brute_adv(t: &RealMatrix, ps: &[RealMatrix], alpha: f64) -> f64 {
        let mut total = 0.0;
        for q in ps {
            for r in 0..t.rows() {
                let p = softmax_temp(t.row(r), alpha).unwrap();
                let qq = softmax_temp(q.row(r), alpha).unwrap();
                let mut kl = 0.0;
                for k in 0..p.len() {
                    let (a, b) = (p.as_slice()[k], qq.as_slice()[k]);
                    kl += a * (a / b).ln();
                }
                total += kl;
            }
        }
        -total / (ps.len() * t.rows()) as f64
    }

    #[test]
    fn adversarial_identity_sign_and_oracles() {
        let mut rng = SeededRng::new(2, "adv");
        let z = random_grid(&mut rng, 4, 5, 2.0);
        let (loss, g) = adversarial_loss_and_grad(&z, &[z.clone()], 2.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|x| x.abs() < 1e-15));

        for _ in 0..20 {
            let t = random_grid(&mut rng, 3, 5, 2.0);
            let ps = vec![random_grid(&mut rng, 3, 5, 2.0), random_grid(&mut rng, 3, 5, 2.0)];
            let alpha = 0.5 + rng.uniform() * 2.5;
            let (loss, g) = adversarial_loss_and_grad(&t, &ps, alpha).unwrap();
            assert!(loss <= 0.0);
            assert!((loss - brute_adv(&t, &ps, alpha)).abs() < 1e-12);
            let fd = central_diff(|m| brute_adv(m, &ps, alpha), &t, 1e-5);
            assert!(max_rel_err(&g, &fd) <= 1e-6);
        }
        assert!(adversarial_loss_and_grad(&z, &[], 2.0).is_err());
    }

    #[test]
    fn alpha_one_matches_untempered_kl() {
        let mut rng = SeededRng::new(3, "alpha1");
        let t = random_grid(&mut rng, 5, 6, 1.0);
        let q = random_grid(&mut rng, 5, 6, 1.0);
        let (loss, _) = adversarial_loss_and_grad(&t, &[q.clone()], 1.0).unwrap();
        assert!((loss - brute_adv(&t, &[q], 1.0)).abs() < 1e-12);
    }

    #[test]
    fn masked_logit_gradient_degenerate_cases() {
        let mut rng = SeededRng::new(4, "mask");
        let z = random_grid(&mut rng, 6, 5, 1.0);
        let q = random_grid(&mut rng, 6, 5, 1.0);
        let y = [0, 1, 2, 3, 4, 0];
        let mask = [true, true, false, true, false, false];
        let (_, sft) = sft_loss_and_grad(&z, &y).unwrap();

        let b = masked_logit_gradient(&z, &y, &mask, &[q.clone()], 0.0, 2.0, false).unwrap();
        assert_eq!(b.per_position_logit_grads, sft);
        let b = masked_logit_gradient(&z, &y, &[false; 6], &[q.clone()], 5.0, 2.0, false).unwrap();
        assert_eq!(b.per_position_logit_grads, sft);
        assert_eq!(b.adv_loss, 0.0);

        let b = masked_logit_gradient(&z, &y, &mask, &[q.clone()], 0.7, 2.0, false).unwrap();
        assert!((b.total_loss - (b.sft_loss + 0.7 * b.adv_loss)).abs() < 1e-12);
        assert_eq!(b.masked_positions, 3);
        for r in [2, 4, 5] {
            assert_eq!(b.per_position_logit_grads.row(r), sft.row(r));
        }
        // Only masked rows enter the adversarial mean.
        let rows: Vec<usize> = vec![0, 1, 3];
        let pick = |m: &RealMatrix| {
            RealMatrix::from_rows(&rows.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>())
                .unwrap()
        };
        let (sub, _) = adversarial_loss_and_grad(&pick(&z), &[pick(&q)], 2.0).unwrap();
        assert!((b.adv_loss - sub).abs() < 1e-14);
    }
}
