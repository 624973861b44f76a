//! Loss-surface slices around a head and training-curve export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, Vocabulary};
use crate::error::{invalid, Result};
use crate::model::{HeadParams, ModelBundle};
use crate::numerics::SeededRng;
use crate::objective::{masked_logit_gradient, sft_loss_and_grad, PositionBatch};
use crate::trainer::{FeatureCache, StepMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub grid_size: usize,
    pub radius: f64,
    pub direction_seeds: (u64, u64),
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            grid_size: 41,
            radius: 1.0,
            direction_seeds: (1, 2),
        }
    }
}

/// `values[i * n + j]` is the loss at `(coords[i], coords[j])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub grid_size: usize,
    pub radius: f64,
    pub direction_seeds: (u64, u64),
    pub coords: Vec<f64>,
    pub values: Vec<f64>,
}

impl LandscapeGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid_size + j]
    }

    pub fn center(&self) -> f64 {
        let c = self.grid_size / 2;
        self.at(c, c)
    }

    pub fn non_finite_cells(&self) -> usize {
        self.values.iter().filter(|v| !v.is_finite()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,loss\n");
        let n = self.grid_size;
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(s, "{},{},{}", self.coords[i], self.coords[j], self.at(i, j));
            }
        }
        s
    }
}

/// A random direction with each filter rescaled to the matching filter
/// norm of `head`. Filters are the rows of each weight matrix; a bias
/// vector counts as one filter.
pub fn filter_normalized_direction(head: &HeadParams, seed: u64) -> HeadParams {
    let mut rng = SeededRng::new(seed, "landscape/direction");
    let mut dir = head.zeros_like();
    let flat: Vec<f64> = (0..dir.num_params()).map(|_| rng.normal()).collect();
    dir.set_flat(&flat);
    let rescale = |d: &mut [f64], h: &[f64]| {
        let (dn, hn) = (crate::numerics::norm(d), crate::numerics::norm(h));
        let s = if dn > 0.0 { hn / dn } else { 0.0 };
        d.iter_mut().for_each(|x| *x *= s);
    };
    if let (Some(dl), Some(hl)) = (&mut dir.hidden, &head.hidden) {
        for r in 0..dl.weights.rows() {
            rescale(dl.weights.row_mut(r), hl.weights.row(r));
        }
        rescale(&mut dl.bias, &hl.bias);
    }
    for r in 0..dir.weights.rows() {
        rescale(dir.weights.row_mut(r), head.weights.row(r));
    }
    rescale(&mut dir.bias, &head.bias);
    dir
}

/// `head + (x·d1 + y·d2)`; the bracket keeps the result symmetric under
/// swapping the two directions.
fn perturbed(head: &HeadParams, d1: &[f64], d2: &[f64], x: f64, y: f64) -> HeadParams {
    let base = head.flatten();
    let flat: Vec<f64> = base
        .iter()
        .zip(d1.iter().zip(d2))
        .map(|(h, (a, b))| h + (x * a + y * b))
        .collect();
    let mut out = head.clone();
    out.set_flat(&flat);
    out
}

fn grid_coords(cfg: &GridConfig) -> Result<Vec<f64>> {
    if cfg.grid_size == 0 || cfg.grid_size % 2 == 0 {
        return Err(invalid("grid_size must be odd"));
    }
    if !(cfg.radius > 0.0 && cfg.radius.is_finite()) {
        return Err(invalid("radius must be positive"));
    }
    let n = cfg.grid_size;
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let half = (n - 1) as f64;
    Ok((0..n)
        .map(|i| cfg.radius * (2.0 * i as f64 - half) / half)
        .collect())
}

fn slice_with(
    head: &HeadParams,
    cfg: &GridConfig,
    eval: impl Fn(&HeadParams) -> Result<f64>,
) -> Result<LandscapeGrid> {
    let coords = grid_coords(cfg)?;
    let d1 = filter_normalized_direction(head, cfg.direction_seeds.0).flatten();
    let d2 = filter_normalized_direction(head, cfg.direction_seeds.1).flatten();
    let mut values = Vec::with_capacity(coords.len() * coords.len());
    for &x in &coords {
        for &y in &coords {
            values.push(eval(&perturbed(head, &d1, &d2, x, y))?);
        }
    }
    Ok(LandscapeGrid {
        grid_size: cfg.grid_size,
        radius: cfg.radius,
        direction_seeds: cfg.direction_seeds,
        coords,
        values,
    })
}

/// Total defensive loss over a fixed batch at every grid cell.
pub fn slice_loss_surface(
    head: &HeadParams,
    batch: &PositionBatch,
    lambda: f64,
    alpha: f64,
    cfg: &GridConfig,
) -> Result<LandscapeGrid> {
    slice_with(head, cfg, |h| {
        let (_, z) = h.forward_batch(&batch.hidden);
        let b = masked_logit_gradient(&z, &batch.targets, &batch.mask, &batch.proxy_logits, lambda, alpha, false)?;
        Ok(if b.total_loss.is_finite() { b.total_loss } else { f64::NAN })
    })
}

/// The same grid evaluated with the SFT loss alone.
pub fn slice_sft_surface(head: &HeadParams, batch: &PositionBatch, cfg: &GridConfig) -> Result<LandscapeGrid> {
    slice_with(head, cfg, |h| {
        let (_, z) = h.forward_batch(&batch.hidden);
        Ok(sft_loss_and_grad(&z, &batch.targets)?.0)
    })
}

/// Fixed evaluation batch of `count` sequences drawn under `seed`.
pub fn landscape_batch(
    vocab: &Vocabulary,
    teacher: &ModelBundle,
    proxies: &[ModelBundle],
    pool: &[TokenSequence],
    count: usize,
    seed: u64,
) -> Result<PositionBatch> {
    if pool.is_empty() || count == 0 {
        return Err(invalid("landscape batch needs sequences"));
    }
    let mut rng = SeededRng::new(seed, "landscape/batch");
    let seqs: Vec<TokenSequence> = (0..count).map(|_| pool[rng.below(pool.len())].clone()).collect();
    let cache = FeatureCache::build(vocab, &teacher.base, proxies, &seqs)?;
    let idx: Vec<usize> = (0..count).collect();
    Ok(cache.batch(&idx))
}

/// CSV with one row per logged step.
pub fn export_training_curves(log: &[StepMetrics]) -> Result<String> {
    if log.is_empty() {
        return Err(invalid("empty training log"));
    }
    let mut s = String::from("step,total_loss,sft_loss,adv_loss,masked_kl\n");
    for m in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            m.step, m.total_loss, m.sft_loss, m.adv_loss, m.masked_kl
        );
    }
    Ok(s)
}

/// Mean masked KL over the first and last `window` logged steps.
pub fn kl_trend(log: &[StepMetrics], window: usize) -> Result<(f64, f64)> {
    if log.is_empty() || window == 0 {
        return Err(invalid("empty training log"));
    }
    let w = window.min(log.len());
    let mean = |s: &[StepMetrics]| s.iter().map(|m| m.masked_kl).sum::<f64>() / s.len() as f64;
    Ok((mean(&log[..w]), mean(&log[log.len() - w..])))
}
