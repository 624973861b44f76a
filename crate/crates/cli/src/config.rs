//! Resolved run configuration: lab settings plus the theory harness,
//! landscape grid and input artifact paths.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use doge_core::lab::LabConfig;
use doge_core::landscape::GridConfig;
use doge_core::theory::{HarnessConfig, SmoothingConfig};
use doge_core::trainer::parse_kv_text;
use doge_core::{Error, Result};

pub const DEFAULT_SEED: u64 = 233;

/// Input keys accepted under `input.*`.
pub const INPUT_KEYS: [&str; 6] = ["corpus", "teacher", "proxies", "defended", "model", "log"];

#[derive(Clone, Debug, PartialEq)]
pub struct TheorySettings {
    pub harness: HarnessConfig,
    pub discrepancy_trials: usize,
    pub one_step_trials: usize,
    pub range_trials: usize,
    /// Step sizes are drawn from `(0, eta_frac / L_hat]`.
    pub eta_frac: f64,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            harness: HarnessConfig::default(),
            discrepancy_trials: 1000,
            one_step_trials: 500,
            range_trials: 10_000,
            eta_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeSettings {
    pub grid: GridConfig,
    /// Sequences in the fixed evaluation batch.
    pub batch: usize,
    pub seed: u64,
}

impl Default for LandscapeSettings {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            batch: 64,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub lab: LabConfig,
    pub theory: TheorySettings,
    pub landscape: LandscapeSettings,
    pub inputs: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            lab: LabConfig::default(),
            theory: TheorySettings::default(),
            landscape: LandscapeSettings::default(),
            inputs: BTreeMap::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key `{key}`")))
}

impl RunConfig {
    /// Run seed: every stream in the lab, the theory harness and the
    /// landscape batch derive from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.lab.set_seed(seed);
        self.theory.harness.seed = seed;
        self.landscape.seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.set_seed(parse(key, value)?);
            return Ok(());
        }
        let Some((section, field)) = key.split_once('.') else {
            return Err(Error::Config(format!("unknown key `{key}`")));
        };
        let th = &mut self.theory;
        let ls = &mut self.landscape;
        match (section, field) {
            ("input", f) if INPUT_KEYS.contains(&f) => {
                self.inputs.insert(f.to_string(), value.trim().to_string());
            }
            ("theory", "discrepancy_trials") => th.discrepancy_trials = parse(key, value)?,
            ("theory", "one_step_trials") => th.one_step_trials = parse(key, value)?,
            ("theory", "range_trials") => th.range_trials = parse(key, value)?,
            ("theory", "eta_frac") => th.eta_frac = parse(key, value)?,
            ("theory", "vocab") => th.harness.vocab = parse(key, value)?,
            ("theory", "input_dim") => th.harness.input_dim = parse(key, value)?,
            ("theory", "contexts") => th.harness.contexts = parse(key, value)?,
            ("theory", "mlp_every") => th.harness.mlp_every = parse(key, value)?,
            ("theory", "seed") => th.harness.seed = parse(key, value)?,
            ("theory", "epsilon") => th.harness.smoothing.epsilon = parse(key, value)?,
            ("theory", "alpha") => th.harness.smoothing.alpha = parse(key, value)?,
            ("landscape", "grid_size") => ls.grid.grid_size = parse(key, value)?,
            ("landscape", "radius") => ls.grid.radius = parse(key, value)?,
            ("landscape", "direction_seeds") => {
                let v: Vec<u64> = value.split(',').map(|s| parse(key, s)).collect::<Result<_>>()?;
                let [a, b] = v[..] else {
                    return Err(Error::Config(format!("key `{key}` takes two seeds")));
                };
                ls.grid.direction_seeds = (a, b);
            }
            ("landscape", "batch") => ls.batch = parse(key, value)?,
            ("landscape", "seed") => ls.seed = parse(key, value)?,
            _ => self.lab.set(key, value)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.lab.validate()?;
        SmoothingConfig::new(self.theory.harness.smoothing.epsilon, self.theory.harness.smoothing.alpha)
            .map_err(|e| Error::Config(format!("key `theory.epsilon`/`theory.alpha`: {e}")))?;
        let h = &self.theory.harness;
        if h.vocab < 2 || h.input_dim == 0 || h.contexts == 0 {
            return Err(Error::Config("keys `theory.vocab`, `theory.input_dim`, `theory.contexts` out of range".into()));
        }
        if !(self.theory.eta_frac > 0.0) {
            return Err(Error::Config("key `theory.eta_frac` must be positive".into()));
        }
        if self.landscape.grid.grid_size < 2 || !(self.landscape.grid.radius > 0.0) {
            return Err(Error::Config("keys `landscape.grid_size`/`landscape.radius` out of range".into()));
        }
        if self.landscape.batch == 0 {
            return Err(Error::Config("key `landscape.batch` must be positive".into()));
        }
        Ok(())
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv_text(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_kv_text(&text)
    }

    /// Every key; re-applying the text to defaults reproduces `self`.
    pub fn to_kv_text(&self) -> String {
        let mut s = format!("seed = {}\n", self.seed);
        s.push_str(&self.lab.to_kv_text());
        let th = &self.theory;
        let h = &th.harness;
        let _ = writeln!(s, "theory.discrepancy_trials = {}", th.discrepancy_trials);
        let _ = writeln!(s, "theory.one_step_trials = {}", th.one_step_trials);
        let _ = writeln!(s, "theory.range_trials = {}", th.range_trials);
        let _ = writeln!(s, "theory.eta_frac = {}", th.eta_frac);
        let _ = writeln!(s, "theory.vocab = {}", h.vocab);
        let _ = writeln!(s, "theory.input_dim = {}", h.input_dim);
        let _ = writeln!(s, "theory.contexts = {}", h.contexts);
        let _ = writeln!(s, "theory.mlp_every = {}", h.mlp_every);
        let _ = writeln!(s, "theory.seed = {}", h.seed);
        let _ = writeln!(s, "theory.epsilon = {}", h.smoothing.epsilon);
        let _ = writeln!(s, "theory.alpha = {}", h.smoothing.alpha);
        let g = &self.landscape.grid;
        let _ = writeln!(s, "landscape.grid_size = {}", g.grid_size);
        let _ = writeln!(s, "landscape.radius = {}", g.radius);
        let _ = writeln!(s, "landscape.direction_seeds = {},{}", g.direction_seeds.0, g.direction_seeds.1);
        let _ = writeln!(s, "landscape.batch = {}", self.landscape.batch);
        let _ = writeln!(s, "landscape.seed = {}", self.landscape.seed);
        for (k, v) in &self.inputs {
            let _ = writeln!(s, "input.{k} = {v}");
        }
        s
    }

    /// Required single input path.
    pub fn input(&self, key: &str) -> Result<PathBuf> {
        self.inputs
            .get(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("missing required key `input.{key}`")))
    }

    pub fn input_list(&self, key: &str) -> Result<Vec<PathBuf>> {
        Ok(self
            .inputs
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `input.{key}`")))?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect())
    }

    /// Rewrites every input path as an absolute path so a manifest can be
    /// replayed from any working directory.
    pub fn absolutize_inputs(&mut self) -> Result<()> {
        for (key, v) in self.inputs.iter_mut() {
            let abs = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|p| {
                    std::fs::canonicalize(p)
                        .map(|p| p.display().to_string())
                        .map_err(|e| Error::Config(format!("key `input.{key}`: cannot open {p}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            *v = abs.join(",");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_kv_text("seed = 9\ntheory.range_trials = 12\nlandscape.direction_seeds = 3,4\ninput.model = m.ckpt\ntrain.lambda = 0.3")
            .unwrap();
        assert_eq!(c.lab.train.seed, 9);
        assert_eq!(c.theory.harness.seed, 9);
        let mut d = RunConfig::default();
        d.apply_kv_text(&c.to_kv_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        for key in ["theory.trials", "input.teachr", "landscape.size", "bogus"] {
            let err = RunConfig::default().set(key, "1").unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }
}
