//! Frozen random causal base, trainable output head, and decoding.
//!
//! The base never trains. It embeds each token, mixes a short causal window
//! through one tanh layer and a long causal window (plus the short-window
//! features) through a second, and exposes both feature blocks, scaled by a
//! fixed output gain, as the hidden state fed to the head.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Segment, Token, TokenSequence};
use crate::error::{invalid, Error, Result};
use crate::numerics::{argmax, axpy, dot, gemm, softmax_unchecked, RealMatrix, SeededRng};

/// Structural description of a frozen base; parameters derive from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub local_window: usize,
    pub long_window: usize,
    pub local_dim: usize,
    pub long_dim: usize,
    pub output_gain: f64,
    pub context_window: usize,
}

impl BaseConfig {
    pub fn new(seed: u64, vocab_size: usize, hidden_dim: usize) -> Self {
        let local_dim = hidden_dim / 2;
        Self {
            seed,
            vocab_size,
            embed_dim: 12,
            local_window: 4,
            long_window: 24,
            local_dim,
            long_dim: hidden_dim - local_dim,
            output_gain: 8.0,
            context_window: 64,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.local_dim + self.long_dim
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.local_window == 0
            || self.long_window == 0
            || self.hidden_dim() == 0
            || self.context_window == 0
        {
            return Err(invalid("base dimensions must be positive"));
        }
        if !(self.output_gain.is_finite() && self.output_gain > 0.0) {
            return Err(invalid("output gain must be positive"));
        }
        Ok(())
    }

    fn to_row(&self) -> Vec<f64> {
        vec![
            self.seed as f64,
            self.vocab_size as f64,
            self.embed_dim as f64,
            self.local_window as f64,
            self.long_window as f64,
            self.local_dim as f64,
            self.long_dim as f64,
            self.output_gain,
            self.context_window as f64,
        ]
    }

    fn from_row(row: &[f64], seed: u64) -> Result<Self> {
        let [_, v, e, lw, gw, ld, gd, gain, ctx] = row else {
            return Err(invalid("base_config row must have 9 entries"));
        };
        let cfg = Self {
            seed,
            vocab_size: *v as usize,
            embed_dim: *e as usize,
            local_window: *lw as usize,
            long_window: *gw as usize,
            local_dim: *ld as usize,
            long_dim: *gd as usize,
            output_gain: *gain,
            context_window: *ctx as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fixed random causal feature network.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBase {
    cfg: BaseConfig,
    // Per-lag token projections: [lag][token] -> vector, flattened.
    local_proj: Vec<f64>,
    long_proj: Vec<f64>,
    local_bias: Vec<f64>,
    long_bias: Vec<f64>,
    mix: RealMatrix,
}

impl FrozenBase {
    pub fn new(cfg: BaseConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed, "frozen-base");
        let (v, e) = (cfg.vocab_size, cfg.embed_dim);
        let embed = RealMatrix::random_normal(v, e, 1.0, &mut rng);
        let local_in = (cfg.local_window * e) as f64;
        let long_in = (cfg.long_window * e) as f64;
        let local_w =
            RealMatrix::random_normal(cfg.local_dim, cfg.local_window * e, 1.5 / local_in.sqrt(), &mut rng);
        let long_w =
            RealMatrix::random_normal(cfg.long_dim, cfg.long_window * e, 1.5 / long_in.sqrt(), &mut rng);
        let local_bias = (0..cfg.local_dim).map(|_| 0.5 * rng.normal()).collect();
        let long_bias = (0..cfg.long_dim).map(|_| 0.5 * rng.normal()).collect();
        let mix = RealMatrix::random_normal(
            cfg.long_dim,
            cfg.local_dim,
            0.5 / (cfg.local_dim.max(1) as f64).sqrt(),
            &mut rng,
        );
        let local_proj = Self::project(&local_w, &embed, cfg.local_window, e);
        let long_proj = Self::project(&long_w, &embed, cfg.long_window, e);
        Ok(Self {
            cfg,
            local_proj,
            long_proj,
            local_bias,
            long_bias,
            mix,
        })
    }

    // Tabulates W_lag · embed[token] for every (lag, token).
    fn project(w: &RealMatrix, embed: &RealMatrix, window: usize, e: usize) -> Vec<f64> {
        let (out_dim, v) = (w.rows(), embed.rows());
        let mut table = vec![0.0; window * v * out_dim];
        for lag in 0..window {
            for tok in 0..v {
                let emb = embed.row(tok);
                let dst = &mut table[(lag * v + tok) * out_dim..(lag * v + tok + 1) * out_dim];
                for (o, slot) in dst.iter_mut().enumerate() {
                    *slot = dot(&w.row(o)[lag * e..(lag + 1) * e], emb);
                }
            }
        }
        table
    }

    pub fn config(&self) -> &BaseConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.cfg.seed
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim()
    }

    pub fn context_window(&self) -> usize {
        self.cfg.context_window
    }

    /// A stable digest of all parameters (bit patterns folded in order).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let parts: [&[f64]; 5] = [
            &self.local_proj,
            &self.long_proj,
            &self.local_bias,
            &self.long_bias,
            self.mix.as_slice(),
        ];
        for part in parts {
            for x in part {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Hidden state at position `t`, written into `out` (length `hidden_dim`).
    /// Reads only `tokens[..=t]`.
    pub fn features_at(&self, tokens: &[Token], t: usize, out: &mut [f64]) {
        let cfg = &self.cfg;
        let v = cfg.vocab_size;
        let (ld, gd) = (cfg.local_dim, cfg.long_dim);
        let (local, long) = out.split_at_mut(ld);
        local.copy_from_slice(&self.local_bias);
        for lag in 0..cfg.local_window.min(t + 1) {
            let tok = usize::from(tokens[t - lag]);
            let off = (lag * v + tok) * ld;
            axpy(1.0, &self.local_proj[off..off + ld], local);
        }
        local.iter_mut().for_each(|x| *x = x.tanh());
        long.copy_from_slice(&self.long_bias);
        for lag in 0..cfg.long_window.min(t + 1) {
            let tok = usize::from(tokens[t - lag]);
            let off = (lag * v + tok) * gd;
            axpy(1.0, &self.long_proj[off..off + gd], long);
        }
        for (r, slot) in long.iter_mut().enumerate() {
            *slot = (*slot + dot(self.mix.row(r), local)).tanh();
        }
        let g = cfg.output_gain;
        out.iter_mut().for_each(|x| *x *= g);
    }

    /// Per-position hidden states, `len × d`.
    pub fn forward(&self, tokens: &TokenSequence) -> Result<RealMatrix> {
        self.forward_tokens(tokens.tokens())
    }

    pub fn forward_tokens(&self, tokens: &[Token]) -> Result<RealMatrix> {
        if tokens.len() > self.cfg.context_window {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                window: self.cfg.context_window,
            });
        }
        if let Some(t) = tokens.iter().find(|&&t| usize::from(t) >= self.cfg.vocab_size) {
            return Err(invalid(format!("token {t} outside vocabulary")));
        }
        let d = self.hidden_dim();
        let mut out = RealMatrix::zeros(tokens.len(), d);
        for t in 0..tokens.len() {
            self.features_at(tokens, t, out.row_mut(t));
        }
        Ok(out)
    }
}

/// Optional hidden layer of a head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub weights: RealMatrix,
    pub bias: Vec<f64>,
    pub nonlinear: bool,
}

/// Trainable output head: `logits = W · φ(h) + b`, where `φ` is either the
/// identity or one (optionally tanh) hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub hidden: Option<HiddenLayer>,
    pub weights: RealMatrix,
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn zeros_linear(vocab: usize, d: usize) -> Self {
        Self {
            hidden: None,
            weights: RealMatrix::zeros(vocab, d),
            bias: vec![0.0; vocab],
        }
    }

    /// Linear head with N(0, std²) weights and zero bias.
    pub fn random_linear(vocab: usize, d: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            hidden: None,
            weights: RealMatrix::random_normal(vocab, d, std, rng),
            bias: vec![0.0; vocab],
        }
    }

    /// One-hidden-layer head; input weights are scaled by `1/√d` times the
    /// inverse of the expected hidden-state magnitude `input_scale`.
    pub fn random_mlp(
        vocab: usize,
        d: usize,
        d_hidden: usize,
        input_scale: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let w1 = RealMatrix::random_normal(d_hidden, d, 1.0 / ((d as f64).sqrt() * input_scale), rng);
        let w2 = RealMatrix::random_normal(vocab, d_hidden, 0.01, rng);
        Self {
            hidden: Some(HiddenLayer {
                weights: w1,
                bias: vec![0.0; d_hidden],
                nonlinear: true,
            }),
            weights: w2,
            bias: vec![0.0; vocab],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .as_ref()
            .map_or(self.weights.cols(), |h| h.weights.cols())
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.as_ref().map_or(0, |h| h.weights.rows())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.as_ref().map(|h| HiddenLayer {
                weights: RealMatrix::zeros(h.weights.rows(), h.weights.cols()),
                bias: vec![0.0; h.bias.len()],
                nonlinear: h.nonlinear,
            }),
            weights: RealMatrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// Parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(4);
        if let Some(h) = &self.hidden {
            out.push(h.weights.as_slice());
            out.push(&h.bias);
        }
        out.push(self.weights.as_slice());
        out.push(&self.bias);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(4);
        if let Some(h) = &mut self.hidden {
            out.push(h.weights.as_mut_slice());
            out.push(&mut h.bias);
        }
        out.push(self.weights.as_mut_slice());
        out.push(&mut self.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&flat[off..off + b.len()]);
            off += b.len();
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &HeadParams) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            axpy(s, b, a);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn dot(&self, other: &HeadParams) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.blocks().into_iter().zip(other.blocks()) {
            s += dot(a, b);
        }
        s
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, hidden: &[f64]) -> Result<()> {
        if hidden.len() != self.input_dim() {
            return Err(invalid(format!(
                "head expects input dim {}, got {}",
                self.input_dim(),
                hidden.len()
            )));
        }
        Ok(())
    }

    /// Vocabulary logits for one hidden state.
    pub fn logits(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        self.check_input(hidden)?;
        Ok(self.forward_cached(hidden).1)
    }

    /// Returns (activated hidden-layer output, logits). The first element is
    /// empty for a linear head.
    pub(crate) fn forward_cached(&self, hidden: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match &self.hidden {
            None => {
                let mut z = self.bias.clone();
                for (r, zr) in z.iter_mut().enumerate() {
                    *zr += dot(self.weights.row(r), hidden);
                }
                (Vec::new(), z)
            }
            Some(layer) => {
                let mut a = layer.bias.clone();
                for (r, ar) in a.iter_mut().enumerate() {
                    *ar += dot(layer.weights.row(r), hidden);
                    if layer.nonlinear {
                        *ar = ar.tanh();
                    }
                }
                let mut z = self.bias.clone();
                for (r, zr) in z.iter_mut().enumerate() {
                    *zr += dot(self.weights.row(r), &a);
                }
                (a, z)
            }
        }
    }

    /// Accumulates `∂/∂θ` of `Σ_k dlogits_k · z_k(θ)` into `grad`.
    pub(crate) fn backprop(
        &self,
        hidden: &[f64],
        activated: &[f64],
        dlogits: &[f64],
        grad: &mut HeadParams,
    ) {
        axpy(1.0, dlogits, &mut grad.bias);
        match (&self.hidden, &mut grad.hidden) {
            (None, _) => grad.weights.add_outer(1.0, dlogits, hidden),
            (Some(layer), Some(glayer)) => {
                grad.weights.add_outer(1.0, dlogits, activated);
                let mut da = self.weights.matvec_t(dlogits).expect("shape checked");
                if layer.nonlinear {
                    for (d, a) in da.iter_mut().zip(activated) {
                        *d *= 1.0 - a * a;
                    }
                }
                axpy(1.0, &da, &mut glayer.bias);
                glayer.weights.add_outer(1.0, &da, hidden);
            }
            (Some(_), None) => panic!("gradient buffer lacks hidden layer"),
        }
    }

    /// Row-batched forward: returns (hidden-layer activations if any, logits).
    pub fn forward_batch(&self, hidden: &RealMatrix) -> (Option<RealMatrix>, RealMatrix) {
        let n = hidden.rows();
        let affine_rows = |w: &RealMatrix, b: &[f64], x: &RealMatrix| {
            let mut out = RealMatrix::zeros(n, w.rows());
            for r in 0..n {
                out.row_mut(r).copy_from_slice(b);
            }
            gemm(1.0, x, false, w, true, 1.0, &mut out);
            out
        };
        match &self.hidden {
            None => (None, affine_rows(&self.weights, &self.bias, hidden)),
            Some(layer) => {
                let mut a = affine_rows(&layer.weights, &layer.bias, hidden);
                if layer.nonlinear {
                    a.as_mut_slice().iter_mut().for_each(|x| *x = x.tanh());
                }
                let z = affine_rows(&self.weights, &self.bias, &a);
                (Some(a), z)
            }
        }
    }

    /// Row-batched gradient of `Σ_r dlogits_r · z_r(θ)`, accumulated into `grad`.
    pub fn backprop_batch(
        &self,
        hidden: &RealMatrix,
        activated: Option<&RealMatrix>,
        dlogits: &RealMatrix,
        grad: &mut HeadParams,
    ) {
        for r in 0..dlogits.rows() {
            axpy(1.0, dlogits.row(r), &mut grad.bias);
        }
        match (&self.hidden, &mut grad.hidden) {
            (None, _) => gemm(1.0, dlogits, true, hidden, false, 1.0, &mut grad.weights),
            (Some(layer), Some(glayer)) => {
                let a = activated.expect("activations for hidden layer");
                gemm(1.0, dlogits, true, a, false, 1.0, &mut grad.weights);
                let mut da = RealMatrix::zeros(dlogits.rows(), layer.weights.rows());
                gemm(1.0, dlogits, false, &self.weights, false, 0.0, &mut da);
                if layer.nonlinear {
                    for (d, x) in da.as_mut_slice().iter_mut().zip(a.as_slice()) {
                        *d *= 1.0 - x * x;
                    }
                }
                for r in 0..da.rows() {
                    axpy(1.0, da.row(r), &mut glayer.bias);
                }
                gemm(1.0, &da, true, hidden, false, 1.0, &mut glayer.weights);
            }
            (Some(_), None) => panic!("gradient buffer lacks hidden layer"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Teacher,
    ProxyStudent,
    TargetStudent,
}

/// Frozen base plus head. The role is recorded for audit only.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub base: FrozenBase,
    pub head: HeadParams,
    pub role: Role,
}

impl ModelBundle {
    pub fn new(base: FrozenBase, head: HeadParams, role: Role) -> Result<Self> {
        if head.input_dim() != base.hidden_dim() {
            return Err(invalid(format!(
                "head input dim {} != base hidden dim {}",
                head.input_dim(),
                base.hidden_dim()
            )));
        }
        if head.vocab_size() != base.config().vocab_size {
            return Err(invalid("head and base disagree on vocabulary size"));
        }
        Ok(Self { base, head, role })
    }

    pub fn vocab_size(&self) -> usize {
        self.head.vocab_size()
    }

    /// Logits at every position of `tokens`.
    pub fn logits(&self, tokens: &[Token]) -> Result<RealMatrix> {
        let h = self.base.forward_tokens(tokens)?;
        let mut out = RealMatrix::zeros(tokens.len(), self.vocab_size());
        for t in 0..tokens.len() {
            out.row_mut(t).copy_from_slice(&self.head.forward_cached(h.row(t)).1);
        }
        Ok(out)
    }

    /// Writes the checkpoint format: ASCII header, then named row-major
    /// little-endian f64 matrices.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let cfg = self.base.config();
        writeln!(
            w,
            "DOGE-CKPT v1 {} {} {} {}",
            self.vocab_size(),
            self.base.hidden_dim(),
            self.head.hidden_dim(),
            cfg.seed
        )?;
        let mut put = |name: &str, rows: usize, cols: usize, data: &[f64]| -> Result<()> {
            writeln!(w, "{name} {rows} {cols}")?;
            for x in data {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        let row = cfg.to_row();
        put("base_config", 1, row.len(), &row)?;
        put("role", 1, 1, &[self.role as u8 as f64])?;
        if let Some(h) = &self.head.hidden {
            let (r, c) = h.weights.shape();
            put("hidden.weights", r, c, h.weights.as_slice())?;
            put("hidden.bias", 1, h.bias.len(), &h.bias)?;
            put("hidden.nonlinear", 1, 1, &[f64::from(u8::from(h.nonlinear))])?;
        }
        let (r, c) = self.head.weights.shape();
        put("head.weights", r, c, self.head.weights.as_slice())?;
        put("head.bias", 1, self.head.bias.len(), &self.head.bias)?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::Parse {
            path: None,
            msg: format!("checkpoint: {m}"),
        };
        let mut pos = 0usize;
        let line = |pos: &mut usize| -> Result<String> {
            let end = buf[*pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header line"))?;
            let s = std::str::from_utf8(&buf[*pos..*pos + end])
                .map_err(|_| bad("non-ASCII header"))?
                .to_owned();
            *pos += end + 1;
            Ok(s)
        };
        let header = line(&mut pos)?;
        let fields: Vec<&str> = header.split(' ').collect();
        let ["DOGE-CKPT", "v1", v, d, dh, seed] = fields.as_slice() else {
            return Err(bad("bad header"));
        };
        let parse = |s: &str| s.parse::<u64>().map_err(|_| bad("bad header number"));
        let (v, d, dh, seed) = (parse(v)?, parse(d)?, parse(dh)?, parse(seed)?);

        let mut mats: Vec<(String, RealMatrix)> = Vec::new();
        while pos < buf.len() {
            let l = line(&mut pos)?;
            let parts: Vec<&str> = l.split(' ').collect();
            let [name, rows, cols] = parts.as_slice() else {
                return Err(bad("bad matrix line"));
            };
            let (rows, cols) = (parse(rows)? as usize, parse(cols)? as usize);
            let n = rows * cols;
            if buf.len() < pos + 8 * n {
                return Err(bad("truncated matrix data"));
            }
            let data = buf[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += 8 * n;
            mats.push((name.to_string(), RealMatrix::from_vec(rows, cols, data)?));
        }
        let mut take = |name: &str| -> Option<RealMatrix> {
            let i = mats.iter().position(|(n, _)| n == name)?;
            Some(mats.remove(i).1)
        };
        let cfg_row = take("base_config").ok_or_else(|| bad("missing base_config"))?;
        let cfg = BaseConfig::from_row(cfg_row.as_slice(), seed)?;
        let role = match take("role").map(|m| m.as_slice()[0] as u8) {
            Some(0) => Role::Teacher,
            Some(1) => Role::ProxyStudent,
            Some(2) => Role::TargetStudent,
            _ => return Err(bad("missing or bad role")),
        };
        let hidden = match (take("hidden.weights"), take("hidden.bias")) {
            (Some(w), Some(b)) => Some(HiddenLayer {
                weights: w,
                bias: b.into_vec(),
                nonlinear: take("hidden.nonlinear").is_some_and(|m| m.as_slice()[0] != 0.0),
            }),
            (None, None) => None,
            _ => return Err(bad("incomplete hidden layer")),
        };
        let weights = take("head.weights").ok_or_else(|| bad("missing head.weights"))?;
        let bias = take("head.bias").ok_or_else(|| bad("missing head.bias"))?.into_vec();
        let head = HeadParams {
            hidden,
            weights,
            bias,
        };
        if head.vocab_size() as u64 != v
            || cfg.hidden_dim() as u64 != d
            || head.hidden_dim() as u64 != dh
        {
            return Err(bad("header dimensions disagree with matrices"));
        }
        ModelBundle::new(FrozenBase::new(cfg)?, head, role)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DecodeKind {
    Greedy,
    TopK { k: usize, sample_temp: f64 },
}

/// How to extend a prompt. `seed` and `stream` key the sampling stream and
/// are ignored by greedy decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodingStrategy {
    pub kind: DecodeKind,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub stream: String,
}

impl DecodingStrategy {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            kind: DecodeKind::Greedy,
            max_new_tokens,
            seed: 0,
            stream: String::new(),
        }
    }

    pub fn top_k(k: usize, sample_temp: f64, max_new_tokens: usize, seed: u64) -> Self {
        Self {
            kind: DecodeKind::TopK { k, sample_temp },
            max_new_tokens,
            seed,
            stream: "decode".into(),
        }
    }

    /// Same strategy on a sub-stream, for per-prompt sampling.
    pub fn for_item(&self, item: usize) -> Self {
        let mut s = self.clone();
        s.stream = format!("{}/{item}", self.stream);
        s
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(invalid("max_new_tokens must be at least 1"));
        }
        if let DecodeKind::TopK { k, sample_temp } = self.kind {
            if k == 0 || k > vocab_size {
                return Err(invalid(format!("top-k k={k} outside [1, {vocab_size}]")));
            }
            if !(sample_temp > 0.0 && sample_temp.is_finite()) {
                return Err(invalid("sample temperature must be positive"));
            }
        }
        Ok(())
    }
}

/// Autoregressively extends `prompt` until the end token, `max_new_tokens`,
/// or the context window.
pub fn decode(
    bundle: &ModelBundle,
    prompt: &TokenSequence,
    end_token: Token,
    strategy: &DecodingStrategy,
) -> Result<TokenSequence> {
    if prompt.is_empty() {
        return Err(invalid("empty prompt"));
    }
    if prompt.tags().iter().any(|t| *t != Segment::Prompt) {
        return Err(invalid("decode expects a prompt-only sequence"));
    }
    strategy.validate(bundle.vocab_size())?;
    if prompt.len() > bundle.base.context_window() {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            window: bundle.base.context_window(),
        });
    }
    let mut rng = SeededRng::new(strategy.seed, &strategy.stream);
    let mut out = prompt.clone();
    let mut h = vec![0.0; bundle.base.hidden_dim()];
    for _ in 0..strategy.max_new_tokens {
        if out.len() >= bundle.base.context_window() {
            break;
        }
        let t = out.len() - 1;
        bundle.base.features_at(out.tokens(), t, &mut h);
        let (_, z) = bundle.head.forward_cached(&h);
        let next = match strategy.kind {
            DecodeKind::Greedy => argmax(&z),
            DecodeKind::TopK { k, sample_temp } => sample_top_k(&z, k, sample_temp, &mut rng),
        } as Token;
        out.push_generated(next);
        if next == end_token {
            break;
        }
    }
    Ok(out)
}

fn sample_top_k(logits: &[f64], k: usize, temp: f64, rng: &mut SeededRng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable sort keeps lower indices first among ties.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    let kept: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
    let probs = softmax_unchecked(&kept, temp);
    order[rng.categorical(&probs)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_instance, Vocabulary};
    use crate::numerics::affine;

    fn small_base(seed: u64) -> FrozenBase {
        FrozenBase::new(BaseConfig::new(seed, 22, 16)).unwrap()
    }

    #[test]
    fn forward_shape_causality_determinism() {
        let base = small_base(1);
        let v = Vocabulary::arithmetic();
        let seq = generate_instance(&v, &mut SeededRng::new(2, "m"), 3).unwrap();
        let h = base.forward(&seq).unwrap();
        assert_eq!(h.shape(), (seq.len(), 16));
        assert_eq!(h, base.forward(&seq).unwrap());
        for t in 0..seq.len() - 1 {
            let mut toks = seq.tokens().to_vec();
            toks[t + 1] = (toks[t + 1] + 1) % 22;
            let h2 = base.forward_tokens(&toks).unwrap();
            for r in 0..=t {
                assert_eq!(
                    h.row(r).iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    h2.row(r).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
        }
        assert_eq!(small_base(1), base);
        assert_ne!(small_base(2).fingerprint(), base.fingerprint());
    }

    #[test]
    fn forward_rejects_overlong() {
        let mut cfg = BaseConfig::new(1, 22, 8);
        cfg.context_window = 4;
        let base = FrozenBase::new(cfg).unwrap();
        assert!(matches!(
            base.forward_tokens(&[0, 1, 2, 3, 4]),
            Err(Error::ContextOverflow { len: 5, window: 4 })
        ));
    }

    #[test]
    fn head_logits_examples() {
        let mut rng = SeededRng::new(3, "head");
        let h: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let mut head = HeadParams::zeros_linear(4, 6);
        head.bias = vec![0.1, -0.2, 0.3, 0.0];
        assert_eq!(head.logits(&h).unwrap(), head.bias);

        let head = HeadParams::random_linear(4, 6, 1.0, &mut rng);
        let want = affine(&head.weights, &head.bias, &h).unwrap();
        let got = head.logits(&h).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(head.logits(&h[..5]).is_err());

        let mut mlp = HeadParams::random_mlp(4, 6, 5, 1.0, &mut rng);
        if let Some(layer) = &mut mlp.hidden {
            layer.weights = RealMatrix::zeros(5, 6);
        }
        mlp.bias = vec![1.0, 2.0, 3.0, 4.0];
        // tanh(0) = 0, so only the output bias survives.
        assert_eq!(mlp.logits(&h).unwrap(), mlp.bias);
    }

    fn forced_bundle(token: usize) -> ModelBundle {
        let base = small_base(4);
        let mut head = HeadParams::zeros_linear(22, 16);
        head.bias[token] = 50.0;
        ModelBundle::new(base, head, Role::Teacher).unwrap()
    }

    #[test]
    fn decode_forced_token_and_topk1_equals_greedy() {
        let bundle = forced_bundle(3);
        let prompt = TokenSequence::prompt_only(vec![14, 1, 10, 2]);
        let out = decode(&bundle, &prompt, 21, &DecodingStrategy::greedy(7)).unwrap();
        assert_eq!(out.len(), 11);
        assert!(out.tokens()[4..].iter().all(|&t| t == 3));
        assert!(out.tags()[4..].iter().all(|t| *t == Segment::Generated));

        let mut rng = SeededRng::new(5, "dec");
        let head = HeadParams::random_linear(22, 16, 0.3, &mut rng);
        let bundle = ModelBundle::new(small_base(4), head, Role::TargetStudent).unwrap();
        let g = decode(&bundle, &prompt, 21, &DecodingStrategy::greedy(12)).unwrap();
        let k1 = decode(&bundle, &prompt, 21, &DecodingStrategy::top_k(1, 1.0, 12, 9)).unwrap();
        assert_eq!(g, k1);
        assert!(decode(&bundle, &TokenSequence::prompt_only(vec![]), 21, &DecodingStrategy::greedy(3)).is_err());
        assert!(decode(&bundle, &prompt, 21, &DecodingStrategy::top_k(0, 1.0, 3, 1)).is_err());
        assert!(decode(&bundle, &prompt, 21, &DecodingStrategy::top_k(23, 1.0, 3, 1)).is_err());
    }

    #[test]
    fn top_k_sampling_is_reproducible() {
        let mut rng = SeededRng::new(6, "topk");
        let head = HeadParams::random_linear(22, 16, 0.5, &mut rng);
        let bundle = ModelBundle::new(small_base(7), head, Role::Teacher).unwrap();
        let strat = DecodingStrategy::top_k(5, 1.0, 15, 233);
        for i in 0..20 {
            let prompt = TokenSequence::prompt_only(vec![14, (i % 10) as Token, 10, 3]);
            let s = strat.for_item(i);
            let a = decode(&bundle, &prompt, 21, &s).unwrap();
            let b = decode(&bundle, &prompt, 21, &s).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = SeededRng::new(8, "ckpt");
        for mlp in [false, true] {
            let head = if mlp {
                HeadParams::random_mlp(22, 16, 5, 8.0, &mut rng)
            } else {
                HeadParams::random_linear(22, 16, 0.7, &mut rng)
            };
            let bundle = ModelBundle::new(small_base(9), head, Role::ProxyStudent).unwrap();
            let mut buf = Vec::new();
            bundle.write_checkpoint(&mut buf).unwrap();
            let header = buf.split(|&b| b == b'\n').next().unwrap();
            let want = format!("DOGE-CKPT v1 22 16 {} 9", if mlp { 5 } else { 0 });
            assert_eq!(header, want.as_bytes());
            let back = ModelBundle::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, bundle);
            let mut again = Vec::new();
            back.write_checkpoint(&mut again).unwrap();
            assert_eq!(again, buf);
        }
        assert!(ModelBundle::read_checkpoint(&b"DOGE-CKPT v2 1 1 0 0\n"[..]).is_err());
    }
}
