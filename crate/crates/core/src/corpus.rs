//! Synthetic modular-arithmetic reasoning corpus and reasoning-aware masks.
//!
//! Every instance reads
//!
//! ```text
//! Q: a0 op1 a1 … mod m = <think> a0 op1 a1 = r1 ; r1 op2 a2 = r2 </think> Answer: r2 <end>
//! ```
//!
//! where each `r_k` is the left-to-right partial result reduced mod `m`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::SeededRng;

pub type Token = u16;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_MARKER: &str = "Answer:";
pub const PAD: &str = "<pad>";
pub const END: &str = "<end>";

const MAX_VOCAB: usize = 64;

/// Ordered, duplicate-free symbol table shared by every model in a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() || symbols.len() > MAX_VOCAB {
            return Err(invalid(format!(
                "vocabulary size {} outside 1..={MAX_VOCAB}",
                symbols.len()
            )));
        }
        for (i, s) in symbols.iter().enumerate() {
            if symbols[..i].contains(s) {
                return Err(invalid(format!("duplicate symbol {s:?}")));
            }
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(invalid(format!("symbol {s:?} is empty or has whitespace")));
            }
        }
        Ok(Self { symbols })
    }

    /// The arithmetic vocabulary used by the corpus generator.
    pub fn arithmetic() -> Self {
        let mut symbols: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        symbols.extend(
            [
                "+", "-", "*", "=", "Q:", "mod", ";", THINK_OPEN, THINK_CLOSE, ANSWER_MARKER, PAD,
                END,
            ]
            .map(String::from),
        );
        Self::new(symbols).expect("static vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, t: Token) -> &str {
        &self.symbols[usize::from(t)]
    }

    pub fn token(&self, symbol: &str) -> Option<Token> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .map(|i| i as Token)
    }

    fn require(&self, symbol: &str) -> Result<Token> {
        self.token(symbol)
            .ok_or_else(|| invalid(format!("symbol {symbol:?} not in vocabulary")))
    }

    pub fn encode(&self, symbols: &[&str]) -> Result<Vec<Token>> {
        symbols.iter().map(|s| self.require(s)).collect()
    }

    pub fn render(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn end_token(&self) -> Result<Token> {
        self.require(END)
    }

    pub fn answer_marker(&self) -> Result<Token> {
        self.require(ANSWER_MARKER)
    }
}

/// Segment label of one position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    Prompt,
    /// Produced by a decoder and not yet labelled.
    Generated,
    Thinking,
    Answer,
    Pad,
}

impl Segment {
    pub fn code(self) -> char {
        match self {
            Segment::Prompt => 'P',
            Segment::Generated => 'G',
            Segment::Thinking => 'T',
            Segment::Answer => 'A',
            Segment::Pad => 'X',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'P' => Segment::Prompt,
            'G' => Segment::Generated,
            'T' => Segment::Thinking,
            'A' => Segment::Answer,
            'X' => Segment::Pad,
            _ => return None,
        })
    }

    /// Positions that carry training signal.
    pub fn is_response(self) -> bool {
        matches!(self, Segment::Generated | Segment::Thinking | Segment::Answer)
    }

    fn rank(self) -> u8 {
        match self {
            Segment::Prompt => 0,
            Segment::Generated | Segment::Thinking => 1,
            Segment::Answer => 2,
            Segment::Pad => 3,
        }
    }
}

/// Token ids plus per-position segment tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    tags: Vec<Segment>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>, tags: Vec<Segment>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::MalformedSequence(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        if tags.windows(2).any(|w| w[0].rank() > w[1].rank()) {
            return Err(Error::MalformedSequence(
                "segments out of order (expected prompt, thinking, answer, pad)".into(),
            ));
        }
        if tags.contains(&Segment::Generated)
            && tags
                .iter()
                .any(|t| matches!(t, Segment::Thinking | Segment::Answer))
        {
            return Err(Error::MalformedSequence(
                "mixes generated and labelled positions".into(),
            ));
        }
        Ok(Self { tokens, tags })
    }

    pub fn prompt_only(tokens: Vec<Token>) -> Self {
        let tags = vec![Segment::Prompt; tokens.len()];
        Self { tokens, tags }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn tags(&self) -> &[Segment] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.tags.iter().take_while(|t| **t == Segment::Prompt).count()
    }

    /// The prompt prefix as its own sequence.
    pub fn prompt(&self) -> TokenSequence {
        Self::prompt_only(self.tokens[..self.prompt_len()].to_vec())
    }

    pub(crate) fn push_generated(&mut self, t: Token) {
        self.tokens.push(t);
        self.tags.push(Segment::Generated);
    }

    /// Tokens of the answer segment, located via the marker token.
    pub fn answer_tokens(&self, marker: Token, end: Token) -> Option<&[Token]> {
        let p = self.prompt_len();
        let at = self.tokens[p..].iter().position(|&t| t == marker)? + p + 1;
        let stop = self.tokens[at..]
            .iter()
            .position(|&t| t == end)
            .map_or(self.tokens.len(), |i| at + i);
        Some(&self.tokens[at..stop])
    }

    /// Relabels generated positions: everything before the answer marker is
    /// thinking, the marker and what follows is answer.
    pub fn label_response(&self, marker: Token) -> TokenSequence {
        let p = self.prompt_len();
        let cut = self.tokens[p..]
            .iter()
            .position(|&t| t == marker)
            .map_or(self.tokens.len(), |i| p + i);
        let tags = (0..self.tokens.len())
            .map(|i| {
                if i < p {
                    Segment::Prompt
                } else if i < cut {
                    Segment::Thinking
                } else {
                    Segment::Answer
                }
            })
            .collect();
        TokenSequence {
            tokens: self.tokens.clone(),
            tags,
        }
    }

    pub fn tag_string(&self) -> String {
        self.tags.iter().map(|t| t.code()).collect()
    }
}

/// Per-position {0,1} adversarial mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMask(Vec<bool>);

impl SegmentMask {
    pub fn from_bools(mask: Vec<bool>) -> Self {
        Self(mask)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|m| **m).count()
    }

    /// The mask implied by stored Thinking tags.
    pub fn from_tags(seq: &TokenSequence) -> Self {
        Self(seq.tags().iter().map(|t| *t == Segment::Thinking).collect())
    }
}

/// Arithmetic operator of one reduction step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.symbol() == s)
    }

    pub fn apply(self, a: u32, b: u32, m: u32) -> u32 {
        match self {
            Op::Add => (a + b) % m,
            Op::Sub => (a + m - b % m) % m,
            Op::Mul => (a * b) % m,
        }
    }
}

/// Knobs for the instance generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub size: usize,
    pub difficulties: Vec<u8>,
    pub moduli: Vec<u32>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 5000,
            difficulties: vec![2],
            moduli: vec![7],
            seed: 233,
        }
    }
}

pub const MIN_DIFFICULTY: u8 = 1;
pub const MAX_DIFFICULTY: u8 = 4;

/// Emits one instance with `difficulty` operators and modulus `modulus`.
pub fn generate_instance_with_modulus(
    vocab: &Vocabulary,
    rng: &mut SeededRng,
    difficulty: u8,
    modulus: u32,
) -> Result<TokenSequence> {
    if !(MIN_DIFFICULTY..=MAX_DIFFICULTY).contains(&difficulty) {
        return Err(invalid(format!(
            "difficulty {difficulty} outside [{MIN_DIFFICULTY}, {MAX_DIFFICULTY}]"
        )));
    }
    if !(2..=9).contains(&modulus) {
        return Err(invalid(format!("modulus {modulus} outside [2, 9]")));
    }
    let operands: Vec<u32> = (0..=difficulty)
        .map(|_| rng.below(modulus as usize) as u32)
        .collect();
    let ops: Vec<Op> = (0..difficulty).map(|_| Op::ALL[rng.below(3)]).collect();

    let mut syms: Vec<String> = vec!["Q:".into(), operands[0].to_string()];
    for (op, x) in ops.iter().zip(&operands[1..]) {
        syms.push(op.symbol().into());
        syms.push(x.to_string());
    }
    syms.extend(["mod".into(), modulus.to_string(), "=".into()]);
    let prompt_len = syms.len();

    syms.push(THINK_OPEN.into());
    let mut acc = operands[0];
    for (k, (op, x)) in ops.iter().zip(&operands[1..]).enumerate() {
        let next = op.apply(acc, *x, modulus);
        syms.extend([
            acc.to_string(),
            op.symbol().into(),
            x.to_string(),
            "=".into(),
            next.to_string(),
        ]);
        if k + 1 < ops.len() {
            syms.push(";".into());
        }
        acc = next;
    }
    syms.push(THINK_CLOSE.into());
    let answer_start = syms.len();
    syms.extend([ANSWER_MARKER.into(), acc.to_string(), END.into()]);

    let refs: Vec<&str> = syms.iter().map(String::as_str).collect();
    let tokens = vocab.encode(&refs)?;
    let tags = (0..tokens.len())
        .map(|i| {
            if i < prompt_len {
                Segment::Prompt
            } else if i < answer_start {
                Segment::Thinking
            } else {
                Segment::Answer
            }
        })
        .collect();
    TokenSequence::new(tokens, tags)
}

/// Emits one instance with modulus 7.
pub fn generate_instance(
    vocab: &Vocabulary,
    rng: &mut SeededRng,
    difficulty: u8,
) -> Result<TokenSequence> {
    generate_instance_with_modulus(vocab, rng, difficulty, 7)
}

/// Mask from the `<think>` / `</think>` pair, delimiters included.
pub fn mask_by_delimiters(vocab: &Vocabulary, seq: &TokenSequence) -> Result<SegmentMask> {
    let open = vocab.require(THINK_OPEN)?;
    let close = vocab.require(THINK_CLOSE)?;
    let toks = seq.tokens();
    let starts: Vec<usize> = (0..toks.len()).filter(|&i| toks[i] == open).collect();
    let ends: Vec<usize> = (0..toks.len()).filter(|&i| toks[i] == close).collect();
    let (s, e) = match (starts.as_slice(), ends.as_slice()) {
        ([s], [e]) if s < e => (*s, *e),
        _ => {
            return Err(Error::MalformedSequence(format!(
                "expected one matched {THINK_OPEN}/{THINK_CLOSE} pair, found {} open and {} close",
                starts.len(),
                ends.len()
            )))
        }
    };
    Ok(SegmentMask((0..toks.len()).map(|i| i >= s && i <= e).collect()))
}

/// Mask from a regular-expression scan for the answer marker over the
/// rendered response text: 1 from the first response position up to the
/// marker, 0 on the marker, after it, and on the prompt.
pub fn mask_by_regex(
    vocab: &Vocabulary,
    seq: &TokenSequence,
    answer_marker: Token,
) -> Result<SegmentMask> {
    let p = seq.prompt_len();
    let response = &seq.tokens()[p..];
    let text = vocab.render(response);
    let pattern = format!(r"(?:^| ){}(?: |$)", regex::escape(vocab.symbol(answer_marker)));
    let re = Regex::new(&pattern).map_err(|e| invalid(e.to_string()))?;
    let m = re.find(&text).ok_or(Error::MarkerNotFound)?;
    let byte = if m.start() == 0 && !text[m.start()..].starts_with(' ') {
        0
    } else {
        m.start() + 1
    };
    // Tokens are space-separated, so the marker index is the count of
    // separators before its first byte.
    let marker_idx = text[..byte].matches(' ').count();
    let mut mask = vec![false; seq.len()];
    for slot in &mut mask[p..p + marker_idx] {
        *slot = true;
    }
    Ok(SegmentMask(mask))
}

/// Deterministic corpus with its train / KD-prompt / eval split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub instances: Vec<TokenSequence>,
    pub train: Vec<usize>,
    pub kd: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Corpus {
    pub fn generate(vocab: &Vocabulary, cfg: &CorpusConfig) -> Result<Self> {
        if cfg.size < 10 {
            return Err(invalid("corpus needs at least 10 instances"));
        }
        if cfg.difficulties.is_empty() || cfg.moduli.is_empty() {
            return Err(invalid("difficulties and moduli must be non-empty"));
        }
        let root = SeededRng::new(cfg.seed, "corpus");
        let instances = (0..cfg.size)
            .map(|i| {
                let mut rng = root.split(&format!("instance/{i}"));
                let d = cfg.difficulties[rng.below(cfg.difficulties.len())];
                let m = cfg.moduli[rng.below(cfg.moduli.len())];
                generate_instance_with_modulus(vocab, &mut rng, d, m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::with_split(vocab.clone(), instances, cfg.seed))
    }

    /// Seeded 80/10/10 split by instance index.
    pub fn with_split(vocab: Vocabulary, instances: Vec<TokenSequence>, seed: u64) -> Self {
        let n = instances.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = SeededRng::new(seed, "corpus/split");
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
        let n_train = n * 8 / 10;
        let n_kd = n / 10;
        let eval = order.split_off(n_train + n_kd);
        let kd = order.split_off(n_train);
        Self {
            vocab,
            instances,
            train: order,
            kd,
            eval,
        }
    }

    pub fn split(&self, ids: &[usize]) -> Vec<TokenSequence> {
        ids.iter().map(|&i| self.instances[i].clone()).collect()
    }

    pub fn train_set(&self) -> Vec<TokenSequence> {
        self.split(&self.train)
    }

    pub fn kd_prompts(&self) -> Vec<TokenSequence> {
        self.kd.iter().map(|&i| self.instances[i].prompt()).collect()
    }

    pub fn eval_set(&self) -> Vec<TokenSequence> {
        self.split(&self.eval)
    }

    pub fn max_len(&self) -> usize {
        self.instances.iter().map(TokenSequence::len).max().unwrap_or(0)
    }

    /// One instance per line: space-separated symbols, a tab, then tag codes.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for seq in &self.instances {
            writeln!(w, "{}\t{}", self.vocab.render(seq.tokens()), seq.tag_string())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_instances(vocab: &Vocabulary, r: impl BufRead) -> Result<Vec<TokenSequence>> {
        let mut out = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: None,
                msg: format!("line {}: {msg}", lineno + 1),
            };
            let (toks, tags) = line
                .split_once('\t')
                .ok_or_else(|| bad("missing tab between tokens and tags".into()))?;
            let syms: Vec<&str> = toks.split(' ').collect();
            let tokens = vocab.encode(&syms).map_err(|e| bad(e.to_string()))?;
            let tags = tags
                .chars()
                .map(|c| Segment::from_code(c).ok_or_else(|| bad(format!("bad tag {c:?}"))))
                .collect::<Result<Vec<_>>>()?;
            out.push(TokenSequence::new(tokens, tags).map_err(|e| bad(e.to_string()))?);
        }
        Ok(out)
    }

    pub fn load(vocab: &Vocabulary, path: &Path, seed: u64) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let instances =
            Self::read_instances(vocab, std::io::BufReader::new(f)).map_err(|e| match e {
                Error::Parse { msg, .. } => Error::Parse {
                    path: Some(path.to_owned()),
                    msg,
                },
                other => other,
            })?;
        Ok(Self::with_split(vocab.clone(), instances, seed))
    }
}

/// Independent evaluator for a prompt: parses the expression text and
/// reduces it left to right.
pub fn evaluate_prompt(vocab: &Vocabulary, seq: &TokenSequence) -> Option<u32> {
    let p = seq.prompt_len();
    let syms: Vec<&str> = seq.tokens()[..p].iter().map(|&t| vocab.symbol(t)).collect();
    let (head, tail) = syms.split_at(syms.iter().position(|s| *s == "mod")?);
    let m: u32 = tail.get(1)?.parse().ok()?;
    let body = head.strip_prefix(&["Q:"])?;
    let mut acc: u32 = body.first()?.parse().ok()?;
    for pair in body[1..].chunks(2) {
        let op = Op::from_symbol(pair.first()?)?;
        let x: u32 = pair.get(1)?.parse().ok()?;
        acc = op.apply(acc, x, m);
    }
    Some(acc % m)
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}
