//! Tabular order-k autoregressive sequence models.
//!
//! A model is a dense logits table indexed by (context of the last `order`
//! token ids, next token id). Contexts shorter than `order` are left-padded
//! with BOS. Both teacher and student are instances of the same type, and
//! every distribution-level quantity (sequence probabilities, KLDs,
//! partition functions) is exactly computable by enumerating the trajectory
//! tree.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

pub type TokenId = usize;

/// Default cap on `|V|^m` enumeration leaves.
pub const DEFAULT_ENUM_BUDGET: u128 = 1_000_000;

/// Ordered token list with designated BOS and EOS ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    bos_id: TokenId,
    eos_id: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, bos_id: TokenId, eos_id: TokenId) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::domain(format!(
                "vocabulary needs at least 3 tokens, got {}",
                tokens.len()
            )));
        }
        for (i, a) in tokens.iter().enumerate() {
            for b in tokens.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::domain(format!("duplicate token string {a:?}")));
                }
            }
        }
        if bos_id >= tokens.len() || eos_id >= tokens.len() {
            return Err(Error::InvalidTokenId {
                id: bos_id.max(eos_id),
                vocab_size: tokens.len(),
            });
        }
        if bos_id == eos_id {
            return Err(Error::domain("bos_id and eos_id must differ"));
        }
        Ok(Vocab {
            tokens,
            bos_id,
            eos_id,
        })
    }

    /// Standard toy vocabulary: `<bos>`, `<eos>`, `<unk>`, then the given
    /// content tokens.
    pub fn with_content(content: &[&str]) -> Result<Self> {
        let mut tokens = vec!["<bos>".to_string(), "<eos>".to_string(), "<unk>".to_string()];
        tokens.extend(content.iter().map(|s| s.to_string()));
        Vocab::new(tokens, 0, 1)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::InvalidTokenId {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    pub fn lookup(&self, s: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == s)
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.lookup("<unk>")
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if id < self.tokens.len() {
            Ok(())
        } else {
            Err(Error::InvalidTokenId {
                id,
                vocab_size: self.tokens.len(),
            })
        }
    }
}

/// A prompt `x`; never contains EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        for &t in &tokens {
            vocab.check_id(t)?;
            if t == vocab.eos_id() {
                return Err(Error::domain("prompt must not contain eos"));
            }
        }
        Ok(Prompt { tokens })
    }

    pub fn empty() -> Self {
        Prompt { tokens: Vec::new() }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }
}

/// A generated response `y`. `terminated` distinguishes EOS-ended
/// trajectories from ones truncated at the length cap; truncated
/// trajectories stay in the probability space so enumeration sums to 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    tokens: Vec<TokenId>,
    terminated: bool,
}

impl Trajectory {
    pub fn new(tokens: Vec<TokenId>, terminated: bool, vocab: &Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::domain("trajectory must be nonempty"));
        }
        for &t in &tokens {
            vocab.check_id(t)?;
        }
        let eos_count = tokens.iter().filter(|&&t| t == vocab.eos_id()).count();
        if terminated {
            if *tokens.last().unwrap() != vocab.eos_id() || eos_count != 1 {
                return Err(Error::domain(
                    "terminated trajectory must end with its single eos",
                ));
            }
        } else if eos_count != 0 {
            return Err(Error::domain("truncated trajectory must not contain eos"));
        }
        Ok(Trajectory { tokens, terminated })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    /// Number of generated tokens, EOS included when present. This is the
    /// `|y|` used by length normalization.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel<S: Scalar> {
    vocab: Vocab,
    order: usize,
    logits: Vec<S>,
}

impl<S: Scalar> SeqModel<S> {
    /// All-zero logits, i.e. uniform next-token distributions everywhere.
    pub fn uniform(vocab: Vocab, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::domain("order must be positive"));
        }
        let n = vocab
            .size()
            .checked_pow(order as u32)
            .and_then(|c| c.checked_mul(vocab.size()))
            .ok_or_else(|| Error::domain("logits table too large"))?;
        Ok(SeqModel {
            vocab,
            order,
            logits: vec![S::zero(); n],
        })
    }

    pub fn from_logits(vocab: Vocab, order: usize, logits: Vec<S>) -> Result<Self> {
        let mut m = Self::uniform(vocab, order)?;
        if logits.len() != m.logits.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} logits, got {}",
                m.logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits table".into()));
        }
        m.logits = logits;
        Ok(m)
    }

    /// I.i.d. Gaussian logits; the standard way tests build random models.
    pub fn random(vocab: Vocab, order: usize, scale: f64, seed: u64) -> Result<Self> {
        let m = Self::uniform(vocab, order)?;
        m.perturb(S::from_f64_lossy(scale), seed)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn logits(&self) -> &[S] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [S] {
        &mut self.logits
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.vocab.size()
    }

    /// Dense index of the context row for an arbitrary-length token history.
    /// Only the last `order` tokens matter; shorter histories are left-padded
    /// with BOS.
    pub fn context_index(&self, history: &[TokenId]) -> Result<usize> {
        let v = self.vocab.size();
        let k = self.order;
        let mut idx = 0usize;
        for i in 0..k {
            // position i counts from the oldest of the k context slots
            let tok = if history.len() + i >= k {
                let t = history[history.len() + i - k];
                self.vocab.check_id(t)?;
                t
            } else {
                self.vocab.bos_id()
            };
            idx = idx * v + tok;
        }
        Ok(idx)
    }

    pub fn row(&self, ctx_idx: usize) -> &[S] {
        let v = self.vocab.size();
        &self.logits[ctx_idx * v..(ctx_idx + 1) * v]
    }

    /// Softmax of the context's logits row.
    pub fn next_token_dist(&self, history: &[TokenId]) -> Result<Vec<S>> {
        let idx = self.context_index(history)?;
        Ok(softmax(self.row(idx)))
    }

    /// Log-softmax of the context's logits row.
    pub fn next_token_logdist(&self, history: &[TokenId]) -> Result<Vec<S>> {
        let idx = self.context_index(history)?;
        Ok(log_softmax(self.row(idx)))
    }

    /// `log q(y | x)`: sum of per-step next-token log-probabilities over
    /// every generated token, EOS step included when terminated.
    pub fn seq_logprob(&self, x: &Prompt, y: &Trajectory) -> Result<S> {
        if y.is_empty() {
            return Err(Error::domain("cannot score an empty trajectory"));
        }
        let mut history: Vec<TokenId> = x.tokens().to_vec();
        let mut total = S::zero();
        for &tok in y.tokens() {
            let logdist = self.next_token_logdist(&history)?;
            self.vocab.check_id(tok)?;
            total += logdist[tok];
            history.push(tok);
        }
        Ok(total)
    }

    /// Temperature-1 ancestral sampling; stops at EOS or truncates at
    /// `max_len` tokens. Deterministic per seed.
    pub fn sample(&self, x: &Prompt, max_len: usize, seed: u64) -> Result<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with_rng(x, max_len, 1.0, &mut rng)
    }

    /// Ancestral sampling at a given temperature; `temperature == 0` is
    /// greedy argmax decoding.
    pub fn sample_with_rng(
        &self,
        x: &Prompt,
        max_len: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Trajectory> {
        if max_len == 0 {
            return Err(Error::domain("max_len must be at least 1"));
        }
        if temperature < 0.0 {
            return Err(Error::domain("temperature must be nonnegative"));
        }
        let mut history: Vec<TokenId> = x.tokens().to_vec();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let idx = self.context_index(&history)?;
            let tok = if temperature == 0.0 {
                argmax(self.row(idx))
            } else {
                let scaled: Vec<S> = self
                    .row(idx)
                    .iter()
                    .map(|&l| l / S::from_f64_lossy(temperature))
                    .collect();
                let probs = softmax(&scaled);
                let u: f64 = rng.gen::<f64>();
                sample_index(&probs, u)
            };
            out.push(tok);
            history.push(tok);
            if tok == self.vocab.eos_id() {
                return Trajectory::new(out, true, &self.vocab);
            }
        }
        Trajectory::new(out, false, &self.vocab)
    }

    /// Greedy (temperature-0) decode, used for evaluation.
    pub fn greedy_decode(&self, x: &Prompt, max_len: usize) -> Result<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.sample_with_rng(x, max_len, 0.0, &mut rng)
    }

    /// Exhaustively enumerate all trajectories up to `max_len` with their
    /// probabilities. Terminated and truncated trajectories together carry
    /// total mass 1.
    pub fn enumerate_trajectories(
        &self,
        x: &Prompt,
        max_len: usize,
        budget: u128,
    ) -> Result<Vec<(Trajectory, S)>> {
        let leaves = (self.vocab.size() as u128)
            .checked_pow(max_len as u32)
            .unwrap_or(u128::MAX);
        if leaves > budget {
            return Err(Error::BudgetExceeded {
                needed: leaves,
                budget,
            });
        }
        let mut out = Vec::new();
        let mut history: Vec<TokenId> = x.tokens().to_vec();
        let mut prefix: Vec<TokenId> = Vec::new();
        self.enumerate_rec(&mut history, &mut prefix, S::one(), max_len, &mut out)?;
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        history: &mut Vec<TokenId>,
        prefix: &mut Vec<TokenId>,
        prob: S,
        remaining: usize,
        out: &mut Vec<(Trajectory, S)>,
    ) -> Result<()> {
        let idx = self.context_index(history)?;
        let probs = softmax(self.row(idx));
        for (tok, &p) in probs.iter().enumerate() {
            prefix.push(tok);
            history.push(tok);
            let joint = prob * p;
            if tok == self.vocab.eos_id() {
                out.push((Trajectory::new(prefix.clone(), true, &self.vocab)?, joint));
            } else if remaining == 1 {
                out.push((Trajectory::new(prefix.clone(), false, &self.vocab)?, joint));
            } else {
                self.enumerate_rec(history, prefix, joint, remaining - 1, out)?;
            }
            history.pop();
            prefix.pop();
        }
        Ok(())
    }

    /// Add i.i.d. zero-mean Gaussian noise with standard deviation `scale`
    /// to every logit. Deterministic per seed.
    pub fn perturb(&self, scale: S, seed: u64) -> Result<Self> {
        if scale < S::zero() {
            return Err(Error::domain("perturbation scale must be nonnegative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        if scale == S::zero() {
            return Ok(out);
        }
        for l in &mut out.logits {
            let z: f64 = StandardNormal.sample(&mut rng);
            *l += scale * S::from_f64_lossy(z);
        }
        Ok(out)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.order == other.order
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            tokens: self.vocab.tokens().to_vec(),
            bos_id: self.vocab.bos_id(),
            eos_id: self.vocab.eos_id(),
            order: self.order,
            logits: self.logits.iter().map(|l| l.to_f64_lossy()).collect(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::domain(format!("serialize checkpoint: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::domain(format!(
                "unsupported checkpoint schema version {}",
                file.schema_version
            )));
        }
        let vocab = Vocab::new(file.tokens, file.bos_id, file.eos_id)?;
        SeqModel::from_logits(
            vocab,
            file.order,
            file.logits.into_iter().map(S::from_f64_lossy).collect(),
        )
    }
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    tokens: Vec<String>,
    bos_id: TokenId,
    eos_id: TokenId,
    order: usize,
    logits: Vec<f64>,
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: S = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let z: S = logits.iter().map(|&l| (l - m).exp()).sum();
    let log_z = z.ln() + m;
    logits.iter().map(|&l| l - log_z).collect()
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_index<S: Scalar>(probs: &[S], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
