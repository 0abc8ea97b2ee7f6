//! Generation-quality metrics (LCS-F1 Rouge-L, exact match), length-split
//! evaluation reports, the noise-perturbation experiment, metrics-CSV
//! export, and an optional external judge client.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::objectives::{implicit_reward, reverse_kld};
use crate::seqmodel::SeqModel;
use crate::trainer::MetricsRow;

/// Ascending reference-length boundaries; `(30, 70)` splits into
/// `(0,30)`, `(30,70)`, `(70,inf)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthSplit {
    boundaries: Vec<usize>,
}

impl LengthSplit {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0] >= w[1]) || boundaries.first() == Some(&0) {
            return Err(Error::domain(
                "length-split boundaries must be strictly ascending positive integers",
            ));
        }
        Ok(LengthSplit { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn n_buckets(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn bucket_of(&self, len: usize) -> usize {
        self.boundaries.iter().filter(|&&b| len >= b).count()
    }

    pub fn bucket_label(&self, i: usize) -> String {
        let lo = if i == 0 { 0 } else { self.boundaries[i - 1] };
        match self.boundaries.get(i) {
            Some(hi) => format!("({lo},{hi})"),
            None => format!("({lo},inf)"),
        }
    }
}

impl Default for LengthSplit {
    fn default() -> Self {
        LengthSplit {
            boundaries: vec![30, 70],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub label: String,
    pub rouge_l_mean: Option<f64>,
    pub exact_match_pct: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge_l_mean: f64,
    pub exact_match_pct: f64,
    pub n_examples: usize,
    pub splits: Vec<SplitReport>,
}

impl EvalReport {
    /// One aggregate block plus one block per split.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("aggregate\n");
        out.push_str(&format!("  n            {}\n", self.n_examples));
        out.push_str(&format!("  rouge_l      {:.6}\n", self.rouge_l_mean));
        out.push_str(&format!("  exact_match  {:.4}\n", self.exact_match_pct));
        for s in &self.splits {
            out.push_str(&format!("split {}\n", s.label));
            out.push_str(&format!("  n            {}\n", s.n));
            match (s.rouge_l_mean, s.exact_match_pct) {
                (Some(r), Some(e)) => {
                    out.push_str(&format!("  rouge_l      {r:.6}\n"));
                    out.push_str(&format!("  exact_match  {e:.4}\n"));
                }
                _ => {
                    out.push_str("  rouge_l      null\n");
                    out.push_str("  exact_match  null\n");
                }
            }
        }
        out
    }
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 Rouge-L over token sequences.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::domain("rouge_l requires a nonempty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 iff the two texts are equal after trimming and collapsing internal
/// whitespace; case-sensitive.
pub fn exact_match(candidate: &str, reference: &str) -> u8 {
    u8::from(normalize_ws(candidate) == normalize_ws(reference))
}

fn decode_text<S: Scalar>(model: &SeqModel<S>, prompt: &crate::seqmodel::Prompt, max_len: usize) -> Result<Vec<String>> {
    let y = model.greedy_decode(prompt, max_len)?;
    let mut words = Vec::new();
    for &t in y.tokens() {
        if t == model.vocab().eos_id() {
            break;
        }
        words.push(model.vocab().token(t)?.to_string());
    }
    Ok(words)
}

/// Greedy-decode the model on every test example and aggregate Rouge-L and
/// exact match overall and per reference-length bucket.
pub fn evaluate<S: Scalar>(
    model: &SeqModel<S>,
    test_set: &Corpus,
    split: &LengthSplit,
    max_len: usize,
    _rng_seed: u64,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::domain("evaluate requires a nonempty test set"));
    }
    let n_buckets = split.n_buckets();
    let mut bucket_rouge = vec![0.0f64; n_buckets];
    let mut bucket_em = vec![0usize; n_buckets];
    let mut bucket_n = vec![0usize; n_buckets];
    let mut total_rouge = 0.0;
    let mut total_em = 0usize;
    for (ex, tok) in test_set.examples().iter().zip(test_set.tokenized()) {
        let candidate = decode_text(model, &tok.prompt, max_len)?;
        let reference: Vec<String> = ex
            .output
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        let r = rouge_l(&candidate, &reference)?;
        let em = exact_match(&candidate.join(" "), &ex.output);
        let bucket = split.bucket_of(reference.len());
        bucket_rouge[bucket] += r;
        bucket_em[bucket] += em as usize;
        bucket_n[bucket] += 1;
        total_rouge += r;
        total_em += em as usize;
    }
    let n = test_set.len();
    let splits = (0..n_buckets)
        .map(|i| SplitReport {
            label: split.bucket_label(i),
            rouge_l_mean: (bucket_n[i] > 0).then(|| bucket_rouge[i] / bucket_n[i] as f64),
            exact_match_pct: (bucket_n[i] > 0)
                .then(|| 100.0 * bucket_em[i] as f64 / bucket_n[i] as f64),
            n: bucket_n[i],
        })
        .collect();
    Ok(EvalReport {
        rouge_l_mean: total_rouge / n as f64,
        exact_match_pct: 100.0 * total_em as f64 / n as f64,
        n_examples: n,
        splits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepRow {
    pub scale: f64,
    pub seed: u64,
    pub rkld: f64,
    pub mean_implicit_reward: f64,
    pub rouge_l: f64,
}

/// Perturb the base model at each scale and record reverse KLD to the
/// teacher, mean implicit reward on the eval references, and Rouge-L.
pub fn noise_sweep<S: Scalar>(
    base_model: &SeqModel<S>,
    teacher: &SeqModel<S>,
    eval_set: &Corpus,
    scales: &[f64],
    n_per_scale: usize,
    beta: S,
    rng_seed: u64,
    max_len: usize,
) -> Result<Vec<NoiseSweepRow>> {
    if scales.iter().any(|&s| s < 0.0) {
        return Err(Error::domain("noise scales must be nonnegative"));
    }
    let mut rows = Vec::with_capacity(scales.len() * n_per_scale);
    for (si, &scale) in scales.iter().enumerate() {
        for j in 0..n_per_scale {
            let seed = rng_seed
                .wrapping_add(1_000_003u64.wrapping_mul(si as u64))
                .wrapping_add(j as u64);
            let perturbed = base_model.perturb(S::from_f64_lossy(scale), seed)?;
            let mut rkld_sum = 0.0;
            let mut reward_sum = 0.0;
            for tok in eval_set.tokenized() {
                rkld_sum += reverse_kld(&perturbed, teacher, &tok.prompt, max_len)?
                    .to_f64_lossy();
                reward_sum +=
                    implicit_reward(&perturbed, teacher, &tok.prompt, &tok.response, beta)?
                        .to_f64_lossy();
            }
            let n = eval_set.len().max(1) as f64;
            let report = evaluate(&perturbed, eval_set, &LengthSplit::default(), max_len, 0)?;
            rows.push(NoiseSweepRow {
                scale,
                seed,
                rkld: rkld_sum / n,
                mean_implicit_reward: reward_sum / n,
                rouge_l: report.rouge_l_mean,
            });
        }
    }
    Ok(rows)
}

pub fn write_noise_sweep_csv(rows: &[NoiseSweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("scale,seed,rkld,mean_implicit_reward,rouge_l\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scale, r.seed, r.rkld, r.mean_implicit_reward, r.rouge_l
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the training metrics stream as CSV, schema-identical to the
/// trainer's per-epoch records.
pub fn export_curves(metrics: &[MetricsRow], path: &Path) -> Result<()> {
    if metrics.is_empty() {
        return Err(Error::domain("export_curves requires at least one row"));
    }
    crate::trainer::write_metrics_csv(metrics, path)
}

#[derive(Debug, Clone, Default)]
pub struct JudgeConfig {
    /// Base URL of the judge endpoint; `None` disables judging.
    pub base_url: Option<String>,
    pub timeout: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JudgeOutcome {
    Score(f64),
    Unavailable { reason: String },
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    prompt: &'a str,
    candidate: &'a str,
    reference: &'a str,
}

#[derive(Deserialize)]
struct JudgeResponse {
    score: f64,
}

/// Ask an external judge to score a candidate against a reference. Never
/// fails the pipeline: any transport or parse problem comes back as
/// `Unavailable` with the reason logged.
pub fn judge_client(
    cfg: &JudgeConfig,
    prompt: &str,
    candidate: &str,
    reference: &str,
) -> JudgeOutcome {
    let Some(base_url) = &cfg.base_url else {
        return JudgeOutcome::Unavailable {
            reason: "no judge endpoint configured".into(),
        };
    };
    let client = match reqwest::blocking::Client::builder()
        .timeout(cfg.timeout.unwrap_or(Duration::from_secs(10)))
        .build()
    {
        Ok(c) => c,
        Err(e) => {
            let reason = format!("client build failed: {e}");
            log::warn!("judge unavailable: {reason}");
            return JudgeOutcome::Unavailable { reason };
        }
    };
    let mut req = client.post(format!("{}/judge", base_url.trim_end_matches('/')));
    if let Ok(token) = std::env::var("DPKD_JUDGE_TOKEN") {
        req = req.bearer_auth(token);
    }
    let resp = req.json(&JudgeRequest {
        prompt,
        candidate,
        reference,
    });
    match resp.send() {
        Ok(r) => match r.json::<JudgeResponse>() {
            Ok(body) => JudgeOutcome::Score(body.score),
            Err(e) => {
                let reason = format!("malformed judge reply: {e}");
                log::warn!("judge unavailable: {reason}");
                JudgeOutcome::Unavailable { reason }
            }
        },
        Err(e) => {
            let reason = format!("judge request failed: {e}");
            log::warn!("judge unavailable: {reason}");
            JudgeOutcome::Unavailable { reason }
        }
    }
}
