//! Scalar objectives: the preference distillation loss (plain and
//! length-normalized), implicit rewards, Bradley-Terry probabilities,
//! exact sequence-level forward/reverse KLD, the language-modeling
//! regularizer, and the IPO/CPO/SimPO preference variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{log_sigmoid, sigmoid, Scalar};
use crate::seqmodel::{Prompt, SeqModel, Trajectory, DEFAULT_ENUM_BUDGET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dpkd,
    Ipo,
    Cpo,
    Simpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpkdConfig<S: Scalar> {
    /// Reward temperature β.
    pub beta: S,
    /// Weight λ on the language-modeling regularizer.
    pub lambda: S,
    /// Replace each trajectory's β by β/|y|.
    pub length_norm: bool,
    pub variant: Variant,
    /// IPO target spread τ.
    pub tau: S,
    /// SimPO margin γ.
    pub gamma_margin: S,
    /// The published CPO form contains a self-ratio q(y_t)/q(y_t); `true`
    /// keeps it verbatim, `false` substitutes q(y_t)/q(y_s).
    pub cpo_literal: bool,
}

impl<S: Scalar> Default for DpkdConfig<S> {
    fn default() -> Self {
        DpkdConfig {
            beta: S::one(),
            lambda: S::from_f64_lossy(0.1),
            length_norm: true,
            variant: Variant::Dpkd,
            tau: S::from_f64_lossy(0.5),
            gamma_margin: S::one(),
            cpo_literal: true,
        }
    }
}

impl<S: Scalar> DpkdConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= S::zero() {
            return Err(Error::domain("beta must be positive"));
        }
        if self.lambda < S::zero() {
            return Err(Error::domain("lambda must be nonnegative"));
        }
        if self.tau <= S::zero() {
            return Err(Error::domain("tau must be positive"));
        }
        if self.gamma_margin < S::zero() {
            return Err(Error::domain("gamma_margin must be nonnegative"));
        }
        Ok(())
    }
}

/// One preference unit: a prompt with the teacher's and the student's
/// sampled responses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub x: Prompt,
    pub y_teacher: Trajectory,
    pub y_student: Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<S: Scalar> {
    pub kd_loss: S,
    pub lm_loss: S,
    pub total: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KldDirection {
    Forward,
    Reverse,
}

/// `σ(r1 - r2)`: probability of preferring the first item under the
/// Bradley-Terry model.
pub fn bt_preference<S: Scalar>(r1: S, r2: S) -> S {
    sigmoid(r1 - r2)
}

/// `β · (log q(y|x) - log p(y|x))`, the reward the student/teacher pair
/// implicitly defines (up to the per-prompt log-partition constant).
pub fn implicit_reward<S: Scalar>(
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    x: &Prompt,
    y: &Trajectory,
    beta: S,
) -> Result<S> {
    if beta <= S::zero() {
        return Err(Error::domain("beta must be positive"));
    }
    Ok(beta * (student.seq_logprob(x, y)? - teacher.seq_logprob(x, y)?))
}

/// Probability that the teacher's response is preferred over the student's
/// under the implicit-reward Bradley-Terry model.
pub fn dpkd_preference_prob<S: Scalar>(
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    x: &Prompt,
    y_teacher: &Trajectory,
    y_student: &Trajectory,
    beta: S,
) -> Result<S> {
    let r_t = implicit_reward(student, teacher, x, y_teacher, beta)?;
    let r_s = implicit_reward(student, teacher, x, y_student, beta)?;
    Ok(bt_preference(r_t, r_s))
}

/// Per-pair inner term of the preference loss: the teacher-minus-student
/// difference of (possibly length-normalized) β-scaled log ratios.
pub fn pair_inner_term<S: Scalar>(
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    pair: &PairExample,
    beta: S,
    length_norm: bool,
) -> Result<S> {
    let beta_for = |y: &Trajectory| {
        if length_norm {
            beta / S::from_usize(y.len()).unwrap()
        } else {
            beta
        }
    };
    let ratio_t = student.seq_logprob(&pair.x, &pair.y_teacher)?
        - teacher.seq_logprob(&pair.x, &pair.y_teacher)?;
    let ratio_s = student.seq_logprob(&pair.x, &pair.y_student)?
        - teacher.seq_logprob(&pair.x, &pair.y_student)?;
    Ok(beta_for(&pair.y_teacher) * ratio_t - beta_for(&pair.y_student) * ratio_s)
}

/// Mean over the batch of `-log σ(inner term)`. Equals `ln 2` when the
/// student and teacher coincide.
pub fn dpkd_loss<S: Scalar>(
    batch: &[PairExample],
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    cfg: &DpkdConfig<S>,
) -> Result<S> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::domain("dpkd_loss requires a nonempty batch"));
    }
    let mut total = S::zero();
    for pair in batch {
        let u = pair_inner_term(student, teacher, pair, cfg.beta, cfg.length_norm)?;
        total += -log_sigmoid(u);
    }
    Ok(total / S::from_usize(batch.len()).unwrap())
}

/// Per-token mean negative log-likelihood of the student on a corpus batch.
pub fn lm_loss<S: Scalar>(
    student: &SeqModel<S>,
    corpus_batch: &[(Prompt, Trajectory)],
) -> Result<S> {
    if corpus_batch.is_empty() {
        return Err(Error::domain("lm_loss requires a nonempty batch"));
    }
    let mut total = S::zero();
    for (x, y) in corpus_batch {
        let lp = student.seq_logprob(x, y)?;
        total += -lp / S::from_usize(y.len()).unwrap();
    }
    Ok(total / S::from_usize(corpus_batch.len()).unwrap())
}

/// `L = L_kd + λ · L_pt` with the components reported separately.
pub fn total_loss<S: Scalar>(
    batch: &[PairExample],
    corpus_batch: &[(Prompt, Trajectory)],
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    cfg: &DpkdConfig<S>,
) -> Result<LossBreakdown<S>> {
    let kd = match cfg.variant {
        Variant::Dpkd => dpkd_loss(batch, student, teacher, cfg)?,
        _ => variant_loss(batch, student, teacher, cfg)?,
    };
    let lm = lm_loss(student, corpus_batch)?;
    Ok(LossBreakdown {
        kd_loss: kd,
        lm_loss: lm,
        total: kd + cfg.lambda * lm,
    })
}

/// Exact sequence-level KLD between student and teacher by trajectory
/// enumeration. Forward is expectation under the teacher, reverse under
/// the student.
pub fn sequence_kld<S: Scalar>(
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    x: &Prompt,
    max_len: usize,
    direction: KldDirection,
) -> Result<S> {
    if !student.same_shape(teacher) {
        return Err(Error::VocabMismatch);
    }
    let entries = match direction {
        KldDirection::Forward => teacher.enumerate_trajectories(x, max_len, DEFAULT_ENUM_BUDGET)?,
        KldDirection::Reverse => student.enumerate_trajectories(x, max_len, DEFAULT_ENUM_BUDGET)?,
    };
    let mut kld = S::zero();
    for (traj, p) in entries {
        let log_p = teacher.seq_logprob(x, &traj)?;
        let log_q = student.seq_logprob(x, &traj)?;
        match direction {
            KldDirection::Forward => kld += p * (log_p - log_q),
            KldDirection::Reverse => kld += p * (log_q - log_p),
        }
    }
    Ok(kld)
}

pub fn forward_kld<S: Scalar>(
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    x: &Prompt,
    max_len: usize,
) -> Result<S> {
    sequence_kld(student, teacher, x, max_len, KldDirection::Forward)
}

pub fn reverse_kld<S: Scalar>(
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    x: &Prompt,
    max_len: usize,
) -> Result<S> {
    sequence_kld(student, teacher, x, max_len, KldDirection::Reverse)
}

/// KLD between the two models' first-step next-token distributions,
/// averaged over prompts.
pub fn first_token_divergence<S: Scalar>(
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    prompts: &[Prompt],
    direction: KldDirection,
) -> Result<S> {
    if prompts.is_empty() {
        return Err(Error::domain("first_token_divergence requires prompts"));
    }
    let mut total = S::zero();
    for x in prompts {
        let log_q = student.next_token_logdist(x.tokens())?;
        let log_p = teacher.next_token_logdist(x.tokens())?;
        let mut kld = S::zero();
        for v in 0..student.vocab().size() {
            match direction {
                KldDirection::Forward => kld += log_p[v].exp() * (log_p[v] - log_q[v]),
                KldDirection::Reverse => kld += log_q[v].exp() * (log_q[v] - log_p[v]),
            }
        }
        total += kld;
    }
    Ok(total / S::from_usize(prompts.len()).unwrap())
}

/// The IPO/CPO/SimPO preference objectives, implemented exactly as
/// published (see `DpkdConfig::cpo_literal` for the CPO self-ratio).
pub fn variant_loss<S: Scalar>(
    batch: &[PairExample],
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    cfg: &DpkdConfig<S>,
) -> Result<S> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::domain("variant_loss requires a nonempty batch"));
    }
    let n = S::from_usize(batch.len()).unwrap();
    let mut total = S::zero();
    for pair in batch {
        let log_q_t = student.seq_logprob(&pair.x, &pair.y_teacher)?;
        let log_q_s = student.seq_logprob(&pair.x, &pair.y_student)?;
        let log_p_t = teacher.seq_logprob(&pair.x, &pair.y_teacher)?;
        let log_p_s = teacher.seq_logprob(&pair.x, &pair.y_student)?;
        let term = match cfg.variant {
            Variant::Dpkd => {
                let u = pair_inner_term(student, teacher, pair, cfg.beta, cfg.length_norm)?;
                -log_sigmoid(u)
            }
            Variant::Simpo => {
                let len_t = S::from_usize(pair.y_teacher.len()).unwrap();
                let len_s = S::from_usize(pair.y_student.len()).unwrap();
                let u = cfg.beta / len_t * log_q_t - cfg.beta / len_s * log_q_s - cfg.gamma_margin;
                -log_sigmoid(u)
            }
            Variant::Cpo => {
                let log_ratio = if cfg.cpo_literal {
                    S::zero() // q(y_t)/q(y_t) as printed
                } else {
                    log_q_t - log_q_s
                };
                -(log_sigmoid(cfg.beta * log_ratio) - log_q_t)
            }
            Variant::Ipo => {
                let d = (log_q_t - log_p_t)
                    - (log_q_s - log_p_s)
                    - S::one() / (S::from_f64_lossy(2.0) * cfg.tau);
                d * d
            }
        };
        total += term;
    }
    Ok(total / n)
}
