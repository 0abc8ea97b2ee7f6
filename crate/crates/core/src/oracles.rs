//! Exact verification machinery for the theory behind the preference
//! distillation objective: the KL-regularized reward objective, its
//! partition function and closed-form optimal student, reward inversion,
//! soft Q/V tables with the Bellman backup, the telescoping identity, and
//! the per-step (Plackett-Luce) vs sequence-level (Bradley-Terry)
//! preference equivalence.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::num::{log_sum_exp, sigmoid, Scalar};
use crate::objectives::bt_preference;
use crate::seqmodel::{Prompt, SeqModel, TokenId, Trajectory, DEFAULT_ENUM_BUDGET};

/// Sequence-level rewards `r(x, y)` over an enumerated trajectory space
/// for one prompt.
#[derive(Debug, Clone)]
pub struct RewardTable<S: Scalar> {
    rewards: HashMap<Vec<TokenId>, S>,
}

impl<S: Scalar> RewardTable<S> {
    pub fn new() -> Self {
        RewardTable {
            rewards: HashMap::new(),
        }
    }

    /// Constant reward over the enumerated space of `model` at `x`.
    pub fn constant(
        model: &SeqModel<S>,
        x: &Prompt,
        max_len: usize,
        value: S,
    ) -> Result<Self> {
        let mut t = RewardTable::new();
        for (traj, _) in model.enumerate_trajectories(x, max_len, DEFAULT_ENUM_BUDGET)? {
            t.insert(&traj, value);
        }
        Ok(t)
    }

    /// Rewards drawn from a closure, usually a seeded hash of the
    /// trajectory in tests.
    pub fn from_fn(
        model: &SeqModel<S>,
        x: &Prompt,
        max_len: usize,
        mut f: impl FnMut(&Trajectory) -> S,
    ) -> Result<Self> {
        let mut t = RewardTable::new();
        for (traj, _) in model.enumerate_trajectories(x, max_len, DEFAULT_ENUM_BUDGET)? {
            let r = f(&traj);
            t.insert(&traj, r);
        }
        Ok(t)
    }

    pub fn insert(&mut self, traj: &Trajectory, reward: S) {
        self.rewards.insert(traj.tokens().to_vec(), reward);
    }

    pub fn get(&self, traj: &Trajectory) -> Result<S> {
        self.rewards
            .get(traj.tokens())
            .copied()
            .ok_or_else(|| Error::domain("reward table does not cover this trajectory"))
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

impl<S: Scalar> Default for RewardTable<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// A distribution over enumerated trajectories, kept in enumeration order.
pub type TrajectoryDist<S> = Vec<(Trajectory, S)>;

/// `E_q[r(x,y)] - β · reverse KLD(q ‖ p)`, computed exactly.
pub fn objective_value<S: Scalar>(
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    reward: &RewardTable<S>,
    beta: S,
    x: &Prompt,
    max_len: usize,
) -> Result<S> {
    let entries = student.enumerate_trajectories(x, max_len, DEFAULT_ENUM_BUDGET)?;
    let mut total = S::zero();
    for (traj, q) in entries {
        let r = reward.get(&traj)?;
        let log_q = student.seq_logprob(x, &traj)?;
        let log_p = teacher.seq_logprob(x, &traj)?;
        total += q * (r - beta * (log_q - log_p));
    }
    Ok(total)
}

/// Same objective for an explicit trajectory distribution instead of a
/// model, used by the optimality checks.
pub fn objective_value_of_dist<S: Scalar>(
    dist: &TrajectoryDist<S>,
    teacher: &SeqModel<S>,
    reward: &RewardTable<S>,
    beta: S,
    x: &Prompt,
) -> Result<S> {
    let mut total = S::zero();
    for (traj, q) in dist {
        if *q <= S::zero() {
            continue;
        }
        let r = reward.get(traj)?;
        let log_p = teacher.seq_logprob(x, traj)?;
        total += *q * (r - beta * (q.ln() - log_p));
    }
    Ok(total)
}

/// `Z(x) = Σ_y p(y|x) · exp(r(x,y)/β)`.
pub fn partition_z<S: Scalar>(
    teacher: &SeqModel<S>,
    reward: &RewardTable<S>,
    beta: S,
    x: &Prompt,
    max_len: usize,
) -> Result<S> {
    let entries = teacher.enumerate_trajectories(x, max_len, DEFAULT_ENUM_BUDGET)?;
    let mut z = S::zero();
    for (traj, p) in entries {
        z += p * (reward.get(&traj)? / beta).exp();
    }
    Ok(z)
}

/// Closed-form optimal student `q*(y|x) = p(y|x)·exp(r/β)/Z(x)` as an
/// explicit trajectory distribution.
pub fn optimal_student<S: Scalar>(
    teacher: &SeqModel<S>,
    reward: &RewardTable<S>,
    beta: S,
    x: &Prompt,
    max_len: usize,
) -> Result<TrajectoryDist<S>> {
    let z = partition_z(teacher, reward, beta, x, max_len)?;
    let entries = teacher.enumerate_trajectories(x, max_len, DEFAULT_ENUM_BUDGET)?;
    Ok(entries
        .into_iter()
        .map(|(traj, p)| {
            let q = p * (reward.get(&traj).unwrap() / beta).exp() / z;
            (traj, q)
        })
        .collect())
}

/// Invert the optimal policy back into its reward:
/// `r*(x,y) = β·log(q*/p) + β·log Z(x)`.
pub fn reward_from_policies<S: Scalar>(
    q_star: &TrajectoryDist<S>,
    teacher: &SeqModel<S>,
    beta: S,
    z: S,
    x: &Prompt,
) -> Result<RewardTable<S>> {
    let mut table = RewardTable::new();
    for (traj, q) in q_star {
        if *q <= S::zero() {
            return Err(Error::domain(
                "reward inversion requires strictly positive optimal mass",
            ));
        }
        let log_p = teacher.seq_logprob(x, traj)?;
        let r = beta * (q.ln() - log_p) + beta * z.ln();
        table.insert(traj, r);
    }
    Ok(table)
}

/// Per-step rewards `r(s_t, a_t)` keyed by the generated suffix of the
/// state and the action token. States are identified by the tokens
/// generated so far (the prompt is fixed per table).
#[derive(Debug, Clone, Default)]
pub struct StepReward<S: Scalar> {
    rewards: HashMap<(Vec<TokenId>, TokenId), S>,
}

impl<S: Scalar> StepReward<S> {
    pub fn zero() -> Self {
        StepReward {
            rewards: HashMap::new(),
        }
    }

    pub fn insert(&mut self, state_suffix: &[TokenId], action: TokenId, reward: S) {
        self.rewards
            .insert((state_suffix.to_vec(), action), reward);
    }

    pub fn get(&self, state_suffix: &[TokenId], action: TokenId) -> S {
        self.rewards
            .get(&(state_suffix.to_vec(), action))
            .copied()
            .unwrap_or_else(S::zero)
    }

    /// Sum of per-step rewards along a trajectory, i.e. the sequence-level
    /// reward this table induces.
    pub fn trajectory_sum(&self, traj: &Trajectory) -> S {
        let mut total = S::zero();
        for (t, &tok) in traj.tokens().iter().enumerate() {
            total += self.get(&traj.tokens()[..t], tok);
        }
        total
    }
}

/// Soft Q and V tables for the token-append decision process, built by
/// backward induction. `V(s) = 0` at terminal states (EOS emitted or the
/// length cap reached); elsewhere `V(s) = β·log Σ_a exp(Q(s,a)/β)`, the
/// unique closure under which `exp((Q - V)/β)` is a normalized policy.
#[derive(Debug, Clone)]
pub struct QTable<S: Scalar> {
    q: HashMap<(Vec<TokenId>, TokenId), S>,
    v: HashMap<Vec<TokenId>, S>,
    beta: S,
    /// Fixed at 1; the Bellman backup below carries no discount.
    pub gamma: S,
    max_len: usize,
}

impl<S: Scalar> QTable<S> {
    pub fn beta(&self) -> S {
        self.beta
    }

    pub fn q(&self, state_suffix: &[TokenId], action: TokenId) -> Result<S> {
        self.q
            .get(&(state_suffix.to_vec(), action))
            .copied()
            .ok_or_else(|| Error::domain("state/action outside the enumerated tree"))
    }

    pub fn v(&self, state_suffix: &[TokenId]) -> Result<S> {
        self.v
            .get(state_suffix)
            .copied()
            .ok_or_else(|| Error::domain("state outside the enumerated tree"))
    }

    /// Induced policy `exp((Q(s,a) - V(s)) / β)`.
    pub fn policy_prob(&self, state_suffix: &[TokenId], action: TokenId) -> Result<S> {
        Ok(((self.q(state_suffix, action)? - self.v(state_suffix)?) / self.beta).exp())
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }
}

/// Backward induction of `Q*(s,a) = r(s,a) + β·log p(a|s) + V*(s·a)` over
/// the full depth-`max_len` trajectory tree rooted at the prompt.
pub fn build_q_table<S: Scalar>(
    teacher: &SeqModel<S>,
    per_step_reward: &StepReward<S>,
    beta: S,
    x: &Prompt,
    max_len: usize,
) -> Result<QTable<S>> {
    if beta <= S::zero() {
        return Err(Error::domain("beta must be positive"));
    }
    let leaves = (teacher.vocab().size() as u128)
        .checked_pow(max_len as u32)
        .unwrap_or(u128::MAX);
    if leaves > DEFAULT_ENUM_BUDGET {
        return Err(Error::BudgetExceeded {
            needed: leaves,
            budget: DEFAULT_ENUM_BUDGET,
        });
    }
    let mut table = QTable {
        q: HashMap::new(),
        v: HashMap::new(),
        beta,
        gamma: S::one(),
        max_len,
    };
    build_state(teacher, per_step_reward, beta, x, max_len, &mut Vec::new(), &mut table)?;
    Ok(table)
}

fn build_state<S: Scalar>(
    teacher: &SeqModel<S>,
    per_step_reward: &StepReward<S>,
    beta: S,
    x: &Prompt,
    max_len: usize,
    suffix: &mut Vec<TokenId>,
    table: &mut QTable<S>,
) -> Result<S> {
    // terminal states carry V = 0
    let terminal = suffix.last() == Some(&teacher.vocab().eos_id()) || suffix.len() >= max_len;
    if terminal {
        table.v.insert(suffix.clone(), S::zero());
        return Ok(S::zero());
    }
    if let Some(&v) = table.v.get(suffix) {
        return Ok(v);
    }
    let mut history: Vec<TokenId> = x.tokens().to_vec();
    history.extend_from_slice(suffix);
    let log_p = teacher.next_token_logdist(&history)?;
    let mut q_over_beta = Vec::with_capacity(teacher.vocab().size());
    for a in 0..teacher.vocab().size() {
        suffix.push(a);
        let v_next = build_state(teacher, per_step_reward, beta, x, max_len, suffix, table)?;
        suffix.pop();
        let q = per_step_reward.get(suffix, a) + beta * log_p[a] + v_next;
        table.q.insert((suffix.clone(), a), q);
        q_over_beta.push(q / beta);
    }
    let v = beta * log_sum_exp(&q_over_beta);
    table.v.insert(suffix.clone(), v);
    Ok(v)
}

/// Residual of the telescoped Bellman identity along one EOS-terminated
/// trajectory:
/// `Σ_t r(s_t,a_t) - V*(s_0) - β·Σ_t log(q(a_t|s_t)/p(a_t|s_t))`.
pub fn telescoping_check<S: Scalar>(
    teacher: &SeqModel<S>,
    q_table: &QTable<S>,
    x: &Prompt,
    trajectory: &Trajectory,
    per_step_reward: &StepReward<S>,
) -> Result<S> {
    if !trajectory.terminated() {
        return Err(Error::domain(
            "telescoping identity requires an EOS-terminated trajectory",
        ));
    }
    let beta = q_table.beta();
    let mut reward_sum = S::zero();
    let mut log_ratio_sum = S::zero();
    let mut history: Vec<TokenId> = x.tokens().to_vec();
    for (t, &tok) in trajectory.tokens().iter().enumerate() {
        let suffix = &trajectory.tokens()[..t];
        reward_sum += per_step_reward.get(suffix, tok);
        let log_p = teacher.next_token_logdist(&history)?;
        let q = q_table.policy_prob(suffix, tok)?;
        log_ratio_sum += q.ln() - log_p[tok];
        history.push(tok);
    }
    let v0 = q_table.v(&[])?;
    Ok(reward_sum - v0 - beta * log_ratio_sum)
}

/// Per-step (Plackett-Luce) vs whole-sequence (Bradley-Terry) preference
/// probability for a pair of terminated trajectories. Returns
/// `(per_step, sequence_level, |difference|)`.
pub fn pl_bt_equivalence<S: Scalar>(
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    beta: S,
    x: &Prompt,
    y_teacher: &Trajectory,
    y_student: &Trajectory,
) -> Result<(S, S, S)> {
    if !y_teacher.terminated() || !y_student.terminated() {
        return Err(Error::domain(
            "preference equivalence requires terminated trajectories",
        ));
    }
    let per_step_reward = |y: &Trajectory| -> Result<S> {
        let mut total = S::zero();
        let mut history: Vec<TokenId> = x.tokens().to_vec();
        for &tok in y.tokens() {
            let log_q = student.next_token_logdist(&history)?;
            let log_p = teacher.next_token_logdist(&history)?;
            total += beta * (log_q[tok] - log_p[tok]);
            history.push(tok);
        }
        Ok(total)
    };
    let lhs = sigmoid(per_step_reward(y_teacher)? - per_step_reward(y_student)?);
    let r_t = beta * (student.seq_logprob(x, y_teacher)? - teacher.seq_logprob(x, y_teacher)?);
    let r_s = beta * (student.seq_logprob(x, y_student)? - teacher.seq_logprob(x, y_student)?);
    let rhs = bt_preference(r_t, r_s);
    Ok((lhs, rhs, (lhs - rhs).abs()))
}
