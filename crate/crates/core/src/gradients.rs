//! Analytic gradient of the preference distillation loss with respect to
//! the student's logits table, and a central-finite-difference checker
//! usable against any scalar objective of the student.

use crate::error::{Error, Result};
use crate::num::{sigmoid, Scalar};
use crate::objectives::{pair_inner_term, DpkdConfig, PairExample, Variant};
use crate::seqmodel::{softmax, Prompt, SeqModel, TokenId, Trajectory};

/// Same index structure as the model's logits table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable<S: Scalar> {
    vocab_size: usize,
    values: Vec<S>,
}

impl<S: Scalar> GradTable<S> {
    pub fn zeros_like(model: &SeqModel<S>) -> Self {
        GradTable {
            vocab_size: model.vocab().size(),
            values: vec![S::zero(); model.logits().len()],
        }
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn get(&self, ctx: usize, token: TokenId) -> S {
        self.values[ctx * self.vocab_size + token]
    }

    pub fn scale(&mut self, factor: S) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn add_scaled(&mut self, other: &GradTable<S>, factor: S) -> Result<()> {
        if self.values.len() != other.values.len() || self.vocab_size != other.vocab_size {
            return Err(Error::ShapeMismatch("gradient tables differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * *b;
        }
        Ok(())
    }

    /// Row sums over the vocabulary, one per context.
    pub fn row_sums(&self) -> Vec<S> {
        self.values
            .chunks(self.vocab_size)
            .map(|row| row.iter().cloned().sum())
            .collect()
    }
}

/// Accumulate `factor * ∇_θ log q(y | x)` into `grad`. Each step
/// contributes the usual softmax score: indicator minus probability on the
/// step's context row.
pub fn accumulate_logprob_grad<S: Scalar>(
    model: &SeqModel<S>,
    x: &Prompt,
    y: &Trajectory,
    factor: S,
    grad: &mut GradTable<S>,
) -> Result<()> {
    let v = model.vocab().size();
    let mut history: Vec<TokenId> = x.tokens().to_vec();
    for &tok in y.tokens() {
        model.vocab().check_id(tok)?;
        let ctx = model.context_index(&history)?;
        let probs = softmax(model.row(ctx));
        for (t, &p) in probs.iter().enumerate() {
            let indicator = if t == tok { S::one() } else { S::zero() };
            grad.values[ctx * v + t] += factor * (indicator - p);
        }
        history.push(tok);
    }
    Ok(())
}

/// Analytic gradient of the batch-mean preference loss with respect to the
/// student logits. The per-pair weight is `β·(1 - preference probability)`
/// evaluated at the (possibly length-normalized) inner term; with length
/// normalization on, each trajectory's β is divided by its length inside
/// both the inner term and its score contribution.
pub fn dpkd_grad<S: Scalar>(
    batch: &[PairExample],
    student: &SeqModel<S>,
    teacher: &SeqModel<S>,
    cfg: &DpkdConfig<S>,
) -> Result<GradTable<S>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::domain("dpkd_grad requires a nonempty batch"));
    }
    if cfg.variant != Variant::Dpkd {
        return Err(Error::domain(
            "analytic gradient is only defined for the dpkd variant",
        ));
    }
    let mut grad = GradTable::zeros_like(student);
    let inv_n = S::one() / S::from_usize(batch.len()).unwrap();
    for pair in batch {
        let u = pair_inner_term(student, teacher, pair, cfg.beta, cfg.length_norm)?;
        // d/du of -log sigma(u) is -(1 - sigma(u)) = -sigma(-u)
        let weight = sigmoid(-u) * inv_n;
        let (beta_t, beta_s) = if cfg.length_norm {
            (
                cfg.beta / S::from_usize(pair.y_teacher.len()).unwrap(),
                cfg.beta / S::from_usize(pair.y_student.len()).unwrap(),
            )
        } else {
            (cfg.beta, cfg.beta)
        };
        accumulate_logprob_grad(student, &pair.x, &pair.y_teacher, -weight * beta_t, &mut grad)?;
        accumulate_logprob_grad(student, &pair.x, &pair.y_student, weight * beta_s, &mut grad)?;
    }
    Ok(grad)
}

/// Central finite differences of an arbitrary scalar objective of the
/// student logits: `(f(θ+h) - f(θ-h)) / (2h)` per coordinate.
pub fn numeric_grad<S, F>(objective: F, student: &SeqModel<S>, h: S) -> Result<GradTable<S>>
where
    S: Scalar,
    F: Fn(&SeqModel<S>) -> Result<S>,
{
    if h <= S::zero() {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let mut probe = student.clone();
    let mut grad = GradTable::zeros_like(student);
    let two_h = S::from_f64_lossy(2.0) * h;
    for i in 0..student.logits().len() {
        let orig = probe.logits()[i];
        probe.logits_mut()[i] = orig + h;
        let plus = objective(&probe)?;
        probe.logits_mut()[i] = orig - h;
        let minus = objective(&probe)?;
        probe.logits_mut()[i] = orig;
        let d = (plus - minus) / two_h;
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("numeric gradient coordinate {i}")));
        }
        grad.values[i] = d;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport<S: Scalar> {
    pub max_abs_err: S,
    pub max_rel_err: S,
    /// (context index, token id) of the worst relative error.
    pub worst: (usize, TokenId),
}

/// Compare an analytic and a numeric gradient table. Relative error uses
/// `max(|a|, |n|, 1e-8)` as denominator.
pub fn grad_check<S: Scalar>(
    analytic: &GradTable<S>,
    numeric: &GradTable<S>,
) -> Result<GradCheckReport<S>> {
    if analytic.values.len() != numeric.values.len() || analytic.vocab_size != numeric.vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "analytic {} vs numeric {} entries",
            analytic.values.len(),
            numeric.values.len()
        )));
    }
    let floor = S::from_f64_lossy(1e-8);
    let mut report = GradCheckReport {
        max_abs_err: S::zero(),
        max_rel_err: S::zero(),
        worst: (0, 0),
    };
    for (i, (&a, &n)) in analytic.values.iter().zip(&numeric.values).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        if abs > report.max_abs_err {
            report.max_abs_err = abs;
        }
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (i / analytic.vocab_size, i % analytic.vocab_size);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{dpkd_loss, dpkd_preference_prob, variant_loss};
    use crate::seqmodel::Vocab;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n_content: usize) -> Vocab {
        let names: Vec<String> = (0..n_content).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        Vocab::with_content(&refs).unwrap()
    }

    fn random_batch(
        teacher: &SeqModel<f64>,
        student: &SeqModel<f64>,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<PairExample> {
        let v = teacher.vocab().clone();
        (0..n)
            .map(|_| {
                let plen = rng.gen_range(0..2);
                let x_tokens: Vec<usize> = (0..plen).map(|_| rng.gen_range(3..v.size())).collect();
                let x = Prompt::new(x_tokens, &v).unwrap();
                PairExample {
                    x: x.clone(),
                    y_teacher: teacher.sample_with_rng(&x, 5, 1.0, rng).unwrap(),
                    y_student: student.sample_with_rng(&x, 5, 1.0, rng).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn numeric_grad_trivial_cases() {
        let m = SeqModel::<f64>::random(vocab(1), 1, 1.0, 1).unwrap();
        // constant objective
        let g = numeric_grad(|_| Ok(3.0), &m, 1e-4).unwrap();
        assert!(g.values().iter().all(|v| v.abs() < 1e-12));
        // objective = one logit
        let g = numeric_grad(|mm| Ok(mm.logits()[5]), &m, 1e-4).unwrap();
        for (i, v) in g.values().iter().enumerate() {
            if i == 5 {
                assert!((v - 1.0).abs() < 1e-8);
            } else {
                assert!(v.abs() < 1e-10);
            }
        }
        // quadratic objective at theta = 3
        let mut m2 = m.clone();
        m2.logits_mut()[2] = 3.0;
        let g = numeric_grad(|mm| Ok(mm.logits()[2] * mm.logits()[2]), &m2, 1e-4).unwrap();
        assert!((g.values()[2] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn grad_check_report_cases() {
        let m = SeqModel::<f64>::uniform(vocab(1), 1).unwrap();
        let a = GradTable::zeros_like(&m);
        let mut b = GradTable::zeros_like(&m);
        let r = grad_check(&a, &b).unwrap();
        assert_eq!(r.max_abs_err, 0.0);
        assert_eq!(r.max_rel_err, 0.0);
        b.values_mut()[7] = 1e-9;
        let r = grad_check(&a, &b).unwrap();
        assert!((r.max_abs_err - 1e-9).abs() < 1e-18);
        assert_eq!(r.worst, (7 / 4, 7 % 4));
    }

    #[test]
    fn zero_gradient_when_pairs_degenerate() {
        let m = SeqModel::<f64>::random(vocab(2), 1, 1.0, 2).unwrap();
        let v = m.vocab().clone();
        let y = Trajectory::new(vec![3, v.eos_id()], true, &v).unwrap();
        let batch = vec![PairExample {
            x: Prompt::empty(),
            y_teacher: y.clone(),
            y_student: y,
        }];
        let g = dpkd_grad(&batch, &m, &m, &DpkdConfig::default()).unwrap();
        assert!(g.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sigma_half_weight_at_u_zero() {
        // student == teacher makes every inner term zero, so the gradient
        // must equal -(beta/2) (grad log q(y_t) - grad log q(y_s)) / N
        let m = SeqModel::<f64>::random(vocab(2), 1, 1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let other = SeqModel::<f64>::random(vocab(2), 1, 1.0, 5).unwrap();
        let batch = random_batch(&m, &other, 1, &mut rng);
        let cfg = DpkdConfig {
            beta: 1.9,
            length_norm: false,
            ..DpkdConfig::default()
        };
        let g = dpkd_grad(&batch, &m, &m, &cfg).unwrap();
        let mut expected = GradTable::zeros_like(&m);
        accumulate_logprob_grad(&m, &batch[0].x, &batch[0].y_teacher, -cfg.beta / 2.0, &mut expected)
            .unwrap();
        accumulate_logprob_grad(&m, &batch[0].x, &batch[0].y_student, cfg.beta / 2.0, &mut expected)
            .unwrap();
        for (a, b) in g.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let n_content = rng.gen_range(1..=2);
            let order = rng.gen_range(1..=2);
            let beta = rng.gen_range(0.1..5.0);
            let length_norm = trial % 2 == 0;
            let teacher =
                SeqModel::<f64>::random(vocab(n_content), order, 1.0, rng.gen()).unwrap();
            let student =
                SeqModel::<f64>::random(vocab(n_content), order, 1.0, rng.gen()).unwrap();
            let batch = random_batch(&teacher, &student, rng.gen_range(1..=8), &mut rng);
            let cfg = DpkdConfig {
                beta,
                length_norm,
                ..DpkdConfig::default()
            };
            let analytic = dpkd_grad(&batch, &student, &teacher, &cfg).unwrap();
            let numeric = numeric_grad(
                |m| dpkd_loss(&batch, m, &teacher, &cfg),
                &student,
                1e-4,
            )
            .unwrap();
            let report = grad_check(&analytic, &numeric).unwrap();
            assert!(
                report.max_rel_err < 1e-5,
                "trial {trial}: max_rel_err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn weight_equals_beta_times_one_minus_preference() {
        // unnormalized case: the scalar multiplying the score difference
        let teacher = SeqModel::<f64>::random(vocab(2), 1, 1.0, 6).unwrap();
        let student = SeqModel::<f64>::random(vocab(2), 1, 1.0, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = random_batch(&teacher, &student, 4, &mut rng);
        let cfg = DpkdConfig {
            beta: 2.3,
            length_norm: false,
            ..DpkdConfig::default()
        };
        for pair in &batch {
            let u = pair_inner_term(&student, &teacher, pair, cfg.beta, false).unwrap();
            let pref = dpkd_preference_prob(
                &student,
                &teacher,
                &pair.x,
                &pair.y_teacher,
                &pair.y_student,
                cfg.beta,
            )
            .unwrap();
            let weight = cfg.beta * sigmoid(-u);
            assert!((weight - cfg.beta * (1.0 - pref)).abs() < 1e-12);
        }
    }

    #[test]
    fn logprob_grad_rows_sum_to_zero() {
        let m = SeqModel::<f64>::random(vocab(2), 2, 1.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Prompt::empty();
        let y = m.sample_with_rng(&x, 5, 1.0, &mut rng).unwrap();
        let mut g = GradTable::zeros_like(&m);
        accumulate_logprob_grad(&m, &x, &y, 1.0, &mut g).unwrap();
        for s in g.row_sums() {
            assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn variant_numeric_grads_self_consistent_across_steps() {
        let teacher = SeqModel::<f64>::random(vocab(1), 1, 1.0, 11).unwrap();
        let student = SeqModel::<f64>::random(vocab(1), 1, 1.0, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let batch = random_batch(&teacher, &student, 4, &mut rng);
        for variant in [Variant::Ipo, Variant::Cpo, Variant::Simpo] {
            let cfg = DpkdConfig {
                variant,
                ..DpkdConfig::default()
            };
            let g3 = numeric_grad(
                |m| variant_loss(&batch, m, &teacher, &cfg),
                &student,
                1e-3,
            )
            .unwrap();
            let g4 = numeric_grad(
                |m| variant_loss(&batch, m, &teacher, &cfg),
                &student,
                1e-4,
            )
            .unwrap();
            let r = grad_check(&g3, &g4).unwrap();
            assert!(
                r.max_rel_err < 1e-3,
                "{variant:?}: rel err {}",
                r.max_rel_err
            );
        }
    }
}

#[cfg(test)]
mod fd_experiment {
    use super::*;
    use crate::objectives::{dpkd_loss, DpkdConfig};
    use crate::seqmodel::{SeqModel, Vocab};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[ignore]
    fn experiment() {
        for &h in &[1e-3, 3e-4, 1e-4] {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut worst_rel = 0.0f64;
            let mut worst_abs = 0.0f64;
            let mut worst_pair = (0.0, 0.0);
            for trial in 0..50 {
                let n_content = rng.gen_range(1..=2);
                let order = rng.gen_range(1..=2);
                let beta = rng.gen_range(0.1..5.0);
                let length_norm = trial % 2 == 0;
                let names: Vec<String> = (0..n_content).map(|i| format!("w{i}")).collect();
                let content: Vec<&str> = names.iter().map(String::as_str).collect();
                let v = Vocab::with_content(&content).unwrap();
                let teacher = SeqModel::<f64>::random(v.clone(), order, 1.0, rng.gen()).unwrap();
                let student = SeqModel::<f64>::random(v.clone(), order, 1.0, rng.gen()).unwrap();
                let x = crate::seqmodel::Prompt::empty();
                let n = rng.gen_range(1..=8usize);
                let mut batch = Vec::new();
                for _ in 0..n {
                    batch.push(crate::objectives::PairExample {
                        x: x.clone(),
                        y_teacher: teacher.sample_with_rng(&x, 4, 1.0, &mut rng).unwrap(),
                        y_student: student.sample_with_rng(&x, 4, 1.0, &mut rng).unwrap(),
                    });
                }
                let cfg = DpkdConfig { beta, length_norm, ..DpkdConfig::default() };
                let analytic = dpkd_grad(&batch, &student, &teacher, &cfg).unwrap();
                let numeric = numeric_grad(|m| dpkd_loss(&batch, m, &teacher, &cfg), &student, h).unwrap();
                let report = grad_check(&analytic, &numeric).unwrap();
                if report.max_rel_err > worst_rel {
                    worst_rel = report.max_rel_err;
                    let (c, t) = report.worst;
                    let idx = c * analytic.vocab_size + t;
                    worst_pair = (analytic.values()[idx], numeric.values()[idx]);
                }
                worst_abs = worst_abs.max(report.max_abs_err);
            }
            println!("h={h:.0e}: worst_rel {worst_rel:.3e} worst_abs {worst_abs:.3e} at a={:.3e} n={:.3e}", worst_pair.0, worst_pair.1);
        }
    }
}
