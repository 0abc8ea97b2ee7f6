//! Command-line entry point. Every subcommand reads an optional TOML
//! config, applies flag overrides, writes a reproducibility manifest into
//! the output directory, and then runs. Exit codes: 0 success, 1
//! validation/usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{write_manifest, RunConfig};
use crate::data::{filter_by_length, load_jsonl, split, synth_toy_corpus, Corpus};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, judge_client, noise_sweep, write_noise_sweep_csv, JudgeConfig, JudgeOutcome,
    LengthSplit,
};
use crate::gradients::{dpkd_grad, grad_check, numeric_grad};
use crate::objectives::{bt_preference, dpkd_loss, DpkdConfig, PairExample, Variant};
use crate::oracles::{
    build_q_table, objective_value_of_dist, optimal_student, partition_z, pl_bt_equivalence,
    reward_from_policies, telescoping_check, RewardTable, StepReward,
};
use crate::seqmodel::{Prompt, SeqModel, Vocab};
use crate::trainer::{
    read_metrics_csv, run_distillation, run_rkld, run_seqkd, run_sft, run_word_kd,
    write_metrics_csv, Method, MetricsRow,
};

#[derive(Parser, Debug)]
#[command(
    name = "dpkd",
    version,
    about = "Exactly enumerable sequence-model distillation lab"
)]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic toy corpus and write train/valid/test and
    /// pretraining JSONL files.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        grammar_seed: Option<u64>,
    },
    /// Supervised fine-tuning from a uniform (or given) initialization.
    Sft(TrainArgs),
    /// Distill a student from a teacher checkpoint with one of the
    /// supported methods.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on a test set (Rouge-L, exact match, length
    /// splits, optional external judge).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Run the full closed-form oracle suite and print a pass/fail table.
    Verify,
    /// Check the analytic preference gradient against finite differences
    /// on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Perturb a model at increasing noise scales and record divergence,
    /// implicit reward, and Rouge-L per perturbed copy.
    NoiseSweep {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Validate a metrics CSV and re-emit it in canonical form.
    Curves {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Initial checkpoint; uniform logits when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output checkpoint path (relative paths land under out_dir).
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    /// One of: kd, seqkd, rkld (alias minillm), dpkd, ipo, cpo, simpo.
    #[arg(long)]
    method: String,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    student: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Drop the language-modeling regularizer (sets lambda to 0).
    #[arg(long)]
    no_lm_loss: bool,
    /// Use the unnormalized per-sequence beta instead of beta/|y|.
    #[arg(long)]
    no_length_norm: bool,
    /// Synthetic sample count for seqkd.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Suffix appended to output file names, for ablation runs.
    #[arg(long)]
    tag: Option<String>,
}

struct ExitErr {
    code: i32,
    err: Error,
}

type CliResult<T> = std::result::Result<T, ExitErr>;

/// Validation / setup phase: failures exit 1.
fn setup<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(|err| ExitErr { code: 1, err })
}

/// Execution phase: failures exit 2.
fn run_phase<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(|err| ExitErr { code: 2, err })
}

pub fn run<I>(argv: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(ExitErr { code, err }) => {
            eprintln!("error: {err}");
            code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = setup(RunConfig::load(cli.config.as_deref()))?;
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    if let Some(s) = cli.seed {
        cfg.trainer.seed = s;
    }
    match cli.cmd {
        Cmd::GenData { n, grammar_seed } => gen_data(cfg, n, grammar_seed),
        Cmd::Sft(args) => sft(cfg, args),
        Cmd::Distill(args) => distill(cfg, args),
        Cmd::Eval { model, test } => eval_cmd(cfg, model, test),
        Cmd::Verify => verify(cfg),
        Cmd::Gradcheck { trials, tolerance } => gradcheck(cfg, trials, tolerance),
        Cmd::NoiseSweep { model, teacher } => noise_sweep_cmd(cfg, model, teacher),
        Cmd::Curves { metrics, out } => curves(cfg, metrics, out),
    }
}

fn vocab_of(cfg: &RunConfig) -> Result<Vocab> {
    let content: Vec<&str> = cfg.model.content_tokens.iter().map(String::as_str).collect();
    Vocab::with_content(&content)
}

fn load_corpus(cfg: &RunConfig, path: &Path, vocab: &Vocab) -> Result<Corpus> {
    let corpus = load_jsonl(&cfg.resolve(path), vocab)?;
    filter_by_length(&corpus, cfg.data.min_words)
}

fn gen_data(cfg: RunConfig, n: Option<usize>, grammar_seed: Option<u64>) -> CliResult<()> {
    setup(cfg.validate())?;
    let mut gen = cfg.gen.clone();
    if let Some(n) = n {
        gen.n_examples = n;
    }
    if let Some(s) = grammar_seed {
        gen.grammar_seed = s;
    }
    setup(write_manifest(&cfg, "gen-data").map(|_| ()))?;
    let vocab = setup(vocab_of(&cfg))?;
    let corpus = run_phase(synth_toy_corpus(
        &vocab,
        gen.grammar_seed,
        gen.n_examples,
        (gen.length_min, gen.length_max),
    ))?;
    let (train, valid, test) = run_phase(split(&corpus, gen.fractions, cfg.trainer.seed))?;
    let pretrain = run_phase(synth_toy_corpus(
        &vocab,
        gen.grammar_seed.wrapping_add(1),
        gen.n_pretrain,
        (gen.length_min, gen.length_max),
    ))?;
    for (c, p) in [
        (&train, &cfg.data.train),
        (&valid, &cfg.data.valid),
        (&test, &cfg.data.test),
        (&pretrain, &cfg.data.pretrain),
    ] {
        let path = cfg.resolve(p);
        if let Some(parent) = path.parent() {
            run_phase(
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e)),
            )?;
        }
        run_phase(c.save_jsonl(&path))?;
        println!("wrote {} ({} examples)", path.display(), c.len());
    }
    Ok(())
}

fn sft(mut cfg: RunConfig, args: TrainArgs) -> CliResult<()> {
    cfg.trainer.method = Method::Sft;
    if let Some(e) = args.epochs {
        cfg.trainer.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.trainer.lr = lr;
    }
    if let Some(t) = args.train {
        cfg.data.train = t;
    }
    if let Some(v) = args.valid {
        cfg.data.valid = v;
    }
    setup(cfg.validate())?;
    let vocab = setup(vocab_of(&cfg))?;
    let train = setup(load_corpus(&cfg, &cfg.data.train.clone(), &vocab))?;
    let valid = setup(load_corpus(&cfg, &cfg.data.valid.clone(), &vocab))?;
    let init = match &args.init {
        Some(p) => setup(SeqModel::<f64>::load_checkpoint(&cfg.resolve(p)))?,
        None => setup(SeqModel::<f64>::uniform(vocab, cfg.model.order))?,
    };
    setup(write_manifest(&cfg, "sft").map(|_| ()))?;
    let (model, metrics) = run_phase(run_sft(&cfg.trainer, &train, &init, &valid))?;
    let ckpt = cfg.resolve(args.ckpt_out.as_deref().unwrap_or(Path::new("sft.json")));
    run_phase(model.save_checkpoint(&ckpt))?;
    let csv = cfg.out_dir.join("metrics-sft.csv");
    run_phase(write_metrics_csv(&metrics, &csv))?;
    print_last_row(&metrics);
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn distill(mut cfg: RunConfig, args: DistillArgs) -> CliResult<()> {
    let method = setup(Method::parse(&args.method))?;
    cfg.trainer.method = method;
    if let Some(e) = args.epochs {
        cfg.trainer.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.trainer.lr = lr;
    }
    if let Some(b) = args.beta {
        cfg.trainer.dpkd.beta = b;
    }
    if let Some(l) = args.lambda {
        cfg.trainer.dpkd.lambda = l;
    }
    if args.no_lm_loss {
        cfg.trainer.dpkd.lambda = 0.0;
    }
    if args.no_length_norm {
        cfg.trainer.dpkd.length_norm = false;
    }
    if let Some(t) = args.train {
        cfg.data.train = t;
    }
    setup(cfg.validate())?;
    if method == Method::Sft {
        return setup(Err(Error::domain("use the sft subcommand for sft")));
    }

    let teacher_path = cfg.resolve(args.teacher.as_deref().unwrap_or(Path::new("teacher.json")));
    let teacher = setup(SeqModel::<f64>::load_checkpoint(&teacher_path))?;
    let student_path = cfg.resolve(
        args.student
            .as_deref()
            .unwrap_or(Path::new("student-init.json")),
    );
    let student = setup(SeqModel::<f64>::load_checkpoint(&student_path))?;
    let vocab = teacher.vocab().clone();
    let train = setup(load_corpus(&cfg, &cfg.data.train.clone(), &vocab))?;
    let valid = setup(load_corpus(&cfg, &cfg.data.valid.clone(), &vocab))?;
    let tag = args.tag.map(|t| format!("-{t}")).unwrap_or_default();
    let name = format!("{}{}", args.method, tag);
    setup(write_manifest(&cfg, &format!("distill-{name}")).map(|_| ()))?;

    let (model, metrics) = run_phase(match method {
        Method::Kd => run_word_kd(&cfg.trainer, &train, &teacher, &student, &valid),
        Method::Seqkd => run_seqkd(
            &cfg.trainer,
            &train,
            &teacher,
            &student,
            &valid,
            args.n_samples.unwrap_or(train.len() * 4),
        ),
        Method::Rkld => run_rkld(&cfg.trainer, &train, &teacher, &student, &valid),
        Method::Dpkd | Method::Ipo | Method::Cpo | Method::Simpo => {
            load_corpus(&cfg, &cfg.data.pretrain.clone(), &vocab).and_then(|pretrain| {
                run_distillation(&cfg.trainer, &train, &pretrain, &teacher, &student, &valid)
            })
        }
        Method::Sft => unreachable!(),
    })?;
    let ckpt = cfg.out_dir.join(format!("model-{name}.json"));
    run_phase(model.save_checkpoint(&ckpt))?;
    let csv = cfg.out_dir.join(format!("metrics-{name}.csv"));
    run_phase(write_metrics_csv(&metrics, &csv))?;
    print_last_row(&metrics);
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn print_last_row(metrics: &[MetricsRow]) {
    if let Some(r) = metrics.last() {
        println!(
            "epoch {} kd_loss {:.6} lm_loss {:.6} total {:.6} reward {:.6} rkld {:.6} rouge_l {:.6}",
            r.epoch,
            r.kd_loss,
            r.lm_loss,
            r.total_loss,
            r.mean_implicit_reward,
            r.first_token_rkld,
            r.rouge_l
        );
    }
}

fn eval_cmd(cfg: RunConfig, model: PathBuf, test: Option<PathBuf>) -> CliResult<()> {
    setup(cfg.validate())?;
    let model = setup(SeqModel::<f64>::load_checkpoint(&cfg.resolve(&model)))?;
    let test_path = test.unwrap_or_else(|| cfg.data.test.clone());
    let test_set = setup(load_corpus(&cfg, &test_path, model.vocab()))?;
    setup(write_manifest(&cfg, "eval").map(|_| ()))?;
    let splitter = setup(LengthSplit::new(cfg.split_boundaries.clone()))?;
    let report = run_phase(evaluate(
        &model,
        &test_set,
        &splitter,
        cfg.trainer.max_len,
        cfg.trainer.seed,
    ))?;
    let mut text = report.to_text();
    if cfg.judge_url.is_some() {
        text.push_str(&judge_summary(&cfg, &model, &test_set));
    }
    let out = cfg.out_dir.join("eval-report.txt");
    run_phase(std::fs::write(&out, &text).map_err(|e| Error::io(out.display().to_string(), e)))?;
    print!("{text}");
    Ok(())
}

fn judge_summary(cfg: &RunConfig, model: &SeqModel<f64>, test_set: &Corpus) -> String {
    let jcfg = JudgeConfig {
        base_url: cfg.judge_url.clone(),
        timeout: Some(Duration::from_secs(5)),
    };
    let mut scores = Vec::new();
    let mut unavailable = None;
    for (ex, tok) in test_set.examples().iter().zip(test_set.tokenized()) {
        let candidate = match decode_words(model, &tok.prompt, cfg.trainer.max_len) {
            Ok(w) => w.join(" "),
            Err(_) => String::new(),
        };
        let prompt_text = if ex.input.is_empty() {
            ex.instruction.clone()
        } else {
            format!("{} {}", ex.instruction, ex.input)
        };
        match judge_client(&jcfg, &prompt_text, &candidate, &ex.output) {
            JudgeOutcome::Score(s) => scores.push(s),
            JudgeOutcome::Unavailable { reason } => {
                unavailable = Some(reason);
                break;
            }
        }
    }
    match unavailable {
        Some(reason) => format!("judge\n  unavailable: {reason}\n"),
        None if scores.is_empty() => "judge\n  unavailable: empty test set\n".to_string(),
        None => format!(
            "judge\n  mean_score    {:.6}\n  n             {}\n",
            scores.iter().sum::<f64>() / scores.len() as f64,
            scores.len()
        ),
    }
}

fn decode_words(model: &SeqModel<f64>, prompt: &Prompt, max_len: usize) -> Result<Vec<String>> {
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

fn noise_sweep_cmd(
    cfg: RunConfig,
    model: Option<PathBuf>,
    teacher: Option<PathBuf>,
) -> CliResult<()> {
    setup(cfg.validate())?;
    let teacher_path = cfg.resolve(teacher.as_deref().unwrap_or(Path::new("teacher.json")));
    let teacher = setup(SeqModel::<f64>::load_checkpoint(&teacher_path))?;
    let base = match &model {
        Some(p) => setup(SeqModel::<f64>::load_checkpoint(&cfg.resolve(p)))?,
        None => teacher.clone(),
    };
    let eval_set = setup(load_corpus(&cfg, &cfg.data.valid.clone(), teacher.vocab()))?;
    setup(write_manifest(&cfg, "noise-sweep").map(|_| ()))?;
    let rows = run_phase(noise_sweep(
        &base,
        &teacher,
        &eval_set,
        &cfg.noise.scales,
        cfg.noise.n_per_scale,
        cfg.trainer.dpkd.beta,
        cfg.trainer.seed,
        cfg.trainer.max_len,
    ))?;
    let out = cfg.out_dir.join("noise-sweep.csv");
    run_phase(write_noise_sweep_csv(&rows, &out))?;
    for scale in &cfg.noise.scales {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.scale == *scale)
            .map(|r| r.rkld)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        println!("scale {scale} mean_rkld {mean:.6} n {}", vals.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn curves(cfg: RunConfig, metrics: PathBuf, out: Option<PathBuf>) -> CliResult<()> {
    setup(cfg.validate())?;
    let rows = setup(read_metrics_csv(&cfg.resolve(&metrics)))?;
    setup(write_manifest(&cfg, "curves").map(|_| ()))?;
    let out = cfg.resolve(out.as_deref().unwrap_or(Path::new("curves.csv")));
    run_phase(crate::eval::export_curves(&rows, &out))?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}

/// One random small instance for gradient checking: teacher, student, a
/// sampled preference batch, and a config.
pub fn random_gradcheck_instance(
    seed: u64,
) -> Result<(SeqModel<f64>, SeqModel<f64>, Vec<PairExample>, DpkdConfig<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_content = rng.gen_range(1..=2usize); // |V| in {4, 5}
    let names: Vec<String> = (0..n_content).map(|i| format!("w{i}")).collect();
    let content: Vec<&str> = names.iter().map(String::as_str).collect();
    let vocab = Vocab::with_content(&content)?;
    let order = rng.gen_range(1..=2usize);
    let teacher = SeqModel::<f64>::random(vocab.clone(), order, 1.2, rng.gen())?;
    let student = SeqModel::<f64>::random(vocab.clone(), order, 1.2, rng.gen())?;
    let n_prompt = rng.gen_range(0..=1usize);
    let prompt_tokens: Vec<usize> = (0..n_prompt)
        .map(|_| vocab.lookup(content[rng.gen_range(0..content.len())]).unwrap())
        .collect();
    let x = Prompt::new(prompt_tokens, &vocab)?;
    let batch_size = rng.gen_range(1..=8usize);
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let y_t = teacher.sample_with_rng(&x, 4, 1.0, &mut rng)?;
        let y_s = student.sample_with_rng(&x, 4, 1.0, &mut rng)?;
        batch.push(PairExample {
            x: x.clone(),
            y_teacher: y_t,
            y_student: y_s,
        });
    }
    let cfg = DpkdConfig {
        beta: rng.gen_range(0.1..=5.0),
        length_norm: rng.gen_bool(0.5),
        variant: Variant::Dpkd,
        ..DpkdConfig::default()
    };
    Ok((teacher, student, batch, cfg))
}

fn gradcheck(cfg: RunConfig, trials: usize, tolerance: f64) -> CliResult<()> {
    setup(cfg.validate())?;
    if trials == 0 {
        return setup(Err(Error::domain("trials must be at least 1")));
    }
    setup(write_manifest(&cfg, "gradcheck").map(|_| ()))?;
    let mut worst = 0.0f64;
    let mut worst_trial = 0;
    for t in 0..trials {
        let (teacher, student, batch, dcfg) =
            run_phase(random_gradcheck_instance(cfg.trainer.seed.wrapping_add(t as u64)))?;
        let analytic = run_phase(dpkd_grad(&batch, &student, &teacher, &dcfg))?;
        let numeric = run_phase(numeric_grad(
            |m| dpkd_loss(&batch, m, &teacher, &dcfg),
            &student,
            1e-4,
        ))?;
        let report = run_phase(grad_check(&analytic, &numeric))?;
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
            worst_trial = t;
        }
    }
    println!("trials        {trials}");
    println!("max_rel_err   {worst:.3e}");
    println!("worst_trial   {worst_trial}");
    println!("tolerance     {tolerance:.3e}");
    if worst < tolerance {
        println!("result        PASS");
        Ok(())
    } else {
        println!("result        FAIL");
        Err(ExitErr {
            code: 2,
            err: Error::domain(format!(
                "gradient check failed: max relative error {worst:.3e} >= {tolerance:.3e}"
            )),
        })
    }
}

struct OracleRow {
    name: &'static str,
    residual: f64,
    tolerance: f64,
}

fn verify(cfg: RunConfig) -> CliResult<()> {
    setup(cfg.validate())?;
    setup(write_manifest(&cfg, "verify").map(|_| ()))?;
    let rows = run_phase(oracle_suite(cfg.trainer.seed))?;
    let mut all_pass = true;
    println!(
        "{:<34} {:>12} {:>10} {:>6}",
        "check", "residual", "tolerance", "status"
    );
    for r in &rows {
        let pass = r.residual < r.tolerance;
        all_pass &= pass;
        println!(
            "{:<34} {:>12.3e} {:>10.1e} {:>6}",
            r.name,
            r.residual,
            r.tolerance,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if all_pass {
        Ok(())
    } else {
        Err(ExitErr {
            code: 2,
            err: Error::domain("oracle suite reported failures"),
        })
    }
}

fn oracle_suite(seed: u64) -> Result<Vec<OracleRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::with_content(&["a", "b"])?;
    let x = Prompt::empty();
    let max_len = 3;
    let mut rows = Vec::new();

    // loss floor: identical policies sit exactly at ln 2
    {
        let teacher = SeqModel::<f64>::random(vocab.clone(), 1, 1.0, rng.gen())?;
        let dcfg = DpkdConfig::default();
        let mut batch = Vec::new();
        for _ in 0..6 {
            batch.push(PairExample {
                x: x.clone(),
                y_teacher: teacher.sample_with_rng(&x, max_len, 1.0, &mut rng)?,
                y_student: teacher.sample_with_rng(&x, max_len, 1.0, &mut rng)?,
            });
        }
        let loss = dpkd_loss(&batch, &teacher, &teacher, &dcfg)?;
        rows.push(OracleRow {
            name: "loss_floor_ln2",
            residual: (loss - std::f64::consts::LN_2).abs(),
            tolerance: 1e-12,
        });
    }

    // preference symmetry: P(a>b) + P(b>a) = 1
    {
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let a: f64 = rng.gen_range(-20.0..20.0);
            let b: f64 = rng.gen_range(-20.0..20.0);
            let s = bt_preference(a, b) + bt_preference(b, a);
            worst = worst.max((s - 1.0).abs());
        }
        rows.push(OracleRow {
            name: "preference_symmetry",
            residual: worst,
            tolerance: 1e-12,
        });
    }

    // closed-form optimum: normalization, optimality, reward round-trip
    {
        let mut worst_norm = 0.0f64;
        let mut worst_margin = 0.0f64; // amount any perturbation beats q* by
        let mut worst_round = 0.0f64;
        for _ in 0..10 {
            let teacher = SeqModel::<f64>::random(vocab.clone(), 1, 1.0, rng.gen())?;
            let beta = rng.gen_range(0.2..2.0);
            let seed_r: u64 = rng.gen();
            let reward = RewardTable::from_fn(&teacher, &x, max_len, |traj| {
                let mut h = seed_r;
                for &t in traj.tokens() {
                    h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64);
                }
                ((h >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })?;
            let q_star = optimal_student(&teacher, &reward, beta, &x, max_len)?;
            let mass: f64 = q_star.iter().map(|(_, p)| p).sum();
            worst_norm = worst_norm.max((mass - 1.0).abs());
            let best = objective_value_of_dist(&q_star, &teacher, &reward, beta, &x)?;
            for _ in 0..100 {
                let mut perturbed: Vec<f64> = q_star
                    .iter()
                    .map(|(_, p)| p * rng.gen_range(0.5..2.0))
                    .collect();
                let total: f64 = perturbed.iter().sum();
                for p in &mut perturbed {
                    *p /= total;
                }
                let dist: Vec<_> = q_star
                    .iter()
                    .zip(&perturbed)
                    .map(|((t, _), &p)| (t.clone(), p))
                    .collect();
                let v = objective_value_of_dist(&dist, &teacher, &reward, beta, &x)?;
                worst_margin = worst_margin.max(v - best);
            }
            let z = partition_z(&teacher, &reward, beta, &x, max_len)?;
            let recovered = reward_from_policies(&q_star, &teacher, beta, z, &x)?;
            for (traj, _) in &q_star {
                worst_round = worst_round.max((recovered.get(traj)? - reward.get(traj)?).abs());
            }
        }
        rows.push(OracleRow {
            name: "optimum_normalization",
            residual: worst_norm,
            tolerance: 1e-9,
        });
        rows.push(OracleRow {
            name: "optimum_beats_perturbations",
            residual: worst_margin,
            tolerance: 1e-9,
        });
        rows.push(OracleRow {
            name: "reward_round_trip",
            residual: worst_round,
            tolerance: 1e-9,
        });
    }

    // soft-Q identities: telescoping along every terminated trajectory,
    // per-step vs sequence-level preference equivalence
    {
        let mut worst_tel = 0.0f64;
        let mut worst_pl = 0.0f64;
        for _ in 0..5 {
            let teacher = SeqModel::<f64>::random(vocab.clone(), 1, 1.0, rng.gen())?;
            let student = SeqModel::<f64>::random(vocab.clone(), 1, 1.0, rng.gen())?;
            let beta = rng.gen_range(0.3..2.0);
            let seed_r: u64 = rng.gen();
            let mut reward = StepReward::zero();
            for (traj, _) in teacher.enumerate_trajectories(&x, max_len, 1_000_000)? {
                for (t, &tok) in traj.tokens().iter().enumerate() {
                    let mut h = seed_r ^ (t as u64) << 7 ^ tok as u64;
                    h = h.wrapping_mul(6364136223846793005).wrapping_add(1);
                    reward.insert(
                        &traj.tokens()[..t],
                        tok,
                        ((h >> 33) as f64 / (1u64 << 31) as f64) - 0.5,
                    );
                }
            }
            let q = build_q_table(&teacher, &reward, beta, &x, max_len)?;
            for (traj, _) in teacher.enumerate_trajectories(&x, max_len, 1_000_000)? {
                if traj.terminated() {
                    worst_tel = worst_tel
                        .max(telescoping_check(&teacher, &q, &x, &traj, &reward)?.abs());
                }
            }
            for _ in 0..200 {
                let mut y1 = teacher.sample_with_rng(&x, max_len, 1.0, &mut rng)?;
                let mut y2 = student.sample_with_rng(&x, max_len, 1.0, &mut rng)?;
                let mut guard = 0;
                while !(y1.terminated() && y2.terminated()) && guard < 50 {
                    y1 = teacher.sample_with_rng(&x, max_len, 1.0, &mut rng)?;
                    y2 = student.sample_with_rng(&x, max_len, 1.0, &mut rng)?;
                    guard += 1;
                }
                if !(y1.terminated() && y2.terminated()) {
                    continue;
                }
                let (_, _, diff) = pl_bt_equivalence(&student, &teacher, beta, &x, &y1, &y2)?;
                worst_pl = worst_pl.max(diff);
            }
        }
        rows.push(OracleRow {
            name: "telescoping_identity",
            residual: worst_tel,
            tolerance: 1e-9,
        });
        rows.push(OracleRow {
            name: "stepwise_vs_sequence_preference",
            residual: worst_pl,
            tolerance: 1e-12,
        });
    }

    // gradient fidelity, quick version of the dedicated subcommand
    {
        let mut worst = 0.0f64;
        for t in 0..10u64 {
            let (teacher, student, batch, dcfg) =
                random_gradcheck_instance(seed.wrapping_add(1000 + t))?;
            let analytic = dpkd_grad(&batch, &student, &teacher, &dcfg)?;
            let numeric =
                numeric_grad(|m| dpkd_loss(&batch, m, &teacher, &dcfg), &student, 1e-4)?;
            worst = worst.max(grad_check(&analytic, &numeric)?.max_rel_err);
        }
        rows.push(OracleRow {
            name: "gradient_fidelity_10x",
            residual: worst,
            tolerance: 1e-5,
        });
    }

    // lcs-f1 worked example: candidate/reference overlap of 6 vs 7/6 words
    {
        let cand = ["the", "cat", "sat", "on", "the", "mat"];
        let refr = ["the", "cat", "is", "on", "the", "red", "mat"];
        let score = crate::eval::rouge_l(&cand, &refr)?;
        let lcs = 5.0; // the cat on the mat
        let p = lcs / 6.0;
        let r = lcs / 7.0;
        let expected = 2.0 * p * r / (p + r);
        rows.push(OracleRow {
            name: "lcs_f1_worked_example",
            residual: (score - expected).abs(),
            tolerance: 1e-12,
        });
    }

    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(parts: &[&str]) -> Vec<String> {
        std::iter::once("dpkd".to_string())
            .chain(parts.iter().map(|s| s.to_string()))
            .collect()
    }

    #[test]
    fn unknown_subcommand_exits_1() {
        assert_eq!(run(argv(&["frobnicate"])), 1);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(argv(&["--help"])), 0);
    }

    #[test]
    fn missing_config_file_exits_1() {
        assert_eq!(
            run(argv(&["--config", "/no/such/file.toml", "verify"])),
            1
        );
    }

    #[test]
    fn gradcheck_passes_on_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(argv(&[
            "--out-dir",
            dir.path().to_str().unwrap(),
            "gradcheck",
            "--trials",
            "5",
        ]));
        assert_eq!(code, 0);
        assert!(dir.path().join("manifest-gradcheck.json").exists());
    }

    #[test]
    fn verify_passes_on_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(argv(&["--out-dir", dir.path().to_str().unwrap(), "verify"]));
        assert_eq!(code, 0);
    }

    #[test]
    fn gen_data_writes_all_four_files() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(argv(&["--out-dir", dir.path().to_str().unwrap(), "gen-data"]));
        assert_eq!(code, 0);
        for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "pretrain.jsonl"] {
            assert!(dir.path().join("data").join(f).exists(), "{f}");
        }
    }

    #[test]
    fn distill_requires_existing_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(argv(&[
            "--out-dir",
            dir.path().to_str().unwrap(),
            "distill",
            "--method",
            "dpkd",
        ]));
        assert_eq!(code, 1);
    }

    #[test]
    fn random_instances_are_reproducible() {
        let (t1, s1, b1, c1) = random_gradcheck_instance(9).unwrap();
        let (t2, s2, b2, c2) = random_gradcheck_instance(9).unwrap();
        assert_eq!(t1.logits(), t2.logits());
        assert_eq!(s1.logits(), s2.logits());
        assert_eq!(b1, b2);
        assert_eq!(c1.beta, c2.beta);
    }
}
