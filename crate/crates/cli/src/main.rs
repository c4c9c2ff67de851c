use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use ffn::cost::{report_for_descriptors, report_for_model, KPolicy, DEFAULT_ALPHA};
use ffn::dataset::{read_csv, write_csv, Dataset};
use ffn::error::FfnError;
use ffn::finetune::{evaluate, gradient_stats, metrics_csv, train, AccumulatorInit, TrainOptions, TrainState};
use ffn::layers::{forward, Model, ModelManifest, OpCount, Route};
use ffn::pipeline::{assemble, factorize_layer, histories_csv, reports_csv, FactorizeOptions};
use ffn::recovery::RecoveryOptions;
use ffn::sdd::{sweep_k, SddOptions};
use ffn::toy::{pretrain, toy_dataset, toy_model, ToyConfig};

const MANIFEST: &str = "model.toml";

#[derive(Parser)]
#[command(name = "ffn", version, about = "Fixed-point factorized networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose every layer into ternary factors.
    Factorize(FactorizeArgs),
    /// Approximation errors, k sweeps and dense vs factorized accuracy.
    Eval(EvalArgs),
    /// Multiply, add and storage counts for original, binary and factorized layers.
    Cost(CostArgs),
    /// Quantization-aware fine-tuning of a factorized model.
    Finetune(FinetuneArgs),
    /// Write a pretrained toy model and its dataset.
    Toy(ToyArgs),
}

#[derive(Args)]
struct SddArgs {
    /// Outer refinement sweeps.
    #[arg(long, default_value_t = 10)]
    sdd_iters: usize,
    /// Inner alternations per rank-one term.
    #[arg(long, default_value_t = 20)]
    inner_iters: usize,
    /// Relative residual improvement that ends refinement.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Starting `y` of each term.
    #[arg(long, value_enum, default_value_t = Init::Svd)]
    init: Init,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Svd,
    Random,
}

impl SddArgs {
    fn options(&self) -> SddOptions {
        SddOptions {
            outer_iters_max: self.sdd_iters,
            inner_iters_max: self.inner_iters,
            tol: self.tol,
            seed: self.seed,
            init_policy: match self.init {
                Init::Svd => ffn::sdd::InitPolicy::SvdSign,
                Init::Random => ffn::sdd::InitPolicy::RandomTernary,
            },
            ..SddOptions::new(1)
        }
    }
}

#[derive(Args)]
struct FactorizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// min, param, fixed:N or table:FILE
    #[arg(long, default_value = "min")]
    k_policy: String,
    #[command(flatten)]
    sdd: SddArgs,
    /// Margin kept from the quantization thresholds during recovery.
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    /// Alternating sweeps of the recovery solver.
    #[arg(long, default_value_t = 50)]
    recovery_iters: usize,
    /// Start fine-tuning from float(X), float(Y) instead of recovered factors.
    #[arg(long)]
    no_recovery: bool,
    #[arg(long)]
    no_balance: bool,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labelled CSV for accuracy and output differences.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write r for k = A, A+STEP, ..., B to sweep.csv.
    #[arg(long, value_name = "A:B:STEP")]
    sweep_k: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sdd: SddArgs,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "min")]
    k_policy: String,
    /// Sparsity of the ternary factors; measured from the model when omitted.
    #[arg(long)]
    alpha: Option<f64>,
    /// Directory for cost.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AccInit {
    Stored,
    Pattern,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Held-out CSV; the training data is used when omitted.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AccInit::Stored)]
    init: AccInit,
    /// Keep the channel scales fixed.
    #[arg(long)]
    freeze_scale: bool,
    #[arg(long, default_value_t = 40)]
    hist_bins: usize,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    per_class: usize,
    #[arg(long, default_value_t = 2.0)]
    spread: f64,
    #[arg(long, default_value_t = 10)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<FfnError>() {
        Some(FfnError::Config(_)) => 2,
        Some(FfnError::Data(_) | FfnError::Size(_) | FfnError::Io(_)) => 3,
        Some(FfnError::Domain(_) | FfnError::Divergence { .. }) => 4,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Factorize(a) => cmd_factorize(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Cost(a) => cmd_cost(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Toy(a) => cmd_toy(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(FfnError::from).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::load(path)?)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Ok(read_csv(path)?)
}

fn cmd_factorize(a: &FactorizeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let recovery = RecoveryOptions { epsilon: a.epsilon, als_sweeps_max: a.recovery_iters, ..RecoveryOptions::default() };
    recovery.validate()?;
    let opts = FactorizeOptions {
        k_policy: KPolicy::parse(&a.k_policy)?,
        sdd: a.sdd.options(),
        recovery: (!a.no_recovery).then_some(recovery),
        balance: !a.no_balance,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| anyhow!(FfnError::Config(format!("thread pool: {e}"))))?;
    let results = pool.install(|| {
        model
            .layers
            .par_iter()
            .enumerate()
            .map(|(i, l)| factorize_layer(i, l, &opts))
            .collect::<ffn::error::Result<Vec<_>>>()
    })?;
    let (factorized, reports) = assemble(&model, results);
    let manifest = factorized.save(&a.out, MANIFEST)?;
    write(&a.out.join("layers.csv"), &reports_csv(&reports))?;
    write(&a.out.join("residuals.csv"), &histories_csv(&reports))?;
    println!("{:<24} {:>5} {:>6} {:>12} {:>12}", "layer", "group", "k", "r_sdd", "r_recovered");
    for l in &reports {
        for g in &l.groups {
            let rec = g.r_recovered.map_or("-".to_string(), |r| format!("{r:.6}"));
            println!("{:<24} {:>5} {:>6} {:>12.6} {:>12}", l.name, g.group, g.k, g.r_sdd, rec);
        }
    }
    println!("wrote {}", manifest.display());
    Ok(())
}

fn parse_sweep(s: &str) -> Result<Vec<usize>> {
    let bad = || anyhow!(FfnError::Config(format!("--sweep-k expects A:B:STEP with 1 <= A <= B, STEP >= 1, got {s}")));
    let parts: Vec<usize> = s.split(':').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    match parts[..] {
        [a, b, step] if a >= 1 && a <= b && step >= 1 => Ok((a..=b).step_by(step).collect()),
        _ => Err(bad()),
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc }).0
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = a.data.as_deref().map(load_data).transpose()?;
    let sweep = a.sweep_k.as_deref().map(parse_sweep).transpose()?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(FfnError::from)?;
    }

    let mut errors = String::from("layer,group,k,r\n");
    println!("{:<24} {:>5} {:>6} {:>12}", "layer", "group", "k", "r");
    for l in &model.layers {
        if let (Some(w), Some(f)) = (&l.weights, &l.factors) {
            for (g, (w, f)) in w.iter().zip(f).enumerate() {
                let r = f.approx_error(w)?;
                println!("{:<24} {:>5} {:>6} {:>12.6}", l.descriptor.label(), g, f.k(), r);
                errors += &format!("{},{g},{},{r:?}\n", l.descriptor.label(), f.k());
            }
        }
    }

    if let Some(ks) = &sweep {
        let opts = a.sdd.options();
        let mut csv = String::from("layer,group,k,r\n");
        for (i, l) in model.layers.iter().enumerate() {
            let Some(w) = &l.weights else { continue };
            for (g, w) in w.iter().enumerate() {
                let o = SddOptions { seed: ffn::pipeline::group_seed(opts.seed, i, g), ..opts.clone() };
                for (k, r) in sweep_k(w, ks, &o)? {
                    csv += &format!("{},{g},{k},{r:?}\n", l.descriptor.label());
                }
            }
        }
        match &a.out {
            Some(dir) => write(&dir.join("sweep.csv"), &csv)?,
            None => print!("{csv}"),
        }
    }

    if let Some(data) = &data {
        let (mut dense_ok, mut ffn_ok, mut diff, mut norm) = (0usize, 0usize, 0.0, 0.0);
        let (mut dense_ops, mut ffn_ops) = (OpCount::default(), OpCount::default());
        for s in &data.samples {
            let d = forward(&model, &s.features, Route::Dense, &mut dense_ops)?;
            let f = forward(&model, &s.features, Route::Ffn, &mut ffn_ops)?;
            dense_ok += usize::from(argmax(&d) == s.label);
            ffn_ok += usize::from(argmax(&f) == s.label);
            diff += d.iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            norm += d.iter().map(|x| x * x).sum::<f64>();
        }
        let n = data.len().max(1) as f64;
        let rel = if norm > 0.0 { (diff / norm).sqrt() } else { diff.sqrt() };
        let summary = format!(
            "samples,dense_accuracy,ffn_accuracy,relative_output_diff,dense_mul,dense_add,ffn_mul,ffn_add\n{},{:?},{:?},{rel:?},{},{},{},{}\n",
            data.len(),
            dense_ok as f64 / n,
            ffn_ok as f64 / n,
            dense_ops.mul,
            dense_ops.add,
            ffn_ops.mul,
            ffn_ops.add
        );
        println!("dense accuracy {:.4}  ffn accuracy {:.4}  relative output difference {rel:.6}", dense_ok as f64 / n, ffn_ok as f64 / n);
        if let Some(dir) = &a.out {
            write(&dir.join("accuracy.csv"), &summary)?;
        }
    }
    if let Some(dir) = &a.out {
        write(&dir.join("errors.csv"), &errors)?;
    }
    Ok(())
}

fn cmd_cost(a: &CostArgs) -> Result<()> {
    let policy = KPolicy::parse(&a.k_policy)?;
    if let Some(alpha) = a.alpha {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(FfnError::Config(format!("alpha {alpha} must lie in [0, 1]")).into());
        }
    }
    let manifest = ModelManifest::read(&a.model)?;
    let report = if manifest.layers.iter().any(|l| !l.factors.is_empty()) {
        report_for_model(&Model::load(&a.model)?, &policy, a.alpha)?
    } else {
        report_for_descriptors(&manifest.descriptors(), &policy, a.alpha.unwrap_or(DEFAULT_ALPHA))?
    };
    print!("{}", report.to_table());
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(FfnError::from)?;
        write(&dir.join("cost.csv"), &report.to_csv()?)?;
    }
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let eval = a.eval_data.as_deref().map(load_data).transpose()?;
    let options = TrainOptions {
        lr: a.lr,
        momentum: a.momentum,
        batch: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        train_scale: !a.freeze_scale,
        train_bias: true,
    };
    let init = match a.init {
        AccInit::Stored => AccumulatorInit::Stored,
        AccInit::Pattern => AccumulatorInit::Pattern,
    };
    let mut state = TrainState::from_model(&model, init, options)?;
    let probe = &data.samples[..a.batch.min(data.len())];
    let before = gradient_stats(&state, probe, a.hist_bins)?;
    let metrics = train(&mut state, &data, eval.as_ref())?;
    let after = gradient_stats(&state, probe, a.hist_bins)?;
    let (loss, acc) = evaluate(&state, eval.as_ref().unwrap_or(&data))?;

    let saved = state.to_model()?.save(&a.out, MANIFEST)?;
    write(&a.out.join("metrics.csv"), &metrics_csv(&metrics))?;
    write(&a.out.join("gradients_before.csv"), &before.to_csv())?;
    write(&a.out.join("gradients_after.csv"), &after.to_csv())?;
    for m in &metrics {
        println!(
            "epoch {:>3}  loss {:.6}  eval loss {:.6}  accuracy {:.4}  flips {}",
            m.epoch, m.loss, m.eval_loss, m.accuracy, m.pattern_flips
        );
    }
    println!("gradient stddev ratio {:.4} -> {:.4}", before.stddev_ratio(), after.stddev_ratio());
    println!("final loss {loss:.6}  accuracy {acc:.4}");
    println!("wrote {}", saved.display());
    Ok(())
}

fn cmd_toy(a: &ToyArgs) -> Result<()> {
    let cfg = ToyConfig { seed: a.seed, per_class: a.per_class, spread: a.spread, ..ToyConfig::default() };
    let data = toy_dataset(&cfg)?;
    let (train_set, test_set) = data.split_every(4);
    let opts = TrainOptions { epochs: a.pretrain_epochs, lr: a.lr, seed: a.seed, ..TrainOptions::default() };
    let (model, metrics) = pretrain(&toy_model(&cfg)?, &train_set, opts)?;
    let manifest = model.save(&a.out, MANIFEST)?;
    write_csv(&a.out.join("train.csv"), &train_set)?;
    write_csv(&a.out.join("test.csv"), &test_set)?;
    write(&a.out.join("pretrain.csv"), &metrics_csv(&metrics))?;
    if let Some(m) = metrics.last() {
        println!("pretrained {} epochs: loss {:.6}, accuracy {:.4}", m.epoch, m.eval_loss, m.accuracy);
    }
    println!("wrote {}", manifest.display());
    Ok(())
}
