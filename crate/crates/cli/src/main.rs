use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use raci_core::data::{validate_dataset, Dataset, SampleKey, Split};
use raci_core::evaluation::{self, ablation_suite, evaluate, export_attention, sensitivity_sweep, GroupBy};
use raci_core::io::{self, RunConfig};
use raci_core::predictor::{ModelKind, RaciConfig, Variant};
use raci_core::synthetic::{build_benchmark, GeneratorConfig};
use raci_core::training::{fine_tune, grad_check, init_run, mc_dropout_predict, train_epochs, FrozenContext, RunState, TrainConfig};

/// Retrieval-augmented hierarchical flux prediction experiments.
#[derive(Parser)]
#[command(name = "raci", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset directory.
    Synth(SynthArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint on another dataset.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and evaluate every ablation variant.
    Ablate(ExperimentArgs),
    /// Sensitivity of test metrics to the retrieval threshold and PCA width.
    Sweep(SweepArgs),
    /// MC-dropout predictive spread on one split.
    Uq(UqArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump every retrieval decision for one split.
    InspectRetrieval(InspectArgs),
    /// Dump attention weights and gates of one site-year.
    ExportAttention(AttentionArgs),
    /// Check a dataset directory against the format invariants.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Benchmark,
    Tiny,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator configuration (JSON); unspecified fields take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "benchmark")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Raci,
    Baseline,
}

#[derive(Args, Clone)]
struct RunConfigArgs {
    /// Run configuration (JSON) with `kind`, `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k_pca: Option<usize>,
}

impl RunConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => io::load_json::<RunConfig>(p)?,
            None => {
                let Some(epochs) = self.epochs else {
                    bail!("--epochs is required when no --config is given");
                };
                RunConfig {
                    kind: ModelKind::Raci,
                    model: RaciConfig::default(),
                    train: TrainConfig::new(epochs, 0),
                }
            }
        };
        if let Some(k) = self.kind {
            rc.kind = match k {
                KindArg::Raci => ModelKind::Raci,
                KindArg::Baseline => ModelKind::Baseline,
            };
        }
        if let Some(v) = self.variant {
            rc.model = rc.model.with_variant(v);
        }
        let t = &mut rc.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.seed = self.seed.unwrap_or(t.seed);
        t.lr = self.lr.unwrap_or(t.lr);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        let m = &mut rc.model;
        m.h = self.hidden.unwrap_or(m.h);
        m.dropout_p = self.dropout.unwrap_or(m.dropout_p);
        m.tau = self.tau.unwrap_or(m.tau);
        m.k_pca = self.k_pca.unwrap_or(m.k_pca);
        rc.model.validate()?;
        rc.train.validate()?;
        Ok(rc)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// Dataset whose auxiliary split serves as the retrieval pool (default: --data).
    #[arg(long)]
    pool_data: Option<PathBuf>,
    #[command(flatten)]
    cfg: RunConfigArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    pool_data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    None,
    Region,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pool_data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value = "none")]
    group_by: GroupArg,
    /// Metrics report (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    cfg: RunConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.95,0.97,0.99")]
    taus: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    k_pcas: Vec<usize>,
}

#[derive(Args)]
struct UqArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 50)]
    passes: usize,
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Dataset directory (default: the tiny generator preset).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model configuration (JSON; default: width 4, no dropout, one PCA axis).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "raci")]
    kind: KindArg,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pool_data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    site: String,
    #[arg(long)]
    year: i32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
}

const GRADCHECK_LIMIT: f64 = 1e-4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path) -> Result<Dataset> {
    io::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_pool(pool: &Option<PathBuf>) -> Result<Option<Dataset>> {
    pool.as_deref().map(load).transpose()
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_rng_record(dir: &Path, seed: u64) -> Result<()> {
    let rec = serde_json::json!({ "seed": seed, "scheme": io::RNG_SCHEME });
    io::save_json(dir.join("rng.json"), &rec)?;
    Ok(())
}

/// Writes the checkpoint, loss history and (when the split is populated)
/// test metrics of a run.
fn write_run(dir: &Path, state: &RunState, ds: &Dataset, pool_ds: &Dataset) -> Result<Option<evaluation::MetricsReport>> {
    io::save_checkpoint(state, dir.join("checkpoint.json"))?;
    io::write_loss_history(&state.history, dir.join("loss_history.csv"))?;
    write_rng_record(dir, state.train.seed)?;
    if ds.splits.test.is_empty() {
        return Ok(None);
    }
    let (rep, _) = evaluate(&state.model, ds, Split::Test, pool_ds, GroupBy::Region)?;
    io::save_json(dir.join("metrics_test.json"), &rep)?;
    Ok(Some(rep))
}

fn fmt_r2(r2: Option<f64>) -> String {
    r2.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth(a) => {
            let mut cfg = match (&a.config, a.preset) {
                (Some(p), _) => io::load_json::<GeneratorConfig>(p)?,
                (None, Preset::Benchmark) => GeneratorConfig::default(),
                (None, Preset::Tiny) => GeneratorConfig::tiny(0),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let ds = build_benchmark(&cfg)?;
            io::save_dataset(&ds, &a.out)?;
            io::save_json(a.out.join("generator.json"), &cfg)?;
            println!(
                "wrote {} site-years over {} sites to {}",
                ds.samples.len(),
                ds.sites.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let rc = a.cfg.resolve()?;
            let ds = load(&a.data)?;
            let pool = load_pool(&a.pool_data)?;
            let pool_ds = pool.as_ref().unwrap_or(&ds);
            mkdir(&a.run)?;
            io::save_json(a.run.join("config.json"), &rc)?;
            let mut state = init_run(&ds, rc.kind, rc.model, rc.train)?;
            train_epochs(&mut state, &ds, pool_ds, None)?;
            let rep = write_run(&a.run, &state, &ds, pool_ds)?;
            let loss = state.history.last().map_or(f64::NAN, |e| e.loss);
            match rep {
                Some(r) => println!(
                    "trained {} epochs: final loss {loss:.6}, test RMSE {:.6}, R2 {}",
                    state.epoch,
                    r.overall.rmse,
                    fmt_r2(r.overall.r2)
                ),
                None => println!("trained {} epochs: final loss {loss:.6}", state.epoch),
            }
        }
        Command::Finetune(a) => {
            let state = io::load_checkpoint(&a.checkpoint)?;
            let ds = load(&a.data)?;
            let pool = load_pool(&a.pool_data)?;
            let pool_ds = pool.as_ref().unwrap_or(&ds);
            mkdir(&a.run)?;
            let state = fine_tune(state, &ds, pool_ds, a.epochs, None)?;
            let rc = RunConfig {
                kind: state.model.kind,
                model: state.model.config.clone(),
                train: state.train.clone(),
            };
            io::save_json(a.run.join("config.json"), &rc)?;
            let rep = write_run(&a.run, &state, &ds, pool_ds)?;
            let loss = state.history.last().map_or(f64::NAN, |e| e.loss);
            match rep {
                Some(r) => println!(
                    "fine-tuned to epoch {}: final loss {loss:.6}, test RMSE {:.6}, R2 {}",
                    state.epoch,
                    r.overall.rmse,
                    fmt_r2(r.overall.r2)
                ),
                None => println!("fine-tuned to epoch {}: final loss {loss:.6}", state.epoch),
            }
        }
        Command::Eval(a) => {
            let state = io::load_checkpoint(&a.checkpoint)?;
            let ds = load(&a.data)?;
            let pool = load_pool(&a.pool_data)?;
            let pool_ds = pool.as_ref().unwrap_or(&ds);
            let group = match a.group_by {
                GroupArg::None => GroupBy::None,
                GroupArg::Region => GroupBy::Region,
            };
            let (rep, _) = evaluate(&state.model, &ds, a.split, pool_ds, group)?;
            if let Some(out) = &a.out {
                io::save_json(out, &rep)?;
            }
            println!(
                "{} split: RMSE {:.6}, within-site R2 {}, {} sites skipped, fallback rate {:.3}",
                a.split.name(),
                rep.overall.rmse,
                fmt_r2(rep.overall.r2),
                rep.overall.sites_skipped,
                rep.fallback_rate
            );
            for g in &rep.groups {
                println!("  {}: RMSE {:.6}, R2 {}", g.group, g.rmse, fmt_r2(g.r2));
            }
        }
        Command::Ablate(a) => {
            let rc = a.cfg.resolve()?;
            let ds = load(&a.data)?;
            mkdir(&a.run)?;
            io::save_json(a.run.join("config.json"), &rc)?;
            write_rng_record(&a.run, rc.train.seed)?;
            let rows = ablation_suite(&ds, &rc.model, &rc.train)?;
            io::write_ablation_csv(&rows, a.run.join("ablation.csv"))?;
            io::save_json(a.run.join("ablation.json"), &rows)?;
            let summary: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.variant, r.rmse)).collect();
            println!("ablation RMSE: {}", summary.join(", "));
        }
        Command::Sweep(a) => {
            let rc = a.exp.cfg.resolve()?;
            let ds = load(&a.exp.data)?;
            mkdir(&a.exp.run)?;
            io::save_json(a.exp.run.join("config.json"), &rc)?;
            write_rng_record(&a.exp.run, rc.train.seed)?;
            let table = sensitivity_sweep(&ds, &rc.model, &rc.train, &a.taus, &a.k_pcas)?;
            io::write_sweep_csv(&table, a.exp.run.join("sweep.csv"))?;
            io::save_json(a.exp.run.join("sweep.json"), &table)?;
            println!(
                "sweep: {} tau settings x k_pca {}, {} k_pca settings x tau {}",
                table.tau.len(),
                rc.model.k_pca,
                table.k_pca.len(),
                rc.model.tau
            );
        }
        Command::Uq(a) => {
            let state = io::load_checkpoint(&a.checkpoint)?;
            let ds = load(&a.data)?;
            mkdir(&a.out)?;
            let years: Vec<i32> = {
                let mut y: Vec<i32> = ds.splits.get(a.split).iter().map(|k| k.year).collect();
                y.sort_unstable();
                y.dedup();
                y
            };
            let frozen = FrozenContext::build(&state.model, &ds, &ds, &years)?;
            let ctx = frozen.ctx();
            let path = a.out.join("uq.csv");
            let mut rows = vec!["site_id,year,day,mean,std".to_string()];
            let mut ratios = Vec::new();
            for s in ds.split_samples(a.split)? {
                let mc = mc_dropout_predict(&state.model, s, &ctx, a.p, a.passes, a.seed)?;
                for d in 0..mc.mean.len() {
                    rows.push(format!(
                        "{},{},{d},{},{}",
                        s.site_id,
                        s.year,
                        io::fmt_f64(mc.mean[d]),
                        io::fmt_f64(mc.std[d])
                    ));
                }
                ratios.push(serde_json::json!({
                    "site_id": s.site_id, "year": s.year, "spread_ratio": mc.spread_ratio
                }));
            }
            fs::write(&path, rows.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))?;
            let mean_ratio = ratios
                .iter()
                .filter_map(|r| r["spread_ratio"].as_f64())
                .sum::<f64>()
                / ratios.len().max(1) as f64;
            io::save_json(
                a.out.join("uq_summary.json"),
                &serde_json::json!({
                    "passes": a.passes, "p": a.p, "seed": a.seed,
                    "mean_spread_ratio": mean_ratio, "samples": ratios
                }),
            )?;
            println!("{} passes at p = {}: mean spread ratio {mean_ratio:.6}", a.passes, a.p);
        }
        Command::Gradcheck(a) => {
            let ds = match &a.data {
                Some(p) => load(p)?,
                None => build_benchmark(&GeneratorConfig::tiny(3))?,
            };
            let cfg = match &a.config {
                Some(p) => io::load_json::<RaciConfig>(p)?,
                None => RaciConfig::toy(),
            };
            let kind = match a.kind {
                KindArg::Raci => ModelKind::Raci,
                KindArg::Baseline => ModelKind::Baseline,
            };
            let state = init_run(&ds, kind, cfg, TrainConfig::new(1, a.seed))?;
            let years: Vec<i32> = {
                let mut y: Vec<i32> = ds.splits.train.iter().map(|k| k.year).collect();
                y.sort_unstable();
                y.dedup();
                y
            };
            let frozen = FrozenContext::build(&state.model, &ds, &ds, &years)?;
            let batch = ds.split_samples(Split::Train)?;
            let rep = grad_check(&state.model, &batch, &frozen.ctx(), a.step)?;
            println!(
                "max relative error {:.3e} at {}[{}] over {} parameters",
                rep.max_rel_error, rep.worst_param, rep.worst_index, rep.n_checked
            );
            if !(rep.max_rel_error < GRADCHECK_LIMIT) {
                eprintln!("gradient check failed: limit {GRADCHECK_LIMIT:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::InspectRetrieval(a) => {
            let state = io::load_checkpoint(&a.checkpoint)?;
            let ds = load(&a.data)?;
            let pool = load_pool(&a.pool_data)?;
            let pool_ds = pool.as_ref().unwrap_or(&ds);
            if !state.model.needs_pool() {
                bail!("this model does not retrieve yearly context");
            }
            let (_, preds) = evaluate(&state.model, &ds, a.split, pool_ds, GroupBy::None)?;
            let frozen = FrozenContext::build(&state.model, &ds, pool_ds, &[])?;
            let keys: Vec<SampleKey> = frozen.pool.entries.iter().map(|e| e.key.clone()).collect();
            let ctx = frozen.ctx();
            let mut reports = Vec::new();
            for p in &preds {
                let s = ds.sample(&p.key).expect("evaluated key");
                let (_, diag) = state.model.forward(s, &ctx, &mut raci_core::predictor::Mode::Eval)?;
                if let Some(r) = diag.and_then(|d| d.retrieval) {
                    reports.push(r);
                }
            }
            io::write_retrieval_csv(&reports, &keys, &a.out)?;
            let fallbacks = reports.iter().filter(|r| r.fallback).count();
            println!(
                "{} targets against {} pool entries, {fallbacks} fallbacks, written to {}",
                reports.len(),
                keys.len(),
                a.out.display()
            );
        }
        Command::ExportAttention(a) => {
            let state = io::load_checkpoint(&a.checkpoint)?;
            let ds = load(&a.data)?;
            let s = ds
                .get(&a.site, a.year)
                .with_context(|| format!("no sample for site {} year {}", a.site, a.year))?;
            let frozen = FrozenContext::build(&state.model, &ds, &ds, &[a.year])?;
            let export = export_attention(&state.model, &ds, s, &frozen.ctx())?;
            mkdir(&a.out)?;
            let stem = format!("{}_{}", a.site, a.year);
            let files = io::write_attention(&export, &state.model.calendar, &a.out, &stem)?;
            let corr: Vec<String> = export
                .correlations
                .iter()
                .map(|c| format!("{} {:.4}{}", c.driver, c.r, if c.constant { " (constant)" } else { "" }))
                .collect();
            println!("wrote {} files; attention vs drivers: {}", files.len(), corr.join(", "));
        }
        Command::Validate(a) => {
            let ds = load(&a.data)?;
            let v = validate_dataset(&ds);
            for x in &v {
                println!("{x}");
            }
            println!("{} violations", v.len());
            if !v.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
