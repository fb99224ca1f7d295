//! One function per subcommand. Each reads its inputs, writes its artifacts
//! and returns a short human-readable report for stdout.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use creepformer::checkpoint::Checkpoint;
use creepformer::data::csvio::{load_records, save_records};
use creepformer::data::{build_windows, split, standardize, synth_generate, NormalizedSeries, PreparedData, Specimen, SplitFractions, Window};
use creepformer::explain::{mean_abs_shap, write_importance_csv, write_summary_csv, Explainer};
use creepformer::infer::{evaluate_teacher_forced, rollout, write_residuals_csv, write_trajectory_csv, RolloutRequest};
use creepformer::model::count_flops;
use creepformer::train::{run_ablation_suite, train, write_ablation_csv, write_metrics_csv};
use creepformer::{AblationSpec, RunConfig, TataModel};

use crate::args::{AblateArgs, DataArgs, EvaluateArgs, ExplainArgs, FitArgs, FlopsArgs, RolloutArgs, Subset, SynthArgs, TrainArgs};

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_specimens(path: &Path) -> Result<Vec<Specimen>> {
    let records = load_records(path).with_context(|| format!("reading {}", path.display()))?;
    if records.is_empty() {
        bail!("{} contains no specimens", path.display());
    }
    Ok(standardize(&records)?)
}

fn prepare(args: &DataArgs, cfg: &RunConfig) -> Result<PreparedData> {
    let specimens = load_specimens(&args.data)?;
    let seed = args.split_seed.unwrap_or(cfg.train.seed);
    Ok(PreparedData::new(specimens, args.split.into(), seed)?)
}

/// Specimens normalized with a checkpoint's statistics, and the requested
/// split under the same seed and mode used for training.
fn checkpoint_data(args: &DataArgs, cfg: &RunConfig, ckpt: &Checkpoint, subset: Subset) -> Result<(Vec<Specimen>, Vec<NormalizedSeries>, Vec<Window>)> {
    let specimens = load_specimens(&args.data)?;
    let seed = args.split_seed.unwrap_or(cfg.train.seed);
    let splits = split(&build_windows(specimens.len()), args.split.into(), SplitFractions::default(), seed)?;
    let series = specimens.iter().map(|s| NormalizedSeries::new(s, &ckpt.stats)).collect();
    let windows = match subset {
        Subset::Train => splits.train,
        Subset::Val => splits.val,
        Subset::Test => splits.test,
    };
    Ok((specimens, series, windows))
}

pub fn synth(args: &SynthArgs) -> Result<String> {
    let records = synth_generate(args.n, args.seed);
    save_records(&args.out, &records)?;
    Ok(format!("wrote {} specimens to {}", records.len(), args.out.display()))
}

pub fn fit(args: &FitArgs) -> Result<String> {
    let records = load_records(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    if records.is_empty() {
        bail!("{} contains no specimens", args.data.display());
    }
    let specimens = standardize(&records)?;
    let mut out = csv::Writer::from_writer(create(&args.out)?);
    out.write_record(["specimen_id", "a", "b", "c", "r2", "n_evals", "converged"])?;
    for s in &specimens {
        let p = &s.params;
        out.write_record([
            s.id.clone(),
            p.a.to_string(),
            p.b.to_string(),
            p.c.to_string(),
            p.r2.to_string(),
            p.n_evals.to_string(),
            p.converged.to_string(),
        ])?;
    }
    out.flush()?;
    if let Some(path) = &args.standardized {
        let daily: Vec<_> = specimens.iter().map(Specimen::to_record).collect();
        save_records(path, &daily)?;
    }
    let mut r2: Vec<f64> = specimens.iter().map(|s| s.params.r2).collect();
    r2.sort_by(f64::total_cmp);
    let unconverged = specimens.iter().filter(|s| !s.params.converged).count();
    Ok(format!(
        "fitted {} specimens: median R² {:.5}, min R² {:.5}, {} flagged unconverged",
        specimens.len(),
        r2[r2.len() / 2],
        r2[0],
        unconverged
    ))
}

pub fn train_cmd(args: &TrainArgs, cfg: &RunConfig) -> Result<String> {
    let data = prepare(&args.data, cfg)?;
    let mut model = TataModel::new(cfg.model.clone(), AblationSpec::full(), cfg.train.seed)?;
    tracing::info!(params = model.num_params(), train = data.splits.train.len(), val = data.splits.val.len(), "training");
    let report = train(&mut model, &data, &cfg.train, |m| {
        tracing::info!(epoch = m.epoch, train_loss = m.train_loss, val_loss = m.val_loss, val_mape = m.val_mape, lr = m.lr, "epoch");
    })?;
    let ckpt = Checkpoint { model, stats: data.stats };
    ckpt.save(&args.checkpoint)?;
    if let Some(path) = &args.metrics {
        let mut w = create(path)?;
        write_metrics_csv(&mut w, &report.metrics)?;
        w.flush()?;
    }
    Ok(format!(
        "best epoch {} of {}: val loss {:.4e}{}; checkpoint {}",
        report.best_epoch,
        report.metrics.len(),
        report.best_val_loss,
        if report.stopped_early { " (stopped early)" } else { "" },
        args.checkpoint.display()
    ))
}

pub fn evaluate(args: &EvaluateArgs, cfg: &RunConfig) -> Result<String> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (_, series, windows) = checkpoint_data(&args.data, cfg, &ckpt, args.subset)?;
    let ev = evaluate_teacher_forced(&ckpt.model, &ckpt.stats, &series, &windows)?;
    if let Some(path) = &args.residuals {
        let mut w = create(path)?;
        write_residuals_csv(&mut w, &ev.residuals)?;
        w.flush()?;
    }
    Ok(format!("{} windows: MAPE {:.3}%, R² {:.5}", windows.len(), ev.mape, ev.r2))
}

pub fn ablate(args: &AblateArgs, cfg: &RunConfig) -> Result<String> {
    let data = prepare(&args.data, cfg)?;
    let rows = run_ablation_suite(&data, &cfg.model, &cfg.train, |r| {
        tracing::info!(variant = r.variant, params = r.params, val_mape = r.val_mape, "ablation variant done");
    })?;
    let mut w = create(&args.out)?;
    write_ablation_csv(&mut w, &rows)?;
    w.flush()?;
    let mut report = String::new();
    for r in &rows {
        report.push_str(&format!("{:<24} {:>10} params  val MAPE {:.3}%\n", r.variant, r.params, r.val_mape));
    }
    Ok(report.trim_end().to_string())
}

pub fn rollout_cmd(args: &RolloutArgs) -> Result<String> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let req = RolloutRequest {
        density: args.density,
        fc: args.fc,
        e: args.e,
        initial_creep: args.initial_creep,
        horizon: args.days,
    };
    let traj = rollout(&ckpt.model, &ckpt.stats, &req)?;
    let mut w = create(&args.out)?;
    write_trajectory_csv(&mut w, &traj)?;
    w.flush()?;
    let last = traj.creep.last().copied().unwrap_or_default();
    Ok(format!("day {} creep {:.2} µε; trajectory {}", traj.days.len(), last, args.out.display()))
}

pub fn explain(args: &ExplainArgs, cfg: &RunConfig) -> Result<String> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (specimens, series, mut windows) = checkpoint_data(&args.data, cfg, &ckpt, args.subset)?;
    if let Some(limit) = args.limit {
        if limit == 0 {
            bail!("--limit must be at least 1");
        }
        let stride = windows.len().div_ceil(limit).max(1);
        windows = windows.into_iter().step_by(stride).collect();
    }
    let seed = args.data.split_seed.unwrap_or(cfg.train.seed);
    let train_split = split(&build_windows(specimens.len()), args.data.split.into(), SplitFractions::default(), seed)?.train;
    let mut idx: Vec<usize> = train_split.iter().map(|w| w.specimen).collect();
    idx.sort_unstable();
    idx.dedup();
    let background: Vec<[f64; 3]> = idx.iter().map(|&i| specimens[i].features).collect();
    let raw: Vec<[f64; 3]> = specimens.iter().map(|s| s.features).collect();

    let explainer = Explainer::new(&ckpt.model, &ckpt.stats, &background, seed)?;
    let samples = explainer.explain_windows(&series, &raw, &windows)?;
    let importance = mean_abs_shap(&samples)?;
    let mut w = create(&args.importance)?;
    write_importance_csv(&mut w, &importance)?;
    w.flush()?;
    if let Some(path) = &args.summary {
        let mut w = create(path)?;
        write_summary_csv(&mut w, &samples)?;
        w.flush()?;
    }
    let mut report = format!("{} samples, background {} rows\n", samples.len(), explainer.background_len());
    for r in &importance {
        report.push_str(&format!("{:<8} mean|SHAP| {:.5} ± {:.5}\n", r.feature, r.mean_abs_shap, r.std));
    }
    Ok(report.trim_end().to_string())
}

pub fn flops(args: &FlopsArgs, cfg: &RunConfig) -> Result<String> {
    if args.seq_len == 0 || args.batch == 0 {
        bail!("--seq-len and --batch must be at least 1");
    }
    let table = count_flops(&cfg.model, &AblationSpec::full(), args.seq_len, args.batch);
    let mut text = String::from("component,flops,share_percent\n");
    for c in &table.components {
        text.push_str(&format!("{},{},{:.4}\n", c.name, c.flops, table.share(c.name)));
    }
    text.push_str(&format!("total,{},100.0000\n", table.total()));
    if let Some(path) = &args.out {
        let mut w = create(path)?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
    }
    Ok(text.trim_end().to_string())
}
