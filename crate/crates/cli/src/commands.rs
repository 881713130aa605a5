use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use julia_core::tensor::load_coo;
use julia_core::{
    align_components, compute_metrics, generate, split_dataset, success_rate, train_with_restarts, JuliaModel,
    MetricsReport, ParseOptions, SparseTensor, SyntheticSpec, TrainConfig, TrainReport,
};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::{DataArgs, EvalArgs, HyperArgs, ImputeArgs, RankSplit, SweepArgs, SynthArgs, TrainArgs};

const SWEEP_HEADER: &str = "r,f,seed,rmse,mae,rfe,epochs,seconds,success";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn data_err(path: &Path) -> impl FnOnce(julia_core::Error) -> CliError + '_ {
    move |e| CliError::data(format!("{}: {e}", path.display()))
}

fn load_model(path: &Path) -> CliResult<JuliaModel> {
    JuliaModel::load_checkpoint(path).map_err(data_err(path))
}

/// Mode count and declared shape of a COO file, from its `# shape:` header or
/// else from the field count of its first entry line.
fn sniff_coo(path: &Path) -> CliResult<(usize, Option<Vec<usize>>)> {
    let file = fs::File::open(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    for line in BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(dims) = rest.trim_start().strip_prefix("shape:") {
                let shape = dims
                    .split([',', '\t'])
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CliError::data(format!("{}: bad shape header: {e}", path.display())))?;
                return Ok((shape.len(), Some(shape)));
            }
            continue;
        }
        let fields = line.split([',', '\t']).count();
        if fields < 2 {
            return Err(CliError::data(format!("{}: entry line needs indices and a value", path.display())));
        }
        return Ok((fields - 1, None));
    }
    Err(CliError::data(format!("{}: no entries and no shape header", path.display())))
}

fn load_data(args: &DataArgs) -> CliResult<SparseTensor> {
    let n_modes = match args.modes {
        Some(n) => n,
        None => sniff_coo(&args.data)?.0,
    };
    let opts = ParseOptions { n_modes, aggregate: args.aggregate, one_based: args.one_based };
    load_coo(&args.data, &opts).map_err(data_err(&args.data))
}

fn train_config(h: &HyperArgs, seed: u64) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig { seed, deterministic: h.deterministic, ..TrainConfig::default() };
    if let Some(lr) = h.lr {
        cfg.lr_linear = lr;
        cfg.lr_nonlinear = lr;
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = h.$field { cfg.$field = v; })* };
    }
    set!(
        lr_linear,
        lr_nonlinear,
        batch_size,
        warmstart_epochs,
        ao_max_iters,
        ao_epochs_per_block,
        max_epochs,
        early_stop_rel_tol,
        patience,
        max_restarts,
        optimizer,
        init
    );
    cfg.validate()?;
    if !(h.train_frac > 0.0 && h.train_frac < 1.0) {
        return Err(CliError::usage(format!("--train-frac must lie in (0, 1), got {}", h.train_frac)));
    }
    if !(0.0..1.0).contains(&h.val_frac) {
        return Err(CliError::usage(format!("--val-frac must lie in [0, 1), got {}", h.val_frac)));
    }
    Ok(cfg)
}

/// One full training run: split, train with restarts.
fn run_training(
    data: &SparseTensor,
    split: RankSplit,
    h: &HyperArgs,
    cfg: &TrainConfig,
) -> CliResult<(JuliaModel, TrainReport, SparseTensor)> {
    let parts = split_dataset(data, h.train_frac, h.val_frac, cfg.seed).map_err(|e| CliError::data(e.to_string()))?;
    let (model, report) = train_with_restarts(data, &parts, split.r, split.f, h.activation, cfg)?;
    Ok((model, report, data.select(&parts.test)))
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        shape: a.shape.0.clone(),
        r_true: a.r_true,
        f_true: a.f_true,
        missing_rate: a.missing,
        noise_std: a.noise,
        seed: a.seed,
        activation: a.activation,
    };
    spec.validate()?;
    if spec.observed_count() == 0 {
        return Err(CliError::usage("--missing leaves no observed entries"));
    }
    let data = generate(&spec)?;
    create_dir(&a.out)?;
    let coo = a.out.join("data.coo");
    data.tensor.save_coo(&coo).map_err(data_err(&coo))?;
    let truth = a.out.join("truth.ckpt.json");
    data.truth.save_checkpoint(&truth).map_err(data_err(&truth))?;
    let echo = serde_json::to_string_pretty(&spec)?;
    write_file(&a.out.join("spec.json"), &echo)?;
    println!("{echo}");
    log::info!("wrote {} entries to {}", data.tensor.nnz(), coo.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = train_config(&a.hyper, a.seed)?;
    let data = load_data(&a.input)?;
    let (model, report, test) = run_training(&data, a.rank_split, &a.hyper, &cfg)?;
    create_dir(&a.out)?;
    let ckpt = a.out.join("model.ckpt.json");
    model.save_checkpoint(&ckpt).map_err(data_err(&ckpt))?;
    write_file(&a.out.join("history.csv"), report.history_csv())?;
    let summary = serde_json::to_string_pretty(&report.summary_json())?;
    write_file(&a.out.join("summary.json"), format!("{summary}\n"))?;
    let test_path = a.out.join("test.coo");
    test.save_coo(&test_path).map_err(data_err(&test_path))?;
    println!("{summary}");
    if !report.success {
        return Err(CliError::Training(format!(
            "no attempt reached validation RFE < 1 in {} attempts",
            report.attempt_seeds.len()
        )));
    }
    Ok(())
}

pub fn impute(a: &ImputeArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let shape = model.shape().to_vec();
    let file =
        fs::File::open(&a.queries).map_err(|e| CliError::data(format!("cannot read {}: {e}", a.queries.display())))?;
    let mut values = Vec::new();
    let mut problems = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: Result<Vec<usize>, String> = line
            .split([',', '\t'])
            .map(|f| {
                let i: usize = f.trim().parse().map_err(|_| format!("bad index '{}'", f.trim()))?;
                if a.one_based {
                    i.checked_sub(1).ok_or_else(|| "index 0 in one-based input".to_string())
                } else {
                    Ok(i)
                }
            })
            .collect();
        match parsed.and_then(|idx| model.predict(&idx).map_err(|e| e.to_string())) {
            Ok(v) => values.push(v),
            Err(msg) => problems.push(format!("{}:{}: {msg}", a.queries.display(), lineno + 1)),
        }
    }
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("{p}");
        }
        return Err(CliError::data(format!("{} invalid queries for shape {shape:?}", problems.len())));
    }
    let mut text = String::new();
    for v in values {
        text.push_str(&format!("{v}\n"));
    }
    match &a.out {
        Some(path) => write_file(path, text),
        None => Ok(std::io::stdout().write_all(text.as_bytes())?),
    }
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let shape = model.shape().to_vec();
    let (n_modes, declared) = sniff_coo(&a.data)?;
    if n_modes != shape.len() || declared.as_ref().is_some_and(|d| *d != shape) {
        let found = declared.map_or(format!("{n_modes} modes"), |d| format!("{d:?}"));
        return Err(CliError::data(format!("data has shape {found}, model has {shape:?}")));
    }
    let opts = ParseOptions { n_modes, aggregate: None, one_based: a.one_based };
    let data = load_coo(&a.data, &opts).map_err(data_err(&a.data))?;
    let pred = data
        .entries()
        .map(|(idx, _)| model.predict(idx))
        .collect::<julia_core::Result<Vec<_>>>()
        .map_err(|e| CliError::data(format!("{}: {e}", a.data.display())))?;
    let metrics = compute_metrics(&pred, data.values()).map_err(|e| CliError::data(e.to_string()))?;
    let mut out = serde_json::to_value(&metrics)?;
    if let Some(path) = &a.align {
        let truth = load_model(path)?;
        let report = align_components(&model.cp, &truth.cp).map_err(data_err(path))?;
        out["alignment"] = serde_json::to_value(report)?;
    }
    let text = format!("{}\n", serde_json::to_string_pretty(&out)?);
    match &a.out {
        Some(path) => write_file(path, text),
        None => Ok(std::io::stdout().write_all(text.as_bytes())?),
    }
}

struct SweepRow {
    split: RankSplit,
    seed: u64,
    outcome: CliResult<TrainReport>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepRow {
    /// Held-out test metrics, or validation metrics when the test part is empty.
    fn metrics(&self) -> Option<&MetricsReport> {
        let rep = self.outcome.as_ref().ok()?;
        rep.test_metrics.as_ref().or(rep.val_metrics.as_ref())
    }

    fn csv(&self) -> String {
        let RankSplit { r, f } = self.split;
        match &self.outcome {
            Ok(rep) => {
                let m = self.metrics();
                format!(
                    "{r},{f},{},{},{},{},{},{},{}",
                    self.seed,
                    fmt_opt(m.map(|m| m.rmse)),
                    fmt_opt(m.map(|m| m.mae)),
                    fmt_opt(m.and_then(|m| m.rfe)),
                    rep.epochs(),
                    rep.seconds(),
                    rep.success
                )
            }
            Err(_) => format!("{r},{f},{},,,,0,0,false", self.seed),
        }
    }
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    let splits = &a.splits.0;
    if splits.is_empty() {
        return Err(CliError::usage("--splits must name at least one R/F split"));
    }
    let seeds = match (&a.seeds, a.seed) {
        (Some(list), _) if !list.0.is_empty() => list.0.clone(),
        (None, Some(seed)) => vec![seed],
        _ => return Err(CliError::usage("sweep needs --seeds or --seed")),
    };
    if a.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    // validate every hyperparameter before any run starts
    train_config(&a.hyper, 0)?;
    let data = load_data(&a.input)?;

    let cells: Vec<(RankSplit, u64)> = splits.iter().flat_map(|&s| seeds.iter().map(move |&seed| (s, seed))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::usage(format!("cannot start {} workers: {e}", a.jobs)))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(split, seed)| {
                let outcome = train_config(&a.hyper, seed)
                    .and_then(|cfg| run_training(&data, split, &a.hyper, &cfg))
                    .map(|(_, report, _)| report);
                if let Err(e) = &outcome {
                    log::warn!("run {}/{} seed {seed} failed: {e}", split.r, split.f);
                }
                SweepRow { split, seed, outcome }
            })
            .collect()
    });

    let mut csv = format!("{SWEEP_HEADER}\n");
    for (k, &split) in splits.iter().enumerate() {
        let group = &rows[k * seeds.len()..(k + 1) * seeds.len()];
        for row in group {
            csv.push_str(&row.csv());
            csv.push('\n');
        }
        // a run that errored or has no defined RFE counts as unsuccessful
        let rfes: Vec<f64> =
            group.iter().map(|row| row.metrics().and_then(|m| m.rfe).unwrap_or(f64::INFINITY)).collect();
        let rate = success_rate(&rfes)?;
        csv.push_str(&format!("{},{},all,,,,,,{rate}\n", split.r, split.f));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}
