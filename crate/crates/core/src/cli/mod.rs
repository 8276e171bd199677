//! The `moretool` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure (non-finite loss, failed gradient check).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::data::{augment_dataset, generate_synthetic, load_dataset, save_dataset, AnyDataset, SynthConfig};
use crate::ensemble::{fuse, greedy_grow, leave_one_out_weights, segmented_predictions, Metric, SEGMENT_WEIGHTS};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, read_predictions, write_predictions, PredictionSet};
use crate::models::{check_model_gradients, checkpoint, random_problem, ModelSpec};
use crate::training::{predict_dataset, train, OutputDir, Prepared, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "moretool",
    version,
    about = "Train, evaluate and ensemble multi-label video classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic frame-level dataset with planted label structure.
    GenData(GenDataArgs),
    /// Train a model and write per-epoch checkpoints and a metrics log.
    Train(TrainArgs),
    /// Score a prediction file against a labeled dataset.
    Eval(EvalArgs),
    /// Write predictions of a checkpoint on a dataset.
    Infer(InferArgs),
    /// Leave-one-out fusion weights (or greedy growth) over prediction files.
    Ensemble(EnsembleArgs),
    /// Finite-difference gradient check of a model spec on random inputs.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Generator config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset (`.mtds` for packed binary, otherwise JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Also write a validation split here, taken from the end of the data.
    #[arg(long)]
    val_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long)]
    num_videos: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    cooccurrence_strength: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Model spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Training config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, `log.csv` and `config.json`.
    #[arg(long)]
    out: PathBuf,
    /// Train on `N` temporal segments plus the global mean of every video.
    #[arg(long)]
    augment: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lc_fire_after: Option<usize>,
    #[arg(long)]
    freeze_backbone_on_fire: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Write the report (JSON) here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Merge predictions over temporal segments and the global mean.
    #[arg(long)]
    segmented: bool,
    #[arg(long, default_value_t = 3)]
    segments: usize,
    /// Segment weights, segments first and the global mean last.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    segment_weights: Option<Vec<f64>>,
    /// Classes written per video; 0 writes all.
    #[arg(long, default_value_t = 20)]
    top_k: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Gap,
    Map,
    Perr,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[arg(long, num_args = 2.., required = true)]
    preds: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Member names; defaults to the prediction file stems.
    #[arg(long, num_args = 1..)]
    names: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t = MetricArg::Gap)]
    metric: MetricArg,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Write the weighted fusion here.
    #[arg(long)]
    fused_out: Option<PathBuf>,
    /// Grow the ensemble greedily from the given pool.
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 2)]
    group_size: usize,
    #[arg(long, default_value_t = 100)]
    max_rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 0.8)]
    keep_prob: f64,
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape { .. } => EXIT_USAGE,
        Error::Data(_) | Error::Record { .. } | Error::Io { .. } | Error::Json(_) => EXIT_DATA,
        Error::Numerical(_) => EXIT_NUMERICAL,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MORETOOL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MORETOOL_THREADS must be a positive integer, got `{v}`")))?;
    // A pool may already exist when `run` is called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Ensemble(a) => ensemble_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{}: no such file", path.display())))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(Error::Data(format!("{}: output directory does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<path>.config.json`, the resolved-config echo written beside an output.
fn echo_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<SynthConfig>(p)?,
        None => SynthConfig::new(1000, 20, 16, 0),
    };
    cfg.num_videos = a.num_videos.unwrap_or(cfg.num_videos);
    cfg.num_classes = a.classes.unwrap_or(cfg.num_classes);
    cfg.dim = a.dim.unwrap_or(cfg.dim);
    cfg.cooccurrence_strength = a.cooccurrence_strength.unwrap_or(cfg.cooccurrence_strength);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    require_parent(&a.out)?;
    if let Some(v) = &a.val_out {
        require_parent(v)?;
        if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
            return Err(Error::Config("--val-fraction must lie in (0, 1)".into()));
        }
    }
    let (ds, truth) = generate_synthetic(&cfg)?;
    let (train, val) = match &a.val_out {
        Some(_) => ds.split(1.0 - a.val_fraction),
        None => (ds, crate::data::Dataset::new(cfg.dim, cfg.num_classes)),
    };
    save_dataset(&a.out, &AnyDataset::Frame(train))?;
    if let Some(v) = &a.val_out {
        save_dataset(v, &AnyDataset::Frame(val))?;
    }
    let mut truth_path = a.out.as_os_str().to_owned();
    truth_path.push(".truth.json");
    write_json(Path::new(&truth_path), &truth)?;
    write_json(
        &echo_path(&a.out),
        &json!({ "synth": cfg, "out": a.out, "val_out": a.val_out, "val_fraction": a.val_fraction }),
    )?;
    println!("wrote {} videos to {}", cfg.num_videos, a.out.display());
    Ok(EXIT_OK)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let spec: ModelSpec = read_json(&a.spec)?;
    spec.validate()?;
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.base_lr = a.lr.unwrap_or(cfg.base_lr);
    cfg.batch_size = a.batch_size.or(cfg.batch_size);
    cfg.lc_fire_after_epochs = a.lc_fire_after.or(cfg.lc_fire_after_epochs);
    cfg.freeze_backbone_on_fire |= a.freeze_backbone_on_fire;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    require_file(&a.data)?;
    if let Some(v) = &a.val {
        require_file(v)?;
    }
    let mut data = load_dataset(&a.data)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", a.data.display())));
    }
    if let Some(n) = a.augment {
        data = AnyDataset::Video(augment_dataset(&data.into_frames()?, n)?);
    }
    let val = a.val.as_deref().map(load_dataset).transpose()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_json(
        &a.out.join("config.json"),
        &json!({ "spec": spec, "train": cfg, "data": a.data, "val": a.val, "augment": a.augment }),
    )?;
    let out = OutputDir { dir: a.out.clone() };
    let run = train(spec, &data, val.as_ref(), &cfg, Some(&out))?;
    if let Some(at) = &run.attach {
        write_json(&a.out.join("lc_attach.json"), at)?;
    }
    let last = run.log.last();
    println!(
        "trained {} epochs; final loss {}{}",
        run.log.len(),
        last.map(|r| r.loss).unwrap_or(f64::NAN),
        last.and_then(|r| r.gap)
            .map(|g| format!(", val GAP {g}"))
            .unwrap_or_default()
    );
    Ok(EXIT_OK)
}

fn truth_of(ds: &AnyDataset) -> Vec<(String, Vec<usize>)> {
    ds.ids().into_iter().zip(ds.label_sets()).collect()
}

fn load_predictions(path: &Path, ds: &AnyDataset) -> Result<PredictionSet> {
    read_predictions(path, ds.num_classes())?
        .align(&truth_of(ds))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    require_file(&a.pred)?;
    require_file(&a.data)?;
    if let Some(o) = &a.out {
        require_parent(o)?;
    }
    let ds = load_dataset(&a.data)?;
    let preds = load_predictions(&a.pred, &ds)?;
    let report = evaluate(&preds, a.k)?;
    println!(
        "{}",
        serde_json::to_string(&json!({"GAP": report.gap, "mAP": report.map, "PERR": report.perr}))?
    );
    if let Some(o) = &a.out {
        write_json(o, &report)?;
        write_json(&echo_path(o), &json!({ "pred": a.pred, "data": a.data, "k": a.k }))?;
    }
    Ok(EXIT_OK)
}

fn infer_cmd(a: InferArgs) -> Result<i32> {
    require_file(&a.ckpt)?;
    require_file(&a.data)?;
    require_parent(&a.out)?;
    let weights = a.segment_weights.clone().unwrap_or_else(|| {
        if a.segments == 3 {
            SEGMENT_WEIGHTS.to_vec()
        } else {
            let mut w = vec![0.3 / a.segments as f64; a.segments];
            w.push(0.7);
            w
        }
    });
    let model = checkpoint::load(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let preds = if a.segmented {
        segmented_predictions(&model, &ds.clone().into_frames()?, a.segments, &weights)?
    } else {
        predict_dataset(&model, &Prepared::for_model(&model.spec, &ds)?)?
    };
    write_predictions(&a.out, &preds, a.top_k)?;
    write_json(
        &echo_path(&a.out),
        &json!({
            "ckpt": a.ckpt, "data": a.data, "segmented": a.segmented,
            "segments": a.segments, "segment_weights": weights, "top_k": a.top_k,
        }),
    )?;
    println!("wrote predictions for {} videos to {}", preds.len(), a.out.display());
    Ok(EXIT_OK)
}

fn ensemble_cmd(a: EnsembleArgs) -> Result<i32> {
    for p in &a.preds {
        require_file(p)?;
    }
    require_file(&a.data)?;
    require_parent(&a.out)?;
    let names = match &a.names {
        Some(n) if n.len() != a.preds.len() => {
            return Err(Error::Config(format!(
                "{} names for {} prediction files",
                n.len(),
                a.preds.len()
            )))
        }
        Some(n) => n.clone(),
        None => a
            .preds
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect(),
    };
    let metric = match a.metric {
        MetricArg::Gap => Metric::Gap { k: a.k },
        MetricArg::Map => Metric::Map,
        MetricArg::Perr => Metric::Perr,
    };
    let ds = load_dataset(&a.data)?;
    let members: Vec<PredictionSet> = a
        .preds
        .iter()
        .map(|p| load_predictions(p, &ds))
        .collect::<Result<_>>()?;
    let refs: Vec<&PredictionSet> = members.iter().collect();
    let (chosen, report, trace) = if a.greedy {
        let g = greedy_grow(&names, &refs, a.group_size, metric, a.seed, a.max_rounds)?;
        let chosen: Vec<&PredictionSet> = g.selected.iter().map(|&i| refs[i]).collect();
        let report = if chosen.len() >= 2 {
            let sub: Vec<String> = g.selected.iter().map(|&i| names[i].clone()).collect();
            Some(leave_one_out_weights(&sub, &chosen, metric)?)
        } else {
            None
        };
        (g.selected.clone(), report, Some(g))
    } else {
        (
            (0..refs.len()).collect::<Vec<_>>(),
            Some(leave_one_out_weights(&names, &refs, metric)?),
            None,
        )
    };
    let weights = match (&trace, &report) {
        (Some(g), _) => g.weights.clone(),
        (None, Some(r)) => r.weights(),
        (None, None) => vec![1.0],
    };
    let fused = fuse(&chosen.iter().map(|&i| refs[i]).collect::<Vec<_>>(), &weights)?;
    let fused_report = evaluate(&fused, a.k)?;
    let out = json!({
        "members": report.as_ref().map(|r| r.members.clone()),
        "baseline": report.as_ref().map(|r| r.baseline),
        "fallback": report.as_ref().map(|r| r.fallback),
        "selected": chosen.iter().map(|&i| names[i].clone()).collect::<Vec<_>>(),
        "weights": weights,
        "fused": {"GAP": fused_report.gap, "mAP": fused_report.map, "PERR": fused_report.perr},
        "trace": trace.map(|g| g.trace),
    });
    write_json(&a.out, &out)?;
    if let Some(f) = &a.fused_out {
        require_parent(f)?;
        write_predictions(f, &fused, 0)?;
    }
    write_json(
        &echo_path(&a.out),
        &json!({
            "preds": a.preds, "names": names, "data": a.data, "metric": a.metric, "k": a.k,
            "greedy": a.greedy, "group_size": a.group_size, "max_rounds": a.max_rounds, "seed": a.seed,
        }),
    )?;
    println!("fused GAP {} with weights {:?}", fused_report.gap, weights);
    Ok(EXIT_OK)
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<i32> {
    let spec: ModelSpec = read_json(&a.spec)?;
    let (model, batch, labels) = random_problem(&spec, a.seed, a.batch)?;
    let r = check_model_gradients(
        &model,
        batch.as_input(),
        &labels,
        a.keep_prob,
        a.seed,
        a.step,
        a.tolerance,
    )?;
    println!(
        "max_rel_error={:e} checked={} skipped_kinks={} total={} tolerance={:e} {}",
        r.max_rel_error,
        r.checked,
        r.skipped_kinks,
        r.total,
        r.tolerance,
        if r.passed() { "PASS" } else { "FAIL" }
    );
    Ok(if r.passed() { EXIT_OK } else { EXIT_NUMERICAL })
}
