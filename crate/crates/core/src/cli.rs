//! Command-line surface: `generate`, `train`, `eval` and `report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, write_synthetic_dataset, Dataset, Sample, SplitManifest, SyntheticSpec};
use crate::detector::{Checkpoint, DetectorModel};
use crate::error::{Error, Result};
use crate::eval::{detect, evaluate, write_detections_jsonl, Interpolation, PostProcess, DEFAULT_MATCH_IOU};
use crate::tensor::Image;
use crate::trainer::{
    self, run_until, IsdTypes, Mode, RunLog, TrainConfig, TrainData, Trainer, CONFIG_FILE, EVAL_CSV, FINAL_CHECKPOINT,
    STEPS_CSV,
};

#[derive(Debug, Parser)]
#[command(
    name = "isd",
    version,
    about = "Interpolation-based semi-supervised detection on synthetic shapes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with labeled/unlabeled/eval splits.
    Generate(GenerateArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare runs: markdown table and curve plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// TOML file with split sizes and a `[spec]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub n_labeled: Option<usize>,
    #[arg(long)]
    pub n_unlabeled: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_eval: usize,
    pub spec: SyntheticSpec,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_labeled: 200,
            n_unlabeled: 2000,
            n_eval: 500,
            spec: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Supervised,
    Csd,
    Isd,
    #[value(name = "csd+isd")]
    CsdIsd,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => Mode::Supervised,
            ModeArg::Csd => Mode::Csd,
            ModeArg::Isd => Mode::Isd,
            ModeArg::CsdIsd => Mode::CsdIsd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TypesArg {
    Type1,
    Type2,
    Both,
}

impl From<TypesArg> for IsdTypes {
    fn from(t: TypesArg) -> Self {
        match t {
            TypesArg::Type1 => IsdTypes::Type1,
            TypesArg::Type2 => IsdTypes::Type2,
            TypesArg::Both => IsdTypes::Both,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (TOML); flags below override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for metrics and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub types: Option<TypesArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Continue from a training checkpoint; logs in `--out` are appended to.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Labeled,
    Unlabeled,
    Eval,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_MATCH_IOU)]
    pub iou: f64,
    /// Use 11-point interpolation instead of all-point.
    #[arg(long)]
    pub eleven_point: bool,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every detection as JSON lines.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (or their eval.csv files).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Directory for report.md and the PNG figures.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            for (name, ap) in &report.per_class_ap {
                match ap {
                    Some(v) => println!("{name:>12}  AP {v:6.2}"),
                    None => println!("{name:>12}  AP   n/a"),
                }
            }
            println!("{:>12}  {:6.2}", "mAP", report.map);
            Ok(())
        }
        Command::Report(a) => {
            let table = cmd_report(&a)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateConfig> {
    let mut cfg: GenerateConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => GenerateConfig::default(),
    };
    if let Some(n) = args.n_labeled {
        cfg.n_labeled = n;
    }
    if let Some(n) = args.n_unlabeled {
        cfg.n_unlabeled = n;
    }
    if let Some(n) = args.n_eval {
        cfg.n_eval = n;
    }
    if let Some(s) = args.seed {
        cfg.spec.seed = s;
    }
    let manifest = SplitManifest::sequential(cfg.n_labeled, cfg.n_unlabeled, cfg.n_eval);
    if manifest.is_empty() {
        return Err(Error::config("all split sizes are zero"));
    }
    write_synthetic_dataset(&args.out, &cfg.spec, &manifest, args.force)?;
    log::info!(
        "wrote {} labeled / {} unlabeled / {} eval images to {}",
        cfg.n_labeled,
        cfg.n_unlabeled,
        cfg.n_eval,
        args.out.display()
    );
    Ok(cfg)
}

/// Applies command-line overrides on top of a config.
pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => read_toml::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if let Some(t) = args.types {
        cfg.types = t.into();
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.gamma1 {
        cfg.gamma1 = v;
    }
    if let Some(v) = args.gamma2 {
        cfg.gamma2 = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.max_iterations {
        cfg.max_iterations = v;
        cfg.ramp_up = cfg.ramp_up.min(v);
        cfg.ramp_down = cfg.ramp_down.min(v - cfg.ramp_up);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<trainer::RunOutput> {
    let ds = load_dataset(&args.data)?;
    let data = TrainData {
        labeled: &ds.labeled,
        unlabeled: &ds.unlabeled,
        eval: &ds.eval,
    };
    let names = ds.info.class_names.clone();
    match &args.resume {
        None => {
            let cfg = train_config(args)?;
            let (_, out) = trainer::train(cfg, &data, &names, Some(&args.out))?;
            Ok(out)
        }
        Some(ck) => {
            let mut tr = Trainer::from_checkpoint(Checkpoint::load(ck)?)?;
            let mut log = RunLog::open(&args.out, &names, true)?;
            let until = tr.config().max_iterations;
            let out = run_until(&mut tr, &data, until, Some(&mut log))?;
            tr.checkpoint()?.save(&args.out.join(FINAL_CHECKPOINT))?;
            Ok(out)
        }
    }
}

/// JSON report written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub split: String,
    pub num_images: usize,
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    /// Percent; `None` when the split has no object of that class.
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    pub map: f64,
}

fn split_samples(ds: &Dataset, split: Split) -> (&'static str, &[Sample]) {
    match split {
        Split::Labeled => ("labeled", &ds.labeled),
        Split::Unlabeled => ("unlabeled", &ds.unlabeled),
        Split::Eval => ("eval", &ds.eval),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary> {
    let model = Checkpoint::load(&args.checkpoint)?.into_model()?;
    let ds = load_dataset(&args.data)?;
    if ds.info.class_names.len() != model.arch().num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, the checkpoint predicts {}",
            ds.info.class_names.len(),
            model.arch().num_classes
        )));
    }
    let (split_name, samples) = split_samples(&ds, args.split);
    let images: Vec<Image> = samples.iter().map(|s| Image::from_rgb(&s.image)).collect();
    let dets = detect(&model, &images, &PostProcess::default())?;
    let gts: Vec<_> = samples.iter().map(|s| s.annotation.clone()).collect();
    let interpolation = if args.eleven_point {
        Interpolation::ElevenPoint
    } else {
        Interpolation::AllPoint
    };
    let r = evaluate(&dets, &gts, model.arch().num_classes, args.iou, interpolation)?;
    let summary = EvalSummary {
        checkpoint: args.checkpoint.display().to_string(),
        split: split_name.to_string(),
        num_images: samples.len(),
        iou_threshold: args.iou,
        interpolation,
        per_class_ap: ds
            .info
            .class_names
            .iter()
            .cloned()
            .zip(r.per_class_ap.iter().map(|a| a.map(|v| 100.0 * v)))
            .collect(),
        map: 100.0 * r.map,
    };
    if let Some(path) = &args.out {
        let text = serde_json::to_string_pretty(&summary)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &args.dump {
        let rows: Vec<(String, _)> = samples.iter().map(|s| s.id.clone()).zip(dets).collect();
        write_detections_jsonl(path, &rows)?;
    }
    Ok(summary)
}

/// A run as seen by `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCurves {
    pub label: String,
    pub dir: PathBuf,
    pub is_supervised: bool,
    /// `(t, mAP)` from the evaluation log.
    pub map: Vec<(usize, f64)>,
    /// `(t, L_total)` from the step log, when present.
    pub loss: Vec<(usize, f64)>,
}

impl RunCurves {
    pub fn final_map(&self) -> Option<f64> {
        self.map.last().map(|&(_, m)| m)
    }
}

/// Group label: the mode plus any non-default ISD settings.
pub fn run_label(cfg: &TrainConfig) -> String {
    let mut label = cfg.mode.to_string();
    if cfg.mode.uses_isd() {
        match cfg.types {
            IsdTypes::Both => {}
            IsdTypes::Type1 => label.push_str(" (type1)"),
            IsdTypes::Type2 => label.push_str(" (type2)"),
        }
        if cfg.alpha != TrainConfig::default().alpha {
            label.push_str(&format!(" α={}", cfg.alpha));
        }
    }
    label
}

fn read_eval_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let bad = |m: &str| Error::Parse {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if headers.get(0) != Some("t") || headers.iter().next_back() != Some("map") {
        return Err(bad("evaluation log must have columns t, ap_<class>..., map"));
    }
    if !headers
        .iter()
        .skip(1)
        .take(headers.len().saturating_sub(2))
        .all(|h| h.starts_with("ap_"))
    {
        return Err(bad("evaluation log must have columns t, ap_<class>..., map"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let t: usize = rec[0].parse().map_err(|_| bad("non-integer iteration"))?;
        let m: f64 = rec[rec.len() - 1].parse().map_err(|_| bad("non-numeric mAP"))?;
        out.push((t, m));
    }
    Ok(out)
}

fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        t: usize,
        l_total: f64,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let r = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        out.push((r.t, r.l_total));
    }
    Ok(out)
}

pub fn load_run(path: &Path) -> Result<RunCurves> {
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let eval_path = if path.is_dir() {
        dir.join(EVAL_CSV)
    } else {
        path.to_path_buf()
    };
    let map = read_eval_csv(&eval_path)?;
    let cfg_path = dir.join(CONFIG_FILE);
    let (label, is_supervised) = if cfg_path.exists() {
        let cfg: TrainConfig = read_toml(&cfg_path)?;
        (run_label(&cfg), cfg.mode == Mode::Supervised)
    } else {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| eval_path.display().to_string());
        let sup = name.starts_with("supervised");
        (name, sup)
    };
    let steps = dir.join(STEPS_CSV);
    let loss = if steps.exists() {
        read_loss_csv(&steps)?
    } else {
        Vec::new()
    };
    Ok(RunCurves {
        label,
        dir,
        is_supervised,
        map,
        loss,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    /// Difference of mean final mAP to the supervised group.
    pub delta: Option<f64>,
}

/// Groups runs by label in first-seen order.
pub fn summarize(runs: &[RunCurves]) -> Result<Vec<ReportRow>> {
    let mut groups: Vec<(String, bool, Vec<f64>)> = Vec::new();
    for r in runs {
        let m = r
            .final_map()
            .ok_or_else(|| Error::Data(format!("run {} has no evaluation rows", r.dir.display())))?;
        match groups.iter_mut().find(|g| g.0 == r.label) {
            Some(g) => g.2.push(m),
            None => groups.push((r.label.clone(), r.is_supervised, vec![m])),
        }
    }
    let baseline = groups.iter().find(|g| g.1).map(|g| mean_std(&g.2).0);
    Ok(groups
        .into_iter()
        .map(|(label, _, maps)| {
            let (mean, std) = mean_std(&maps);
            ReportRow {
                label,
                runs: maps.len(),
                mean,
                std,
                delta: baseline.map(|b| mean - b),
            }
        })
        .collect())
}

pub fn markdown_table(rows: &[ReportRow]) -> String {
    let mut s = String::from("| Method | Runs | Final mAP (%) | Δ vs supervised |\n|---|---:|---:|---:|\n");
    for r in rows {
        let map = if r.runs > 1 {
            format!("{:.2} ± {:.2}", r.mean, r.std)
        } else {
            format!("{:.2}", r.mean)
        };
        let delta = r.delta.map_or_else(|| "n/a".to_string(), |d| format!("{d:+.2}"));
        s.push_str(&format!("| {} | {} | {} | {} |\n", r.label, r.runs, map, delta));
    }
    s
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let runs = args.runs.iter().map(|p| load_run(p)).collect::<Result<Vec<_>>>()?;
    let table = markdown_table(&summarize(&runs)?);
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let md = args.out.join("report.md");
    fs::write(&md, &table).map_err(|e| Error::io(&md, e))?;
    crate::plot::line_plot(
        &args.out.join("map.png"),
        "mAP on the evaluation split",
        "iteration",
        "mAP (%)",
        &runs
            .iter()
            .map(|r| (r.label.clone(), r.map.clone()))
            .collect::<Vec<_>>(),
    )?;
    let losses: Vec<_> = runs
        .iter()
        .filter(|r| !r.loss.is_empty())
        .map(|r| (r.label.clone(), crate::plot::smooth(&r.loss, 50)))
        .collect();
    if !losses.is_empty() {
        crate::plot::line_plot(
            &args.out.join("loss.png"),
            "Total loss",
            "iteration",
            "L_total",
            &losses,
        )?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(label: &str, sup: bool, map: f64) -> RunCurves {
        RunCurves {
            label: label.into(),
            dir: PathBuf::from(label),
            is_supervised: sup,
            map: vec![(10, 1.0), (20, map)],
            loss: vec![],
        }
    }

    #[test]
    fn single_supervised_run_has_zero_delta() {
        let rows = summarize(&[run("supervised", true, 40.0)]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].delta, Some(0.0));
    }

    #[test]
    fn delta_is_difference_of_final_maps() {
        let rows = summarize(&[run("supervised", true, 40.0), run("csd+isd", false, 43.5)]).unwrap();
        assert_eq!(rows[1].delta, Some(3.5));
        let table = markdown_table(&rows);
        assert!(table.contains("| csd+isd | 1 | 43.50 | +3.50 |"));
    }

    #[test]
    fn seed_groups_report_mean_and_std() {
        let rows = summarize(&[run("isd", false, 1.0), run("isd", false, 2.0), run("isd", false, 3.0)]).unwrap();
        assert_eq!(rows[0].runs, 3);
        assert_eq!(rows[0].mean, 2.0);
        assert_eq!(rows[0].std, 1.0);
        assert_eq!(rows[0].delta, None);
    }

    #[test]
    fn labels() {
        let cfg = TrainConfig {
            mode: Mode::Isd,
            types: IsdTypes::Type2,
            alpha: 1.0,
            ..Default::default()
        };
        assert_eq!(run_label(&cfg), "isd (type2) α=1");
        assert_eq!(run_label(&TrainConfig::default()), "csd+isd");
    }
}
