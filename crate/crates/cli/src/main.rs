use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use omnifuse::config::RunConfig;
use omnifuse::data::{group_kfold, load_dataset, save_dataset, synth_generate, Dataset, Label, ModalityKind, Provenance};
use omnifuse::explain::{explain_shapley, grad_attribution, ShapleyMethod};
use omnifuse::fusion::ModalityMask;
use omnifuse::pipeline::{cv_options, Pipeline};
use omnifuse::radiomics::{extract_regions, write_csv};
use omnifuse::select::{combined_rank, score_features, SelectionReport};
use omnifuse::train::{argmax, fold_metrics, run_cv, NamedMask, TrainHistory};
use omnifuse::volume::{RegionMask, Volume3D};
use omnifuse::ErrorClass;

#[derive(Parser)]
#[command(name = "omnifuse", version, about = "Multimodal fusion classifier with missing-modality masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Synth(Common),
    /// Rank genes and write the selection report.
    Select(DataArgs),
    /// Extract named radiomics features from a volume and label map.
    Radiomics(RadiomicsArgs),
    /// Fit preprocessing and a model on a dataset.
    Train(DataArgs),
    /// Patient-grouped cross-validation.
    Cv(CvArgs),
    /// Evaluate a trained model.
    Eval(ModelArgs),
    /// Write class probabilities for every sample.
    Predict(ModelArgs),
    /// Attribute one prediction to its inputs.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Number of genes kept by selection; overrides `selection.k`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 1)]
    parallel_folds: usize,
    /// Modalities to hide in an additional evaluation, e.g. `genes,meta`.
    #[arg(long, value_delimiter = ',', value_parser = parse_modality)]
    mask: Vec<ModalityKind>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Modalities to hide at inference, e.g. `genes,meta`.
    #[arg(long, value_delimiter = ',', value_parser = parse_modality)]
    mask: Vec<ModalityKind>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Exact,
    Mc,
    Grad,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = Method::Mc)]
    method: Method,
    /// Sample as `patient_id/visit_id`; the first sample by default.
    #[arg(long)]
    sample: Option<String>,
    /// Target class (CTL, MCI, AD); the predicted class by default.
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args)]
struct RadiomicsArgs {
    #[command(flatten)]
    common: Common,
    /// `OBV1` intensity volume.
    #[arg(long)]
    volume: PathBuf,
    /// `OBM1` region label map.
    #[arg(long)]
    labels: PathBuf,
    /// Comma-separated region labels; every non-zero label by default.
    #[arg(long, value_delimiter = ',')]
    regions: Vec<u16>,
    /// Gray-level bin count; overrides `radiomics.bin_count`.
    #[arg(long)]
    bins: Option<usize>,
}

fn parse_modality(s: &str) -> std::result::Result<ModalityKind, String> {
    s.parse().map_err(|e: omnifuse::Error| e.to_string())
}

/// JSON artifact with the run identity and the effective configuration.
#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    provenance: &'a Provenance,
    run_config: &'a RunConfig,
    #[serde(flatten)]
    body: &'a T,
}

struct Run {
    config: RunConfig,
    provenance: Provenance,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut config = match &common.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.train.seed = seed;
        }
        edit(&mut config);
        config.validate()?;
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        std::fs::write(common.out.join("config.json"), config.to_json() + "\n")?;
        Ok(Self { provenance: config.provenance(), config, out: common.out.clone() })
    }

    fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
        let doc = Artifact { provenance: &self.provenance, run_config: &self.config, body };
        std::fs::write(self.out.join(name), serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }

    fn write_text(&self, name: &str, body: &str) -> Result<()> {
        std::fs::write(self.out.join(name), self.provenance.comment_line() + body)?;
        Ok(())
    }
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn mask_without(hidden: &[ModalityKind]) -> ModalityMask {
    ModalityMask::all().without(hidden)
}

fn mask_name(hidden: &[ModalityKind]) -> String {
    let names: Vec<&str> = hidden.iter().map(|k| k.name()).collect();
    format!("without_{}", names.join("_"))
}

fn history_csv(rows: impl Iterator<Item = (usize, usize, f64, f64)>) -> String {
    let mut s = String::from("fold,epoch,train_loss,val_loss\n");
    for (fold, epoch, tr, va) in rows {
        writeln!(s, "{fold},{epoch},{tr},{va}").expect("write to string");
    }
    s
}

fn synth(args: &Common) -> Result<()> {
    let run = Run::new(args, |_| {})?;
    let data = synth_generate(&run.config.synth, run.config.seed())?;
    let manifest = save_dataset(&data, &run.out, Some(&run.provenance))?;
    log::info!("wrote {} samples, patients per class {:?}", manifest.num_samples, manifest.patient_counts);
    Ok(())
}

fn select(args: &DataArgs) -> Result<()> {
    let run = Run::new(&args.common, |c| {
        if let Some(k) = args.k {
            c.selection.k = k;
        }
    })?;
    let data = load(&args.data)?;
    let ranking = combined_rank(&score_features(&data, ModalityKind::Genes), &run.config.selection);
    let report = SelectionReport::new(&run.config.selection, ModalityKind::Genes, &ranking);
    run.write_json("selection_report.json", &report)
}

fn radiomics(args: &RadiomicsArgs) -> Result<()> {
    let run = Run::new(&args.common, |c| {
        if let Some(b) = args.bins {
            c.radiomics.bin_count = b;
        }
    })?;
    let volume = Volume3D::load(&args.volume)?;
    let labels = RegionMask::load(&args.labels)?;
    let regions = if args.regions.is_empty() { labels.regions() } else { args.regions.clone() };
    let rows = extract_regions(&volume, &labels, &regions, &run.config.radiomics)?;
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    run.write_text("radiomics.csv", &String::from_utf8(buf)?)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    selected_genes: &'a [String],
    history: &'a TrainHistory,
}

fn train(args: &DataArgs) -> Result<()> {
    let run = Run::new(&args.common, |c| {
        if let Some(k) = args.k {
            c.selection.k = k;
        }
    })?;
    let data = load(&args.data)?;
    let (pipeline, history) = Pipeline::fit(&data, &run.config)?;
    pipeline.save(&run.out)?;
    run.write_text("history.csv", &history_csv(history.epochs.iter().map(|e| (0, e.epoch, e.train_loss, e.val_loss))))?;
    run.write_json("train_report.json", &TrainReport { selected_genes: &pipeline.preprocessor.selected_genes, history: &history })
}

fn cv(args: &CvArgs) -> Result<()> {
    let run = Run::new(&args.data.common, |c| {
        if let Some(k) = args.data.k {
            c.selection.k = k;
        }
        if let Some(f) = args.folds {
            c.cv.folds = f;
        }
    })?;
    if args.parallel_folds == 0 {
        bail!(omnifuse::Error::Config("--parallel-folds must be at least 1".into()));
    }
    let data = load(&args.data.data)?;
    let plan = group_kfold(&data, run.config.cv.folds, run.config.seed(), run.config.cv.stratified)?;
    let mut options = cv_options(&run.config);
    options.parallel_folds = args.parallel_folds;
    if !args.mask.is_empty() {
        options.eval_masks.push(NamedMask { name: mask_name(&args.mask), mask: mask_without(&args.mask) });
    }
    let outcome = run_cv(&data, &plan, &options)?;
    run.write_text(
        "history.csv",
        &history_csv(outcome.history.iter().map(|h| (h.fold, h.epoch, h.train_loss, h.val_loss))),
    )?;
    run.write_json("cv_report.json", &outcome)
}

#[derive(Serialize)]
struct EvalReport {
    model_provenance: Provenance,
    mask: ModalityMask,
    samples: usize,
    #[serde(flatten)]
    metrics: omnifuse::train::FoldMetrics,
}

fn eval(args: &ModelArgs) -> Result<()> {
    let run = Run::new(&args.common, |_| {})?;
    let pipeline = Pipeline::load(&args.model)?;
    let data = load(&args.data)?;
    let mask = mask_without(&args.mask);
    let probs = pipeline.predict(&data, &mask)?;
    let labels: Vec<usize> = data.labels()?.into_iter().map(Label::index).collect();
    let metrics = fold_metrics(0, &probs, &labels)?;
    run.write_json("eval_report.json", &EvalReport { model_provenance: pipeline.provenance.clone(), mask, samples: data.len(), metrics })
}

fn predict(args: &ModelArgs) -> Result<()> {
    let run = Run::new(&args.common, |_| {})?;
    let pipeline = Pipeline::load(&args.model)?;
    let data = load(&args.data)?;
    let probs = pipeline.predict(&data, &mask_without(&args.mask))?;
    let mut s = String::from("patient_id,visit_id,p_ctl,p_mci,p_ad,predicted\n");
    for (sample, p) in data.samples.iter().zip(&probs) {
        let pred = Label::ALL[argmax(p)];
        writeln!(s, "{},{},{},{},{},{}", sample.patient_id, sample.visit_id, p[0], p[1], p[2], pred)?;
    }
    run.write_text("predictions.csv", &s)
}

fn explain(args: &ExplainArgs) -> Result<()> {
    let m = &args.model;
    let run = Run::new(&m.common, |_| {})?;
    let pipeline = Pipeline::load(&m.model)?;
    let data = pipeline.prepare(&load(&m.data)?)?;
    let index = match &args.sample {
        None => 0,
        Some(key) => {
            let (pid, vid) = key.split_once('/').ok_or_else(|| anyhow!("--sample must look like patient_id/visit_id"))?;
            data.samples
                .iter()
                .position(|s| s.patient_id == pid && s.visit_id == vid)
                .ok_or_else(|| omnifuse::Error::Schema(format!("sample {key} not found")))?
        }
    };
    let sample = data.samples.get(index).ok_or_else(|| omnifuse::Error::Schema("dataset is empty".into()))?;
    let mask = ModalityMask { present: std::array::from_fn(|i| mask_without(&m.mask).present[i] && pipeline.modalities.present[i]) };
    let target = match &args.target {
        Some(t) => t.parse::<Label>()?.index(),
        None => argmax(&pipeline.predict_prepared(&data.subset(&[index]), &mask)?[0]),
    };
    let attribution = match args.method {
        Method::Grad => grad_attribution(&pipeline.model, sample, &mask, target)?,
        method => {
            let n = run.config.explain.background_size.min(data.len());
            let background = data.subset(&(0..n).collect::<Vec<_>>());
            let how = match method {
                Method::Exact => ShapleyMethod::Exact,
                _ => ShapleyMethod::MonteCarlo { permutations: run.config.explain.permutations, seed: run.config.seed() },
            };
            explain_shapley(&pipeline.model, sample, &mask, &background, target, how)?
        }
    };
    run.write_json("attributions.json", &attribution)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Select(a) => select(a),
        Command::Radiomics(a) => radiomics(a),
        Command::Train(a) => train(a),
        Command::Cv(a) => cv(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Explain(a) => explain(a),
    }
}

/// Exit code and tag for an error chain.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<omnifuse::Error>() {
            let code = match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            };
            return (code, e.tag());
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (2, "IoError");
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return (2, "FormatError");
        }
    }
    (1, "UsageError")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("OMNIFUSE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[UsageError]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, tag) = classify(&err);
            let text = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{tag}]: {text}");
            ExitCode::from(code)
        }
    }
}
