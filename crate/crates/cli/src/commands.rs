use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use emobed::dataio::{
    generate_crossmodal, generate_utterances, load_regression_csv, load_utterance_csv, save_regression_csv,
    save_utterance_csv, LabelRule, Partition, RegressionSchema, SynthSpec, UtteranceSchema,
};
use emobed::encoders::TrainedModel;
use emobed::losses::Task;
use emobed::metrics::{report_csv, report_text, ReportRow};
use emobed::postprocess::{grid_search, PostprocessPlan};
use emobed::training::{
    compensate_delay, evaluate, prepare_corpus, sweep, train, Corpus, Evaluation, TrainData, TrainOutcome,
};
use emobed::Modality;
use log::info;

use crate::config::RunConfigFile;
use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PLAN_FILE: &str = "postprocess.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SELECTED_FILE: &str = "selected.txt";

pub fn load_corpus(
    paths: &[PathBuf],
    modality: Modality,
    partition: Partition,
    task: Task,
    frame_rate_hz: f64,
) -> Result<Option<Corpus>, CliError> {
    if paths.is_empty() {
        return Ok(None);
    }
    let corpus = match task {
        Task::Regression { .. } => {
            let schema = RegressionSchema { modality, partition, frame_rate_hz };
            Corpus::Sequences(load_regression_csv(paths, &schema).map_err(CliError::config)?)
        }
        Task::Classification { classes } => {
            let schema = UtteranceSchema { modality, partition, classes };
            Corpus::Utterances(load_utterance_csv(paths, &schema).map_err(CliError::config)?)
        }
    };
    Ok(Some(corpus))
}

fn load_data(cfg: &RunConfigFile) -> Result<TrainData, CliError> {
    let d = &cfg.data;
    let rate = d.frame_rate();
    let load = |p: &[PathBuf], m, part| load_corpus(p, m, part, cfg.task, rate);
    Ok(TrainData {
        train_audio: load(&d.train_audio, Modality::Audio, Partition::Train)?,
        train_video: load(&d.train_video, Modality::Video, Partition::Train)?,
        dev_audio: load(&d.dev_audio, Modality::Audio, Partition::Dev)?,
        dev_video: load(&d.dev_video, Modality::Video, Partition::Dev)?,
    })
}

fn modality_dim(cfg: &RunConfigFile, data: &TrainData, m: Modality) -> Result<usize, CliError> {
    let declared = match m {
        Modality::Audio => cfg.model.audio_dim,
        Modality::Video => cfg.model.video_dim,
    };
    let seen: Vec<usize> = [data.train(m), data.dev(m)].into_iter().flatten().map(Corpus::feature_dim).collect();
    if let Some(&first) = seen.first() {
        if seen.iter().any(|&d| d != first) || declared.is_some_and(|d| d != first) {
            return Err(CliError::Config(format!("{m} feature widths disagree across files and [model]")));
        }
        return Ok(first);
    }
    declared.ok_or_else(|| CliError::Config(format!("no {m} data: set [model] {m}_dim")))
}

fn build_model(cfg: &RunConfigFile, data: &TrainData, seed: u64) -> Result<TrainedModel, CliError> {
    let audio = modality_dim(cfg, data, Modality::Audio)?;
    let video = modality_dim(cfg, data, Modality::Video)?;
    TrainedModel::new(cfg.model_config(audio, video), seed).map_err(CliError::config)
}

fn prepare_out(cfg: &RunConfigFile, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn apply_seed(cfg: &mut RunConfigFile, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.train.seed = Some(s);
    }
}

/// Dev-set post-processing search for regression runs, centring on the
/// training gold statistics.
fn search_plan(cfg: &RunConfigFile, data: &TrainData, model: &TrainedModel) -> Result<Option<PostprocessPlan>, CliError> {
    if !cfg.task.is_regression() {
        return Ok(None);
    }
    let target = cfg.objective.target;
    let delay = cfg.train_config().delay_seconds;
    let Some(Corpus::Sequences(train)) = data.train(target) else { return Ok(None) };
    let mut gold = Vec::new();
    for r in &train.recordings {
        gold.extend(compensate_delay(&r.features, &r.gold, delay, train.frame_rate_hz)?.1);
    }
    let n = gold.len() as f64;
    let mean = gold.iter().sum::<f64>() / n;
    let std = (gold.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt();
    let dev = data.dev(target).expect("validated");
    let Evaluation::Regression { predictions, gold: dev_gold, .. } = evaluate(model, dev, delay)? else {
        unreachable!("regression task")
    };
    let found = grid_search(&predictions, &dev_gold, mean, std, &cfg.postprocess_grid(), cfg.data.frame_rate())?;
    info!("post-processing: raw dev CCC {:.4}, processed {:.4}", found.raw_ccc, found.ccc);
    Ok(Some(found.plan))
}

fn write_run(dir: &Path, cfg: &RunConfigFile, data: &TrainData, outcome: &TrainOutcome) -> Result<(), CliError> {
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    fs::write(dir.join(METRICS_FILE), outcome.history.to_csv())?;
    outcome.model.save(&dir.join(CHECKPOINT_FILE))?;
    if let Some(plan) = search_plan(cfg, data, &outcome.model)? {
        fs::write(dir.join(PLAN_FILE), plan.to_string())?;
    }
    Ok(())
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfigFile::load(config)?;
    apply_seed(&mut cfg, seed);
    let dir = prepare_out(&cfg, out)?;
    let data = load_data(&cfg)?;
    let tc = cfg.train_config();
    let model = build_model(&cfg, &data, tc.seed)?;
    info!("training {} for {} epochs", cfg.objective.target, tc.max_epochs);
    let outcome = train(model, &data, &tc)?;
    info!(
        "best dev metric {:.6} at epoch {}",
        outcome.history.best_dev_metric(),
        outcome.history.best_epoch
    );
    write_run(&dir, &cfg, &data, &outcome)?;
    Ok(dir)
}

pub fn cmd_sweep(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfigFile::load(config)?;
    apply_seed(&mut cfg, seed);
    let grid = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep needs a [sweep] section".into()))?;
    let dir = prepare_out(&cfg, out)?;
    let data = load_data(&cfg)?;
    let tc = cfg.train_config();
    let model = build_model(&cfg, &data, tc.seed)?;
    info!("sweeping {} grid points", grid.alpha_values.len() * grid.beta_values.len());
    let result = sweep(&grid, &tc, &model, &data)?;
    let row = result.selected_row();
    info!("selected alpha={} beta={} dev={:.6}", row.alpha, row.beta, row.dev_metric);
    fs::write(dir.join(SWEEP_FILE), result.to_csv())?;
    fs::write(
        dir.join(SELECTED_FILE),
        format!("alpha={}\nbeta={}\ndev_metric={}\n", row.alpha, row.beta, row.dev_metric),
    )?;
    write_run(&dir, &cfg, &data, &result.outcome)?;
    Ok(dir)
}

/// Dataset options shared by `eval` and `export-embeddings`.
#[derive(Debug, Clone)]
pub struct DatasetArgs {
    pub checkpoint: PathBuf,
    pub dataset: Vec<PathBuf>,
    pub modality: Modality,
    pub delay_seconds: f64,
    pub frame_rate_hz: f64,
}

impl DatasetArgs {
    fn load(&self) -> Result<(TrainedModel, Corpus), CliError> {
        for p in std::iter::once(&self.checkpoint).chain(&self.dataset) {
            if !p.is_file() {
                return Err(CliError::Config(format!("file not found: {}", p.display())));
            }
        }
        let model = TrainedModel::load(&self.checkpoint).map_err(CliError::config)?;
        let corpus = load_corpus(&self.dataset, self.modality, Partition::Test, model.task(), self.frame_rate_hz)?
            .ok_or_else(|| CliError::Config("no dataset given".into()))?;
        let want = model.config.input_dim(self.modality);
        if model.params.encoder(self.modality).is_none() {
            return Err(CliError::Config(format!("checkpoint has no {} encoder", self.modality)));
        }
        if corpus.feature_dim() != want {
            return Err(CliError::Config(format!(
                "dataset has {} features, the {} encoder expects {want}",
                corpus.feature_dim(),
                self.modality
            )));
        }
        Ok((model, corpus))
    }
}

pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub confusion: Option<Vec<Vec<usize>>>,
}

impl EvalReport {
    pub fn text(&self) -> String {
        let mut s = report_text(&self.rows);
        if let Some(c) = &self.confusion {
            s.push_str("confusion (rows gold, columns predicted):\n");
            for row in c {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
                let _ = writeln!(s, "{}", cells.join(""));
            }
        }
        s
    }

    pub fn confusion_csv(&self) -> Option<String> {
        self.confusion.as_ref().map(|c| {
            let mut s = String::from("gold");
            for j in 0..c.len() {
                let _ = write!(s, ",pred_{j}");
            }
            s.push('\n');
            for (i, row) in c.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                let _ = writeln!(s, "{i},{}", cells.join(","));
            }
            s
        })
    }
}

fn row(metric: &str, value: f64, n: usize) -> ReportRow {
    ReportRow { metric: metric.into(), value, n, p_value: None }
}

pub fn cmd_eval(args: &DatasetArgs, plan: Option<&Path>, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let (model, corpus) = args.load()?;
    let plan = match plan {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Some(text.parse::<PostprocessPlan>().map_err(CliError::config)?)
        }
        None => None,
    };
    let report = match evaluate(&model, &corpus, args.delay_seconds)? {
        Evaluation::Regression { eval, predictions, gold } => {
            let mut rows = vec![row("ccc", eval.ccc, eval.n), row("pcc", eval.pcc, eval.n)];
            if let Some(plan) = plan {
                let processed = plan.apply(&predictions, args.frame_rate_hz)?;
                let pp = emobed::metrics::evaluate_regression(&processed, &gold)?;
                rows.push(row("ccc_postprocessed", pp.ccc, pp.n));
                rows.push(row("pcc_postprocessed", pp.pcc, pp.n));
            }
            EvalReport { rows, confusion: None }
        }
        Evaluation::Classification { eval, gold, .. } => {
            if plan.is_some() {
                return Err(CliError::Config("post-processing plans apply to regression only".into()));
            }
            let n = gold.len();
            EvalReport {
                rows: vec![
                    row("macro_f1", eval.f1, n),
                    row("macro_precision", eval.macro_precision, n),
                    row("macro_recall", eval.macro_recall, n),
                    row("accuracy", eval.accuracy(), n),
                ],
                confusion: Some(eval.confusion.clone()),
            }
        }
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), report_csv(&report.rows))?;
        fs::write(dir.join("report.txt"), report.text())?;
        if let Some(c) = report.confusion_csv() {
            fs::write(dir.join("confusion.csv"), c)?;
        }
    }
    Ok(report)
}

/// Writes `id,index,modality,e0..e{E-1},label`: one row per frame for
/// recordings (label = gold), one per utterance for clips (label = class,
/// embedding = mean over frames).
pub fn cmd_export_embeddings(args: &DatasetArgs, out: &Path) -> Result<usize, CliError> {
    let (model, corpus) = args.load()?;
    let examples = prepare_corpus(&model, &corpus, args.delay_seconds)?;
    let e = model.embedding_dim();
    let mut s = String::from("id,index,modality");
    for j in 0..e {
        let _ = write!(s, ",e{j}");
    }
    s.push_str(",label\n");
    let mut rows = 0;
    for ex in &examples {
        let pass = model.forward(args.modality, &ex.features, false)?;
        match &ex.target {
            emobed::training::Target::Frames(gold) => {
                for (t, emb) in pass.embeddings.row_iter().enumerate() {
                    let _ = write!(s, "{},{t},{}", ex.id, args.modality);
                    for v in emb {
                        let _ = write!(s, ",{v}");
                    }
                    let _ = writeln!(s, ",{}", gold[t]);
                    rows += 1;
                }
            }
            emobed::training::Target::Label(label) => {
                let _ = write!(s, "{},0,{}", ex.id, args.modality);
                for v in pass.head_input.row(0) {
                    let _ = write!(s, ",{v}");
                }
                let _ = writeln!(s, ",{label}");
                rows += 1;
            }
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, s)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub seed: u64,
    pub recordings: usize,
    pub frames: usize,
    pub train: usize,
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub noise_audio: f64,
    pub noise_video: f64,
    pub noise_smoothing: usize,
    pub gold_delay_seconds: f64,
    /// Utterance data with this many classes instead of recordings.
    pub classes: Option<usize>,
}

/// Writes train/dev CSVs for both modalities.
pub fn cmd_gen_synth(args: &SynthArgs, out: &Path) -> Result<(), CliError> {
    if args.train == 0 || args.train >= args.recordings {
        return Err(CliError::Config("--train must leave at least one item for dev".into()));
    }
    let mut spec = SynthSpec::new(args.latent_dim, args.audio_dim, args.video_dim, args.noise_audio, args.noise_video, args.seed);
    spec.noise_smoothing = args.noise_smoothing;
    spec.gold_delay_frames = (args.gold_delay_seconds * spec.frame_rate_hz).round() as usize;
    fs::create_dir_all(out)?;
    match args.classes {
        None => {
            let (mut a, mut v) = generate_crossmodal(&spec, args.recordings, args.frames).map_err(CliError::config)?;
            let da = a.split_off(args.train, Partition::Dev);
            let dv = v.split_off(args.train, Partition::Dev);
            save_regression_csv(&a, &out.join("train_audio.csv"))?;
            save_regression_csv(&v, &out.join("train_video.csv"))?;
            save_regression_csv(&da, &out.join("dev_audio.csv"))?;
            save_regression_csv(&dv, &out.join("dev_video.csv"))?;
        }
        Some(c) => {
            if c < 2 {
                return Err(CliError::Config("--classes must be at least 2".into()));
            }
            let thresholds = (1..c).map(|i| -1.0 + 2.0 * i as f64 / c as f64).collect();
            spec.label_rule = LabelRule::Threshold { thresholds };
            let (mut a, mut v) = generate_utterances(&spec, args.recordings, args.frames).map_err(CliError::config)?;
            let da = a.split_off(args.train, Partition::Dev);
            let dv = v.split_off(args.train, Partition::Dev);
            save_utterance_csv(&a, &out.join("train_audio.csv"))?;
            save_utterance_csv(&v, &out.join("train_video.csv"))?;
            save_utterance_csv(&da, &out.join("dev_audio.csv"))?;
            save_utterance_csv(&dv, &out.join("dev_video.csv"))?;
        }
    }
    Ok(())
}
