//! `softrpn`: synthesize datasets, train, evaluate, audit flags and ablate the threshold.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid usage.

mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use softrpn::data::{
    bbox_to_xywh, synthesize_dataset, Dataset, SceneParams, Split, SynthConfig, DROPPED_FILE,
};
use softrpn::harness::{
    ablate_threshold, audit_flags, evaluate, score_fn_detection, train_with, FlaggedAnchor,
    FnScore, Mode, TrainConfig,
};
use softrpn::model::{checkpoint, RpnModel};

use manifest::{write_atomic, RunManifest};

#[derive(Parser)]
#[command(name = "softrpn", version, about = "Region proposals with attention-derived soft negatives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with a fraction of annotations withheld.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint, loss log and final-epoch flags.
    Train(TrainArgs),
    /// Score a checkpoint's proposals against complete ground truth.
    Eval(EvalArgs),
    /// List the negatives a checkpoint would flag at threshold t.
    Audit(AuditArgs),
    /// Train one soft-label model per threshold and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 0.3, value_parser = unit_half_open)]
    drop_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 6)]
    min_objects: usize,
    #[arg(long, default_value_t = 14)]
    max_objects: usize,
}

/// Overrides applied on top of the defaults or `--config`.
#[derive(Args)]
struct ConfigArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, value_parser = unit_open)]
    t: Option<f64>,
    /// Also rescales the milestones unless `--milestones` is given.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    milestones: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    sampling_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// When given, its model section must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = unit_open)]
    t: f64,
    #[arg(long)]
    report: PathBuf,
    /// Supplies the sampling policy and seed; its model section must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, value_parser = unit_open)]
    thresholds: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| e.to_string())
}

fn unit_open(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1)"))
    }
}

fn unit_half_open(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Audit(a) => audit_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = read_config(self.config.as_deref())?;
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(t) = self.t {
            c.t = t;
        }
        if let Some(n) = self.iterations {
            c.milestones = rescale_milestones(&c.milestones, c.iterations, n);
            c.iterations = n;
        }
        if let Some(m) = &self.milestones {
            c.milestones = m.clone();
        }
        if let Some(lr) = self.lr {
            c.lr = lr;
        }
        if let Some(s) = self.init_seed {
            c.seeds.init = s;
        }
        if let Some(s) = self.sampling_seed {
            c.seeds.sampling = s;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Keeps each milestone at the same fraction of the run.
fn rescale_milestones(milestones: &[usize], from: usize, to: usize) -> Vec<usize> {
    let mut out: Vec<usize> = milestones.iter().map(|&m| m * to / from.max(1)).collect();
    out.dedup();
    out
}

fn synth(a: SynthArgs) -> Result<()> {
    let start = Instant::now();
    let config = SynthConfig {
        images: a.images,
        drop_rate: a.drop_rate,
        seed: a.seed,
        scene: SceneParams {
            height: a.height,
            width: a.width,
            min_objects: a.min_objects,
            max_objects: a.max_objects,
            ..SceneParams::default()
        },
    };
    if config.images == 0 {
        bail!("--images must be positive");
    }
    if config.scene.min_objects == 0 || config.scene.min_objects > config.scene.max_objects {
        bail!("need 1 ≤ --min-objects ≤ --max-objects");
    }
    let dataset = synthesize_dataset(&config)?;
    create_dir(&a.out)?;
    dataset.save(&a.out)?;
    let mut m = RunManifest::new("synth", &config)?;
    m.artifact("dataset", &a.out);
    println!(
        "{} images, {} boxes kept, {} withheld → {}",
        dataset.len(),
        dataset.num_boxes() - dataset.num_dropped(),
        dataset.num_dropped(),
        a.out.display()
    );
    m.finish(start.elapsed(), &a.out.join("manifest.json"))
}

/// A flag keyed by the dataset's own image id and file name.
#[derive(Serialize)]
struct FlagRecord<'a> {
    image_id: u64,
    file_name: &'a str,
    anchor: usize,
    bbox: [f64; 4],
    score: f64,
}

fn flag_records<'a>(flags: &[FlaggedAnchor], dataset: &'a Dataset) -> Vec<FlagRecord<'a>> {
    flags
        .iter()
        .map(|f| {
            let r = &dataset.samples[f.image].record;
            FlagRecord {
                image_id: r.image_id,
                file_name: &r.file_name,
                anchor: f.anchor,
                bbox: bbox_to_xywh(&f.bbox),
                score: f.score,
            }
        })
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let config = a.config.resolve()?;
    let dataset = Dataset::load(&a.data, Split::Train)?;
    create_dir(&a.out)?;

    let log_path = a.out.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let every = (config.iterations / 10).max(1);
    let out = train_with(&config, &dataset, |rec| {
        if log_err.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).map_err(anyhow::Error::from);
        let wrote = line.and_then(|l| writeln!(log, "{l}").and_then(|_| log.flush()).map_err(Into::into));
        log_err = wrote.err();
        if rec.iteration % every == 0 || rec.iteration + 1 == config.iterations {
            eprintln!("iter {:>5}  lr {:.2e}  loss {:.4}  flagged {}", rec.iteration, rec.lr, rec.loss_total, rec.flagged);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.context(format!("writing {}", log_path.display())));
    }

    let ckpt_path = a.out.join("checkpoint.ckpt");
    write_atomic(&ckpt_path, &checkpoint::to_bytes(&out.model)?)?;
    let flags_path = a.out.join("flags.json");
    write_json(&flags_path, &flag_records(&out.flags, &dataset))?;

    let mut m = RunManifest::new("train", &config)?;
    m.artifact("data", &a.data);
    m.artifact("checkpoint", &ckpt_path);
    m.artifact("log", &log_path);
    m.artifact("flags", &flags_path);
    m.finish(start.elapsed(), &a.out.join("manifest.json"))
}

/// Loads a checkpoint and rejects a config whose model section disagrees with it.
fn load_model(path: &Path, config: &TrainConfig, explicit: bool) -> Result<RpnModel> {
    let model = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if explicit && config.model != model.config {
        let expected = RpnModel::zeros(config.model.clone())?;
        let want = expected.named_params();
        let have = model.named_params();
        for ((name, w), (_, h)) in want.iter().zip(&have) {
            if w.shape() != h.shape() {
                bail!(
                    "checkpoint {} does not match config: tensor {name} has shape {:?}, config implies {:?}",
                    path.display(),
                    h.shape(),
                    w.shape()
                );
            }
        }
        bail!(
            "checkpoint {} does not match config: model {:?} vs {:?}",
            path.display(),
            model.config,
            config.model
        );
    }
    Ok(model)
}

fn report_manifest_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.manifest.json"))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let start = Instant::now();
    let config = read_config(a.config.as_deref())?;
    let model = load_model(&a.checkpoint, &config, a.config.is_some())?;
    let dataset = Dataset::load(&a.data, Split::Eval)?;
    let report = evaluate(&model, &dataset, &config.eval)?;
    write_json(&a.report, &report)?;
    println!(
        "AP50 {:.4}  AP75 {:.4}  AP {:.4}  recall50 {:.4}",
        report.ap50, report.ap75, report.ap, report.recall50
    );
    let mut m = RunManifest::new("eval", &config)?;
    m.artifact("checkpoint", &a.checkpoint);
    m.artifact("data", &a.data);
    m.artifact("report", &a.report);
    m.finish(start.elapsed(), &report_manifest_path(&a.report))
}

#[derive(Serialize)]
struct AuditReport<'a> {
    t: f64,
    flags: Vec<FlagRecord<'a>>,
    /// Present when the dataset carries a withheld-annotation file.
    #[serde(skip_serializing_if = "Option::is_none")]
    fn_detection: Option<FnScore>,
}

fn audit_cmd(a: AuditArgs) -> Result<()> {
    let start = Instant::now();
    let mut config = read_config(a.config.as_deref())?;
    config.t = a.t;
    config.validate()?;
    let model = load_model(&a.checkpoint, &config, a.config.is_some())?;
    let dataset = Dataset::load(&a.data, Split::Train)?;
    let flags = audit_flags(&model, &dataset, &config, a.t)?;
    let fn_detection = a.data.join(DROPPED_FILE).exists().then(|| {
        let dropped: Vec<_> = dataset.samples.iter().map(|s| s.record.dropped_boxes.clone()).collect();
        score_fn_detection(&flags, &dropped)
    });
    if let Some(f) = &fn_detection {
        println!(
            "{} flags, {} of {} withheld boxes hit (precision {:.4}, recall {:.4})",
            f.flagged, f.recovered, f.dropped, f.precision, f.recall
        );
    } else {
        println!("{} flags", flags.len());
    }
    write_json(&a.report, &AuditReport { t: a.t, flags: flag_records(&flags, &dataset), fn_detection })?;
    let mut m = RunManifest::new("audit", &config)?;
    m.artifact("checkpoint", &a.checkpoint);
    m.artifact("data", &a.data);
    m.artifact("report", &a.report);
    m.finish(start.elapsed(), &report_manifest_path(&a.report))
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let start = Instant::now();
    let mut config = read_config(a.config.as_deref())?;
    if let Some(n) = a.iterations {
        config.milestones = rescale_milestones(&config.milestones, config.iterations, n);
        config.iterations = n;
    }
    config.mode = Mode::SoftLabel;
    config.validate()?;
    let dataset = Dataset::load(&a.data, Split::Train)?;
    let table = ablate_threshold(&config, &dataset, &a.thresholds)?;
    create_dir(&a.out)?;
    let json_path = a.out.join("ablation.json");
    let text_path = a.out.join("ablation.txt");
    write_json(&json_path, &table)?;
    let text = table.to_text();
    write_atomic(&text_path, text.as_bytes())?;
    print!("{text}");

    #[derive(Serialize)]
    struct AblateSnapshot<'a> {
        base: &'a TrainConfig,
        thresholds: &'a [f64],
    }
    let mut m = RunManifest::new("ablate", AblateSnapshot { base: &config, thresholds: &a.thresholds })?;
    m.artifact("data", &a.data);
    m.artifact("table_json", &json_path);
    m.artifact("table_text", &text_path);
    m.finish(start.elapsed(), &a.out.join("manifest.json"))
}
