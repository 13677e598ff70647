//! The `pbcat` command.
//!
//! ```text
//! pbcat gen-data --out shapes --train 2000 --val 300
//! pbcat train    --mode pbcat --config cfg.json --data shapes --out runs/p1 --set replay=4
//! pbcat attack   --checkpoint runs/p1 --data shapes --out adv/p1 --steps 50
//! pbcat eval     --checkpoint runs/p1 --data shapes --attack pgdpatch --steps 50
//! pbcat compare  runs/*/report.json
//! ```
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running. Every command first prints a `repro:` line to
//! stderr with the fully resolved invocation.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pbcat_core::attacks::{attack_dataset, AttackConfig};
use pbcat_core::eval::{evaluate, EvalSettings};
use pbcat_core::perturb::PerturbState;
use pbcat_core::rng;
use pbcat_core::trainer::{train, EpochSnapshot, StepEvent, TrainMode, TrainObserver};
use pbcat_core::{ImageSample, ToyArch, ToyDetector, TrainConfig};

use crate::checkpoint::{self, config_hash, load_checkpoint, save_checkpoint};
use crate::coco::{self, load_coco_annotations, CocoCategory, CocoFile, CocoImage};
use crate::data::{self, generate_shapes_dataset, ShapesSpec, Split, ANNOTATIONS_FILE, IMAGES_DIR};
use crate::error::{read_json, write_json};
use crate::metrics::MetricsWriter;
use crate::report::{compare, run_label, ReportFile, REPORT_FORMAT_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pbcat", version, about = "Patch-based composite adversarial training for object detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset (train and val splits).
    GenData(GenDataArgs),
    /// Train a detector in one of the three modes.
    Train(TrainArgs),
    /// Attack a dataset with PGDPatch and save the adversarial copy.
    Attack(AttackArgs),
    /// Evaluate AP50, clean and optionally under attack.
    Eval(EvalArgs),
    /// Print one aligned table from several report files.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 300)]
    pub val: usize,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = 96)]
    pub resolution: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Standard,
    LinfFree,
    Pbcat,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Standard => TrainMode::Standard,
            ModeArg::LinfFree => TrainMode::LinfFree,
            ModeArg::Pbcat => TrainMode::Pbcat,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root, split directory or annotation file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override one config field, e.g. `--set replay=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Skip the per-epoch checkpoints; only `final` is written.
    #[arg(long)]
    pub no_epoch_checkpoints: bool,
}

#[derive(Debug, Args)]
pub struct AttackParams {
    #[arg(long, default_value_t = AttackConfig::default().steps)]
    pub steps: usize,
    /// Step on the 0–255 pixel scale.
    #[arg(long, default_value_t = 2.0)]
    pub step_size: f32,
    #[arg(long, default_value_t = AttackConfig::default().lambda_eval)]
    pub lambda_eval: f32,
    #[arg(long, default_value_t = 0)]
    pub attack_seed: u64,
}

impl AttackParams {
    fn config(&self) -> AttackConfig {
        AttackConfig {
            steps: self.steps,
            step_size: self.step_size / 255.0,
            lambda_eval: self.lambda_eval,
            seed: self.attack_seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Checkpoint sidecar, weights file or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub attack: AttackParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackKind {
    Pgdpatch,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub attack: Option<AttackKind>,
    #[command(flatten)]
    pub params: AttackParams,
    #[arg(long, default_value_t = EvalSettings::default().score_threshold)]
    pub score_threshold: f32,
    #[arg(long, default_value_t = EvalSettings::default().nms_iou)]
    pub nms_iou: f32,
    /// Training config to compare against the checkpoint's config hash.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report path; defaults to `report.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

/// Errors classified by exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `argv` (including the program name), runs the command and returns
/// the exit status. Diagnostics go to stderr, tables and paths to stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (kind, err) = match &e {
                CliError::Usage(err) => ("error", err),
                CliError::Runtime(err) => ("failed", err),
            };
            eprintln!("pbcat: {kind}: {err:#}");
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    }
}

fn quote(p: &Path) -> String {
    let s = p.display().to_string();
    if s.contains(char::is_whitespace) {
        format!("'{s}'")
    } else {
        s
    }
}

fn repro(line: String) {
    eprintln!("repro: pbcat {line}");
}

fn gen_data(a: GenDataArgs) -> CliResult {
    repro(format!(
        "gen-data --out {} --train {} --val {} --resolution {} --classes {} --seed {}",
        quote(&a.out),
        a.train,
        a.val,
        a.resolution,
        a.classes,
        a.seed
    ));
    let spec = |split, n| ShapesSpec {
        seed: a.seed,
        split,
        num_images: n,
        resolution: [a.resolution, a.resolution],
        num_classes: a.classes,
    };
    for (split, n) in [(Split::Train, a.train), (Split::Val, a.val)] {
        let s = spec(split, n);
        s.validate().map_err(usage)?;
        let dir = a.out.join(split.as_str());
        let m = generate_shapes_dataset(&dir, &s).map_err(runtime)?;
        let boxes: usize = m.images.iter().map(|e| e.boxes.len()).sum();
        println!(
            "{}: {} images, {boxes} boxes",
            m.annotations_path().display(),
            m.images.len()
        );
    }
    Ok(())
}

/// Finds the annotation file for `split` under a dataset root, a split
/// directory or a direct file path.
pub fn resolve_annotations(path: &Path, split: Split) -> PathBuf {
    if path.is_file() {
        return path.to_path_buf();
    }
    let nested = path.join(split.as_str()).join(ANNOTATIONS_FILE);
    if nested.is_file() {
        nested
    } else {
        path.join(ANNOTATIONS_FILE)
    }
}

struct LoadedData {
    annotations: PathBuf,
    samples: Vec<ImageSample>,
    categories: Vec<CocoCategory>,
}

fn load_data(path: &Path, split: Split, canvas: Option<(usize, usize)>) -> CliResult<LoadedData> {
    let annotations = resolve_annotations(path, split);
    if !annotations.is_file() {
        return Err(usage(anyhow::anyhow!(
            "no annotations found at {}",
            annotations.display()
        )));
    }
    let ds = load_coco_annotations(&annotations).map_err(runtime)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let samples = ds.load_all(canvas).map_err(runtime)?;
    let categories = ds
        .category_ids
        .iter()
        .zip(&ds.categories)
        .map(|(&id, name)| CocoCategory {
            id,
            name: name.clone(),
        })
        .collect();
    Ok(LoadedData {
        annotations,
        samples,
        categories,
    })
}

/// Applies `key=value` overrides to a JSON config. Values parse as JSON when
/// possible and as strings otherwise.
pub fn apply_overrides(
    base: serde_json::Value,
    overrides: &[String],
) -> anyhow::Result<serde_json::Value> {
    let mut v = base;
    let obj = v
        .as_object_mut()
        .context("config must be a JSON object")?;
    for o in overrides {
        let (k, raw) = o
            .split_once('=')
            .with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        let val = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
        obj.insert(k.trim().to_string(), val);
    }
    Ok(v)
}

/// Reads the config file (if any), applies overrides and validates.
pub fn effective_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<TrainConfig> {
    let base = match path {
        Some(p) => read_json::<serde_json::Value>(p)?,
        None => serde_json::Value::Object(Default::default()),
    };
    let merged = apply_overrides(base, overrides)?;
    let cfg: TrainConfig = serde_json::from_value(merged).context("invalid config")?;
    Ok(cfg.validate()?)
}

/// Writes metrics lines and per-epoch checkpoints as training proceeds.
struct RunObserver {
    out: PathBuf,
    metrics: MetricsWriter,
    hash: String,
    mode: TrainMode,
    epoch_checkpoints: bool,
    started: Instant,
    error: Option<crate::Error>,
}

impl RunObserver {
    fn keep(&mut self, r: crate::Result<()>) -> pbcat_core::Result<()> {
        match r {
            Ok(()) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                self.error.get_or_insert(e);
                Err(pbcat_core::Error::Unsupported(msg))
            }
        }
    }
}

impl TrainObserver<ToyDetector<f32>> for RunObserver {
    fn on_step(&mut self, event: &StepEvent<'_>) {
        if self.error.is_none() {
            if let Err(e) = self.metrics.write(event.metrics) {
                self.error = Some(e);
            }
        }
    }

    fn on_epoch_end(
        &mut self,
        snap: &EpochSnapshot,
        det: &ToyDetector<f32>,
        _state: Option<&PerturbState>,
    ) -> pbcat_core::Result<()> {
        if let Some(e) = &self.error {
            return Err(pbcat_core::Error::Unsupported(e.to_string()));
        }
        eprintln!(
            "epoch {:>3}  pass {:>2}  mean loss {:.4}  steps {:>6}  {:.0}s",
            snap.epoch,
            snap.pass,
            snap.mean_loss,
            snap.steps,
            self.started.elapsed().as_secs_f64()
        );
        let r = self.metrics.flush().and_then(|()| {
            if self.epoch_checkpoints {
                let name = format!("epoch_{:03}", snap.epoch);
                save_checkpoint(&self.out, &name, det, &self.hash, self.mode.as_str(), Some(snap))
                    .map(|_| ())
            } else {
                Ok(())
            }
        });
        self.keep(r)
    }
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let cfg = effective_config(a.config.as_deref(), &a.overrides).map_err(usage)?;
    let mode: TrainMode = a.mode.into();
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(runtime)?;
    let cfg_path = a.out.join("config.json");
    write_json(&cfg_path, &cfg).map_err(runtime)?;
    let hash = config_hash(&cfg);
    repro(format!(
        "train --mode {} --config {} --data {} --out {}  # seed={} config_hash={hash}",
        a.mode.to_possible_value().expect("not skipped").get_name(),
        quote(&cfg_path),
        quote(&a.data),
        quote(&a.out),
        cfg.seed
    ));

    let canvas = (cfg.resolution[0], cfg.resolution[1]);
    let data = load_data(&a.data, Split::Train, Some(canvas))?;
    if data.samples.is_empty() {
        return Err(usage(anyhow::anyhow!("dataset {} is empty", data.annotations.display())));
    }
    let arch = ToyArch::new(data.categories.len(), canvas.0, canvas.1);
    let mut det: ToyDetector<f32> =
        ToyDetector::new(arch, &mut rng::stream(cfg.seed, rng::STREAM_INIT)).map_err(usage)?;
    eprintln!(
        "training {} on {} images ({} classes), {} parameters",
        mode.as_str(),
        data.samples.len(),
        data.categories.len(),
        det.num_params()
    );

    let mut obs = RunObserver {
        out: a.out.clone(),
        metrics: MetricsWriter::create(&a.out.join("metrics.jsonl")).map_err(runtime)?,
        hash: hash.clone(),
        mode,
        epoch_checkpoints: !a.no_epoch_checkpoints,
        started: Instant::now(),
        error: None,
    };
    let result = train(mode, &mut det, &data.samples, &cfg, &mut obs);
    if let Some(e) = obs.error.take() {
        return Err(runtime(e));
    }
    let mut outcome = result.map_err(runtime)?;
    obs.metrics.flush().map_err(runtime)?;
    outcome.record.config_hash = hash.clone();
    outcome.record.wall_clock_secs = Some(obs.started.elapsed().as_secs_f64());

    let last = outcome.record.epochs.last().copied();
    let ck = save_checkpoint(&a.out, "final", &det, &hash, mode.as_str(), last.as_ref())
        .map_err(runtime)?;
    write_json(&a.out.join("record.json"), &outcome.record).map_err(runtime)?;
    if let Some(state) = &outcome.state {
        data::save_field_png(&a.out.join("delta_g.png"), state.delta_g(), cfg.epsilon)
            .map_err(runtime)?;
        data::save_field_png(&a.out.join("delta_p.png"), state.delta_p(), cfg.beta)
            .map_err(runtime)?;
    }
    println!("{}", ck.display());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<checkpoint::LoadedCheckpoint> {
    let sidecar = checkpoint::resolve_sidecar(path);
    if !sidecar.is_file() {
        return Err(usage(anyhow::anyhow!("no checkpoint at {}", sidecar.display())));
    }
    load_checkpoint(path).map_err(runtime)
}

fn check_classes(ck: &checkpoint::LoadedCheckpoint, data: &LoadedData) -> CliResult {
    let k = ck.sidecar.arch.num_classes;
    if k != data.categories.len() {
        return Err(usage(anyhow::anyhow!(
            "checkpoint has {k} classes, dataset {} has {}",
            data.annotations.display(),
            data.categories.len()
        )));
    }
    Ok(())
}

fn attack_cmd(a: AttackArgs) -> CliResult {
    let cfg = a.attack.config();
    repro(format!(
        "attack --checkpoint {} --data {} --out {} --steps {} --step-size {} --lambda-eval {} --attack-seed {}",
        quote(&a.checkpoint),
        quote(&a.data),
        quote(&a.out),
        a.attack.steps,
        a.attack.step_size,
        a.attack.lambda_eval,
        a.attack.attack_seed
    ));
    let ck = load_model(&a.checkpoint)?;
    let arch = ck.sidecar.arch;
    let data = load_data(&a.data, Split::Val, Some((arch.height, arch.width)))?;
    check_classes(&ck, &data)?;
    let adv = attack_dataset(&ck.detector, &data.samples, &cfg).map_err(runtime)?;

    let images_dir = a.out.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_dir)
        .with_context(|| format!("creating {}", images_dir.display()))
        .map_err(runtime)?;
    let mut images = Vec::with_capacity(adv.samples.len());
    for (i, s) in adv.samples.iter().enumerate() {
        let file = format!("{IMAGES_DIR}/{}.png", s.id);
        data::save_png(&a.out.join(&file), &s.image).map_err(runtime)?;
        images.push(CocoImage {
            id: i as u64,
            file_name: file,
            width: arch.width,
            height: arch.height,
        });
    }
    let info = serde_json::json!({
        "attack": cfg,
        "checkpoint": ck.sidecar.weights_sha256,
        "source": data.annotations.display().to_string(),
    });
    let coco = CocoFile::assemble(
        info,
        images,
        adv.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (i as u64, s.boxes.as_slice())),
        data.categories.clone(),
    );
    coco::write_coco(&a.out.join(ANNOTATIONS_FILE), &coco).map_err(runtime)?;
    write_json(&a.out.join("attack_log.json"), &adv.log).map_err(runtime)?;
    let raised = adv.log.iter().filter(|l| l.adv_loss >= l.clean_loss).count();
    println!(
        "{}: {} images, loss raised on {raised}",
        a.out.join(ANNOTATIONS_FILE).display(),
        adv.samples.len()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let attack = a.attack.map(|_| a.params.config());
    let mut line = format!(
        "eval --checkpoint {} --data {} --score-threshold {} --nms-iou {}",
        quote(&a.checkpoint),
        quote(&a.data),
        a.score_threshold,
        a.nms_iou
    );
    if attack.is_some() {
        line += &format!(
            " --attack pgdpatch --steps {} --step-size {} --lambda-eval {} --attack-seed {}",
            a.params.steps, a.params.step_size, a.params.lambda_eval, a.params.attack_seed
        );
    }
    repro(line);

    let ck = load_model(&a.checkpoint)?;
    if let Some(p) = &a.config {
        let cfg = effective_config(Some(p), &[]).map_err(usage)?;
        if let Some(w) = checkpoint::config_mismatch(&ck.sidecar, &cfg) {
            eprintln!("warning: {w}");
        }
    }
    let arch = ck.sidecar.arch;
    let data = load_data(&a.data, Split::Val, Some((arch.height, arch.width)))?;
    check_classes(&ck, &data)?;
    let settings = EvalSettings {
        score_threshold: a.score_threshold,
        nms_iou: a.nms_iou,
    };
    let hash = &ck.sidecar.weights_sha256;
    let clean = evaluate(&ck.detector, &data.samples, None, settings, hash).map_err(runtime)?;
    let attacked = match &attack {
        Some(cfg) => Some(
            evaluate(&ck.detector, &data.samples, Some(cfg), settings, hash).map_err(runtime)?,
        ),
        None => None,
    };
    let report = ReportFile {
        format_version: REPORT_FORMAT_VERSION,
        checkpoint: hash.clone(),
        checkpoint_path: ck.sidecar_path.display().to_string(),
        mode: ck.sidecar.mode.clone(),
        data: data.annotations.display().to_string(),
        clean,
        attack,
        attacked,
    };
    let out = a.out.unwrap_or_else(|| {
        ck.sidecar_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("report.json")
    });
    report.write(&out).map_err(runtime)?;
    let label = run_label(&out);
    print!("{}", compare(&[(label, report)]));
    eprintln!("report written to {}", out.display());
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> CliResult {
    repro(format!(
        "compare {}",
        a.reports.iter().map(|p| quote(p)).collect::<Vec<_>>().join(" ")
    ));
    let mut rows = Vec::with_capacity(a.reports.len());
    for p in &a.reports {
        if !p.is_file() {
            return Err(usage(anyhow::anyhow!("no report at {}", p.display())));
        }
        rows.push((run_label(p), ReportFile::read(p).map_err(runtime)?));
    }
    print!("{}", compare(&rows));
    Ok(())
}
