use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use mtmct_core::clm::CameraLinkModel;
use mtmct_core::config::PipelineConfig;
use mtmct_core::error::{Error, Result};
use mtmct_core::eval::{evaluate, per_camera};
use mtmct_core::ingest::{parse_ground_truth, write_text, write_track_rows};
use mtmct_core::pipeline::{
    load_inputs, parse_sct_file, run, train_link_model, trajectories_from_rows, trajectory_rows, write_outputs,
    CameraInput,
};
use mtmct_core::sct::{track_camera, Trajectory};
use mtmct_core::synth::{generate, ScenarioSpec};
use mtmct_core::zones::{build_zones, parse_zones, write_zones, Zone};

#[derive(Parser)]
#[command(name = "mtmct", version, about = "Multi-camera vehicle tracking")]
struct Cli {
    /// More diagnostics on stderr (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only report errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single-camera tracking; writes cam_<id>.sct.csv per camera.
    Sct(SctArgs),
    /// Infers entry/exit zones; writes zones.csv.
    Zones(ZonesArgs),
    /// Learns a camera link model from labelled tracks.
    ClmTrain(ClmTrainArgs),
    /// Full pipeline; writes tracks.csv, report.json and zones.csv.
    Track(TrackArgs),
    /// Scores predicted tracks against ground truth; JSON on stdout.
    Eval(EvalArgs),
    /// Generates a synthetic scenario.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for per-camera stages.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Recorded in the manifest; the pipeline itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SctArgs {
    /// Directory holding cam_<id>/ inputs.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ZonesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Reuse SCT results written by `sct` instead of tracking again.
    #[arg(long)]
    from_sct: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ClmTrainArgs {
    /// Labelled tracks (camera_id,frame,id,x,y,w,h) of a training run.
    #[arg(long)]
    gt: PathBuf,
    /// Zones to use; inferred from the labelled tracks when omitted.
    #[arg(long)]
    zones: Option<PathBuf>,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Camera link model; without it every cross-camera pair is a candidate.
    #[arg(long)]
    clm: Option<PathBuf>,
    #[arg(long)]
    from_sct: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Box IOU needed for a match.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Also report each camera separately.
    #[arg(long)]
    per_camera: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Chain,
    StopLine,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario spec JSON.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Built-in scenario instead of a spec file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed stored in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn write_manifest(
    out: &Path,
    subcommand: &str,
    inputs: BTreeMap<&str, String>,
    config: Option<&Path>,
    stages: &[&str],
    seed: u64,
) -> Result<()> {
    let manifest = json!({
        "tool": "mtmct",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "inputs": inputs,
        "config": config.map(path_str),
        "output": path_str(out),
        "stages": stages,
        "seed": seed,
    });
    write_text(
        &out.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn sct_path(dir: &Path, camera_id: u32) -> PathBuf {
    dir.join(format!("cam_{camera_id}.sct.csv"))
}

fn load_sct(dir: &Path, inputs: &[CameraInput], cfg: &PipelineConfig) -> Result<BTreeMap<u32, Vec<Trajectory>>> {
    inputs
        .iter()
        .map(|input| {
            let rows = parse_sct_file(&sct_path(dir, input.camera_id))?;
            Ok((input.camera_id, trajectories_from_rows(input, &rows, cfg)?))
        })
        .collect()
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("cannot start worker pool: {e}")))
}

fn track_all(inputs: &[CameraInput], cfg: &PipelineConfig, jobs: usize) -> Result<BTreeMap<u32, Vec<Trajectory>>> {
    use rayon::prelude::*;
    thread_pool(jobs)?.install(|| {
        inputs
            .par_iter()
            .map(|i| Ok((i.camera_id, track_camera(&i.detections, &i.embeddings, cfg)?)))
            .collect()
    })
}

fn cmd_sct(a: &SctArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    cfg.validate()?;
    let inputs = load_inputs(&a.input, &cfg)?;
    for (camera_id, trajs) in track_all(&inputs, &cfg, a.common.jobs)? {
        info!("camera {camera_id}: {} trajectories", trajs.len());
        write_text(
            &sct_path(&a.out, camera_id),
            &write_track_rows(&trajectory_rows(&trajs, &cfg)),
        )?;
    }
    let inputs = BTreeMap::from([("in", path_str(&a.input))]);
    write_manifest(
        &a.out,
        "sct",
        inputs,
        a.common.config.as_deref(),
        &["ingest", "sct"],
        a.common.seed,
    )
}

fn cmd_zones(a: &ZonesArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    cfg.validate()?;
    let inputs = load_inputs(&a.input, &cfg)?;
    let sct = match &a.from_sct {
        Some(dir) => load_sct(dir, &inputs, &cfg)?,
        None => track_all(&inputs, &cfg, a.common.jobs)?,
    };
    let mut zones: Vec<Zone> = Vec::new();
    for trajs in sct.values() {
        zones.extend(build_zones(trajs, &cfg)?);
    }
    write_text(&a.out.join("zones.csv"), &write_zones(&zones))?;
    let mut paths = BTreeMap::from([("in", path_str(&a.input))]);
    let mut stages = vec!["ingest"];
    match &a.from_sct {
        Some(dir) => {
            paths.insert("from_sct", path_str(dir));
        }
        None => stages.push("sct"),
    }
    stages.push("zones");
    write_manifest(
        &a.out,
        "zones",
        paths,
        a.common.config.as_deref(),
        &stages,
        a.common.seed,
    )
}

fn cmd_clm_train(a: &ClmTrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let gt = parse_ground_truth(&a.gt)?;
    let zones = a.zones.as_deref().map(parse_zones).transpose()?;
    let (model, stats) = train_link_model(&gt, zones.as_deref(), &cfg)?;
    info!(
        "{} links from {} samples ({} dropped)",
        model.links.len(),
        stats.samples,
        stats.dropped_links
    );
    if model.links.is_empty() {
        warn!("no camera link had enough samples");
    }
    write_text(&a.out, &model.to_json())
}

fn cmd_track(a: &TrackArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    cfg.validate()?;
    let inputs = load_inputs(&a.input, &cfg)?;
    let model = a.clm.as_deref().map(CameraLinkModel::load).transpose()?;
    let sct = a.from_sct.as_deref().map(|d| load_sct(d, &inputs, &cfg)).transpose()?;
    let out = run(&inputs, sct, &cfg, model.as_ref(), a.common.jobs)?;
    write_outputs(&a.out, &out)?;

    let mut paths = BTreeMap::from([("in", path_str(&a.input))]);
    let mut stages = vec!["ingest"];
    match &a.from_sct {
        Some(d) => {
            paths.insert("from_sct", path_str(d));
        }
        None => stages.push("sct"),
    }
    stages.extend(["zones", "reconnect", "fusion", "mtmct"]);
    if let Some(m) = &a.clm {
        paths.insert("clm", path_str(m));
    }
    write_manifest(
        &a.out,
        "track",
        paths,
        a.common.config.as_deref(),
        &stages,
        a.common.seed,
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pred = parse_ground_truth(&a.pred)?;
    let gt = parse_ground_truth(&a.gt)?;
    let report = evaluate(&pred, &gt, a.iou)?;
    let text = if a.per_camera {
        let cams = per_camera(&pred, &gt, a.iou)?;
        serde_json::to_string_pretty(&json!({ "overall": report, "cameras": cams }))?
    } else {
        serde_json::to_string_pretty(&report)?
    };
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match (&a.spec, a.preset) {
        (Some(p), _) => ScenarioSpec::load(p)?,
        (None, Some(Preset::Chain)) => ScenarioSpec::chain(0),
        (None, Some(Preset::StopLine)) => ScenarioSpec::stop_line(0),
        (None, None) => return Err(Error::Validation("either --spec or --preset is required".into())),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scenario = generate(&spec)?;
    scenario.write(&a.out)?;
    let mut inputs = BTreeMap::new();
    if let Some(p) = &a.spec {
        inputs.insert("spec", path_str(p));
    }
    write_manifest(&a.out, "synth", inputs, None, &["synth"], spec.seed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();

    let result = match &cli.command {
        Command::Sct(a) => cmd_sct(a),
        Command::Zones(a) => cmd_zones(a),
        Command::ClmTrain(a) => cmd_clm_train(a),
        Command::Track(a) => cmd_track(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
