use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use serde::Serialize;
use trackcore::embed::{Embedder, LearnedEmbedder, OracleEmbedder};
use trackcore::moteval::{format_mot, read_mot_file};
use trackcore::pipeline::{run_tracker, FeatureSource, TrackRun};
use trackcore::synth::{detections_to_mot, generate_scenario};
use trackcore::train::{
    initial_msfl, initial_ssfl, msfl_csv, msfl_heldout_batch, render_all, ssfl_csv, ssfl_pair_accuracy, train_msfl,
    train_ssfl,
};
use trackcore::tracker::{Diagnostics, MergeEvent};
use trackcore::{clearmot, BBox, Config, Detection, GroundTruth, MotRecord, Tracker};

use crate::manifest::RunManifest;
use crate::{Cli, Command, Model, Preset, TrackArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or missing inputs: exit 2.
    Usage(String),
    /// The command ran and failed: exit 1.
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Failure(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<trackcore::Error> for CliError {
    fn from(e: trackcore::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<autograd::Error> for CliError {
    fn from(e: autograd::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

fn load_config(path: &Path) -> Result<Config> {
    require(path)?;
    Config::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// `--config` if given, else the scenario's own config, else the preset.
fn resolve_config(cli: &Cli, scenario: Option<&Path>) -> Result<Config> {
    if let Some(p) = &cli.config {
        return load_config(p);
    }
    if let Some(dir) = scenario {
        return load_config(&dir.join("config.toml"));
    }
    Ok(match cli.preset {
        Preset::Default => Config::default(),
        Preset::Training => Config::training_preset(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    if cli.dump_config {
        print!("{}", resolve_config(cli, None)?.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    match &cli.command {
        None => Err(CliError::Usage("no command given; see --help".into())),
        Some(Command::Simulate { out, seed }) => simulate(cli, out, *seed),
        Some(Command::Train {
            model,
            scenario,
            out,
            iterations,
            seed,
        }) => train(cli, *model, scenario, out, *iterations, *seed),
        Some(Command::Track(args)) => track(cli, args),
        Some(Command::Eval { gt, res, iou, out }) => eval(gt, res, *iou, out.as_deref()),
        Some(Command::Verify { out }) => verify(out.as_deref()),
    }
}

fn simulate(cli: &Cli, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let started = Instant::now();
    let mut cfg = resolve_config(cli, None)?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    let gt = generate_scenario(&cfg.scenario)?;
    if gt.targets.is_empty() {
        eprintln!("warning: scenario has 0 targets; ground truth is empty");
    }
    create_dir(out)?;
    let mut m = RunManifest::new("simulate", Some(&cfg), Some(cfg.scenario.seed));
    if let Some(p) = &cli.config {
        m = m.input(p);
    }
    let dets: Vec<MotRecord> = (1..=gt.frames)
        .flat_map(|f| detections_to_mot(f, &trackcore::synth::corrupt_detections(&gt, f, &cfg.scenario)))
        .collect();
    m.write(out, "config.toml", cfg.to_toml())?;
    m.write(out, "truth.json", json(&gt))?;
    m.write(out, "gt.txt", format_mot(&gt.to_mot()))?;
    m.write(out, "det.txt", format_mot(&dets))?;
    m.write(out, "signatures.json", json(&gt.signatures_json()))?;
    m.finish(out, started)?;
    println!(
        "{} targets, {} frames, {} detections -> {}",
        gt.targets.len(),
        gt.frames,
        dets.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join("truth.json");
    require(&path)?;
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

fn train(
    cli: &Cli,
    model: Model,
    scenario: &Path,
    out: &Path,
    iterations: Option<usize>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let started = Instant::now();
    require(scenario)?;
    let mut cfg = resolve_config(cli, Some(scenario))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let gt = load_truth(scenario)?;
    create_dir(out)?;
    match model {
        Model::Ssfl => {
            if let Some(n) = iterations {
                cfg.train.ssfl_iterations = n;
            }
            let mut m = RunManifest::new("train ssfl", Some(&cfg), Some(cfg.train.seed)).input(scenario);
            let pyramids = render_all(&gt, &cfg);
            let tr = train_ssfl(&cfg, &gt, &pyramids)?;
            let heldout = tr.heldout_from + 1..=gt.frames;
            let accuracy = ssfl_pair_accuracy(&tr.model, &tr.store, &cfg, &gt, &pyramids, heldout.clone())?;
            let trained = !tr.log.is_empty();
            let initial = trained.then(|| tr.initial_inter(10));
            let last = trained.then(|| tr.final_inter(10));
            let summary = SsflSummary {
                iterations: tr.log.len(),
                initial_inter: initial,
                final_inter: last,
                inter_ratio: initial.zip(last).filter(|(i, _)| *i > 0.0).map(|(i, l)| l / i),
                heldout_frames: [*heldout.start(), *heldout.end()],
                heldout_accuracy: accuracy,
            };
            m.write(out, "ssfl.ckpt", autograd::checkpoint::encode(&tr.store))?;
            m.write(out, "ssfl_loss.csv", ssfl_csv(&tr.log))?;
            m.write(out, "summary.json", json(&summary))?;
            m.finish(out, started)?;
            match initial.zip(last) {
                Some((i, l)) => println!(
                    "ssfl: {} iterations, inter loss {i:.4} -> {l:.4}, held-out pair accuracy {accuracy:.4}",
                    summary.iterations
                ),
                None => println!("ssfl: untrained, held-out pair accuracy {accuracy:.4}"),
            }
        }
        Model::Msfl => {
            if let Some(n) = iterations {
                cfg.train.msfl_iterations = n;
            }
            let mut m = RunManifest::new("train msfl", Some(&cfg), Some(cfg.train.seed)).input(scenario);
            let tr = train_msfl(&cfg)?;
            let heldout = msfl_heldout_batch(&cfg)?;
            let sims = heldout.similarity_values(&tr.model, &tr.store)?;
            let summary = MsflSummary {
                iterations: tr.log.len(),
                first_loss: tr.log.first().map(|r| r.asso),
                last_loss: tr.log.last().map(|r| r.asso),
                heldout_pairs: heldout.len(),
                heldout_accuracy: heldout.accuracy(&sims, 0.5),
                pooled_accuracy: heldout.accuracy(&heldout.pooled_similarities(), 0.5),
            };
            m.write(out, "msfl.ckpt", autograd::checkpoint::encode(&tr.store))?;
            m.write(out, "msfl_loss.csv", msfl_csv(&tr.log))?;
            m.write(out, "summary.json", json(&summary))?;
            m.finish(out, started)?;
            println!(
                "msfl: {} iterations, held-out pair accuracy {:.4} on {} pairs (pooled crops {:.4})",
                summary.iterations, summary.heldout_accuracy, summary.heldout_pairs, summary.pooled_accuracy
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SsflSummary {
    iterations: usize,
    /// Mean inter-frame loss over the first 10 iterations.
    initial_inter: Option<f64>,
    /// Mean inter-frame loss over the last 10 iterations.
    final_inter: Option<f64>,
    inter_ratio: Option<f64>,
    heldout_frames: [usize; 2],
    heldout_accuracy: f64,
}

#[derive(Serialize)]
struct MsflSummary {
    iterations: usize,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    heldout_pairs: usize,
    heldout_accuracy: f64,
    pooled_accuracy: f64,
}

fn load_detections(path: &Path, frames: usize) -> Result<Vec<Vec<Detection>>> {
    require(path)?;
    let records = read_mot_file(path).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?;
    let mut out = vec![Vec::new(); frames];
    for r in records {
        let f = r.frame as usize;
        if f == 0 || f > frames {
            return Err(CliError::Failure(format!(
                "{}: detection at frame {f} outside 1..={frames}",
                path.display()
            )));
        }
        out[f - 1].push(Detection::new(BBox::new(r.x, r.y, r.w, r.h)?, r.conf));
    }
    Ok(out)
}

fn load_params(store: &mut autograd::ParamStore, path: &Path) -> Result<()> {
    require(path)?;
    autograd::checkpoint::load(store, path).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct FrameDiagnostics<'a> {
    frame: usize,
    tracks: usize,
    merges: &'a [MergeEvent],
    #[serde(flatten)]
    stages: &'a Diagnostics,
}

#[derive(Serialize)]
struct TrackDiagnostics<'a> {
    long_term: bool,
    oracle_embeddings: bool,
    learned_tracklet_features: bool,
    total_merges: usize,
    output_ids: usize,
    frames: Vec<FrameDiagnostics<'a>>,
}

fn track(cli: &Cli, args: &TrackArgs) -> Result<ExitCode> {
    let started = Instant::now();
    require(&args.scenario)?;
    let cfg = resolve_config(cli, Some(&args.scenario))?;
    let gt = load_truth(&args.scenario)?;
    let det_path = args.detections.clone().unwrap_or_else(|| args.scenario.join("det.txt"));
    let dets = load_detections(&det_path, gt.frames)?;
    let mut tc = cfg.tracker.clone();
    if args.disable_msfl {
        tc.enable_long_term = false;
    }
    let msfl = match &args.msfl_checkpoint {
        Some(p) => {
            let (model, mut store) = initial_msfl(&cfg)?;
            load_params(&mut store, p)?;
            Some((model, store))
        }
        None => None,
    };
    let learned_tracklets = msfl.is_some();
    let run = if args.oracle_embeddings {
        drive(Tracker::new(tc.clone(), OracleEmbedder { msfl })?, &gt, &cfg, &dets, FeatureSource::OracleMap)?
    } else {
        let path: &PathBuf = args.checkpoint.as_ref().expect("clap requires a checkpoint without oracle mode");
        if learned_tracklets && cfg.ssfl.map_channels != cfg.msfl.dim {
            return Err(CliError::Usage(format!(
                "the MSFL checkpoint expects {}-channel crops but SSFL maps have {} channels",
                cfg.msfl.dim, cfg.ssfl.map_channels
            )));
        }
        let (model, mut store) = initial_ssfl(&cfg)?;
        load_params(&mut store, path)?;
        let embedder = LearnedEmbedder::new(model, store, msfl);
        drive(Tracker::new(tc.clone(), embedder)?, &gt, &cfg, &dets, FeatureSource::Pyramid)?
    };

    create_dir(&args.out)?;
    let mut m = RunManifest::new("track", Some(&cfg), Some(cfg.scenario.seed))
        .input(&args.scenario)
        .input(&det_path);
    for p in args.checkpoint.iter().chain(&args.msfl_checkpoint) {
        m = m.input(p);
    }
    let mut ids: Vec<i64> = run.records.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let diagnostics = TrackDiagnostics {
        long_term: tc.enable_long_term,
        oracle_embeddings: args.oracle_embeddings,
        learned_tracklet_features: learned_tracklets,
        total_merges: run.online.iter().map(|r| r.merges.len()).sum(),
        output_ids: ids.len(),
        frames: run
            .online
            .iter()
            .map(|r| FrameDiagnostics {
                frame: r.frame,
                tracks: r.tracks.len(),
                merges: &r.merges,
                stages: &r.diagnostics,
            })
            .collect(),
    };
    m.write(&args.out, "results.txt", format_mot(&run.records))?;
    m.write(&args.out, "online.txt", format_mot(&run.online_records()))?;
    m.write(&args.out, "diagnostics.json", json(&diagnostics))?;
    m.finish(&args.out, started)?;
    println!(
        "{} frames, {} result boxes, {} ids, {} long-term merges -> {}",
        run.online.len(),
        run.records.len(),
        diagnostics.output_ids,
        diagnostics.total_merges,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn drive<E: Embedder>(
    mut tracker: Tracker<E>,
    gt: &GroundTruth,
    cfg: &Config,
    dets: &[Vec<Detection>],
    source: FeatureSource,
) -> Result<TrackRun> {
    Ok(run_tracker(&mut tracker, gt, &cfg.scenario, dets, source)?)
}

fn read_records(path: &Path) -> Result<Vec<MotRecord>> {
    require(path)?;
    read_mot_file(path).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

fn eval(gt: &Path, res: &Path, iou: f64, out: Option<&Path>) -> Result<ExitCode> {
    let started = Instant::now();
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(CliError::Usage(format!("--iou must lie in (0, 1], got {iou}")));
    }
    let gt_records = read_records(gt)?;
    let res_records = read_records(res)?;
    let report = clearmot(&gt_records, &res_records, iou);
    print!("{}", report.table());
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut m = RunManifest::new("eval", None, None).input(gt).input(res);
        m.write(dir, "report.json", json(&report))?;
        m.finish(dir, started)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(out: Option<&Path>) -> Result<ExitCode> {
    let started = Instant::now();
    let report = trackcore::verify::run_all();
    let failed = report.failures().count();
    for c in &report.checks {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        println!("{mark} {:<10} {:<34} {}", c.group, c.name, c.detail);
    }
    println!("{} checks, {} failed", report.checks.len(), failed);
    eprintln!("verification took {:.1} s", report.seconds);
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut m = RunManifest::new("verify", None, None);
        m.write(dir, "verify.json", json(&report.checks))?;
        m.finish(dir, started)?;
    }
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
