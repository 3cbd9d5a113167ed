//! Command-line surface: data generation, two-phase training, evaluation,
//! group-count ablation, assignment inspection, and SVG overlays.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
//! 4 missing init checkpoint, 5 training divergence, 6 shape-incompatible
//! checkpoint. Clap reports usage errors as 2 on its own.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use nucdet::checkpoint::{load_checkpoint, save_checkpoint};
use nucdet::config::{Phase, RunConfig};
use nucdet::error::Error;
use nucdet::gtc::GtcTrace;
use nucdet::metrics::{default_radius, f_scores, match_detections, EvalReport, ImageTally};
use nucdet::model::{extract_predictions, Model};
use nucdet::params::ParamStore;
use nucdet::synth::{generate_scene, load_dataset, save_dataset, Dataset, NucleusInstance};
use nucdet::tape::Tape;
use nucdet::train::{evaluate, train};

mod svg;

#[derive(Parser)]
#[command(name = "nucdet", version, about = "Nucleus detection with grouping prompts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clustered-scene dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        /// Overrides the seed from the config when given.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one phase; prompt-tune resumes from a pretune checkpoint.
    Train {
        #[arg(long)]
        phase: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log destination; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate the annotations against themselves (protocol check).
        #[arg(long)]
        oracle: bool,
    },
    /// Prompt-tune and evaluate once per group count.
    AblateGroups {
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for scoring; defaults to --data.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Dump the discrete group assignments for one scene.
    InspectGroups {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render ground truth, predictions, and matches as SVG, one per scene.
    Overlay {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
        /// Render at most this many scenes.
        #[arg(long)]
        limit: Option<usize>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

type CmdResult<T> = Result<T, Failure>;

fn fail(code: u8, msg: impl Display) -> Failure {
    Failure {
        code,
        msg: msg.to_string(),
    }
}

/// Context-free mapping for errors bubbling out of the pipeline.
fn map_err(err: Error) -> Failure {
    let code = match &err {
        Error::Param(_) | Error::Generation(_) => 2,
        Error::Io(_) | Error::Parse(_) | Error::Data(_) | Error::Stats(_) => 3,
        Error::Numeric(_) => 5,
        Error::Checkpoint(_) | Error::Shape(_) => 6,
    };
    fail(code, err)
}

fn load_config(path: &Option<PathBuf>) -> CmdResult<RunConfig> {
    match path {
        None => {
            let cfg = RunConfig::default();
            cfg.validate().map_err(|e| fail(2, e))?;
            Ok(cfg)
        }
        Some(p) => RunConfig::load(p).map_err(|e| fail(2, e)),
    }
}

fn load_data(path: &Path) -> CmdResult<Dataset> {
    load_dataset(path).map_err(|e| fail(3, format!("{}: {e}", path.display())))
}

fn load_ckpt(path: &Path, missing_code: u8) -> CmdResult<ParamStore> {
    if !path.exists() {
        return Err(fail(
            missing_code,
            format!("checkpoint {} does not exist", path.display()),
        ));
    }
    load_checkpoint(path).map_err(map_err)
}

/// Binds whichever configuration the checkpoint was trained with.
fn bind_model(store: &ParamStore, cfg: &RunConfig) -> CmdResult<Model> {
    Model::bind_auto(store, &cfg.backbone, &cfg.detector, &cfg.gtc).map_err(|e| fail(6, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| fail(3, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| fail(3, format!("{}: {e}", path.display())))
}

fn cmd_gen_data(
    config: &Option<PathBuf>,
    out: &Path,
    scenes: usize,
    seed: Option<u64>,
) -> CmdResult<()> {
    let cfg = load_config(config)?;
    let mut scene_cfg = cfg.scene.clone();
    if let Some(s) = seed {
        scene_cfg.seed = s;
    }
    let mut generated = Vec::with_capacity(scenes);
    for i in 0..scenes {
        generated.push(generate_scene(&scene_cfg, i).map_err(map_err)?);
    }
    save_dataset(out, &scene_cfg, &generated).map_err(|e| fail(3, e))?;
    let instances: usize = generated.iter().map(|s| s.instances.len()).sum();
    println!(
        "wrote {} scenes with {} instances to {}",
        generated.len(),
        instances,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    phase_flag: &Option<String>,
    config: &Option<PathBuf>,
    data: &Path,
    init: &Option<PathBuf>,
    out: &Path,
    log_path: &Option<PathBuf>,
) -> CmdResult<()> {
    let cfg = load_config(config)?;
    let phase = match (phase_flag, cfg.phase) {
        (Some(s), _) => s.parse::<Phase>().map_err(|e| fail(2, e))?,
        (None, Some(p)) => p,
        (None, None) => {
            return Err(fail(2, "no --phase given and the config names none"));
        }
    };
    let dataset = load_data(data)?;

    let init_store = match phase {
        Phase::Pretune => None,
        Phase::PromptTune => {
            let path = init.as_ref().ok_or_else(|| {
                fail(4, "prompt-tune needs --init pointing at a pretune checkpoint")
            })?;
            Some(load_ckpt(path, 4)?)
        }
    };

    let mut log: Box<dyn Write> = match log_path {
        Some(p) => Box::new(
            fs::File::create(p).map_err(|e| fail(3, format!("{}: {e}", p.display())))?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let (store, _, report) =
        train(&cfg, &dataset, phase, init_store.as_ref(), &mut log).map_err(map_err)?;
    drop(log);

    save_checkpoint(&store, out).map_err(|e| fail(3, e))?;
    println!(
        "trained {}: {} steps, final epoch loss {:.6}",
        report.arm, report.steps, report.final_epoch_loss
    );
    println!(
        "tuned {} of {} parameters (ratio {:.4})",
        report.tuned_scalars, report.total_scalars, report.tuned_ratio
    );
    println!("checkpoint written to {}", out.display());
    Ok(())
}

/// Scores annotations against themselves; exercises the metric path with a
/// known-perfect answer.
fn oracle_report(dataset: &Dataset, radius: f64) -> CmdResult<EvalReport> {
    let classes = dataset.config.classes;
    let mut tallies = Vec::with_capacity(dataset.scenes.len());
    for scene in &dataset.scenes {
        let preds: Vec<NucleusInstance> = scene.instances.clone();
        let outcome = match_detections(&preds, &scene.instances, radius).map_err(map_err)?;
        tallies.push(
            ImageTally::from_match(&preds, &scene.instances, &outcome, classes).map_err(map_err)?,
        );
    }
    f_scores(&tallies, classes).map_err(map_err)
}

fn cmd_eval(
    ckpt: &Option<PathBuf>,
    config: &Option<PathBuf>,
    data: &Path,
    radius: Option<f64>,
    out: &Option<PathBuf>,
    oracle: bool,
) -> CmdResult<()> {
    let cfg = load_config(config)?;
    let dataset = load_data(data)?;
    let radius =
        radius.unwrap_or_else(|| default_radius(dataset.config.height.min(dataset.config.width)));

    let report = if oracle {
        oracle_report(&dataset, radius)?
    } else {
        let path = ckpt
            .as_ref()
            .ok_or_else(|| fail(2, "eval needs --ckpt (or --oracle)"))?;
        let store = load_ckpt(path, 3)?;
        let model = bind_model(&store, &cfg)?;
        evaluate(&model, &store, &dataset, radius).map_err(|e| match e {
            Error::Shape(_) => fail(6, e),
            other => map_err(other),
        })?
    };

    println!(
        "F_d {:.4}  mean F_c {:.4}  (radius {radius:.2}px, {} scenes)",
        report.f_detection,
        report.mean_f_class,
        dataset.scenes.len()
    );
    for (i, f) in report.f_class.iter().enumerate() {
        println!("  class {}: F_c {f:.4}", i + 1);
    }
    if let Some(path) = out {
        write_json(path, &report)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    groups: usize,
    f_detection: f64,
    mean_f_class: f64,
    tuned_scalars: usize,
    tuned_ratio: f64,
}

fn cmd_ablate(
    values: &[usize],
    config: &Option<PathBuf>,
    data: &Path,
    test: &Option<PathBuf>,
    init: &Path,
    out: &Option<PathBuf>,
    radius: Option<f64>,
) -> CmdResult<()> {
    if values.is_empty() {
        return Err(fail(2, "ablate-groups needs at least one --values entry"));
    }
    let base = load_config(config)?;
    let train_data = load_data(data)?;
    let test_data = match test {
        Some(p) => load_data(p)?,
        None => load_data(data)?,
    };
    let radius = radius
        .unwrap_or_else(|| default_radius(test_data.config.height.min(test_data.config.width)));
    let init_store = load_ckpt(init, 4)?;

    let mut rows = Vec::with_capacity(values.len());
    for &g in values {
        let mut cfg = base.clone();
        cfg.gtc.groups = g;
        let mut sink = std::io::sink();
        let (store, model, report) = train(
            &cfg,
            &train_data,
            Phase::PromptTune,
            Some(&init_store),
            &mut sink,
        )
        .map_err(map_err)?;
        let eval = evaluate(&model, &store, &test_data, radius).map_err(map_err)?;
        println!(
            "G={g}: F_d {:.4}, mean F_c {:.4}",
            eval.f_detection, eval.mean_f_class
        );
        rows.push(AblationRow {
            groups: g,
            f_detection: eval.f_detection,
            mean_f_class: eval.mean_f_class,
            tuned_scalars: report.tuned_scalars,
            tuned_ratio: report.tuned_ratio,
        });
    }

    let mut table = String::new();
    table.push_str(&format!(
        "{:>8} {:>10} {:>12} {:>14}\n",
        "groups", "F_d", "mean F_c", "tuned params"
    ));
    for r in &rows {
        table.push_str(&format!(
            "{:>8} {:>10.4} {:>12.4} {:>14}\n",
            r.groups, r.f_detection, r.mean_f_class, r.tuned_scalars
        ));
    }
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| fail(3, format!("{}: {e}", dir.display())))?;
        write_json(&dir.join("ablation.json"), &rows)?;
        fs::write(dir.join("ablation.txt"), &table)
            .map_err(|e| fail(3, format!("{}: {e}", dir.display())))?;
        println!("tables written to {}", dir.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct InspectionDump {
    scene: usize,
    /// Pixel indices the detector promoted to queries.
    selected: Vec<usize>,
    /// Stage-1 group per query, final decoder layer.
    query_group: Vec<usize>,
    /// Stage-2 category per group (value classes means "empty").
    group_class: Vec<usize>,
    /// Queries per group; sums to the query count.
    histogram: Vec<usize>,
}

fn cmd_inspect(
    ckpt: &Path,
    config: &Option<PathBuf>,
    data: &Path,
    scene_id: usize,
    out: &Option<PathBuf>,
) -> CmdResult<()> {
    let cfg = load_config(config)?;
    let dataset = load_data(data)?;
    let store = load_ckpt(ckpt, 3)?;
    let model = bind_model(&store, &cfg)?;
    let scene = dataset
        .scenes
        .iter()
        .find(|s| s.id == scene_id)
        .ok_or_else(|| fail(3, format!("scene {scene_id} not in {}", data.display())))?;

    let mut tape = Tape::new();
    let output = model
        .forward(&mut tape, &store, &scene.image, None)
        .map_err(|e| fail(6, e))?;
    let side = output.sides.last().expect("decoder has layers");
    let trace: &GtcTrace = side.trace.as_ref().ok_or_else(|| {
        fail(2, "checkpoint uses the plain head; there are no groups to inspect")
    })?;

    let mut histogram = vec![0usize; trace.group_class.len()];
    for &g in &trace.query_group {
        histogram[g] += 1;
    }
    let dump = InspectionDump {
        scene: scene_id,
        selected: output.selected.clone(),
        query_group: trace.query_group.clone(),
        group_class: trace.group_class.clone(),
        histogram,
    };
    let occupied = dump.histogram.iter().filter(|&&c| c > 0).count();
    println!(
        "scene {scene_id}: {} queries in {} of {} groups",
        dump.query_group.len(),
        occupied,
        dump.histogram.len()
    );
    match out {
        Some(path) => {
            write_json(path, &dump)?;
            println!("assignments written to {}", path.display());
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&dump).map_err(|e| fail(3, e))?)
        }
    }
    Ok(())
}

fn cmd_overlay(
    ckpt: &Path,
    config: &Option<PathBuf>,
    data: &Path,
    out: &Path,
    radius: Option<f64>,
    limit: Option<usize>,
) -> CmdResult<()> {
    let cfg = load_config(config)?;
    let dataset = load_data(data)?;
    let radius =
        radius.unwrap_or_else(|| default_radius(dataset.config.height.min(dataset.config.width)));
    let store = load_ckpt(ckpt, 3)?;
    let model = bind_model(&store, &cfg)?;
    fs::create_dir_all(out).map_err(|e| fail(3, format!("{}: {e}", out.display())))?;

    let frame = (
        dataset.config.width as f64,
        dataset.config.height as f64,
    );
    let take = limit.unwrap_or(dataset.scenes.len());
    let mut written = 0;
    for scene in dataset.scenes.iter().take(take) {
        let mut tape = Tape::new();
        let output = model
            .forward(&mut tape, &store, &scene.image, None)
            .map_err(|e| fail(6, e))?;
        let preds = extract_predictions(&tape, output.sides.last().unwrap(), frame);
        let outcome = match_detections(&preds, &scene.instances, radius).map_err(map_err)?;
        let doc = svg::render_scene(scene, &preds, &outcome.tp_pairs, &dataset.config, radius);
        let path = out.join(format!("{:04}.svg", scene.id));
        fs::write(&path, doc).map_err(|e| fail(3, format!("{}: {e}", path.display())))?;
        written += 1;
    }
    println!("wrote {written} overlays to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult<()> {
    match &cli.cmd {
        Cmd::GenData {
            config,
            out,
            scenes,
            seed,
        } => cmd_gen_data(config, out, *scenes, *seed),
        Cmd::Train {
            phase,
            config,
            data,
            init,
            out,
            log,
        } => cmd_train(phase, config, data, init, out, log),
        Cmd::Eval {
            ckpt,
            config,
            data,
            radius,
            out,
            oracle,
        } => cmd_eval(ckpt, config, data, *radius, out, *oracle),
        Cmd::AblateGroups {
            values,
            config,
            data,
            test,
            init,
            out,
            radius,
        } => cmd_ablate(values, config, data, test, init, out, *radius),
        Cmd::InspectGroups {
            ckpt,
            config,
            data,
            scene,
            out,
        } => cmd_inspect(ckpt, config, data, *scene, out),
        Cmd::Overlay {
            ckpt,
            config,
            data,
            out,
            radius,
            limit,
        } => cmd_overlay(ckpt, config, data, out, *radius, *limit),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
