//! Two-phase training harness and the matching evaluation loop.
//!
//! Phase one ("pretune") trains everything with the plain FC head and no
//! prompts. Phase two ("prompt-tune") starts from a pretune checkpoint,
//! freezes the backbone, and trains the prompt bank, the grouping
//! classifier, and the detector heads.

use std::io::Write;

use serde::Serialize;

use crate::config::{Phase, RunConfig};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{match_detections, f_scores, EvalReport, ImageTally};
use crate::model::{extract_predictions, loss_sides, Model};
use crate::params::{ParamId, ParamStore};
use crate::optim::Sgd;
use crate::rng::Rng;
use crate::synth::Dataset;
use crate::tape::Tape;

/// Substream tags so the three RNG consumers never overlap.
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Which model configuration a run trains. The two phases are the product
/// surface; the baseline arm exists for head ablations: prompts are
/// injected but classification stays with the plain head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Pretune,
    PromptTune,
    PromptBaseline,
}

impl Arm {
    fn name(self) -> &'static str {
        match self {
            Arm::Pretune => "pretune",
            Arm::PromptTune => "prompt-tune",
            Arm::PromptBaseline => "prompt-baseline",
        }
    }
}

impl From<Phase> for Arm {
    fn from(p: Phase) -> Arm {
        match p {
            Phase::Pretune => Arm::Pretune,
            Phase::PromptTune => Arm::PromptTune,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub arm: String,
    pub epochs: usize,
    pub steps: usize,
    pub final_epoch_loss: f64,
    pub tuned_scalars: usize,
    pub total_scalars: usize,
    pub tuned_ratio: f64,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    phase: &'a str,
    epoch: usize,
    loss: f64,
    lr: f64,
}

/// Runs one training phase and returns the trained store, the model view
/// over it, and a summary. `init` must be a pretune checkpoint when the
/// phase is PromptTune. Per-epoch progress goes to `log` as JSON lines.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    phase: Phase,
    init: Option<&ParamStore>,
    log: &mut dyn Write,
) -> Result<(ParamStore, Model, TrainReport)> {
    train_arm(cfg, data, phase.into(), init, log)
}

/// Like `train`, but can also build the prompt-baseline configuration.
pub fn train_arm(
    cfg: &RunConfig,
    data: &Dataset,
    arm: Arm,
    init: Option<&ParamStore>,
    log: &mut dyn Write,
) -> Result<(ParamStore, Model, TrainReport)> {
    cfg.validate()?;
    if data.scenes.is_empty() {
        return Err(Error::Data("training dataset has no scenes".into()));
    }
    let mut init_rng = Rng::with_stream(cfg.optim.seed, STREAM_INIT);
    let mut store = ParamStore::new();
    let model = match arm {
        Arm::Pretune => {
            Model::init_pretune(&mut store, &cfg.backbone, &cfg.detector, &mut init_rng)?
        }
        Arm::PromptTune | Arm::PromptBaseline => {
            let model = if arm == Arm::PromptTune {
                Model::init_prompt_tuned(
                    &mut store,
                    &cfg.backbone,
                    &cfg.detector,
                    &cfg.gtc,
                    &mut init_rng,
                )?
            } else {
                Model::init_prompt_baseline(
                    &mut store,
                    &cfg.backbone,
                    &cfg.detector,
                    cfg.gtc.groups,
                    &mut init_rng,
                )?
            };
            let source = init.ok_or_else(|| {
                Error::Checkpoint("prompt tuning requires a pretune checkpoint".into())
            })?;
            // The baseline arm shares the plain head's parameter names with
            // the pretune phase, so load_matching would hand it a classifier
            // that already trained for the whole pretune budget. The grouping
            // arm cannot inherit its classifier; keep the comparison
            // head-for-head by restoring the fresh init after loading.
            let fresh_head: Vec<(ParamId, Vec<f64>)> = if arm == Arm::PromptBaseline {
                store
                    .ids()
                    .filter(|&id| store.name(id).starts_with("head."))
                    .map(|id| (id, store.get(id).values().to_vec()))
                    .collect()
            } else {
                Vec::new()
            };
            store.load_matching(source)?;
            for (id, values) in fresh_head {
                store.get_mut(id).values_mut().copy_from_slice(&values);
            }
            store.freeze_prefix("backbone.");
            model
        }
    };

    let mut order_rng = Rng::with_stream(cfg.optim.seed, STREAM_ORDER);
    let mut noise_rng = Rng::with_stream(cfg.optim.seed, STREAM_NOISE);
    let mut opt = Sgd::new(&store, cfg.optim.lr, cfg.optim.momentum);
    let frame = cfg.frame();
    let mut steps = 0;
    let mut epoch_loss = 0.0;

    for epoch in 0..cfg.optim.epochs {
        let mut order: Vec<usize> = (0..data.scenes.len()).collect();
        order_rng.shuffle(&mut order);
        epoch_loss = 0.0;
        store.zero_grads();
        for (seen, &scene_idx) in order.iter().enumerate() {
            let scene = &data.scenes[scene_idx];
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &store, &scene.image, Some(&mut noise_rng))?;
            let (loss, _) = total_loss(
                &mut tape,
                &loss_sides(&out),
                &scene.instances,
                frame,
                &cfg.loss,
            )?;
            let loss_value = tape.value(loss).values()[0];
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {loss_value} on scene {} in epoch {epoch}",
                    scene.id
                )));
            }
            epoch_loss += loss_value;
            let scaled = tape.scale(loss, 1.0 / cfg.optim.batch as f64);
            tape.backward(scaled)?;
            tape.write_param_grads(&mut store);
            if (seen + 1) % cfg.optim.batch == 0 || seen + 1 == order.len() {
                opt.step(&mut store);
                store.zero_grads();
                steps += 1;
            }
        }
        epoch_loss /= data.scenes.len() as f64;
        let line = EpochLine {
            phase: arm.name(),
            epoch,
            loss: epoch_loss,
            lr: opt.lr(),
        };
        serde_json::to_writer(&mut *log, &line).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(log)?;
    }

    let report = TrainReport {
        arm: arm.name().to_string(),
        epochs: cfg.optim.epochs,
        steps,
        final_epoch_loss: epoch_loss,
        tuned_scalars: store.tuned_scalars(),
        total_scalars: store.total_scalars(),
        tuned_ratio: store.tuned_scalars() as f64 / store.total_scalars() as f64,
    };
    Ok((store, model, report))
}

/// Deterministic inference over a dataset: final decoder layer only, no
/// Gumbel noise, predictions matched within `radius` pixels.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    radius: f64,
) -> Result<EvalReport> {
    if data.scenes.is_empty() {
        return Err(Error::Data("evaluation dataset has no scenes".into()));
    }
    let classes = model.detector.cfg.classes;
    let frame = (data.config.width as f64, data.config.height as f64);
    let mut tallies = Vec::with_capacity(data.scenes.len());
    for scene in &data.scenes {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &scene.image, None)?;
        let side = out.sides.last().expect("decoder emits at least one layer");
        let preds = extract_predictions(&tape, side, frame);
        let outcome = match_detections(&preds, &scene.instances, radius)?;
        tallies.push(ImageTally::from_match(
            &preds,
            &scene.instances,
            &outcome,
            classes,
        )?);
    }
    f_scores(&tallies, classes)
}
