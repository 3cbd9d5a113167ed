//! End-to-end assembly: backbone features, deformable detector, and one of
//! the two classification heads (plain FC stack for pre-tuning, grouping
//! classifier fed by the prompt bank for prompt-tuning).

use crate::backbone::{Backbone, BackboneConfig, PromptBank};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::gtc::{AssignMode, Gtc, GtcConfig, GtcTrace};
use crate::loss::{softmax_rows, LossSide};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::synth::NucleusInstance;
use crate::tape::{Tape, Var};
use crate::tensor::DTensor;

/// The pre-tuning classification head: two FC layers per query.
pub struct PlainHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl PlainHead {
    pub fn init(store: &mut ParamStore, dim: usize, classes: usize, rng: &mut Rng) -> PlainHead {
        let std = 1.0 / (dim as f64).sqrt();
        // The output layer starts at zero with the empty-class logit biased to
        // the unmatched-row prior (~0.8). Most proposals are unmatched, and a
        // head that must discover that from scratch takes a violent first
        // gradient step and saturates into all-empty before the real signal
        // arrives.
        let mut prior = vec![0.0; classes + 1];
        prior[classes] = (4.0 * classes as f64).ln();
        PlainHead {
            w1: store.add_weight("head.fc1.w", &[dim, dim], std, rng),
            b1: store.add_fill("head.fc1.b", &[dim], 0.0),
            w2: store.add_fill("head.fc2.w", &[dim, classes + 1], 0.0),
            b2: store.add(
                "head.fc2.b",
                DTensor::param(vec![classes + 1], prior).expect("classes >= 1"),
            ),
        }
    }

    pub fn bind(store: &ParamStore) -> Result<PlainHead> {
        let find = |name: &str| {
            store
                .id_by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing {name}")))
        };
        Ok(PlainHead {
            w1: find("head.fc1.w")?,
            b1: find("head.fc1.b")?,
            w2: find("head.fc2.w")?,
            b2: find("head.fc2.b")?,
        })
    }

    pub fn score(&self, tape: &mut Tape, store: &ParamStore, queries: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let mid = tape.matmul(queries, w1)?;
        let mid = tape.add_bias(mid, b1)?;
        let mid = tape.gelu(mid);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let out = tape.matmul(mid, w2)?;
        tape.add_bias(out, b2)
    }
}

pub enum Head {
    Plain(PlainHead),
    Grouping(Gtc),
}

/// Prompt injection and head choice vary independently: pre-tuning uses no
/// prompts and the plain head; prompt-tuning uses prompts and the grouping
/// head; the ablation baseline injects prompts but keeps the plain head.
pub struct Model {
    pub backbone: Backbone,
    pub detector: Detector,
    pub bank: Option<PromptBank>,
    pub head: Head,
}

/// One decoder layer's detections on the tape.
pub struct SidePrediction {
    pub layer: usize,
    /// [Q x 2] normalized coordinates.
    pub points: Var,
    /// [Q x (C+1)] raw logits, column C empty.
    pub scores: Var,
    /// Discrete grouping decisions, grouping head only.
    pub trace: Option<GtcTrace>,
}

pub struct ModelOutput {
    pub sides: Vec<SidePrediction>,
    /// Row-major pixel indices the detector selected as queries.
    pub selected: Vec<usize>,
}

impl Model {
    pub fn init_pretune(
        store: &mut ParamStore,
        bcfg: &BackboneConfig,
        dcfg: &DetectorConfig,
        rng: &mut Rng,
    ) -> Result<Model> {
        let dim = bcfg.embed_dim;
        let backbone = Backbone::init(store, bcfg, rng)?;
        let detector = Detector::init(store, dcfg, dim, rng)?;
        let head = PlainHead::init(store, dim, dcfg.classes, rng);
        Ok(Model {
            backbone,
            detector,
            bank: None,
            head: Head::Plain(head),
        })
    }

    pub fn init_prompt_tuned(
        store: &mut ParamStore,
        bcfg: &BackboneConfig,
        dcfg: &DetectorConfig,
        gcfg: &GtcConfig,
        rng: &mut Rng,
    ) -> Result<Model> {
        if gcfg.classes != dcfg.classes {
            return Err(Error::Param(format!(
                "classifier has {} classes but detector expects {}",
                gcfg.classes, dcfg.classes
            )));
        }
        let dim = bcfg.embed_dim;
        let backbone = Backbone::init(store, bcfg, rng)?;
        let detector = Detector::init(store, dcfg, dim, rng)?;
        let bank = PromptBank::init(store, gcfg.groups, dim, rng);
        let gtc = Gtc::init(store, gcfg, dim, rng)?;
        Ok(Model {
            backbone,
            detector,
            bank: Some(bank),
            head: Head::Grouping(gtc),
        })
    }

    /// Ablation baseline: prompts are injected into the backbone windows,
    /// but classification stays with the plain head.
    pub fn init_prompt_baseline(
        store: &mut ParamStore,
        bcfg: &BackboneConfig,
        dcfg: &DetectorConfig,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<Model> {
        if groups == 0 {
            return Err(Error::Param("the prompt baseline needs at least one prompt".into()));
        }
        let dim = bcfg.embed_dim;
        let backbone = Backbone::init(store, bcfg, rng)?;
        let detector = Detector::init(store, dcfg, dim, rng)?;
        let bank = PromptBank::init(store, groups, dim, rng);
        let head = PlainHead::init(store, dim, dcfg.classes, rng);
        Ok(Model {
            backbone,
            detector,
            bank: Some(bank),
            head: Head::Plain(head),
        })
    }

    /// Rebuilds whatever configuration the store was trained with: the
    /// prompt bank if `prompts.g` exists, the grouping head if `gtc.c_e`
    /// does, the plain head otherwise.
    pub fn bind_auto(
        store: &ParamStore,
        bcfg: &BackboneConfig,
        dcfg: &DetectorConfig,
        gcfg: &GtcConfig,
    ) -> Result<Model> {
        let bank = match store.id_by_name("prompts.g") {
            Some(_) => Some(PromptBank::bind(store)?),
            None => None,
        };
        let head = if store.id_by_name("gtc.c_e").is_some() {
            if bank.is_none() {
                return Err(Error::Checkpoint(
                    "checkpoint has a grouping head but no prompt bank".into(),
                ));
            }
            Head::Grouping(Gtc::bind(store, gcfg)?)
        } else {
            Head::Plain(PlainHead::bind(store)?)
        };
        if let (Some(b), true) = (&bank, matches!(head, Head::Grouping(_))) {
            if b.count != gcfg.groups {
                return Err(Error::Checkpoint(format!(
                    "checkpoint stores {} prompts, config wants {}",
                    b.count, gcfg.groups
                )));
            }
        }
        Ok(Model {
            backbone: Backbone::bind(store, bcfg)?,
            detector: Detector::bind(store, dcfg, bcfg.embed_dim)?,
            bank,
            head,
        })
    }

    pub fn bind_pretune(
        store: &ParamStore,
        bcfg: &BackboneConfig,
        dcfg: &DetectorConfig,
    ) -> Result<Model> {
        Ok(Model {
            backbone: Backbone::bind(store, bcfg)?,
            detector: Detector::bind(store, dcfg, bcfg.embed_dim)?,
            bank: None,
            head: Head::Plain(PlainHead::bind(store)?),
        })
    }

    pub fn bind_prompt_tuned(
        store: &ParamStore,
        bcfg: &BackboneConfig,
        dcfg: &DetectorConfig,
        gcfg: &GtcConfig,
    ) -> Result<Model> {
        let bank = PromptBank::bind(store)?;
        if bank.count != gcfg.groups {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} prompts, config wants {}",
                bank.count, gcfg.groups
            )));
        }
        Ok(Model {
            backbone: Backbone::bind(store, bcfg)?,
            detector: Detector::bind(store, dcfg, bcfg.embed_dim)?,
            bank: Some(bank),
            head: Head::Grouping(Gtc::bind(store, gcfg)?),
        })
    }

    /// Full forward pass. `noise` enables Gumbel perturbation of the grouping
    /// assignments (training); pass None for deterministic inference.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &DTensor,
        mut noise: Option<&mut Rng>,
    ) -> Result<ModelOutput> {
        let bank_var = self.bank.as_ref().map(|b| tape.param(store, b.id));
        let grid = self.backbone.forward(tape, store, image, bank_var)?;
        let memory = self.detector.encode(tape, store, &grid)?;
        let sel = self
            .detector
            .score_and_select(tape, store, memory, grid.h, grid.w)?;
        let raw_sides = self.detector.decode(tape, store, &sel, memory, grid.h, grid.w)?;

        let mut sides = Vec::with_capacity(raw_sides.len());
        for side in raw_sides {
            let (scores, trace) = match &self.head {
                Head::Plain(head) => (head.score(tape, store, side.queries)?, None),
                Head::Grouping(gtc) => {
                    let bank_var = bank_var.ok_or_else(|| {
                        Error::Param("grouping head without a prompt bank".into())
                    })?;
                    let (s, t) = gtc.classify(
                        tape,
                        store,
                        side.queries,
                        bank_var,
                        AssignMode::Hard,
                        noise.as_deref_mut(),
                    )?;
                    (s, Some(t))
                }
            };
            sides.push(SidePrediction {
                layer: side.layer,
                points: side.points,
                scores,
                trace,
            });
        }
        Ok(ModelOutput {
            sides,
            selected: sel.indices,
        })
    }
}

/// Adapts the forward output for the loss.
pub fn loss_sides(output: &ModelOutput) -> Vec<LossSide> {
    output
        .sides
        .iter()
        .map(|s| LossSide {
            points: s.points,
            scores: s.scores,
        })
        .collect()
}

/// Reads detections out of one side output: rows whose most likely class is
/// non-empty become instances in pixel coordinates, scored by that
/// probability.
pub fn extract_predictions(
    tape: &Tape,
    side: &SidePrediction,
    frame: (f64, f64),
) -> Vec<NucleusInstance> {
    let shp = tape.shape(side.scores);
    let (q, c1) = (shp[0], shp[1]);
    let probs = softmax_rows(tape.value(side.scores).values(), q, c1);
    let pts = tape.value(side.points).values();
    let mut out = Vec::new();
    for r in 0..q {
        let row = &probs[r * c1..(r + 1) * c1];
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        if best == c1 - 1 {
            continue; // empty class wins
        }
        let x = (pts[r * 2] * frame.0).min(frame.0 - 1e-9).max(0.0);
        let y = (pts[r * 2 + 1] * frame.1).min(frame.1 - 1e-9).max(0.0);
        out.push(NucleusInstance {
            x,
            y,
            class_id: best + 1,
            score: Some(row[best]),
        });
    }
    out
}
