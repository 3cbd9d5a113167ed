//! Query-based detection head: deformable-attention encoder, top-Q pixel
//! selection, and a point-refining decoder with one side output per layer.

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureGrid;
use crate::error::{Error, Result};
use crate::loss::softmax_rows;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::DTensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub sample_points: usize,
    pub heads: usize,
    pub classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            queries: 64,
            enc_layers: 3,
            dec_layers: 3,
            sample_points: 4,
            heads: 2,
            classes: 3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.queries == 0
            || self.enc_layers == 0
            || self.dec_layers == 0
            || self.sample_points == 0
            || self.heads == 0
            || self.classes == 0
        {
            return Err(Error::Param("detector dimensions must be positive".into()));
        }
        if embed_dim % self.heads != 0 {
            return Err(Error::Param(format!(
                "embed dim {embed_dim} not divisible by {} detector heads",
                self.heads
            )));
        }
        Ok(())
    }
}

struct DeformIds {
    w_off: ParamId,
    b_off: ParamId,
    w_wt: ParamId,
    b_wt: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

struct EncIds {
    n1_gain: ParamId,
    n1_bias: ParamId,
    attn: DeformIds,
    n2_gain: ParamId,
    n2_bias: ParamId,
    f1w: ParamId,
    f1b: ParamId,
    f2w: ParamId,
    f2b: ParamId,
}

struct DecIds {
    n1_gain: ParamId,
    n1_bias: ParamId,
    attn: DeformIds,
    n2_gain: ParamId,
    n2_bias: ParamId,
    f1w: ParamId,
    f1b: ParamId,
    f2w: ParamId,
    f2b: ParamId,
    n3_gain: ParamId,
    n3_bias: ParamId,
    off_w1: ParamId,
    off_b1: ParamId,
    off_w2: ParamId,
    off_b2: ParamId,
}

pub struct Detector {
    pub cfg: DetectorConfig,
    dim: usize,
    score_w1: ParamId,
    score_b1: ParamId,
    score_w2: ParamId,
    score_b2: ParamId,
    enc: Vec<EncIds>,
    dec: Vec<DecIds>,
}

pub struct Selection {
    /// [Q x D] embeddings of the selected pixels.
    pub queries: Var,
    /// [Q x 2] normalized grid-center reference points.
    pub points: Var,
    /// [h*w x (C+1)] raw per-pixel scores.
    pub pixel_scores: Var,
    /// Selected pixel indices, ascending row-major.
    pub indices: Vec<usize>,
}

pub struct DecoderSideOutput {
    pub layer: usize,
    /// [Q x D] refined query embeddings.
    pub queries: Var,
    /// [Q x 2] refined points, clamped to the unit square.
    pub points: Var,
}

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Initial sampling pattern: K points on the unit circle (cell units), each
/// head's ring rotated so heads do not start on top of each other.
fn sampling_bias(heads: usize, k: usize) -> Vec<f64> {
    let mut b = Vec::with_capacity(heads * k * 2);
    for h in 0..heads {
        for i in 0..k {
            let angle = std::f64::consts::TAU * (i as f64 + h as f64 / heads as f64) / k as f64;
            b.push(angle.cos());
            b.push(angle.sin());
        }
    }
    b
}

impl Detector {
    pub fn init(
        store: &mut ParamStore,
        cfg: &DetectorConfig,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Detector> {
        cfg.validate(dim)?;
        let (h, k, c1) = (cfg.heads, cfg.sample_points, cfg.classes + 1);
        let deform = |store: &mut ParamStore, rng: &mut Rng, p: &str| DeformIds {
            // offsets start at the ring pattern, weights uniform
            w_off: store.add_fill(&format!("{p}.w_off"), &[dim, h * k * 2], 0.0),
            b_off: store.add(
                &format!("{p}.b_off"),
                DTensor::param(vec![h * k * 2], sampling_bias(h, k)).unwrap(),
            ),
            w_wt: store.add_fill(&format!("{p}.w_wt"), &[dim, h * k], 0.0),
            b_wt: store.add_fill(&format!("{p}.b_wt"), &[h * k], 0.0),
            wv: store.add_weight(&format!("{p}.wv"), &[dim, dim], fan_in_std(dim), rng),
            bv: store.add_fill(&format!("{p}.bv"), &[dim], 0.0),
            wo: store.add_weight(&format!("{p}.wo"), &[dim, dim], fan_in_std(dim), rng),
            bo: store.add_fill(&format!("{p}.bo"), &[dim], 0.0),
        };
        let mut enc = Vec::new();
        for l in 0..cfg.enc_layers {
            let p = format!("detector.enc{l}");
            enc.push(EncIds {
                n1_gain: store.add_fill(&format!("{p}.norm1.gain"), &[dim], 1.0),
                n1_bias: store.add_fill(&format!("{p}.norm1.bias"), &[dim], 0.0),
                attn: deform(store, rng, &format!("{p}.attn")),
                n2_gain: store.add_fill(&format!("{p}.norm2.gain"), &[dim], 1.0),
                n2_bias: store.add_fill(&format!("{p}.norm2.bias"), &[dim], 0.0),
                f1w: store.add_weight(&format!("{p}.ffn.w1"), &[dim, 2 * dim], fan_in_std(dim), rng),
                f1b: store.add_fill(&format!("{p}.ffn.b1"), &[2 * dim], 0.0),
                f2w: store.add_weight(&format!("{p}.ffn.w2"), &[2 * dim, dim], fan_in_std(2 * dim), rng),
                f2b: store.add_fill(&format!("{p}.ffn.b2"), &[dim], 0.0),
            });
        }
        let mut dec = Vec::new();
        for l in 0..cfg.dec_layers {
            let p = format!("detector.dec{l}");
            dec.push(DecIds {
                n1_gain: store.add_fill(&format!("{p}.norm1.gain"), &[dim], 1.0),
                n1_bias: store.add_fill(&format!("{p}.norm1.bias"), &[dim], 0.0),
                attn: deform(store, rng, &format!("{p}.attn")),
                n2_gain: store.add_fill(&format!("{p}.norm2.gain"), &[dim], 1.0),
                n2_bias: store.add_fill(&format!("{p}.norm2.bias"), &[dim], 0.0),
                f1w: store.add_weight(&format!("{p}.ffn.w1"), &[dim, 2 * dim], fan_in_std(dim), rng),
                f1b: store.add_fill(&format!("{p}.ffn.b1"), &[2 * dim], 0.0),
                f2w: store.add_weight(&format!("{p}.ffn.w2"), &[2 * dim, dim], fan_in_std(2 * dim), rng),
                f2b: store.add_fill(&format!("{p}.ffn.b2"), &[dim], 0.0),
                n3_gain: store.add_fill(&format!("{p}.norm3.gain"), &[dim], 1.0),
                n3_bias: store.add_fill(&format!("{p}.norm3.bias"), &[dim], 0.0),
                off_w1: store.add_weight(&format!("{p}.off.w1"), &[dim, dim], fan_in_std(dim), rng),
                off_b1: store.add_fill(&format!("{p}.off.b1"), &[dim], 0.0),
                // zero-init: refinement starts as the identity
                off_w2: store.add_fill(&format!("{p}.off.w2"), &[dim, 2], 0.0),
                off_b2: store.add_fill(&format!("{p}.off.b2"), &[2], 0.0),
            });
        }
        Ok(Detector {
            cfg: cfg.clone(),
            dim,
            score_w1: store.add_weight("detector.score.w1", &[dim, dim], fan_in_std(dim), rng),
            score_b1: store.add_fill("detector.score.b1", &[dim], 0.0),
            score_w2: store.add_weight("detector.score.w2", &[dim, c1], fan_in_std(dim), rng),
            score_b2: store.add_fill("detector.score.b2", &[c1], 0.0),
            enc,
            dec,
        })
    }

    pub fn bind(store: &ParamStore, cfg: &DetectorConfig, dim: usize) -> Result<Detector> {
        cfg.validate(dim)?;
        let find = |name: String| {
            store
                .id_by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing {name}")))
        };
        let deform = |p: &str| -> Result<DeformIds> {
            Ok(DeformIds {
                w_off: find(format!("{p}.w_off"))?,
                b_off: find(format!("{p}.b_off"))?,
                w_wt: find(format!("{p}.w_wt"))?,
                b_wt: find(format!("{p}.b_wt"))?,
                wv: find(format!("{p}.wv"))?,
                bv: find(format!("{p}.bv"))?,
                wo: find(format!("{p}.wo"))?,
                bo: find(format!("{p}.bo"))?,
            })
        };
        let mut enc = Vec::new();
        for l in 0..cfg.enc_layers {
            let p = format!("detector.enc{l}");
            enc.push(EncIds {
                n1_gain: find(format!("{p}.norm1.gain"))?,
                n1_bias: find(format!("{p}.norm1.bias"))?,
                attn: deform(&format!("{p}.attn"))?,
                n2_gain: find(format!("{p}.norm2.gain"))?,
                n2_bias: find(format!("{p}.norm2.bias"))?,
                f1w: find(format!("{p}.ffn.w1"))?,
                f1b: find(format!("{p}.ffn.b1"))?,
                f2w: find(format!("{p}.ffn.w2"))?,
                f2b: find(format!("{p}.ffn.b2"))?,
            });
        }
        let mut dec = Vec::new();
        for l in 0..cfg.dec_layers {
            let p = format!("detector.dec{l}");
            dec.push(DecIds {
                n1_gain: find(format!("{p}.norm1.gain"))?,
                n1_bias: find(format!("{p}.norm1.bias"))?,
                attn: deform(&format!("{p}.attn"))?,
                n2_gain: find(format!("{p}.norm2.gain"))?,
                n2_bias: find(format!("{p}.norm2.bias"))?,
                f1w: find(format!("{p}.ffn.w1"))?,
                f1b: find(format!("{p}.ffn.b1"))?,
                f2w: find(format!("{p}.ffn.w2"))?,
                f2b: find(format!("{p}.ffn.b2"))?,
                n3_gain: find(format!("{p}.norm3.gain"))?,
                n3_bias: find(format!("{p}.norm3.bias"))?,
                off_w1: find(format!("{p}.off.w1"))?,
                off_b1: find(format!("{p}.off.b1"))?,
                off_w2: find(format!("{p}.off.w2"))?,
                off_b2: find(format!("{p}.off.b2"))?,
            });
        }
        Ok(Detector {
            cfg: cfg.clone(),
            dim,
            score_w1: find("detector.score.w1".into())?,
            score_b1: find("detector.score.b1".into())?,
            score_w2: find("detector.score.w2".into())?,
            score_b2: find("detector.score.b2".into())?,
            enc,
            dec,
        })
    }

    /// Multi-head deformable attention: offsets and weights are regressed
    /// from `from`, values sampled bilinearly from `value_src` around
    /// `ref_points`. Offsets are regressed in cell units and scaled by the
    /// grid size so the pattern is resolution-independent.
    #[allow(clippy::too_many_arguments)]
    fn deform_attn(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &DeformIds,
        from: Var,
        ref_points: Var,
        value_src: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let (heads, k) = (self.cfg.heads, self.cfg.sample_points);
        let dh = self.dim / heads;
        let n = tape.shape(from)[0];

        let w_off = tape.param(store, ids.w_off);
        let b_off = tape.param(store, ids.b_off);
        let off_raw = tape.matmul(from, w_off)?;
        let off_raw = tape.add_bias(off_raw, b_off)?;
        // cell units -> normalized units
        let cell: Vec<f64> = (0..n * heads * k)
            .flat_map(|_| [1.0 / w as f64, 1.0 / h as f64])
            .collect();
        let cell = tape.leaf_owned(DTensor::new(vec![n, heads * k * 2], cell)?);
        let offsets = tape.mul(off_raw, cell)?;

        let w_wt = tape.param(store, ids.w_wt);
        let b_wt = tape.param(store, ids.b_wt);
        let wt_raw = tape.matmul(from, w_wt)?;
        let wt_raw = tape.add_bias(wt_raw, b_wt)?;

        let wv = tape.param(store, ids.wv);
        let bv = tape.param(store, ids.bv);
        let values = tape.matmul(value_src, wv)?;
        let values = tape.add_bias(values, bv)?;

        let ref_rep = tape.repeat_rows(ref_points, k)?;
        let mut head_outs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let vh = tape.col_slice(values, hi * dh, dh)?;
            let vmap = tape.reshape(vh, &[h, w, dh])?;
            let off_h = tape.col_slice(offsets, hi * k * 2, k * 2)?;
            let off_h = tape.reshape(off_h, &[n * k, 2])?;
            let pts = tape.add(ref_rep, off_h)?;
            let pts = tape.clamp01(pts);
            let sampled = tape.bilinear_sample(vmap, pts)?;
            let wt_h = tape.col_slice(wt_raw, hi * k, k)?;
            let wt_h = tape.softmax(wt_h, 1, 1.0)?;
            let wt_flat = tape.reshape(wt_h, &[n * k])?;
            let weighted = tape.scale_rows(sampled, wt_flat)?;
            head_outs.push(tape.sum_row_blocks(weighted, k)?);
        }
        let cat = tape.concat_cols(&head_outs)?;
        let wo = tape.param(store, ids.wo);
        let bo = tape.param(store, ids.bo);
        let out = tape.matmul(cat, wo)?;
        tape.add_bias(out, bo)
    }

    /// Encoder: each pixel token attends to K sampled points around its own
    /// grid center, then passes a feed-forward block. 3 layers by default.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, grid: &FeatureGrid) -> Result<Var> {
        let (h, w) = (grid.h, grid.w);
        let centers = grid_centers(h, w, &(0..h * w).collect::<Vec<_>>());
        let centers = tape.leaf_owned(DTensor::new(vec![h * w, 2], centers)?);
        let mut x = grid.tokens;
        for ids in &self.enc {
            let n1g = tape.param(store, ids.n1_gain);
            let n1b = tape.param(store, ids.n1_bias);
            let xn = tape.layer_norm(x, n1g, n1b)?;
            let attn = self.deform_attn(tape, store, &ids.attn, xn, centers, xn, h, w)?;
            x = tape.add(x, attn)?;
            x = self.ffn(tape, store, x, ids.n2_gain, ids.n2_bias, ids.f1w, ids.f1b, ids.f2w, ids.f2b)?;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn ffn(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ng: ParamId,
        nb: ParamId,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    ) -> Result<Var> {
        let g = tape.param(store, ng);
        let b = tape.param(store, nb);
        let xn = tape.layer_norm(x, g, b)?;
        let w1 = tape.param(store, w1);
        let b1 = tape.param(store, b1);
        let hmid = tape.matmul(xn, w1)?;
        let hmid = tape.add_bias(hmid, b1)?;
        let hmid = tape.gelu(hmid);
        let w2 = tape.param(store, w2);
        let b2 = tape.param(store, b2);
        let out = tape.matmul(hmid, w2)?;
        let out = tape.add_bias(out, b2)?;
        tape.add(x, out)
    }

    /// Scores every pixel with two FC layers, keeps the Q most confident
    /// (max non-empty class probability; ties favor the lower row-major
    /// index) and returns their embeddings plus grid-center reference points.
    pub fn score_and_select(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        h: usize,
        w: usize,
    ) -> Result<Selection> {
        let n = h * w;
        let q_count = self.cfg.queries;
        if q_count > n {
            return Err(Error::Param(format!(
                "{q_count} queries exceed the {h}x{w} feature grid"
            )));
        }
        let w1 = tape.param(store, self.score_w1);
        let b1 = tape.param(store, self.score_b1);
        let mid = tape.matmul(features, w1)?;
        let mid = tape.add_bias(mid, b1)?;
        let mid = tape.gelu(mid);
        let w2 = tape.param(store, self.score_w2);
        let b2 = tape.param(store, self.score_b2);
        let scores = tape.matmul(mid, w2)?;
        let scores = tape.add_bias(scores, b2)?;

        let c1 = self.cfg.classes + 1;
        let probs = softmax_rows(tape.value(scores).values(), n, c1);
        let conf: Vec<f64> = (0..n)
            .map(|i| {
                probs[i * c1..i * c1 + self.cfg.classes]
                    .iter()
                    .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap());
        let mut indices: Vec<usize> = order[..q_count].to_vec();
        indices.sort_unstable();

        let queries = tape.gather_rows(features, &indices)?;
        let points = tape.leaf_owned(DTensor::new(vec![q_count, 2], grid_centers(h, w, &indices))?);
        Ok(Selection {
            queries,
            points,
            pixel_scores: scores,
            indices,
        })
    }

    /// One decoder layer: deformable cross-attention around the current
    /// points, a feed-forward block, and an additive point refinement.
    #[allow(clippy::too_many_arguments)]
    fn decode_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &DecIds,
        q: Var,
        points: Var,
        memory: Var,
        h: usize,
        w: usize,
    ) -> Result<(Var, Var)> {
        let n1g = tape.param(store, ids.n1_gain);
        let n1b = tape.param(store, ids.n1_bias);
        let qn = tape.layer_norm(q, n1g, n1b)?;
        let attn = self.deform_attn(tape, store, &ids.attn, qn, points, memory, h, w)?;
        let q = tape.add(q, attn)?;
        let q = self.ffn(tape, store, q, ids.n2_gain, ids.n2_bias, ids.f1w, ids.f1b, ids.f2w, ids.f2b)?;

        let n3g = tape.param(store, ids.n3_gain);
        let n3b = tape.param(store, ids.n3_bias);
        let qn3 = tape.layer_norm(q, n3g, n3b)?;
        let ow1 = tape.param(store, ids.off_w1);
        let ob1 = tape.param(store, ids.off_b1);
        let mid = tape.matmul(qn3, ow1)?;
        let mid = tape.add_bias(mid, ob1)?;
        let mid = tape.gelu(mid);
        let ow2 = tape.param(store, ids.off_w2);
        let ob2 = tape.param(store, ids.off_b2);
        let off = tape.matmul(mid, ow2)?;
        let off = tape.add_bias(off, ob2)?;
        let moved = tape.add(points, off)?;
        let new_points = tape.clamp01(moved);
        Ok((q, new_points))
    }

    /// Runs the full decoder stack, emitting one side output per layer.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sel: &Selection,
        memory: Var,
        h: usize,
        w: usize,
    ) -> Result<Vec<DecoderSideOutput>> {
        let mut q = sel.queries;
        let mut points = sel.points;
        let mut sides = Vec::with_capacity(self.dec.len());
        for (l, ids) in self.dec.iter().enumerate() {
            let (nq, np) = self.decode_layer(tape, store, ids, q, points, memory, h, w)?;
            q = nq;
            points = np;
            sides.push(DecoderSideOutput {
                layer: l,
                queries: q,
                points,
            });
        }
        Ok(sides)
    }
}

/// Normalized centers of the given row-major pixel indices.
fn grid_centers(h: usize, w: usize, indices: &[usize]) -> Vec<f64> {
    indices
        .iter()
        .flat_map(|&i| {
            let (r, c) = (i / w, i % w);
            [(c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64]
        })
        .collect()
}
