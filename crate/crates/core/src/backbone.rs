//! Patch embedding and windowed-attention stages with prompt tokens injected
//! into every local window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::DTensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub window_size: usize,
    pub heads: usize,
    pub shift_windows: bool,
    /// When set, prompts join only the first block of each stage instead of
    /// every block.
    pub prompt_first_block_only: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 4,
            embed_dim: 32,
            stages: 2,
            blocks_per_stage: 2,
            window_size: 8,
            heads: 4,
            shift_windows: false,
            prompt_first_block_only: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.patch_size == 0
            || self.embed_dim == 0
            || self.stages == 0
            || self.blocks_per_stage == 0
            || self.window_size == 0
            || self.heads == 0
        {
            return Err(Error::Param("backbone dimensions must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Param(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        let granule = self.patch_size * (1 << (self.stages - 1)) * self.window_size;
        if height % granule != 0 || width % granule != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} image not divisible by patch {} * 2^{} * window {} = {granule}",
                self.patch_size,
                self.stages - 1,
                self.window_size
            )));
        }
        Ok(())
    }

    /// Feature grid size after all stages.
    pub fn final_grid(&self, height: usize, width: usize) -> (usize, usize) {
        let shrink = self.patch_size * (1 << (self.stages - 1));
        (height / shrink, width / shrink)
    }
}

/// The trainable prompt tokens. The same store entry doubles as the group
/// embeddings of the classifier, so tuning one tunes the other.
pub struct PromptBank {
    pub id: ParamId,
    pub count: usize,
}

impl PromptBank {
    pub fn init(store: &mut ParamStore, count: usize, dim: usize, rng: &mut Rng) -> PromptBank {
        let id = store.add_weight("prompts.g", &[count, dim], 0.02, rng);
        PromptBank { id, count }
    }

    pub fn bind(store: &ParamStore) -> Result<PromptBank> {
        let id = store
            .id_by_name("prompts.g")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no prompts.g".into()))?;
        Ok(PromptBank {
            id,
            count: store.get(id).shape()[0],
        })
    }
}

struct BlockIds {
    n1_gain: ParamId,
    n1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    n2_gain: ParamId,
    n2_bias: ParamId,
    f1w: ParamId,
    f1b: ParamId,
    f2w: ParamId,
    f2b: ParamId,
}

struct MergeIds {
    norm_gain: ParamId,
    norm_bias: ParamId,
    w: ParamId,
    b: ParamId,
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    blocks: Vec<Vec<BlockIds>>,
    merges: Vec<MergeIds>,
}

pub struct FeatureGrid {
    /// [h*w x D], row-major over the grid.
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl Backbone {
    pub fn init(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut Rng) -> Result<Backbone> {
        cfg.validate(
            cfg.patch_size * (1 << (cfg.stages - 1)) * cfg.window_size,
            cfg.patch_size * (1 << (cfg.stages - 1)) * cfg.window_size,
        )?;
        let d = cfg.embed_dim;
        let in_dim = cfg.patch_size * cfg.patch_size * 3;
        let embed_w = store.add_weight("backbone.embed.w", &[in_dim, d], fan_in_std(in_dim), rng);
        let embed_b = store.add_fill("backbone.embed.b", &[d], 0.0);
        let mut blocks = Vec::new();
        let mut merges = Vec::new();
        for s in 0..cfg.stages {
            let mut stage = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let p = format!("backbone.s{s}.b{b}");
                let wstd = fan_in_std(d);
                stage.push(BlockIds {
                    n1_gain: store.add_fill(&format!("{p}.norm1.gain"), &[d], 1.0),
                    n1_bias: store.add_fill(&format!("{p}.norm1.bias"), &[d], 0.0),
                    wq: store.add_weight(&format!("{p}.attn.wq"), &[d, d], wstd, rng),
                    bq: store.add_fill(&format!("{p}.attn.bq"), &[d], 0.0),
                    wk: store.add_weight(&format!("{p}.attn.wk"), &[d, d], wstd, rng),
                    bk: store.add_fill(&format!("{p}.attn.bk"), &[d], 0.0),
                    wv: store.add_weight(&format!("{p}.attn.wv"), &[d, d], wstd, rng),
                    bv: store.add_fill(&format!("{p}.attn.bv"), &[d], 0.0),
                    wo: store.add_weight(&format!("{p}.attn.wo"), &[d, d], wstd, rng),
                    bo: store.add_fill(&format!("{p}.attn.bo"), &[d], 0.0),
                    n2_gain: store.add_fill(&format!("{p}.norm2.gain"), &[d], 1.0),
                    n2_bias: store.add_fill(&format!("{p}.norm2.bias"), &[d], 0.0),
                    f1w: store.add_weight(&format!("{p}.ffn.w1"), &[d, 4 * d], wstd, rng),
                    f1b: store.add_fill(&format!("{p}.ffn.b1"), &[4 * d], 0.0),
                    f2w: store.add_weight(&format!("{p}.ffn.w2"), &[4 * d, d], fan_in_std(4 * d), rng),
                    f2b: store.add_fill(&format!("{p}.ffn.b2"), &[d], 0.0),
                });
            }
            blocks.push(stage);
            if s + 1 < cfg.stages {
                let p = format!("backbone.merge{s}");
                merges.push(MergeIds {
                    norm_gain: store.add_fill(&format!("{p}.norm.gain"), &[4 * d], 1.0),
                    norm_bias: store.add_fill(&format!("{p}.norm.bias"), &[4 * d], 0.0),
                    w: store.add_weight(&format!("{p}.w"), &[4 * d, d], fan_in_std(4 * d), rng),
                    b: store.add_fill(&format!("{p}.b"), &[d], 0.0),
                });
            }
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            embed_w,
            embed_b,
            blocks,
            merges,
        })
    }

    /// Rebind against a store that already holds the parameters (after a
    /// checkpoint load).
    pub fn bind(store: &ParamStore, cfg: &BackboneConfig) -> Result<Backbone> {
        let find = |name: String| {
            store
                .id_by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing {name}")))
        };
        let mut blocks = Vec::new();
        let mut merges = Vec::new();
        for s in 0..cfg.stages {
            let mut stage = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let p = format!("backbone.s{s}.b{b}");
                stage.push(BlockIds {
                    n1_gain: find(format!("{p}.norm1.gain"))?,
                    n1_bias: find(format!("{p}.norm1.bias"))?,
                    wq: find(format!("{p}.attn.wq"))?,
                    bq: find(format!("{p}.attn.bq"))?,
                    wk: find(format!("{p}.attn.wk"))?,
                    bk: find(format!("{p}.attn.bk"))?,
                    wv: find(format!("{p}.attn.wv"))?,
                    bv: find(format!("{p}.attn.bv"))?,
                    wo: find(format!("{p}.attn.wo"))?,
                    bo: find(format!("{p}.attn.bo"))?,
                    n2_gain: find(format!("{p}.norm2.gain"))?,
                    n2_bias: find(format!("{p}.norm2.bias"))?,
                    f1w: find(format!("{p}.ffn.w1"))?,
                    f1b: find(format!("{p}.ffn.b1"))?,
                    f2w: find(format!("{p}.ffn.w2"))?,
                    f2b: find(format!("{p}.ffn.b2"))?,
                });
            }
            blocks.push(stage);
            if s + 1 < cfg.stages {
                let p = format!("backbone.merge{s}");
                merges.push(MergeIds {
                    norm_gain: find(format!("{p}.norm.gain"))?,
                    norm_bias: find(format!("{p}.norm.bias"))?,
                    w: find(format!("{p}.w"))?,
                    b: find(format!("{p}.b"))?,
                });
            }
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            embed_w: find("backbone.embed.w".into())?,
            embed_b: find("backbone.embed.b".into())?,
            blocks,
            merges,
        })
    }

    /// Linear projection of each ExEx3 patch; token order is row-major over
    /// the patch grid. The image itself is constant input, so the patch
    /// matrix enters the tape as a leaf.
    pub fn patch_embed(&self, tape: &mut Tape, store: &ParamStore, image: &DTensor) -> Result<Var> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!(
                "patch_embed wants [h,w,3] image, got {s:?}"
            )));
        }
        let (h, w, e) = (s[0], s[1], self.cfg.patch_size);
        if h % e != 0 || w % e != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} image not divisible into {e}x{e} patches"
            )));
        }
        let (gh, gw) = (h / e, w / e);
        let px = image.values();
        let mut patches = Vec::with_capacity(gh * gw * e * e * 3);
        for pr in 0..gh {
            for pc in 0..gw {
                for iy in 0..e {
                    let row = pr * e + iy;
                    let col0 = pc * e;
                    patches.extend_from_slice(&px[(row * w + col0) * 3..(row * w + col0 + e) * 3]);
                }
            }
        }
        let patches = tape.leaf_owned(DTensor::new(vec![gh * gw, e * e * 3], patches)?);
        let ew = tape.param(store, self.embed_w);
        let eb = tape.param(store, self.embed_b);
        let proj = tape.matmul(patches, ew)?;
        tape.add_bias(proj, eb)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &DTensor,
        prompts: Option<Var>,
    ) -> Result<FeatureGrid> {
        self.cfg.validate(image.shape()[0], image.shape()[1])?;
        let mut x = self.patch_embed(tape, store, image)?;
        let mut gh = image.shape()[0] / self.cfg.patch_size;
        let mut gw = image.shape()[1] / self.cfg.patch_size;
        let mut p = prompts;
        for (s, stage) in self.blocks.iter().enumerate() {
            for (b, ids) in stage.iter().enumerate() {
                let inject = if self.cfg.prompt_first_block_only {
                    b == 0
                } else {
                    true
                };
                let shift = self.cfg.shift_windows && b % 2 == 1;
                let (nx, np) = self.block(
                    tape,
                    store,
                    ids,
                    x,
                    if inject { p } else { None },
                    gh,
                    gw,
                    shift,
                )?;
                x = nx;
                if inject {
                    p = np;
                }
            }
            if s < self.merges.len() {
                x = self.merge(tape, store, &self.merges[s], x, gh, gw)?;
                gh /= 2;
                gw /= 2;
            }
        }
        Ok(FeatureGrid {
            tokens: x,
            h: gh,
            w: gw,
        })
    }

    /// One pre-norm block: windowed multi-head attention with the prompt set
    /// appended to every window, then a feed-forward layer. Prompt outputs
    /// are averaged across windows; patch tokens return to grid order.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &BlockIds,
        x: Var,
        prompts: Option<Var>,
        gh: usize,
        gw: usize,
        shift: bool,
    ) -> Result<(Var, Option<Var>)> {
        let m = self.cfg.window_size;
        if gh % m != 0 || gw % m != 0 {
            return Err(Error::Shape(format!(
                "{gh}x{gw} token grid not divisible into {m}x{m} windows"
            )));
        }
        let heads = self.cfg.heads;
        let d = self.cfg.embed_dim;
        let dh = d / heads;
        let (perm, inv) = window_permutation(gh, gw, m, if shift { m / 2 } else { 0 });
        let windows = (gh / m) * (gw / m);
        let wsz = m * m;

        let n1g = tape.param(store, ids.n1_gain);
        let n1b = tape.param(store, ids.n1_bias);
        let xn = tape.layer_norm(x, n1g, n1b)?;
        let pn = match prompts {
            Some(p) => Some(tape.layer_norm(p, n1g, n1b)?),
            None => None,
        };

        let project = |tape: &mut Tape, v: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let o = tape.matmul(v, wv)?;
            tape.add_bias(o, bv)
        };
        let qx = project(tape, xn, ids.wq, ids.bq)?;
        let kx = project(tape, xn, ids.wk, ids.bk)?;
        let vx = project(tape, xn, ids.wv, ids.bv)?;
        let (qp, kp, vp) = match pn {
            Some(pn) => (
                Some(project(tape, pn, ids.wq, ids.bq)?),
                Some(project(tape, pn, ids.wk, ids.bk)?),
                Some(project(tape, pn, ids.wv, ids.bv)?),
            ),
            None => (None, None, None),
        };

        let qw = tape.gather_rows(qx, &perm)?;
        let kw = tape.gather_rows(kx, &perm)?;
        let vw = tape.gather_rows(vx, &perm)?;

        let mut token_outs = Vec::with_capacity(windows);
        let mut prompt_acc: Option<Var> = None;
        for wi in 0..windows {
            let rows: Vec<usize> = (wi * wsz..(wi + 1) * wsz).collect();
            let mut q = tape.gather_rows(qw, &rows)?;
            let mut k = tape.gather_rows(kw, &rows)?;
            let mut v = tape.gather_rows(vw, &rows)?;
            if let (Some(qp), Some(kp), Some(vp)) = (qp, kp, vp) {
                q = tape.concat_rows(&[q, qp])?;
                k = tape.concat_rows(&[k, kp])?;
                v = tape.concat_rows(&[v, vp])?;
            }
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.col_slice(q, h * dh, dh)?;
                let kh = tape.col_slice(k, h * dh, dh)?;
                let vh = tape.col_slice(v, h * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let logits = tape.matmul(qh, kt)?;
                let attn = tape.softmax(logits, 1, (dh as f64).sqrt())?;
                head_outs.push(tape.matmul(attn, vh)?);
            }
            let cat = tape.concat_cols(&head_outs)?;
            let out = project(tape, cat, ids.wo, ids.bo)?;
            let tok_rows: Vec<usize> = (0..wsz).collect();
            token_outs.push(tape.gather_rows(out, &tok_rows)?);
            if qp.is_some() {
                let g = tape.shape(out)[0] - wsz;
                let p_rows: Vec<usize> = (wsz..wsz + g).collect();
                let p_out = tape.gather_rows(out, &p_rows)?;
                prompt_acc = Some(match prompt_acc {
                    None => p_out,
                    Some(a) => tape.add(a, p_out)?,
                });
            }
        }
        let in_window_order = tape.concat_rows(&token_outs)?;
        let attn_grid = tape.gather_rows(in_window_order, &inv)?;
        let mut x = tape.add(x, attn_grid)?;

        let mut p = prompts;
        if let (Some(p_in), Some(acc)) = (p, prompt_acc) {
            let avg = tape.scale(acc, 1.0 / windows as f64);
            p = Some(tape.add(p_in, avg)?);
        }

        let ffn = |tape: &mut Tape, v: Var| -> Result<Var> {
            let n2g = tape.param(store, ids.n2_gain);
            let n2b = tape.param(store, ids.n2_bias);
            let vn = tape.layer_norm(v, n2g, n2b)?;
            let h = project(tape, vn, ids.f1w, ids.f1b)?;
            let h = tape.gelu(h);
            let o = project(tape, h, ids.f2w, ids.f2b)?;
            tape.add(v, o)
        };
        x = ffn(tape, x)?;
        if let Some(p_in) = p {
            p = Some(ffn(tape, p_in)?);
        }
        Ok((x, p))
    }

    /// 2x2 patch merge at constant width: neighbors concatenated to 4D,
    /// normalized, and projected back to D so prompts keep their dimension
    /// across stages.
    fn merge(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &MergeIds,
        x: Var,
        gh: usize,
        gw: usize,
    ) -> Result<Var> {
        if gh % 2 != 0 || gw % 2 != 0 {
            return Err(Error::Shape(format!("cannot 2x2-merge a {gh}x{gw} grid")));
        }
        let (oh, ow) = (gh / 2, gw / 2);
        let mut corners = Vec::with_capacity(4);
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let idx: Vec<usize> = (0..oh)
                .flat_map(|r| (0..ow).map(move |c| (2 * r + dy) * gw + 2 * c + dx))
                .collect();
            corners.push(tape.gather_rows(x, &idx)?);
        }
        let cat = tape.concat_cols(&corners)?;
        let ng = tape.param(store, ids.norm_gain);
        let nb = tape.param(store, ids.norm_bias);
        let normed = tape.layer_norm(cat, ng, nb)?;
        let w = tape.param(store, ids.w);
        let b = tape.param(store, ids.b);
        let proj = tape.matmul(normed, w)?;
        tape.add_bias(proj, b)
    }
}

/// Row permutation taking grid order to window order (and its inverse).
/// `shift` rolls the grid cyclically before partitioning.
fn window_permutation(gh: usize, gw: usize, m: usize, shift: usize) -> (Vec<usize>, Vec<usize>) {
    let mut perm = Vec::with_capacity(gh * gw);
    for wy in 0..gh / m {
        for wx in 0..gw / m {
            for iy in 0..m {
                for ix in 0..m {
                    let y = (wy * m + iy + shift) % gh;
                    let x = (wx * m + ix + shift) % gw;
                    perm.push(y * gw + x);
                }
            }
        }
    }
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    (perm, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Sgd;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            patch_size: 4,
            embed_dim: 8,
            stages: 2,
            blocks_per_stage: 2,
            window_size: 4,
            heads: 2,
            ..BackboneConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> DTensor {
        let mut rng = Rng::new(seed);
        let v: Vec<f64> = (0..h * w * 3).map(|_| rng.uniform()).collect();
        DTensor::new(vec![h, w, 3], v).unwrap()
    }

    #[test]
    fn patch_count_is_grid_area() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let cfg = BackboneConfig {
            patch_size: 4,
            embed_dim: 8,
            stages: 1,
            blocks_per_stage: 1,
            window_size: 2,
            heads: 2,
            ..BackboneConfig::default()
        };
        let bb = Backbone::init(&mut store, &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let t = bb.patch_embed(&mut tape, &store, &image(8, 8, 2)).unwrap();
        assert_eq!(tape.shape(t), &[4, 8]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let bb = Backbone::init(&mut store, &tiny_cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let img = DTensor::zeros(&[32, 32, 3]);
        let t = bb.patch_embed(&mut tape, &store, &img).unwrap();
        assert!(tape.value(t).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_recovers_patch_pixels() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let cfg = BackboneConfig {
            patch_size: 2,
            embed_dim: 12, // = 2*2*3, lets the projection be the identity
            stages: 1,
            blocks_per_stage: 1,
            window_size: 1,
            heads: 2,
            ..BackboneConfig::default()
        };
        let bb = Backbone::init(&mut store, &cfg, &mut rng).unwrap();
        let w = store.get_mut(bb.embed_w);
        let mut ident = vec![0.0; 12 * 12];
        for i in 0..12 {
            ident[i * 12 + i] = 1.0;
        }
        w.values_mut().copy_from_slice(&ident);

        let img = image(2, 2, 7); // one patch
        let mut tape = Tape::new();
        let t = bb.patch_embed(&mut tape, &store, &img).unwrap();
        assert_eq!(tape.value(t).values(), img.values());
    }

    #[test]
    fn prompt_injection_preserves_token_grid() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let bb = Backbone::init(&mut store, &tiny_cfg(), &mut rng).unwrap();
        let bank = PromptBank::init(&mut store, 3, 8, &mut rng);
        let img = image(32, 32, 4);

        let mut tape = Tape::new();
        let bare = bb.forward(&mut tape, &store, &img, None).unwrap();
        let mut tape2 = Tape::new();
        let p = tape2.param(&store, bank.id);
        let with = bb.forward(&mut tape2, &store, &img, Some(p)).unwrap();

        assert_eq!((bare.h, bare.w), (with.h, with.w));
        assert_eq!(tape.shape(bare.tokens), tape2.shape(with.tokens));
        assert_eq!(bare.h, 4);
        assert_eq!(bare.w, 4);
        assert_ne!(
            tape.value(bare.tokens).values(),
            tape2.value(with.tokens).values(),
            "prompts should influence the features"
        );
    }

    #[test]
    fn output_depends_on_prompts() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let bb = Backbone::init(&mut store, &tiny_cfg(), &mut rng).unwrap();
        let bank = PromptBank::init(&mut store, 3, 8, &mut rng);
        let img = image(32, 32, 6);

        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let p = tape.param(store, bank.id);
            let out = bb.forward(&mut tape, store, &img, Some(p)).unwrap();
            let s = tape.sum_all(out.tokens);
            tape.value(s).values()[0]
        };
        let base = run(&store);
        let eps = 1e-4;
        store.get_mut(bank.id).values_mut()[0] += eps;
        let bumped = run(&store);
        assert!(
            (bumped - base).abs() > 1e-10,
            "prompt perturbation must reach the feature map"
        );
    }

    #[test]
    fn frozen_backbone_step_changes_only_prompts() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let bb = Backbone::init(&mut store, &tiny_cfg(), &mut rng).unwrap();
        let bank = PromptBank::init(&mut store, 2, 8, &mut rng);
        store.freeze_prefix("backbone.");
        let snapshot: Vec<Vec<u64>> = store
            .iter()
            .map(|(_, t)| t.values().iter().map(|v| v.to_bits()).collect())
            .collect();

        let img = image(32, 32, 9);
        let mut tape = Tape::new();
        let p = tape.param(&store, bank.id);
        let out = bb.forward(&mut tape, &store, &img, Some(p)).unwrap();
        let loss = tape.sum_all(out.tokens);
        tape.backward(loss).unwrap();
        store.zero_grads();
        tape.write_param_grads(&mut store);
        let mut opt = Sgd::new(&store, 1e-2, 0.0);
        opt.step(&mut store);

        for (i, (name, t)) in store.iter().enumerate() {
            let now: Vec<u64> = t.values().iter().map(|v| v.to_bits()).collect();
            if name.starts_with("backbone.") {
                assert_eq!(now, snapshot[i], "{name} moved despite freeze");
            } else {
                assert_ne!(now, snapshot[i], "{name} should have moved");
            }
        }
    }

    #[test]
    fn same_seed_same_map() {
        let img = image(32, 32, 11);
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = Rng::new(42);
            let bb = Backbone::init(&mut store, &tiny_cfg(), &mut rng).unwrap();
            let mut tape = Tape::new();
            let out = bb.forward(&mut tape, &store, &img, None).unwrap();
            tape.value(out.tokens)
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shifted_windows_change_values_not_shape() {
        let img = image(32, 32, 13);
        let run = |shift: bool| {
            let mut store = ParamStore::new();
            let mut rng = Rng::new(21);
            let cfg = BackboneConfig {
                shift_windows: shift,
                ..tiny_cfg()
            };
            let bb = Backbone::init(&mut store, &cfg, &mut rng).unwrap();
            let mut tape = Tape::new();
            let out = bb.forward(&mut tape, &store, &img, None).unwrap();
            (tape.value(out.tokens).values().to_vec(), out.h, out.w)
        };
        let (plain, h0, w0) = run(false);
        let (shifted, h1, w1) = run(true);
        assert_eq!((h0, w0), (h1, w1));
        assert_ne!(plain, shifted);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let bb = Backbone::init(&mut store, &tiny_cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let img = image(24, 24, 1);
        assert!(matches!(
            bb.forward(&mut tape, &store, &img, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn window_permutation_roundtrips() {
        for shift in [0, 2] {
            let (perm, inv) = window_permutation(8, 8, 4, shift);
            for i in 0..64 {
                assert_eq!(inv[perm[i]], i);
            }
            let mut seen = vec![false; 64];
            for &p in &perm {
                assert!(!seen[p]);
                seen[p] = true;
            }
        }
    }
}
