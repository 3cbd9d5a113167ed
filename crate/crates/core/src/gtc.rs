//! Grouping-transformer classifier: queries are hard-assigned to groups,
//! groups to categories, and class scores come from query-category
//! similarity. Hard assignments ride the straight-through estimator so the
//! soft distribution carries the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::DTensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GtcConfig {
    pub groups: usize,
    pub classes: usize,
    pub temp: f64,
}

impl Default for GtcConfig {
    fn default() -> Self {
        GtcConfig {
            groups: 64,
            classes: 3,
            temp: 1.0,
        }
    }
}

impl GtcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.classes == 0 {
            return Err(Error::Param("GTC needs at least one group and class".into()));
        }
        if !(self.temp > 0.0) {
            return Err(Error::Param(format!(
                "softmax temperature must be positive, got {}",
                self.temp
            )));
        }
        Ok(())
    }
}

/// Hard assignments use the one-hot forward value; Soft keeps the
/// distribution itself (smooth everywhere, used by gradient checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignMode {
    Hard,
    Soft,
}

/// Discrete assignments captured during the last forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtcTrace {
    /// Stage-1 group index per query.
    pub query_group: Vec<usize>,
    /// Stage-2 category row per group (0-based; row = classes means empty).
    pub group_class: Vec<usize>,
}

pub struct Gtc {
    pub cfg: GtcConfig,
    pub c_e: ParamId,
    wq1: ParamId,
    wk1: ParamId,
    wv1: ParamId,
    wo1: ParamId,
    wq2: ParamId,
    wk2: ParamId,
    wv2: ParamId,
    wo2: ParamId,
}

impl Gtc {
    pub fn init(store: &mut ParamStore, cfg: &GtcConfig, dim: usize, rng: &mut Rng) -> Result<Gtc> {
        cfg.validate()?;
        let std = 1.0 / (dim as f64).sqrt();
        // The merge output projections start at zero so each stage opens as
        // the identity on its group rows. The final scores are a raw bilinear
        // form c_a·qᵀ against unnormalized query embeddings; letting the
        // residual branches contribute O(1) rows from step 0 puts the class
        // logits deep into softmax saturation before anything is learned.
        Ok(Gtc {
            cfg: cfg.clone(),
            c_e: store.add_weight("gtc.c_e", &[cfg.classes + 1, dim], 0.02, rng),
            wq1: store.add_weight("gtc.s1.wq", &[dim, dim], std, rng),
            wk1: store.add_weight("gtc.s1.wk", &[dim, dim], std, rng),
            wv1: store.add_weight("gtc.s1.wv", &[dim, dim], std, rng),
            wo1: store.add_fill("gtc.s1.wo", &[dim, dim], 0.0),
            wq2: store.add_weight("gtc.s2.wq", &[dim, dim], std, rng),
            wk2: store.add_weight("gtc.s2.wk", &[dim, dim], std, rng),
            wv2: store.add_weight("gtc.s2.wv", &[dim, dim], std, rng),
            wo2: store.add_fill("gtc.s2.wo", &[dim, dim], 0.0),
        })
    }

    pub fn bind(store: &ParamStore, cfg: &GtcConfig) -> Result<Gtc> {
        cfg.validate()?;
        let find = |name: &str| {
            store
                .id_by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing {name}")))
        };
        Ok(Gtc {
            cfg: cfg.clone(),
            c_e: find("gtc.c_e")?,
            wq1: find("gtc.s1.wq")?,
            wk1: find("gtc.s1.wk")?,
            wv1: find("gtc.s1.wv")?,
            wo1: find("gtc.s1.wo")?,
            wq2: find("gtc.s2.wq")?,
            wk2: find("gtc.s2.wk")?,
            wv2: find("gtc.s2.wv")?,
            wo2: find("gtc.s2.wo")?,
        })
    }

    /// Stage-1 similarity alone: column-stochastic soft assignment of
    /// queries to the bank's groups.
    pub fn stage1_similarity(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bank: Var,
        queries: Var,
        noise: Option<&mut Rng>,
    ) -> Result<Var> {
        similarity(
            tape, store, bank, queries, self.wq1, self.wk1, self.cfg.temp, noise,
        )
    }

    /// Stage-1 merge alone: pools queries into their assigned groups and
    /// applies the residual update. `winners` must be the per-query group
    /// indices the assignment matrix encodes.
    pub fn stage1_merge(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bank: Var,
        queries: Var,
        assignment: Var,
        winners: &[usize],
    ) -> Result<Var> {
        merge(
            tape, store, bank, queries, assignment, winners, self.wv1, self.wo1,
        )
    }

    /// Full two-stage classification. `bank` is the prompt bank tensor on the
    /// tape (the group embeddings). Returns per-query scores [Q x (C+1)].
    pub fn classify(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        bank: Var,
        mode: AssignMode,
        mut noise: Option<&mut Rng>,
    ) -> Result<(Var, GtcTrace)> {
        let s1 = similarity(
            tape,
            store,
            bank,
            queries,
            self.wq1,
            self.wk1,
            self.cfg.temp,
            noise.as_deref_mut(),
        )?;
        let (a1, query_group) = assign(tape, s1, mode)?;
        let g_p = merge(tape, store, bank, queries, a1, &query_group, self.wv1, self.wo1)?;

        let c_e = tape.param(store, self.c_e);
        let s2 = similarity(
            tape,
            store,
            c_e,
            g_p,
            self.wq2,
            self.wk2,
            self.cfg.temp,
            noise.as_deref_mut(),
        )?;
        let (a2, group_class) = assign(tape, s2, mode)?;
        let c_a = merge(tape, store, c_e, g_p, a2, &group_class, self.wv2, self.wo2)?;

        let qt = tape.transpose(queries)?;
        let c = tape.matmul(c_a, qt)?; // [(C+1) x Q]
        let scores = tape.transpose(c)?;
        Ok((
            scores,
            GtcTrace {
                query_group,
                group_class,
            },
        ))
    }
}

/// Eq.-(1) style column-stochastic similarity: softmax over the group axis
/// of the projected inner products plus optional Gumbel noise, tempered.
#[allow(clippy::too_many_arguments)]
fn similarity(
    tape: &mut Tape,
    store: &ParamStore,
    groups: Var,
    queries: Var,
    wq: ParamId,
    wk: ParamId,
    temp: f64,
    noise: Option<&mut Rng>,
) -> Result<Var> {
    let wq = tape.param(store, wq);
    let wk = tape.param(store, wk);
    let gq = tape.matmul(groups, wq)?;
    let qk = tape.matmul(queries, wk)?;
    let qkt = tape.transpose(qk)?;
    let mut logits = tape.matmul(gq, qkt)?; // [G x Q]
    if let Some(rng) = noise {
        let s = tape.shape(logits).to_vec();
        let g: Vec<f64> = (0..s[0] * s[1]).map(|_| rng.gumbel()).collect();
        let g = tape.leaf_owned(DTensor::new(s, g)?);
        logits = tape.add(logits, g)?;
    }
    tape.softmax(logits, 0, temp)
}

/// Per-column argmax over a column-stochastic matrix with straight-through
/// backward. Forward values are exactly one-hot; the gradient is the soft
/// distribution's.
pub fn hard_assign(tape: &mut Tape, s: Var) -> Result<(Var, Vec<usize>)> {
    assign(tape, s, AssignMode::Hard)
}

/// Per-column argmax with straight-through backward; ties go to the lowest
/// group index. Soft mode skips discretization entirely.
fn assign(tape: &mut Tape, s: Var, mode: AssignMode) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(s).to_vec();
    let (g, q) = (shape[0], shape[1]);
    let vals = tape.value(s).values();
    let mut winners = Vec::with_capacity(q);
    for col in 0..q {
        let mut best = 0;
        for row in 1..g {
            if vals[row * q + col] > vals[best * q + col] {
                best = row;
            }
        }
        winners.push(best);
    }
    if mode == AssignMode::Soft {
        return Ok((s, winners));
    }
    let mut one_hot = vec![0.0; g * q];
    for (col, &row) in winners.iter().enumerate() {
        one_hot[row * q + col] = 1.0;
    }
    let one_hot = tape.leaf_owned(DTensor::new(vec![g, q], one_hot)?);
    let sg = tape.stop_grad(s);
    let drift = tape.sub(s, sg)?; // exactly zero forward
    let hat = tape.add(one_hot, drift)?;
    Ok((hat, winners))
}

/// Eq.-(3) style pooling: mean of the assigned queries' value projections,
/// residually added through the output projection. Empty groups keep their
/// input row.
#[allow(clippy::too_many_arguments)]
fn merge(
    tape: &mut Tape,
    store: &ParamStore,
    groups: Var,
    queries: Var,
    assignment: Var,
    winners: &[usize],
    wv: ParamId,
    wo: ParamId,
) -> Result<Var> {
    let g_count = tape.shape(groups)[0];
    let wv = tape.param(store, wv);
    let v = tape.matmul(queries, wv)?;
    let pooled = tape.matmul(assignment, v)?; // [G x D]
    let mut counts = vec![0usize; g_count];
    for &w in winners {
        counts[w] += 1;
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let inv = tape.leaf_owned(DTensor::new(vec![g_count], inv)?);
    let normalized = tape.scale_rows(pooled, inv)?;
    let wo = tape.param(store, wo);
    let proj = tape.matmul(normalized, wo)?;
    tape.add(groups, proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, r: usize, c: usize, v: Vec<f64>) -> Var {
        tape.leaf_owned(DTensor::new(vec![r, c], v).unwrap())
    }

    fn rand_leaf(tape: &mut Tape, r: usize, c: usize, rng: &mut Rng) -> Var {
        let v = (0..r * c).map(|_| rng.normal(0.0, 1.0)).collect();
        leaf(tape, r, c, v)
    }

    /// store with identity projections for hand arithmetic
    fn identity_store(dim: usize, cfg: &GtcConfig) -> (ParamStore, Gtc) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let gtc = Gtc::init(&mut store, cfg, dim, &mut rng).unwrap();
        for name in [
            "gtc.s1.wq", "gtc.s1.wk", "gtc.s1.wv", "gtc.s1.wo", "gtc.s2.wq", "gtc.s2.wk",
            "gtc.s2.wv", "gtc.s2.wo",
        ] {
            let id = store.id_by_name(name).unwrap();
            let vals = store.get_mut(id).values_mut();
            vals.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dim {
                vals[i * dim + i] = 1.0;
            }
        }
        (store, gtc)
    }

    /// init() opens the residual branches at zero; oracle tests want them live.
    fn scramble_residuals(store: &mut ParamStore, rng: &mut Rng) {
        for name in ["gtc.s1.wo", "gtc.s2.wo"] {
            let id = store.id_by_name(name).unwrap();
            for v in store.get_mut(id).values_mut() {
                *v = rng.normal(0.0, 0.5);
            }
        }
    }

    #[test]
    fn equal_logits_make_uniform_columns() {
        let cfg = GtcConfig {
            groups: 4,
            classes: 2,
            temp: 1.0,
        };
        let (store, gtc) = identity_store(3, &cfg);
        let mut tape = Tape::new();
        let g = leaf(&mut tape, 4, 3, vec![0.5; 12]); // identical group rows
        let q = rand_leaf(&mut tape, 5, 3, &mut Rng::new(2));
        let s = similarity(&mut tape, &store, g, q, gtc.wq1, gtc.wk1, 1.0, None).unwrap();
        for col in 0..5 {
            for row in 0..4 {
                let v = tape.value(s).values()[row * 5 + col];
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strong_logit_saturates_its_column() {
        // identity W's, g = 2x2 identity, q = (10, 0): logits (10, 0)
        let cfg = GtcConfig {
            groups: 2,
            classes: 1,
            temp: 1.0,
        };
        let (store, gtc) = identity_store(2, &cfg);
        let mut tape = Tape::new();
        let g = leaf(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let q = leaf(&mut tape, 1, 2, vec![10.0, 0.0]);
        let s = similarity(&mut tape, &store, g, q, gtc.wq1, gtc.wk1, 1.0, None).unwrap();
        let v = tape.value(s).values();
        assert!(v[0] >= 1.0 - 1e-4, "{v:?}");
        assert!(v[1] <= 1e-4);
    }

    #[test]
    fn columns_sum_to_one() {
        let cfg = GtcConfig::default();
        let (store, gtc) = identity_store(6, &cfg);
        let mut tape = Tape::new();
        let mut rng = Rng::new(3);
        let g = rand_leaf(&mut tape, 7, 6, &mut rng);
        let q = rand_leaf(&mut tape, 9, 6, &mut rng);
        let mut noise = Rng::new(4);
        let s = similarity(&mut tape, &store, g, q, gtc.wq1, gtc.wk1, 0.7, Some(&mut noise))
            .unwrap();
        for col in 0..9 {
            let sum: f64 = (0..7).map(|r| tape.value(s).values()[r * 9 + col]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_assign_is_one_hot_with_low_index_ties() {
        let mut tape = Tape::new();
        // columns: (0.2,0.7,0.1) -> row 1; (0.5,0.5,0.0) -> row 0
        let s = leaf(&mut tape, 3, 2, vec![0.2, 0.5, 0.7, 0.5, 0.1, 0.0]);
        let (hat, winners) = assign(&mut tape, s, AssignMode::Hard).unwrap();
        assert_eq!(winners, vec![1, 0]);
        let v = tape.value(hat).values();
        assert_eq!(v, &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_gradient_matches_soft_path() {
        let mut rng = Rng::new(11);
        for trial in 0..25 {
            let (g_n, q_n, d) = (3 + rng.index(4), 4 + rng.index(5), 3);
            let gv: Vec<f64> = (0..g_n * d).map(|_| rng.normal(0.0, 1.0)).collect();
            let qv: Vec<f64> = (0..q_n * d).map(|_| rng.normal(0.0, 1.0)).collect();
            let av: Vec<f64> = (0..g_n * q_n).map(|_| rng.normal(0.0, 1.0)).collect();

            let run = |hard: bool| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
                let mut tape = Tape::new();
                let g = leaf(&mut tape, g_n, d, gv.clone());
                let q = leaf(&mut tape, q_n, d, qv.clone());
                let a = leaf(&mut tape, g_n, q_n, av.clone());
                let gt = tape.transpose(q).unwrap();
                let logits = tape.matmul(g, gt).unwrap();
                let s = tape.softmax(logits, 0, 1.0).unwrap();
                let (sel, _) = assign(
                    &mut tape,
                    s,
                    if hard { AssignMode::Hard } else { AssignMode::Soft },
                )
                .unwrap();
                let prod = tape.mul(sel, a).unwrap();
                let root = tape.sum_all(prod);
                tape.backward(root).unwrap();
                let forward = tape.value(sel).values().to_vec();
                (
                    forward,
                    tape.grad(g).unwrap().to_vec(),
                    tape.grad(q).unwrap().to_vec(),
                )
            };
            let (hard_fwd, hard_dg, hard_dq) = run(true);
            let (_, soft_dg, soft_dq) = run(false);
            for col in 0..q_n {
                let ones = (0..g_n)
                    .filter(|r| hard_fwd[r * q_n + col] == 1.0)
                    .count();
                let zeros = (0..g_n)
                    .filter(|r| hard_fwd[r * q_n + col] == 0.0)
                    .count();
                assert_eq!((ones, zeros), (1, g_n - 1), "trial {trial} col {col}");
            }
            for (a, b) in hard_dg.iter().zip(&soft_dg) {
                assert!((a - b).abs() < 1e-10, "trial {trial}: {a} vs {b}");
            }
            for (a, b) in hard_dq.iter().zip(&soft_dq) {
                assert!((a - b).abs() < 1e-10, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn single_group_merge_is_the_mean_residual() {
        let cfg = GtcConfig {
            groups: 1,
            classes: 1,
            temp: 1.0,
        };
        let (store, gtc) = identity_store(2, &cfg);
        let mut tape = Tape::new();
        let g = leaf(&mut tape, 1, 2, vec![0.0, 0.0]);
        let q = leaf(&mut tape, 2, 2, vec![1.0, 3.0, 3.0, 1.0]);
        let hat = leaf(&mut tape, 1, 2, vec![1.0, 1.0]);
        let gp = merge(&mut tape, &store, g, q, hat, &[0, 0], gtc.wv1, gtc.wo1).unwrap();
        assert_eq!(tape.value(gp).values(), &[2.0, 2.0]);
    }

    #[test]
    fn empty_group_row_is_bitwise_unchanged() {
        let cfg = GtcConfig {
            groups: 3,
            classes: 1,
            temp: 1.0,
        };
        let (store, gtc) = identity_store(2, &cfg);
        let mut tape = Tape::new();
        let g = leaf(&mut tape, 3, 2, vec![0.31, -1.7, 2.25, 0.44, -0.62, 0.09]);
        let q = leaf(&mut tape, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        // both queries in group 0; groups 1 and 2 empty
        let hat = leaf(&mut tape, 3, 2, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let gp = merge(&mut tape, &store, g, q, hat, &[0, 0], gtc.wv1, gtc.wo1).unwrap();
        let before = tape.value(g).values().to_vec();
        let after = tape.value(gp).values();
        for i in 2..6 {
            assert_eq!(before[i].to_bits(), after[i].to_bits());
        }
        assert_eq!(&after[0..2], &[2.0 + 0.31, 3.0 - 1.7]);
    }

    #[test]
    fn merge_matches_loop_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..30 {
            let (g_n, q_n, d) = (1 + rng.index(8), 1 + rng.index(12), 1 + rng.index(6));
            let cfg = GtcConfig {
                groups: g_n,
                classes: 1,
                temp: 1.0,
            };
            let mut store = ParamStore::new();
            let gtc = Gtc::init(&mut store, &cfg, d, &mut rng).unwrap();
            scramble_residuals(&mut store, &mut rng);
            let gv: Vec<f64> = (0..g_n * d).map(|_| rng.normal(0.0, 1.0)).collect();
            let qv: Vec<f64> = (0..q_n * d).map(|_| rng.normal(0.0, 1.0)).collect();
            let winners: Vec<usize> = (0..q_n).map(|_| rng.index(g_n)).collect();
            let mut hat = vec![0.0; g_n * q_n];
            for (col, &row) in winners.iter().enumerate() {
                hat[row * q_n + col] = 1.0;
            }
            let mut tape = Tape::new();
            let g = leaf(&mut tape, g_n, d, gv.clone());
            let q = leaf(&mut tape, q_n, d, qv.clone());
            let hat_v = leaf(&mut tape, g_n, q_n, hat);
            let gp = merge(&mut tape, &store, g, q, hat_v, &winners, gtc.wv1, gtc.wo1).unwrap();
            let got = tape.value(gp).values();

            // naive per-group oracle
            let wv = store.get(store.id_by_name("gtc.s1.wv").unwrap()).values();
            let wo = store.get(store.id_by_name("gtc.s1.wo").unwrap()).values();
            for gi in 0..g_n {
                let members: Vec<usize> =
                    (0..q_n).filter(|&c| winners[c] == gi).collect();
                let mut mean = vec![0.0; d];
                for &m in &members {
                    for j in 0..d {
                        let mut vj = 0.0;
                        for k in 0..d {
                            vj += qv[m * d + k] * wv[k * d + j];
                        }
                        mean[j] += vj;
                    }
                }
                let denom = members.len().max(1) as f64;
                mean.iter_mut().for_each(|v| *v /= denom);
                for j in 0..d {
                    let mut proj = 0.0;
                    for k in 0..d {
                        proj += mean[k] * wo[k * d + j];
                    }
                    let want = gv[gi * d + j] + proj;
                    assert!(
                        (got[gi * d + j] - want).abs() < 1e-12,
                        "group {gi} dim {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn merge_is_permutation_equivariant() {
        let cfg = GtcConfig {
            groups: 4,
            classes: 1,
            temp: 1.0,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::new(31);
        let gtc = Gtc::init(&mut store, &cfg, 3, &mut rng).unwrap();
        scramble_residuals(&mut store, &mut rng);
        let gv: Vec<f64> = (0..4 * 3).map(|_| rng.normal(0.0, 1.0)).collect();
        let qv: Vec<f64> = (0..6 * 3).map(|_| rng.normal(0.0, 1.0)).collect();
        let winners = vec![2, 0, 2, 1, 0, 3];

        let run = |gv: &[f64], qv: &[f64], winners: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new();
            let g = leaf(&mut tape, 4, 3, gv.to_vec());
            let q = leaf(&mut tape, 6, 3, qv.to_vec());
            let mut hat = vec![0.0; 4 * 6];
            for (c, &r) in winners.iter().enumerate() {
                hat[r * 6 + c] = 1.0;
            }
            let hat = leaf(&mut tape, 4, 6, hat);
            let gp = merge(&mut tape, &store, g, q, hat, winners, gtc.wv1, gtc.wo1).unwrap();
            tape.value(gp).values().to_vec()
        };
        let base = run(&gv, &qv, &winners);

        // permute queries: reverse order
        let mut qv_rev = vec![0.0; qv.len()];
        for i in 0..6 {
            qv_rev[i * 3..(i + 1) * 3].copy_from_slice(&qv[(5 - i) * 3..(6 - i) * 3]);
        }
        let winners_rev: Vec<usize> = winners.iter().rev().copied().collect();
        let same = run(&gv, &qv_rev, &winners_rev);
        for (a, b) in base.iter().zip(&same) {
            assert!((a - b).abs() < 1e-12);
        }

        // permute groups: swap rows 0 and 3
        let mut gv_sw = gv.clone();
        for j in 0..3 {
            gv_sw.swap(j, 9 + j);
        }
        let winners_sw: Vec<usize> = winners
            .iter()
            .map(|&w| match w {
                0 => 3,
                3 => 0,
                o => o,
            })
            .collect();
        let perm = run(&gv_sw, &qv, &winners_sw);
        for j in 0..3 {
            assert!((perm[j] - base[9 + j]).abs() < 1e-12);
            assert!((perm[9 + j] - base[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_embeddings_give_identical_scores() {
        let cfg = GtcConfig {
            groups: 3,
            classes: 1,
            temp: 1.0,
        };
        let (store, gtc) = identity_store(4, &cfg);
        let mut tape = Tape::new();
        let bank = leaf(&mut tape, 3, 4, vec![0.2; 12]);
        let q = leaf(&mut tape, 5, 4, vec![0.7; 20]);
        let (scores, _) = gtc
            .classify(&mut tape, &store, q, bank, AssignMode::Hard, None)
            .unwrap();
        let v = tape.value(scores).values();
        let first = &v[0..2];
        for row in v.chunks(2) {
            assert!((row[0] - first[0]).abs() < 1e-12);
            assert!((row[1] - first[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_queries_score_zero() {
        let cfg = GtcConfig {
            groups: 2,
            classes: 1,
            temp: 1.0,
        };
        let (mut store, gtc) = identity_store(4, &cfg);
        // kill the residual updates so c_a == c_e exactly
        for name in ["gtc.s1.wo", "gtc.s2.wo"] {
            let id = store.id_by_name(name).unwrap();
            store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        // c_e rows live in the first two dims, queries in the last two
        let ce = store.get_mut(gtc.c_e);
        ce.values_mut().copy_from_slice(&[1.0, 0., 0., 0., 0., 1.0, 0., 0.]);
        let mut tape = Tape::new();
        let bank = leaf(&mut tape, 2, 4, vec![0.3, -0.1, 0.0, 0.0, 0.2, 0.4, 0.0, 0.0]);
        let q = leaf(&mut tape, 3, 4, vec![0., 0., 1., 2., 0., 0., -1., 0.5, 0., 0., 2., 2.]);
        let (scores, _) = gtc
            .classify(&mut tape, &store, q, bank, AssignMode::Hard, None)
            .unwrap();
        for v in tape.value(scores).values() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn classify_matches_straight_line_oracle() {
        // independent reimplementation with plain loops, G=4, C=2, Q=8
        let (g_n, c_n, q_n, d) = (4usize, 2usize, 8usize, 5usize);
        let cfg = GtcConfig {
            groups: g_n,
            classes: c_n,
            temp: 1.0,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::new(77);
        let gtc = Gtc::init(&mut store, &cfg, d, &mut rng).unwrap();
        scramble_residuals(&mut store, &mut rng);
        let bankv: Vec<f64> = (0..g_n * d).map(|_| rng.normal(0.0, 1.0)).collect();
        let qv: Vec<f64> = (0..q_n * d).map(|_| rng.normal(0.0, 1.0)).collect();

        let mut tape = Tape::new();
        let bank = leaf(&mut tape, g_n, d, bankv.clone());
        let q = leaf(&mut tape, q_n, d, qv.clone());
        let (scores, trace) = gtc
            .classify(&mut tape, &store, q, bank, AssignMode::Hard, None)
            .unwrap();
        let got = tape.value(scores).values().to_vec();

        // ---- oracle ----
        let w = |name: &str| store.get(store.id_by_name(name).unwrap()).values().to_vec();
        let matvec = |m: &[f64], x: &[f64], rows: usize| -> Vec<f64> {
            // x [rows x d] times m [d x d]
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                for j in 0..d {
                    for k in 0..d {
                        out[r * d + j] += x[r * d + k] * m[k * d + j];
                    }
                }
            }
            out
        };
        let stage = |emb: &[f64],
                     inp: &[f64],
                     e_rows: usize,
                     i_rows: usize,
                     pfx: &str|
         -> (Vec<f64>, Vec<usize>) {
            let pq = matvec(&w(&format!("{pfx}.wq")), emb, e_rows);
            let pk = matvec(&w(&format!("{pfx}.wk")), inp, i_rows);
            let mut logits = vec![0.0; e_rows * i_rows];
            for r in 0..e_rows {
                for c in 0..i_rows {
                    for k in 0..d {
                        logits[r * i_rows + c] += pq[r * d + k] * pk[c * d + k];
                    }
                }
            }
            // column softmax, then argmax
            let mut winners = vec![0usize; i_rows];
            for c in 0..i_rows {
                let mut best = 0;
                for r in 1..e_rows {
                    if logits[r * i_rows + c] > logits[best * i_rows + c] {
                        best = r;
                    }
                }
                winners[c] = best;
            }
            let pv = matvec(&w(&format!("{pfx}.wv")), inp, i_rows);
            let mut out = emb.to_vec();
            let wo = w(&format!("{pfx}.wo"));
            for r in 0..e_rows {
                let members: Vec<usize> = (0..i_rows).filter(|&c| winners[c] == r).collect();
                let mut mean = vec![0.0; d];
                for &m in &members {
                    for j in 0..d {
                        mean[j] += pv[m * d + j];
                    }
                }
                let denom = members.len().max(1) as f64;
                mean.iter_mut().for_each(|v| *v /= denom);
                for j in 0..d {
                    for k in 0..d {
                        out[r * d + j] += mean[k] * wo[k * d + j];
                    }
                }
            }
            (out, winners)
        };
        let (gp, w1) = stage(&bankv, &qv, g_n, q_n, "gtc.s1");
        let cev = w("gtc.c_e");
        let (ca, w2) = stage(&cev, &gp, c_n + 1, g_n, "gtc.s2");
        assert_eq!(trace.query_group, w1);
        assert_eq!(trace.group_class, w2);
        for qi in 0..q_n {
            for ci in 0..c_n + 1 {
                let mut want = 0.0;
                for k in 0..d {
                    want += ca[ci * d + k] * qv[qi * d + k];
                }
                let have = got[qi * (c_n + 1) + ci];
                assert!(
                    (have - want).abs() < 1e-10,
                    "q {qi} class {ci}: {have} vs {want}"
                );
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_noise() {
        let cfg = GtcConfig {
            groups: 5,
            classes: 2,
            temp: 1.0,
        };
        let (store, gtc) = identity_store(4, &cfg);
        let run = || {
            let mut tape = Tape::new();
            let mut rng = Rng::new(9);
            let bank = rand_leaf(&mut tape, 5, 4, &mut Rng::new(1));
            let q = rand_leaf(&mut tape, 6, 4, &mut Rng::new(2));
            let (scores, _) = gtc
                .classify(&mut tape, &store, q, bank, AssignMode::Hard, Some(&mut rng))
                .unwrap();
            tape.value(scores)
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_temperature_is_rejected() {
        let cfg = GtcConfig {
            temp: 0.0,
            ..GtcConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Param(_))));
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        assert!(Gtc::init(&mut store, &cfg, 4, &mut rng).is_err());
    }
}
