//! Hungarian assignment and the composite detection loss with deep
//! supervision.
//!
//! The matcher pads every cost matrix to a square with zero-cost dummy
//! entries. Pigeonhole fixes how many dummy edges any full assignment uses,
//! so the padding never changes which real assignments are optimal, while the
//! square form gives exact complementary slackness: every optimal assignment
//! uses only edges with zero reduced cost under the solved potentials. That
//! makes the tie canonicalization cheap in the common unique-optimum case and
//! still exact when ties exist.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::NucleusInstance;
use crate::tape::{Tape, Var};
use crate::tensor::DTensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda_loc: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            omega1: 5.0,
            omega2: 2.0,
            // The unmatched term is a plain sum (no 1/P), so with Q >> P even
            // focal-damped empty rows would drown the matched signal at equal
            // weight. 0.1 is the usual no-object down-weighting.
            omega3: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            lambda_loc: 5.0,
            lambda_cls: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.omega1,
            self.omega2,
            self.omega3,
            self.focal_alpha,
            self.focal_gamma,
            self.lambda_loc,
            self.lambda_cls,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Param(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (proposal index, target index), sorted by proposal index.
    pub pairs: Vec<(usize, usize)>,
    /// Proposals without a target, ascending.
    pub unmatched_proposals: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of `min(n, m)` pairs. Deterministic: among
/// equal-cost optima the lexicographically smallest pair list wins.
pub fn hungarian(cost: &DTensor) -> Result<MatchResult> {
    let s = cost.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("hungarian wants a matrix, got {s:?}")));
    }
    let (n, m) = (s[0], s[1]);
    if cost.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in cost matrix".into()));
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched_proposals: (0..n).collect(),
            total_cost: 0.0,
        });
    }

    let side = n.max(m);
    let sq = squared(cost.values(), n, m, side);
    let sol = jv_solve(&sq, side);
    let scale = cost.values().iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale;

    // Candidate columns per real row: zero reduced cost under the solved
    // potentials. "Skip" (a dummy column) is an option only when n > m.
    let mut unique = true;
    let mut cands: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut can_skip = vec![false; n];
    for r in 0..n {
        let mut c_list = Vec::new();
        for c in 0..m {
            if sq[r * side + c] - sol.u[r] - sol.v[c] <= tol {
                c_list.push(c);
            }
        }
        if n > m {
            for c in m..side {
                if -sol.u[r] - sol.v[c] <= tol {
                    can_skip[r] = true;
                    break;
                }
            }
        }
        if c_list.len() + can_skip[r] as usize != 1 {
            unique = false;
        }
        cands.push(c_list);
    }

    let pairs = if unique {
        let mut pairs = Vec::new();
        for r in 0..n {
            let c = sol.row_to_col[r];
            if c < m {
                pairs.push((r, c));
            }
        }
        pairs
    } else {
        lex_canonical(&sq, side, n, m, sol.total, &cands, &can_skip)?
    };

    let total_cost = pairs
        .iter()
        .map(|&(r, c)| cost.values()[r * m + c])
        .sum();
    let matched: Vec<bool> = {
        let mut f = vec![false; n];
        for &(r, _) in &pairs {
            f[r] = true;
        }
        f
    };
    Ok(MatchResult {
        pairs,
        unmatched_proposals: (0..n).filter(|&r| !matched[r]).collect(),
        total_cost,
    })
}

/// Solver output without tie canonicalization; deterministic for a fixed
/// matrix. The evaluation matcher uses this: its barred pairs create huge tie
/// classes that are semantically interchangeable, so canonicalizing them
/// would be pure waste.
pub(crate) fn hungarian_raw(cost: &[f64], n: usize, m: usize) -> Vec<(usize, usize)> {
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let side = n.max(m);
    let sq = squared(cost, n, m, side);
    let sol = jv_solve(&sq, side);
    let mut pairs = Vec::new();
    for r in 0..n {
        let c = sol.row_to_col[r];
        if c < m {
            pairs.push((r, c));
        }
    }
    pairs
}

fn squared(cost: &[f64], n: usize, m: usize, side: usize) -> Vec<f64> {
    let mut sq = vec![0.0; side * side];
    for r in 0..n {
        sq[r * side..r * side + m].copy_from_slice(&cost[r * m..(r + 1) * m]);
    }
    sq
}

struct JvSolution {
    total: f64,
    row_to_col: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Jonker-Volgenant shortest augmenting path on a dense square matrix.
fn jv_solve(cost: &[f64], s: usize) -> JvSolution {
    let mut u = vec![0.0; s];
    let mut v = vec![0.0; s + 1];
    let mut owner: Vec<Option<usize>> = vec![None; s + 1]; // col -> row, col s virtual
    for i in 0..s {
        owner[s] = Some(i);
        let mut j0 = s;
        let mut minv = vec![f64::INFINITY; s + 1];
        let mut way = vec![s; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0].unwrap();
            let mut delta = f64::INFINITY;
            let mut j1 = s;
            for j in 0..s {
                if used[j] {
                    continue;
                }
                let red = cost[i0 * s + j] - u[i0] - v[j];
                if red < minv[j] {
                    minv[j] = red;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=s {
                if used[j] {
                    if let Some(r) = owner[j] {
                        u[r] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0].is_none() {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == s {
                break;
            }
        }
        owner[s] = None;
    }
    let mut row_to_col = vec![usize::MAX; s];
    let mut total = 0.0;
    for j in 0..s {
        if let Some(r) = owner[j] {
            row_to_col[r] = j;
            total += cost[r * s + j];
        }
    }
    JvSolution {
        total,
        row_to_col,
        u,
        v: v[..s].to_vec(),
    }
}

/// Lexicographically smallest optimal pair list, built row by row: force a
/// candidate, re-solve the remainder, keep the candidate iff the total is
/// still optimal. Matching the current row always beats skipping it in the
/// lexicographic order, and lower column indices win.
fn lex_canonical(
    sq: &[f64],
    side: usize,
    n: usize,
    m: usize,
    mut v_rem: f64,
    cands: &[Vec<usize>],
    can_skip: &[bool],
) -> Result<Vec<(usize, usize)>> {
    let scale = sq.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale * side as f64;
    let mut rows: Vec<usize> = (0..side).collect();
    let mut cols: Vec<usize> = (0..side).collect();
    let mut pairs = Vec::new();
    for r in 0..n {
        rows.retain(|&x| x != r);
        let mut committed = false;
        let gated: Vec<usize> = cands[r]
            .iter()
            .copied()
            .filter(|c| cols.contains(c))
            .collect();
        for c in gated {
            if force(sq, side, r, c, &rows, &mut cols, &mut v_rem, tol) {
                pairs.push((r, c));
                committed = true;
                break;
            }
        }
        if !committed && can_skip[r] {
            committed = force_skip(sq, side, m, &rows, &mut cols, &mut v_rem, tol);
        }
        if !committed {
            // The gates above come from the potentials of the original solve.
            // Committing a micro-gap tie earlier can move a later row's
            // conditional optimum outside its gate, so rescan the remaining
            // options with fresh solves before giving up.
            let rest: Vec<usize> = cols
                .iter()
                .copied()
                .filter(|&c| c < m && !cands[r].contains(&c))
                .collect();
            for c in rest {
                if force(sq, side, r, c, &rows, &mut cols, &mut v_rem, tol) {
                    pairs.push((r, c));
                    committed = true;
                    break;
                }
            }
            if !committed && !can_skip[r] {
                committed = force_skip(sq, side, m, &rows, &mut cols, &mut v_rem, tol);
            }
        }
        if !committed {
            return Err(Error::Numeric(
                "assignment canonicalization lost the optimum; \
                 cost matrix may be numerically degenerate"
                    .into(),
            ));
        }
    }
    Ok(pairs)
}

/// Force row `r` onto column `c`; commit iff the remainder still reaches the
/// running optimum. On success the ledger advances to the freshly solved
/// remainder, so accepted ties cannot drift it away from the true optimum.
#[allow(clippy::too_many_arguments)]
fn force(
    sq: &[f64],
    side: usize,
    r: usize,
    c: usize,
    rows: &[usize],
    cols: &mut Vec<usize>,
    v_rem: &mut f64,
    tol: f64,
) -> bool {
    let sub = solve_submatrix(sq, side, rows, cols, Some(c));
    if sq[r * side + c] + sub - *v_rem <= tol {
        cols.retain(|&x| x != c);
        *v_rem = sub;
        true
    } else {
        false
    }
}

/// Leave the current row unmatched by spending a dummy column on it. The
/// dummies are interchangeable, so the highest one goes first.
fn force_skip(
    sq: &[f64],
    side: usize,
    m: usize,
    rows: &[usize],
    cols: &mut Vec<usize>,
    v_rem: &mut f64,
    tol: f64,
) -> bool {
    let Some(&pad) = cols.iter().rev().find(|&&c| c >= m) else {
        return false;
    };
    let sub = solve_submatrix(sq, side, rows, cols, Some(pad));
    if sub - *v_rem <= tol {
        cols.retain(|&x| x != pad);
        *v_rem = sub;
        true
    } else {
        false
    }
}

fn solve_submatrix(
    sq: &[f64],
    side: usize,
    rows: &[usize],
    cols: &[usize],
    drop_col: Option<usize>,
) -> f64 {
    let keep: Vec<usize> = cols
        .iter()
        .copied()
        .filter(|&c| Some(c) != drop_col)
        .collect();
    debug_assert_eq!(rows.len(), keep.len());
    if rows.is_empty() {
        return 0.0;
    }
    let s = rows.len();
    let mut sub = vec![0.0; s * s];
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in keep.iter().enumerate() {
            sub[i * s + j] = sq[r * side + c];
        }
    }
    jv_solve(&sub, s).total
}

// ---- focal loss -------------------------------------------------------------

/// Per-row focal loss on the tape: `scores` is [R x (C+1)] raw logits,
/// `target_class[r]` is the 1-based class of row r (C+1 = empty). Returns a
/// rank-1 [R] vector of losses.
pub fn focal_loss_rows(
    tape: &mut Tape,
    scores: Var,
    target_class: &[usize],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let shp = tape.shape(scores).to_vec();
    if shp.len() != 2 || shp[0] != target_class.len() {
        return Err(Error::Shape(format!(
            "focal_loss_rows: scores {shp:?} vs {} targets",
            target_class.len()
        )));
    }
    let (rows, classes) = (shp[0], shp[1]);
    let mut mask = vec![0.0; rows * classes];
    for (r, &t) in target_class.iter().enumerate() {
        if t == 0 || t > classes {
            return Err(Error::Param(format!(
                "target class {t} outside 1..{classes}"
            )));
        }
        mask[r * classes + (t - 1)] = 1.0;
    }
    let probs = tape.softmax(scores, 1, 1.0)?;
    let mask = tape.leaf_owned(DTensor::new(vec![rows, classes], mask)?);
    let picked = tape.mul(probs, mask)?;
    let p_t = tape.sum_axis(picked, 1)?; // [rows]
    let one_minus = {
        let neg = tape.neg(p_t);
        tape.add_scalar(neg, 1.0)
    };
    let modulator = tape.pow_const(one_minus, gamma);
    let log_p = tape.log_clamped(p_t);
    let prod = tape.mul(modulator, log_p)?;
    Ok(tape.scale(prod, -alpha))
}

/// Focal loss of a single score vector; the value of the differentiable node.
pub fn focal_loss(scores: &DTensor, target_class: usize, alpha: f64, gamma: f64) -> Result<f64> {
    let c = scores.numel();
    let mut tape = Tape::new();
    let s = tape.leaf_owned(DTensor::new(vec![1, c], scores.values().to_vec())?);
    let per_row = focal_loss_rows(&mut tape, s, &[target_class], alpha, gamma)?;
    Ok(tape.value(per_row).values()[0])
}

// ---- match cost and total loss -----------------------------------------------

pub(crate) fn softmax_rows(vals: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &vals[r * cols..(r + 1) * cols];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (x - mx).exp();
            z += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= z;
        }
    }
    out
}

/// Matching cost of Q proposals against K targets: weighted distance plus
/// probability complement of the target's class. Coordinates normalized.
pub fn match_cost(
    points: &[f64],
    score_logits: &[f64],
    classes_with_empty: usize,
    targets: &[(f64, f64, usize)],
    lambda_loc: f64,
    lambda_cls: f64,
) -> Result<DTensor> {
    let q = points.len() / 2;
    let k = targets.len();
    if k == 0 {
        return Err(Error::Param("match_cost wants at least one target".into()));
    }
    if score_logits.len() != q * classes_with_empty {
        return Err(Error::Shape(format!(
            "match_cost: {} logits for {q} proposals x {classes_with_empty} classes",
            score_logits.len()
        )));
    }
    let probs = softmax_rows(score_logits, q, classes_with_empty);
    let mut cost = vec![0.0; q * k];
    for qi in 0..q {
        for (ki, &(tx, ty, tc)) in targets.iter().enumerate() {
            let d = (points[2 * qi] - tx).hypot(points[2 * qi + 1] - ty);
            let p = probs[qi * classes_with_empty + (tc - 1)];
            cost[qi * k + ki] = lambda_loc * d + lambda_cls * (1.0 - p);
        }
    }
    DTensor::new(vec![q, k], cost)
}

/// One decoder layer's contribution to the loss: its refined points and the
/// class logits scored from its queries.
pub struct LossSide {
    /// [Q x 2], normalized coordinates.
    pub points: Var,
    /// [Q x (C+1)], raw logits; column C is the empty class.
    pub scores: Var,
}

/// Eq.-style composite loss over all side outputs. Targets are in pixel
/// units; `frame` is (width, height). Returns the scalar loss node and the
/// per-side matches.
pub fn total_loss(
    tape: &mut Tape,
    sides: &[LossSide],
    targets: &[NucleusInstance],
    frame: (f64, f64),
    w: &LossWeights,
) -> Result<(Var, Vec<MatchResult>)> {
    if sides.is_empty() {
        return Err(Error::Param("total_loss wants at least one side output".into()));
    }
    w.validate()?;
    let shp = tape.shape(sides[0].scores).to_vec();
    let (q_count, classes) = (shp[0], shp[1]);
    let empty_class = classes; // 1-based
    let norm_targets: Vec<(f64, f64, usize)> = targets
        .iter()
        .map(|t| (t.x / frame.0, t.y / frame.1, t.class_id))
        .collect();
    if norm_targets.len() > q_count {
        log::warn!(
            "{} targets exceed {} proposals; excess targets are unsupervised this pass",
            norm_targets.len(),
            q_count
        );
    }

    let mut acc: Option<Var> = None;
    let mut matches = Vec::with_capacity(sides.len());
    for side in sides {
        let m = if norm_targets.is_empty() {
            MatchResult {
                pairs: Vec::new(),
                unmatched_proposals: (0..q_count).collect(),
                total_cost: 0.0,
            }
        } else {
            let cost = match_cost(
                tape.value(side.points).values(),
                tape.value(side.scores).values(),
                classes,
                &norm_targets,
                w.lambda_loc,
                w.lambda_cls,
            )?;
            hungarian(&cost)?
        };

        let p_count = m.pairs.len();
        let mut term = {
            // Classification over all proposals in one batch: matched rows
            // weighted omega2 / P, unmatched rows omega3.
            let mut row_class = vec![empty_class; q_count];
            let mut row_weight = vec![w.omega3; q_count];
            for &(qi, ki) in &m.pairs {
                row_class[qi] = norm_targets[ki].2;
                row_weight[qi] = w.omega2 / p_count as f64;
            }
            let fl = focal_loss_rows(tape, side.scores, &row_class, w.focal_alpha, w.focal_gamma)?;
            let wv = tape.leaf_owned(DTensor::new(vec![q_count], row_weight)?);
            let weighted = tape.mul(fl, wv)?;
            tape.sum_all(weighted)
        };

        if p_count > 0 {
            let rows: Vec<usize> = m.pairs.iter().map(|&(qi, _)| qi).collect();
            let tgt: Vec<f64> = m
                .pairs
                .iter()
                .flat_map(|&(_, ki)| [norm_targets[ki].0, norm_targets[ki].1])
                .collect();
            let picked = tape.gather_rows(side.points, &rows)?;
            let tgt = tape.leaf_owned(DTensor::new(vec![p_count, 2], tgt)?);
            let diff = tape.sub(picked, tgt)?;
            let sq = tape.mul(diff, diff)?;
            let ssq = tape.sum_all(sq);
            let coord = tape.scale(ssq, w.omega1 / p_count as f64);
            term = tape.add(term, coord)?;
        }

        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
        matches.push(m);
    }
    Ok((acc.unwrap(), matches))
}
