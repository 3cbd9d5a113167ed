//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes in
//! topological order; [`Tape::backward`] sweeps it once in reverse,
//! accumulating gradients per node. Exactly the kernels the network needs
//! are provided, nothing more. Values are immutable once written; parameters
//! enter as leaves linked to a [`ParamStore`] entry so their gradients can be
//! written back after the sweep.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::DTensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LOG_CLAMP: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    /// `[.., c] + [c]`, broadcast over the last axis.
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    /// `ln(max(x, 1e-12))`.
    LogClamped(Var),
    /// `x^p` for constant `p >= 0`.
    PowConst(Var, f64),
    /// `max(x, c)` elementwise with a constant.
    MaxConst(Var, f64),
    Recip(Var),
    Softmax { x: Var, axis: usize, temp: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var },
    SumAll(Var),
    /// 2-D only; axis 0 sums columns, axis 1 sums rows.
    SumAxis(Var, usize),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ColSlice { x: Var, start: usize },
    RepeatRows(Var, usize),
    SumRowBlocks(Var, usize),
    /// Row-wise scaling: `out[i, j] = x[i, j] * s[i]`.
    ScaleRows { x: Var, s: Var },
    StopGrad,
    Clamp01(Var),
    BilinearSample { map: Var, points: Var },
}

struct Node {
    value: DTensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: DTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves ---------------------------------------------------------

    /// Constant/input leaf. Gradient is tracked (readable via [`Tape::grad`])
    /// but never written back anywhere.
    pub fn leaf(&mut self, t: &DTensor) -> Var {
        self.push(t.clone(), Op::Leaf { param: None })
    }

    pub fn leaf_owned(&mut self, t: DTensor) -> Var {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf_owned(DTensor::scalar(v))
    }

    /// Parameter leaf; `backward` + [`Tape::write_param_grads`] accumulate
    /// into the store entry's gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Leaf { param: Some(id) })
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Broadcast add of a rank-1 bias over the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(a)
            )));
        }
        let av = self.value(a);
        let bv = self.value(bias);
        let mut out = av.values().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += bv.values()[i % c];
        }
        let t = DTensor::new(av.shape().to_vec(), out).unwrap();
        Ok(self.push(t, Op::AddBias(a, bias)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), gelu_fwd);
        self.push(v, Op::Gelu(a))
    }

    pub fn log_clamped(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.max(LOG_CLAMP).ln());
        self.push(v, Op::LogClamped(a))
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let v = map(self.value(a), |x| if p == 0.0 { 1.0 } else { x.powf(p) });
        self.push(v, Op::PowConst(a, p))
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x.max(c));
        self.push(v, Op::MaxConst(a, c))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.clamp(0.0, 1.0));
        self.push(v, Op::Clamp01(a))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        let t = DTensor::new(vec![m, n], out).unwrap();
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose wants rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let av = self.value(a).values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let t = DTensor::new(vec![c, r], out).unwrap();
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                self.shape(a)
            )));
        }
        let t = DTensor::new(shape.to_vec(), self.value(a).values().to_vec()).unwrap();
        Ok(self.push(t, Op::Reshape(a)))
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax along `axis` with temperature `temp`; slices along the axis
    /// sum to one.
    pub fn softmax(&mut self, x: Var, axis: usize, temp: f64) -> Result<Var> {
        if temp <= 0.0 {
            return Err(Error::Param(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = xv.values();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(src[at(k)]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = ((src[at(k)] - mx) / temp).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let t = DTensor::new(shape, out).unwrap();
        Ok(self.push(t, Op::Softmax { x, axis, temp }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{n}]",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let g = self.value(gain).values().to_vec();
        let b = self.value(bias).values().to_vec();
        let mut out = vec![0.0; xv.numel()];
        for (row, orow) in xv.values().chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let s = (var + LN_EPS).sqrt();
            for j in 0..n {
                orow[j] = (row[j] - mean) / s * g[j] + b[j];
            }
        }
        let t = DTensor::new(xv.shape().to_vec(), out).unwrap();
        Ok(self.push(t, Op::LayerNorm { x, gain, bias }))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).values().iter().sum();
        self.push(DTensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || axis > 1 {
            return Err(Error::Shape(format!(
                "sum_axis wants rank 2 and axis 0/1, got {s:?} axis {axis}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let av = self.value(a).values();
        let out = if axis == 1 {
            (0..r)
                .map(|i| av[i * c..(i + 1) * c].iter().sum())
                .collect::<Vec<f64>>()
        } else {
            let mut acc = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    acc[j] += av[i * c + j];
                }
            }
            acc
        };
        let len = out.len();
        let t = DTensor::new(vec![len], out).unwrap();
        Ok(self.push(t, Op::SumAxis(a, axis)))
    }

    // ---- structural -------------------------------------------------------

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows wants rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        if idx.is_empty() {
            return Err(Error::Shape("gather_rows: empty index list".into()));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let t = DTensor::new(vec![idx.len(), c], out).unwrap();
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no inputs".into()));
        }
        let c = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != c {
                return Err(Error::Shape(format!(
                    "concat_rows: {s:?} does not match width {c}"
                )));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).values());
        }
        let t = DTensor::new(vec![rows, c], out).unwrap();
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        }
        let r = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::Shape(format!(
                    "concat_cols: {s:?} does not match height {r}"
                )));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).values();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = DTensor::new(vec![r, total], out).unwrap();
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Shape(format!(
                "col_slice [{start}, {}) out of range for {s:?}",
                start + len
            )));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let t = DTensor::new(vec![r, len], out).unwrap();
        Ok(self.push(t, Op::ColSlice { x, start }))
    }

    /// Repeat each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || times == 0 {
            return Err(Error::Shape(format!(
                "repeat_rows wants rank 2 and times > 0, got {s:?} x{times}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        let t = DTensor::new(vec![r * times, c], out).unwrap();
        Ok(self.push(t, Op::RepeatRows(x, times)))
    }

    /// Sum consecutive blocks of `block` rows.
    pub fn sum_row_blocks(&mut self, x: Var, block: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || block == 0 || s[0] % block != 0 {
            return Err(Error::Shape(format!(
                "sum_row_blocks: rows {s:?} not divisible into blocks of {block}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).values();
        let out_rows = r / block;
        let mut out = vec![0.0; out_rows * c];
        for i in 0..r {
            let o = i / block;
            for j in 0..c {
                out[o * c + j] += xv[i * c + j];
            }
        }
        let t = DTensor::new(vec![out_rows, c], out).unwrap();
        Ok(self.push(t, Op::SumRowBlocks(x, block)))
    }

    /// Scale row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.shape(s) != [xs[0]] {
            return Err(Error::Shape(format!(
                "scale_rows: {:?} does not match rows of {xs:?}",
                self.shape(s)
            )));
        }
        let (r, c) = (xs[0], xs[1]);
        let xv = self.value(x).values();
        let sv = self.value(s).values();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xv[i * c + j] * sv[i]);
            }
        }
        let t = DTensor::new(vec![r, c], out).unwrap();
        Ok(self.push(t, Op::ScaleRows { x, s }))
    }

    // ---- sampling ---------------------------------------------------------

    /// Bilinear interpolation of `map` `[h, w, c]` at normalized `points`
    /// `[p, 2]` laid out as (x, y) with half-pixel centers. Out-of-range
    /// points clamp to the border. Differentiable in both the map and the
    /// points.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let ms = self.shape(map);
        let ps = self.shape(points);
        if ms.len() != 3 {
            return Err(Error::Shape(format!(
                "bilinear_sample map wants rank 3 [h,w,c], got {ms:?}"
            )));
        }
        if ps.len() != 2 || ps[1] != 2 {
            return Err(Error::Shape(format!(
                "bilinear_sample points want [p,2], got {ps:?}"
            )));
        }
        let (h, w, c) = (ms[0], ms[1], ms[2]);
        let p = ps[0];
        let mv = self.value(map).values();
        let pv = self.value(points).values();
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let corners = bilinear_corners(pv[2 * i], pv[2 * i + 1], h, w);
            for (y, x, wgt) in corners {
                let base = (y * w + x) * c;
                for k in 0..c {
                    out[i * c + k] += wgt * mv[base + k];
                }
            }
        }
        let t = DTensor::new(vec![p, c], out).unwrap();
        Ok(self.push(t, Op::BilinearSample { map, points }))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients of every node reachable
    /// from the root become readable via [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of a node after [`Tape::backward`]; `None` when the node does
    /// not influence the root.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulate parameter-leaf gradients into the store.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }

    fn accum(&mut self, v: Var, delta: &[f64]) {
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn accum_fn(&mut self, v: Var, f: impl FnMut(usize, &mut f64)) {
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        let mut f = f;
        for (i, s) in slot.iter_mut().enumerate() {
            f(i, s);
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Values are read before mutating the grad buffers; ops never alias
        // their own output.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::Sub(a, b) => {
                self.accum(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum(b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(a).values().to_vec();
                let bv = self.value(b).values().to_vec();
                let da: Vec<f64> = g.iter().zip(&bv).map(|(gi, b)| gi * b).collect();
                let db: Vec<f64> = g.iter().zip(&av).map(|(gi, a)| gi * a).collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Div(a, b) => {
                let av = self.value(a).values().to_vec();
                let bv = self.value(b).values().to_vec();
                let da: Vec<f64> = g.iter().zip(&bv).map(|(gi, b)| gi / b).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(&bv))
                    .map(|(gi, (a, b))| -gi * a / (b * b))
                    .collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::AddScalar(a) => self.accum(a, g),
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accum(a, &da);
            }
            Op::AddBias(a, bias) => {
                self.accum(a, g);
                let c = self.nodes[bias.0].value.numel();
                let mut db = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    db[i % c] += gi;
                }
                self.accum(bias, &db);
            }
            Op::MatMul(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(a).values().to_vec();
                let bv = self.value(b).values().to_vec();
                // dA = dC . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        let mut s = 0.0;
                        for t in 0..n {
                            s += g[i * n + t] * bv[j * n + t];
                        }
                        da[i * k + j] = s;
                    }
                }
                // dB = A^T . dC
                let mut db = vec![0.0; k * n];
                for i in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for t in 0..m {
                            s += av[t * k + i] * g[t * n + j];
                        }
                        db[i * n + j] = s;
                    }
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Transpose(a) => {
                let s = self.shape(a).to_vec();
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.accum(a, &da);
            }
            Op::Reshape(a) => self.accum(a, g),
            Op::Gelu(a) => {
                let av = self.value(a).values().to_vec();
                let da: Vec<f64> = g.iter().zip(&av).map(|(gi, x)| gi * gelu_bwd(*x)).collect();
                self.accum(a, &da);
            }
            Op::LogClamped(a) => {
                let av = self.value(a).values().to_vec();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(gi, x)| if *x > LOG_CLAMP { gi / x } else { 0.0 })
                    .collect();
                self.accum(a, &da);
            }
            Op::PowConst(a, p) => {
                let av = self.value(a).values().to_vec();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(gi, x)| {
                        if p == 0.0 {
                            0.0
                        } else {
                            gi * p * x.powf(p - 1.0)
                        }
                    })
                    .collect();
                self.accum(a, &da);
            }
            Op::MaxConst(a, c) => {
                let av = self.value(a).values().to_vec();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(gi, x)| if *x >= c { *gi } else { 0.0 })
                    .collect();
                self.accum(a, &da);
            }
            Op::Recip(a) => {
                let av = self.value(a).values().to_vec();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(gi, x)| -gi / (x * x))
                    .collect();
                self.accum(a, &da);
            }
            Op::Softmax { x, axis, temp } => {
                let y = self.value(Var(i)).values().to_vec();
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + ii;
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += g[at(k)] * y[at(k)];
                        }
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot) / temp;
                        }
                    }
                }
                self.accum(x, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let n = *self.shape(x).last().unwrap();
                let xv = self.value(x).values().to_vec();
                let gv = self.value(gain).values().to_vec();
                let rows = xv.len() / n;
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    let row = &xv[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let s = (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / s).collect();
                    let dxh: Vec<f64> = grow.iter().zip(&gv).map(|(gi, gn)| gi * gn).collect();
                    let m1 = dxh.iter().sum::<f64>() / n as f64;
                    let m2 = dxh.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = (dxh[j] - m1 - xhat[j] * m2) / s;
                        dg[j] += grow[j] * xhat[j];
                        db[j] += grow[j];
                    }
                }
                self.accum(x, &dx);
                self.accum(gain, &dg);
                self.accum(bias, &db);
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                self.accum_fn(a, |_, s| *s += g0);
            }
            Op::SumAxis(a, axis) => {
                let s = self.shape(a).to_vec();
                let (r, c) = (s[0], s[1]);
                let g = g.to_vec();
                if axis == 1 {
                    self.accum_fn(a, |i, sl| *sl += g[i / c]);
                } else {
                    let _ = r;
                    self.accum_fn(a, |i, sl| *sl += g[i % c]);
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(x)[1];
                let slot =
                    self.grads[x.0].get_or_insert_with(|| vec![0.0; self.nodes[x.0].value.numel()]);
                for (out_row, &src_row) in idx.iter().enumerate() {
                    for j in 0..c {
                        slot[src_row * c + j] += g[out_row * c + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let numel = self.nodes[p.0].value.numel();
                    let slice: Vec<f64> = g[off..off + numel].to_vec();
                    self.accum(p, &slice);
                    off += numel;
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).collect::<Vec<_>>().iter().sum();
                let mut off = 0;
                for p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    self.accum(p, &dp);
                    off += w;
                }
            }
            Op::ColSlice { x, start } => {
                let s = self.shape(x).to_vec();
                let (r, c) = (s[0], s[1]);
                let len = self.nodes[i].value.shape()[1];
                let slot =
                    self.grads[x.0].get_or_insert_with(|| vec![0.0; self.nodes[x.0].value.numel()]);
                for row in 0..r {
                    for j in 0..len {
                        slot[row * c + start + j] += g[row * len + j];
                    }
                }
            }
            Op::RepeatRows(x, times) => {
                let c = self.shape(x)[1];
                let rows = self.shape(x)[0];
                let mut dx = vec![0.0; rows * c];
                for i in 0..rows * times {
                    let o = i / times;
                    for j in 0..c {
                        dx[o * c + j] += g[i * c + j];
                    }
                }
                self.accum(x, &dx);
            }
            Op::SumRowBlocks(x, block) => {
                let c = self.shape(x)[1];
                let rows = self.shape(x)[0];
                let mut dx = vec![0.0; rows * c];
                for i in 0..rows {
                    let o = i / block;
                    for j in 0..c {
                        dx[i * c + j] = g[o * c + j];
                    }
                }
                self.accum(x, &dx);
            }
            Op::ScaleRows { x, s } => {
                let xs = self.shape(x).to_vec();
                let (r, c) = (xs[0], xs[1]);
                let xv = self.value(x).values().to_vec();
                let sv = self.value(s).values().to_vec();
                let mut dx = vec![0.0; r * c];
                let mut ds = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] * sv[i];
                        ds[i] += g[i * c + j] * xv[i * c + j];
                    }
                }
                self.accum(x, &dx);
                self.accum(s, &ds);
            }
            Op::StopGrad => {}
            Op::Clamp01(a) => {
                let av = self.value(a).values().to_vec();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&av)
                    .map(|(gi, x)| if (0.0..=1.0).contains(x) { *gi } else { 0.0 })
                    .collect();
                self.accum(a, &da);
            }
            Op::BilinearSample { map, points } => {
                let ms = self.shape(map).to_vec();
                let (h, w, c) = (ms[0], ms[1], ms[2]);
                let mv = self.value(map).values().to_vec();
                let pv = self.value(points).values().to_vec();
                let p = pv.len() / 2;
                let mut dmap = vec![0.0; h * w * c];
                let mut dpts = vec![0.0; p * 2];
                for i in 0..p {
                    let (x, y) = (pv[2 * i], pv[2 * i + 1]);
                    let corners = bilinear_corners(x, y, h, w);
                    for (cy, cx, wgt) in corners {
                        let base = (cy * w + cx) * c;
                        for k in 0..c {
                            dmap[base + k] += wgt * g[i * c + k];
                        }
                    }
                    // d value / d (x, y): finite expression from the lerp
                    // weights; zero on clamped axes because both corners
                    // coincide there.
                    let (gx, gy) = bilinear_pos_grad(x, y, h, w, c, &mv, &g[i * c..(i + 1) * c]);
                    dpts[2 * i] = gx;
                    dpts[2 * i + 1] = gy;
                }
                self.accum(map, &dmap);
                self.accum(points, &dpts);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ---- helpers --------------------------------------------------------------

fn map(t: &DTensor, f: impl Fn(f64) -> f64) -> DTensor {
    DTensor::new(t.shape().to_vec(), t.values().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip_map(a: &DTensor, b: &DTensor, f: impl Fn(f64, f64) -> f64) -> DTensor {
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    DTensor::new(a.shape().to_vec(), values).unwrap()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
}

/// Corner pixels and lerp weights for a normalized point, half-pixel centers,
/// border clamp.
fn bilinear_corners(x: f64, y: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let x0f = px.floor();
    let y0f = py.floor();
    let tx = px - x0f;
    let ty = py - y0f;
    let clampx = |v: f64| (v.max(0.0) as usize).min(w - 1);
    let clampy = |v: f64| (v.max(0.0) as usize).min(h - 1);
    let (x0, x1) = (clampx(x0f), clampx(x0f + 1.0));
    let (y0, y1) = (clampy(y0f), clampy(y0f + 1.0));
    [
        (y0, x0, (1.0 - tx) * (1.0 - ty)),
        (y0, x1, tx * (1.0 - ty)),
        (y1, x0, (1.0 - tx) * ty),
        (y1, x1, tx * ty),
    ]
}

fn bilinear_pos_grad(x: f64, y: f64, h: usize, w: usize, c: usize, map: &[f64], g: &[f64]) -> (f64, f64) {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let x0f = px.floor();
    let y0f = py.floor();
    let tx = px - x0f;
    let ty = py - y0f;
    let clampx = |v: f64| (v.max(0.0) as usize).min(w - 1);
    let clampy = |v: f64| (v.max(0.0) as usize).min(h - 1);
    let (x0, x1) = (clampx(x0f), clampx(x0f + 1.0));
    let (y0, y1) = (clampy(y0f), clampy(y0f + 1.0));
    let at = |yy: usize, xx: usize, k: usize| map[(yy * w + xx) * c + k];
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (k, gk) in g.iter().enumerate() {
        let m00 = at(y0, x0, k);
        let m01 = at(y0, x1, k);
        let m10 = at(y1, x0, k);
        let m11 = at(y1, x1, k);
        // dv/dtx and dv/dty of the bilinear form
        let dtx = (1.0 - ty) * (m01 - m00) + ty * (m11 - m10);
        let dty = (1.0 - tx) * (m10 - m00) + tx * (m11 - m01);
        gx += gk * dtx * w as f64;
        gy += gk * dty * h as f64;
    }
    (gx, gy)
}
