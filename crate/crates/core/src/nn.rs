//! Dense f64 tensors with a tape for reverse-mode differentiation, plus the
//! layers shared by the chunk encoder and the document head.
//!
//! A [`Graph`] records every operation of one forward pass over a borrowed
//! [`ParamSet`]; [`Graph::backward`] then walks the tape in reverse and
//! returns parameter gradients. All matrices are row-major `rows x cols`;
//! vectors are `1 x n`.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Replace every tensor, keeping names and ids. Shapes must match.
    pub fn load_values(&mut self, values: Vec<Mat>) -> Result<(), String> {
        if values.len() != self.values.len() {
            return Err(format!("expected {} tensors, got {}", self.values.len(), values.len()));
        }
        for (i, (cur, new)) in self.values.iter().zip(&values).enumerate() {
            if cur.dim() != new.dim() {
                return Err(format!("tensor {} shape {:?} != {:?}", self.names[i], new.dim(), cur.dim()));
            }
        }
        self.values = values;
        Ok(())
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::ones((rows, cols)))
    }

    /// Glorot-uniform weights.
    pub fn glorot<R: Rng>(&mut self, rng: &mut R, name: &str, rows: usize, cols: usize) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.add(name, m)
    }

    pub fn normal<R: Rng>(&mut self, rng: &mut R, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.add(name, m)
    }
}

/// Gradients aligned with a [`ParamSet`]; `None` means the parameter was not
/// reached by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Option<Mat>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Grads { values: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.values[id.0].as_ref()
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        self.values[id.0] = Some(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Mat {
        self.values[id.0].get_or_insert_with(|| Mat::zeros(shape))
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (i, g) in other.values.iter().enumerate() {
            if let Some(g) = g {
                *self.slot(ParamId(i), g.dim()) += g;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.values.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    CausalSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows { table: Var, rows: Vec<usize> },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    Cce { probs: Var, target: usize },
    Bce { probs: Var, targets: Vec<f64> },
    Mean(Vec<Var>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the losses.
pub const PROB_CLAMP: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row_inplace(row: &mut [f64], upto: usize) {
    let max = row[..upto].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in &mut row[..upto] {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in &mut row[..upto] {
        *x /= sum;
    }
    for x in &mut row[upto..] {
        *x = 0.0;
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("computed node"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let cols = v.ncols();
        for mut row in v.rows_mut() {
            softmax_row_inplace(row.as_slice_mut().expect("contiguous"), cols);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row `i` attends to columns `0..=i` only.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let cols = v.ncols();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            softmax_row_inplace(row.as_slice_mut().expect("contiguous"), (i + 1).min(cols));
        }
        self.push(v, Op::CausalSoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNormRows { x: a, inv_std })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("equal column counts");
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), rows);
        self.push(v, Op::GatherRows {
            table,
            rows: rows.to_vec(),
        })
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        self.gather_rows(a, &[row])
    }

    /// Column-wise maximum over rows; ties go to the lowest row.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut argmax = vec![0usize; x.ncols()];
        let mut out = Mat::zeros((1, x.ncols()));
        for j in 0..x.ncols() {
            let mut best = x[[0, j]];
            for i in 1..x.nrows() {
                if x[[i, j]] > best {
                    best = x[[i, j]];
                    argmax[j] = i;
                }
            }
            out[[0, j]] = best;
        }
        self.push(out, Op::MaxPoolRows { x: a, argmax })
    }

    /// `-ln p[target]` on a `1 x u` probability row.
    pub fn cce(&mut self, probs: Var, target: usize) -> Var {
        let p = clamp_prob(self.value(probs)[[0, target]]);
        self.push(Mat::from_elem((1, 1), -p.ln()), Op::Cce { probs, target })
    }

    /// Mean binary cross-entropy of a `1 x u` probability row against 0/1 targets.
    pub fn bce(&mut self, probs: Var, targets: &[f64]) -> Var {
        let p = self.value(probs);
        let u = targets.len() as f64;
        let loss = targets
            .iter()
            .zip(p.row(0))
            .map(|(&y, &q)| {
                let q = clamp_prob(q);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / u;
        self.push(Mat::from_elem((1, 1), loss), Op::Bce {
            probs,
            targets: targets.to_vec(),
        })
    }

    pub fn mean(&mut self, scalars: &[Var]) -> Var {
        let total: f64 = scalars.iter().map(|&s| self.scalar(s)).sum();
        self.push(Mat::from_elem((1, 1), total / scalars.len() as f64), Op::Mean(scalars.to_vec()))
    }

    /// Gradients of the scalar node `out` with respect to every parameter.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = Grads::new(self.params.len());
        grads[out.0] = Some(Mat::ones(self.value(out).dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    *result.slot(*id, dy.dim()) += &dy;
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.dot(self.value(*b));
                    let db = dy.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::AddRow(a, row) => {
                    let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, dy);
                }
                Op::MulRow(a, row) => {
                    let dr = (&dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let da = &dy * self.value(*row);
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, da);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, dy * *f),
                Op::Gelu(a) => {
                    let mut da = self.value(*a).mapv(gelu_grad);
                    da *= &dy;
                    acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    let da = &dy * &y.mapv(|s| s * (1.0 - s));
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) | Op::CausalSoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut da = &dy * y;
                    let dots = da.sum_axis(Axis(1));
                    for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        row.zip_mut_with(&yr, |d, &yv| *d -= yv * dots[i]);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = node.value.as_ref().expect("value");
                    let n = y.ncols() as f64;
                    let mut dx = dy.clone();
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let mean_dy = row.sum() / n;
                        let mean_dyy = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        let is = inv_std[i];
                        row.zip_mut_with(&yr, |d, &yv| *d = is * (*d - mean_dy - yv * mean_dyy));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut dx = Mat::zeros(src.dim());
                    dx.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, dy.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::StackRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, dy.slice(s![row..row + h, ..]).to_owned());
                        row += h;
                    }
                }
                Op::GatherRows { table, rows } => {
                    let t = self.value(*table);
                    if let Op::Param(id) = self.nodes[table.0].op {
                        // Scatter straight into the parameter gradient.
                        let slot = result.slot(id, t.dim());
                        for (r, &src) in rows.iter().enumerate() {
                            let mut dst = slot.row_mut(src);
                            dst += &dy.row(r);
                        }
                    } else {
                        let mut dt = Mat::zeros(t.dim());
                        for (r, &src) in rows.iter().enumerate() {
                            let mut dst = dt.row_mut(src);
                            dst += &dy.row(r);
                        }
                        acc(&mut grads, *table, dt);
                    }
                }
                Op::MaxPoolRows { x, argmax } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (j, &i) in argmax.iter().enumerate() {
                        dx[[i, j]] += dy[[0, j]];
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Cce { probs, target } => {
                    let p = self.value(*probs);
                    let mut dp = Mat::zeros(p.dim());
                    let q = p[[0, *target]];
                    if q > PROB_CLAMP && q < 1.0 - PROB_CLAMP {
                        dp[[0, *target]] = -dy[[0, 0]] / q;
                    }
                    acc(&mut grads, *probs, dp);
                }
                Op::Bce { probs, targets } => {
                    let p = self.value(*probs);
                    let u = targets.len() as f64;
                    let mut dp = Mat::zeros(p.dim());
                    for (j, &y) in targets.iter().enumerate() {
                        let q = p[[0, j]];
                        if q > PROB_CLAMP && q < 1.0 - PROB_CLAMP {
                            dp[[0, j]] = -dy[[0, 0]] * (y / q - (1.0 - y) / (1.0 - q)) / u;
                        }
                    }
                    acc(&mut grads, *probs, dp);
                }
                Op::Mean(parts) => {
                    let share = dy[[0, 0]] / parts.len() as f64;
                    for &p in parts {
                        acc(&mut grads, p, Mat::from_elem((1, 1), share));
                    }
                }
            }
        }
        result
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: params.glorot(rng, &format!("{name}.weight"), fan_in, fan_out),
            bias: params.zeros(&format!("{name}.bias"), 1, fan_out),
        }
    }

    /// Zero-initialised map; every output starts at the bias.
    pub fn zeros(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: params.zeros(&format!("{name}.weight"), fan_in, fan_out),
            bias: params.zeros(&format!("{name}.bias"), 1, fan_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.ones(&format!("{name}.gamma"), 1, dim),
            beta: params.zeros(&format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let scaled = g.mul_row(n, gamma);
        g.add_row(scaled, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(params: &mut ParamSet, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(params, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(params, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(params, rng, &format!("{name}.value"), dim, dim),
            output: Linear::new(params, rng, &format!("{name}.output"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = if causal {
                g.causal_softmax_rows(scores)
            } else {
                g.softmax_rows(scores)
            };
            outs.push(g.matmul(probs, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, joined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(params: &mut ParamSet, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            inner: Linear::new(params, rng, &format!("{name}.inner"), dim, hidden),
            outer: Linear::new(params, rng, &format!("{name}.outer"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.gelu(h);
        self.outer.forward(g, h)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

/// Residual stream after each sublayer of a [`TransformerLayer`].
#[derive(Debug, Clone, Copy)]
pub struct LayerStates {
    pub after_attention: Var,
    pub output: Var,
}

impl TransformerLayer {
    pub fn new<R: Rng>(params: &mut ParamSet, rng: &mut R, name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        TransformerLayer {
            attention: MultiHeadAttention::new(params, rng, &format!("{name}.attention"), dim, heads),
            attention_norm: LayerNorm::new(params, &format!("{name}.attention_norm"), dim),
            ffn: FeedForward::new(params, rng, &format!("{name}.ffn"), dim, ffn_dim),
            ffn_norm: LayerNorm::new(params, &format!("{name}.ffn_norm"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> LayerStates {
        let a = self.attention.forward(g, x, causal);
        let r = g.add(x, a);
        let h = self.attention_norm.forward(g, r);
        let f = self.ffn.forward(g, h);
        let r2 = g.add(h, f);
        let out = self.ffn_norm.forward(g, r2);
        LayerStates {
            after_attention: h,
            output: out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences over every scalar of every parameter.
    fn check<F>(params: &ParamSet, build: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let mut g = Graph::new(params);
        let out = build(&mut g);
        let grads = g.backward(out);
        let eval = |p: &ParamSet| {
            let mut g = Graph::new(p);
            let o = build(&mut g);
            g.scalar(o)
        };
        let eps = 1e-5;
        let mut work = params.clone();
        for id in params.ids() {
            let shape = params.get(id).dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = work.get(id)[[r, c]];
                    work.get_mut(id)[[r, c]] = orig + eps;
                    let up = eval(&work);
                    work.get_mut(id)[[r, c]] = orig - eps;
                    let down = eval(&work);
                    work.get_mut(id)[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let analytic = grads.get(id).map_or(0.0, |m| m[[r, c]]);
                    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                    let diff = (analytic - numeric).abs();
                    assert!(
                        diff < 1e-9 || diff / denom < 1e-5,
                        "{} [{r},{c}]: analytic {analytic} numeric {numeric}",
                        params.name(id)
                    );
                }
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn transformer_layer_gradients() {
        for causal in [false, true] {
            let mut p = ParamSet::new();
            let mut r = rng();
            let layer = TransformerLayer::new(&mut p, &mut r, "l", 4, 2, 8);
            let x = p.normal(&mut r, "x", 3, 4, 1.0);
            let head = Linear::new(&mut p, &mut r, "head", 4, 3);
            check(&p, |g| {
                let xv = g.param(x);
                let st = layer.forward(g, xv, causal);
                let pooled = g.max_pool_rows(st.output);
                let logits = head.forward(g, pooled);
                let probs = g.softmax_rows(logits);
                g.cce(probs, 1)
            });
        }
    }

    #[test]
    fn gather_concat_sigmoid_bce_gradients() {
        let mut p = ParamSet::new();
        let mut r = rng();
        let table = p.normal(&mut r, "table", 5, 3, 1.0);
        let w = Linear::new(&mut p, &mut r, "w", 6, 2);
        check(&p, |g| {
            let t = g.param(table);
            let rows = g.gather_rows(t, &[4, 1, 4]);
            let a = g.slice_cols(rows, 0, 3);
            let first = g.select_row(a, 0);
            let second = g.select_row(a, 2);
            let cat = g.concat_cols(&[first, second]);
            let stacked = g.stack_rows(&[cat, cat]);
            let z = w.forward(g, stacked);
            let probs = g.sigmoid(z);
            let row = g.select_row(probs, 1);
            let l1 = g.bce(row, &[1.0, 0.0]);
            let row0 = g.select_row(probs, 0);
            let l2 = g.bce(row0, &[0.0, 1.0]);
            g.mean(&[l1, l2])
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let x = g.input(ndarray::array![[1.0, 2.0, 3.0], [-1.0, 0.0, 1000.0]]);
        let y = g.softmax_rows(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let c = g.causal_softmax_rows(x);
        assert_eq!(g.value(c)[[0, 0]], 1.0);
        assert_eq!(g.value(c)[[0, 1]], 0.0);
    }

    #[test]
    fn unreachable_params_have_no_gradient() {
        let mut p = ParamSet::new();
        let mut r = rng();
        let used = Linear::zeros(&mut p, "used", 2, 2);
        let unused = Linear::new(&mut p, &mut r, "unused", 2, 2);
        let mut g = Graph::new(&p);
        let x = g.input(Mat::zeros((1, 2)));
        let y = used.forward(&mut g, x);
        let probs = g.softmax_rows(y);
        let l = g.cce(probs, 0);
        let grads = g.backward(l);
        assert!(grads.get(unused.weight).is_none());
        assert!(grads.get(used.weight).unwrap().iter().all(|&v| v == 0.0));
    }
}
