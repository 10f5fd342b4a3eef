use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm_into, Scalar, Tensor};
use super::AdError;
use crate::seed::rng_for;

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameters in deterministic insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId, AdError> {
        if self.index.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, AdError> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.values.iter_mut()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }
}

/// Gradient per parameter, aligned with [`ParamStore`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<S> {
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_like(params: &ParamStore<S>) -> Self {
        Grads { tensors: params.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<S>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Val<S> {
    Owned(Tensor<S>),
    Param(usize),
}

enum Op<S> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, offsets: Vec<usize>, heads: usize, probs: Vec<S> },
    Dropout { x: Var, mask: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ranges: Vec<(usize, usize)>, probs: Vec<Vec<S>> },
    Sum(Var),
}

struct Node<S> {
    val: Val<S>,
    op: Op<S>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

/// Records a forward computation for reverse-mode differentiation.
///
/// Every op checks shapes and rejects non-finite outputs. Dropout masks are
/// drawn from a generator seeded at construction, so a forward pass is a
/// deterministic function of inputs, parameters, mode and seed.
pub struct Tape<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    dropout_rate: f64,
    rng: ChaCha8Rng,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>, train: bool, dropout_rate: f64, seed: u64) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            train,
            dropout_rate,
            rng: rng_for(seed, &[0xD809]),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        match &self.nodes[v.0].val {
            Val::Owned(t) => t,
            Val::Param(i) => &self.params.values[*i],
        }
    }

    fn push(&mut self, op: &'static str, t: Tensor<S>, node_op: Op<S>) -> Result<Var, AdError> {
        if !t.all_finite() {
            return Err(AdError::NonFinite { op });
        }
        self.nodes.push(Node { val: Val::Owned(t), op: node_op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var, AdError> {
        self.push("constant", t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { val: Val::Param(id.0), op: Op::Param(id.0) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var, AdError> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    fn shape_err(op: &'static str, detail: String) -> AdError {
        AdError::Shape { op, detail }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(Self::shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.matmul(tb);
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, AdError> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows != 1 || tb.cols != tx.cols {
            return Err(Self::shape_err("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut out = tx.clone();
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&tb.data) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, b))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        let c = S::from_f64(c);
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = *v * c);
        self.push("scale", out, Op::Scale(x, c))
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Result<Var, AdError> {
        let (c, a, half) = (S::from_f64(GELU_C), S::from_f64(GELU_A), S::from_f64(0.5));
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            let u = *v;
            *v = half * u * (S::ONE + (c * (u + a * u * u * u)).tanh());
        }
        self.push("gelu", out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AdError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols;
        if tg.shape() != (1, n) || tb.shape() != (1, n) || n == 0 {
            return Err(Self::shape_err("layer_norm", format!("{:?} with gain {:?}", tx.shape(), tg.shape())));
        }
        let inv_n = S::from_f64(1.0 / n as f64);
        let eps = S::from_f64(LN_EPS);
        let mut out = Tensor::zeros(tx.rows, n);
        let mut xhat = vec![S::ZERO; tx.rows * n];
        let mut rstd = vec![S::ZERO; tx.rows];
        for r in 0..tx.rows {
            let row = tx.row(r);
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            let rs = S::ONE / (var * inv_n + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                o[j] = h * tg.data[j] + tb.data[j];
            }
        }
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Rows of `x` selected by `idx` (embedding lookup, neighbor gathering).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, AdError> {
        let tx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows) {
            return Err(Self::shape_err("gather_rows", format!("row {bad} of {}", tx.rows)));
        }
        let out = tx.select_rows(&idx);
        self.push("gather_rows", out, Op::GatherRows { x, idx })
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var, AdError> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols,
            None => return Err(Self::shape_err("concat_rows", "no inputs".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(Self::shape_err("concat_rows", format!("{} vs {} columns", t.cols, cols)));
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push("concat_rows", Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    /// Multi-head attention over explicit neighbor lists.
    ///
    /// Query row `i` attends to key/value rows `offsets[i]..offsets[i+1]`;
    /// keys and values are per edge. Each head takes a contiguous slice of
    /// `d / heads` columns. Queries without edges produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, offsets: Vec<usize>, heads: usize) -> Result<Var, AdError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols;
        let ne = tk.rows;
        if heads == 0
            || d % heads != 0
            || tk.cols != d
            || tv.shape() != tk.shape()
            || offsets.len() != tq.rows + 1
            || offsets.first() != Some(&0)
            || offsets.last() != Some(&ne)
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Self::shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, {} offsets, {heads} heads", tq.shape(), tk.shape(), tv.shape(), offsets.len()),
            ));
        }
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(tq.rows, d);
        let mut probs = vec![S::ZERO; ne * heads];
        for i in 0..tq.rows {
            let (e0, e1) = (offsets[i], offsets[i + 1]);
            if e0 == e1 {
                continue;
            }
            let qi = tq.row(i);
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                let qh = &qi[hs.clone()];
                let mut max = None::<S>;
                for e in e0..e1 {
                    let kh = &tk.row(e)[hs.clone()];
                    let mut s = S::ZERO;
                    for j in 0..dh {
                        s += qh[j] * kh[j];
                    }
                    let s = s * scale;
                    probs[e * heads + h] = s;
                    max = Some(max.map_or(s, |m| m.max(s)));
                }
                let max = max.unwrap();
                let mut z = S::ZERO;
                for e in e0..e1 {
                    let p = (probs[e * heads + h] - max).exp();
                    probs[e * heads + h] = p;
                    z += p;
                }
                let inv = S::ONE / z;
                let o = &mut out.row_mut(i)[hs.clone()];
                for e in e0..e1 {
                    let p = probs[e * heads + h] * inv;
                    probs[e * heads + h] = p;
                    let vh = &tv.row(e)[hs.clone()];
                    for j in 0..dh {
                        o[j] += p * vh[j];
                    }
                }
            }
        }
        self.push("attention", out, Op::Attention { q, k, v, offsets, heads, probs })
    }

    /// Inverted dropout at the tape's rate; the identity outside training.
    pub fn dropout(&mut self, x: Var) -> Result<Var, AdError> {
        if !self.train || self.dropout_rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout_rate;
        let scale = S::from_f64(1.0 / keep);
        let n = self.value(x).data.len();
        let mask: Vec<S> = (0..n).map(|_| if self.rng.random::<f64>() < keep { scale } else { S::ZERO }).collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data.iter_mut().zip(&mask) {
            *o = *o * m;
        }
        self.push("dropout", out, Op::Dropout { x, mask })
    }

    /// Summed cross-entropy where row `i` is a softmax over the column range
    /// `ranges[i] = (start, len)` and `targets[i]` indexes within that range.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, ranges: Vec<(usize, usize)>) -> Result<Var, AdError> {
        let t = self.value(logits);
        if targets.len() != t.rows || ranges.len() != t.rows {
            return Err(Self::shape_err("cross_entropy", format!("{} rows, {} targets", t.rows, targets.len())));
        }
        let mut total = S::ZERO;
        let mut probs = Vec::with_capacity(t.rows);
        for r in 0..t.rows {
            let (start, len) = ranges[r];
            if len == 0 || start + len > t.cols || targets[r] >= len {
                return Err(Self::shape_err("cross_entropy", format!("row {r}: range {start}+{len}, target {}", targets[r])));
            }
            let row = &t.row(r)[start..start + len];
            let max = row.iter().copied().fold(row[0], S::max);
            let mut z = S::ZERO;
            let mut p: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
            for &v in &p {
                z += v;
            }
            total += z.ln() - (row[targets[r]] - max);
            let inv = S::ONE / z;
            p.iter_mut().for_each(|v| *v = *v * inv);
            probs.push(p);
        }
        self.push("cross_entropy", Tensor::from_vec(1, 1, vec![total]), Op::CrossEntropy { logits, targets, ranges, probs })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AdError> {
        let mut s = S::ZERO;
        for &v in &self.value(x).data {
            s += v;
        }
        self.push("sum", Tensor::from_vec(1, 1, vec![s]), Op::Sum(x))
    }

    /// Reverse pass from a scalar output. Returns gradients for every
    /// parameter (zeros where the output does not depend on it).
    pub fn backward(&self, out: Var) -> Result<Grads<S>, AdError> {
        if self.value(out).shape() != (1, 1) {
            return Err(Self::shape_err("backward", format!("output shape {:?}", self.value(out).shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::from_vec(1, 1, vec![S::ONE]));
        let mut result = Grads::zeros_like(self.params);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(p) => result.tensors[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    gemm_into(&g, false, tb, true, &mut ga, S::ZERO);
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    gemm_into(ta, true, &g, false, &mut gb, S::ZERO);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    gx.data.iter_mut().for_each(|v| *v = *v * *c);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let (c, a, half) = (S::from_f64(GELU_C), S::from_f64(GELU_A), S::from_f64(0.5));
                    let three = S::from_f64(3.0);
                    let tx = self.value(*x);
                    let mut gx = g;
                    for (gv, &u) in gx.data.iter_mut().zip(&tx.data) {
                        let t = (c * (u + a * u * u * u)).tanh();
                        let d = half * (S::ONE + t) + half * u * (S::ONE - t * t) * c * (S::ONE + three * a * u * u);
                        *gv = *gv * d;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let tg = self.value(*gain);
                    let n = g.cols;
                    let inv_n = S::from_f64(1.0 / n as f64);
                    let mut gx = Tensor::zeros(g.rows, n);
                    let mut gg = Tensor::zeros(1, n);
                    let mut gbias = Tensor::zeros(1, n);
                    let mut dxhat = vec![S::ZERO; n];
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut m1 = S::ZERO;
                        let mut m2 = S::ZERO;
                        for j in 0..n {
                            gg.data[j] += gr[j] * xh[j];
                            gbias.data[j] += gr[j];
                            dxhat[j] = gr[j] * tg.data[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        let o = gx.row_mut(r);
                        for j in 0..n {
                            o[j] = rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::GatherRows { x, idx } => {
                    let tx = self.value(*x);
                    let mut gx = Tensor::zeros(tx.rows, tx.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let gp = Tensor::from_vec(rows, cols, g.data[off..off + rows * cols].to_vec());
                        off += rows * cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Attention { q, k, v, offsets, heads, probs } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = tq.cols;
                    let dh = d / heads;
                    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
                    let mut gq = Tensor::zeros(tq.rows, d);
                    let mut gk = Tensor::zeros(tk.rows, d);
                    let mut gv = Tensor::zeros(tv.rows, d);
                    let mut dp = Vec::new();
                    for i in 0..tq.rows {
                        let (e0, e1) = (offsets[i], offsets[i + 1]);
                        let go = g.row(i);
                        for h in 0..*heads {
                            let hs = h * dh..(h + 1) * dh;
                            let goh = &go[hs.clone()];
                            dp.clear();
                            let mut dot = S::ZERO;
                            for e in e0..e1 {
                                let p = probs[e * heads + h];
                                let vh = &tv.row(e)[hs.clone()];
                                let gvh = &mut gv.row_mut(e)[hs.clone()];
                                let mut s = S::ZERO;
                                for j in 0..dh {
                                    gvh[j] += p * goh[j];
                                    s += goh[j] * vh[j];
                                }
                                dp.push(s);
                                dot += p * s;
                            }
                            for (n, e) in (e0..e1).enumerate() {
                                let ds = probs[e * heads + h] * (dp[n] - dot) * scale;
                                let kh = &tk.row(e)[hs.clone()];
                                let qh = &tq.row(i)[hs.clone()];
                                {
                                    let gqh = &mut gq.row_mut(i)[hs.clone()];
                                    for j in 0..dh {
                                        gqh[j] += ds * kh[j];
                                    }
                                }
                                let gkh = &mut gk.row_mut(e)[hs.clone()];
                                for j in 0..dh {
                                    gkh[j] += ds * qh[j];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (gv, &m) in gx.data.iter_mut().zip(mask) {
                        *gv = *gv * m;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, targets, ranges, probs } => {
                    let tl = self.value(*logits);
                    let up = g.data[0];
                    let mut gl = Tensor::zeros(tl.rows, tl.cols);
                    for r in 0..tl.rows {
                        let (start, _) = ranges[r];
                        let row = &mut gl.row_mut(r)[start..];
                        for (j, &p) in probs[r].iter().enumerate() {
                            row[j] = up * p;
                        }
                        row[targets[r]] = row[targets[r]] - up;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::Sum(x) => {
                    let tx = self.value(*x);
                    let gx = Tensor::from_vec(tx.rows, tx.cols, vec![g.data[0]; tx.data.len()]);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(result)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
