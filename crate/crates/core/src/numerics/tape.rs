//! Reverse-mode differentiation over a dynamically recorded tape of coarse ops.
//!
//! Every value on the tape is a row-major matrix (`rows × cols`, scalars are
//! `[1]`). Parameters are borrowed from a [`ParameterStore`] rather than copied,
//! so building a tape for inference costs nothing beyond the activations.
//!
//! A tape built with `grad_enabled = false` computes the same values but keeps
//! no backward bookkeeping.

use rand::Rng;

use super::array::{log_sum_exp_f64, row_moments, softmax_in_place, Array};
use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a batched multi-head attention call.
///
/// Queries are laid out as `batch × q_len` rows, keys/values as `batch × k_len`
/// rows. `key_pad[b * k_len + j]` excludes key `j` of sequence `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_pad: Vec<bool>,
    pub causal: bool,
}

enum Value {
    Owned(Array),
    Param(usize),
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Mask {
        a: Var,
        mask: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MixRows {
        a: Var,
        offsets: Vec<usize>,
        entries: Vec<(usize, f32)>,
    },
    SelectRows {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f32>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f32>,
        smoothing: f32,
        norm: f32,
        lse: Vec<f32>,
    },
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
    /// Unrounded value of a scalar loss node.
    exact: Option<f64>,
}

pub struct Tape<'p> {
    store: Option<&'p ParameterStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    relus: Vec<Var>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParameterStore, grad_enabled: bool) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            relus: Vec::new(),
            grad_enabled,
        }
    }

    /// A tape with no parameter store; only constants can be leaves.
    pub fn detached(grad_enabled: bool) -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            relus: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn array(&self, v: Var) -> &Array {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(i) => self.store.expect("param without store").by_index(*i),
        }
    }

    pub fn value(&self, v: Var) -> &[f32] {
        self.array(v).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.array(v).shape()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let a = self.array(v);
        (a.rows(), a.cols())
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        let d = self.value(v);
        assert_eq!(d.len(), 1, "scalar() on a node with {} elements", d.len());
        d[0]
    }

    /// Like [`Tape::scalar`], but losses and their weighted sums keep the
    /// f64 value they were accumulated in.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        self.nodes[v.0].exact.unwrap_or_else(|| self.scalar(v) as f64)
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_exact(&mut self, value: f64, op: Op, inputs: &[Var]) -> Var {
        let v = self.push(Array::scalar(value as f32), op, inputs);
        self.nodes[v.0].exact = Some(value);
        v
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .store
            .and_then(|s| s.index_of(name))
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(self.param_at(idx))
    }

    pub fn param_at(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(idx),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
            exact: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[idx] = Some(v);
        v
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`), both viewed as matrices.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = self.rows_cols(a);
        let (br, bc) = self.rows_cols(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, false);
        self.push(
            Array::new(vec![m, n], out).unwrap(),
            Op::MatMul { a, b, trans_b },
            &[a, b],
        )
    }

    /// `x · w + b` with `w: [in × out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, k) = self.rows_cols(x);
        let wshape = self.shape(w);
        assert_eq!(wshape.len(), 2);
        assert_eq!(wshape[0], k, "linear input width {k} vs weight {:?}", wshape);
        let n = wshape[1];
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.len(), n);
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(m, k, n, self.value(x), false, self.value(w), false, &mut out, b.is_some());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Array::new(vec![m, n], out).unwrap(),
            Op::Linear { x, w, b },
            &inputs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add of mismatched sizes");
        let out: Vec<f32> = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Array::new(shape, out).unwrap(), Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out: Vec<f32> = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Array::new(shape, out).unwrap(), Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let v = self.push(Array::new(shape, out).unwrap(), Op::Relu(a), &[a]);
        self.relus.push(v);
        v
    }

    /// Which ReLU outputs are active, over every ReLU on the tape in order.
    /// Two points with the same pattern lie on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.relus
            .iter()
            .flat_map(|&v| self.value(v).iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Inverted dropout. A rate of zero returns `a` untouched.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f32, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(a).len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f32> = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(Array::new(shape, out).unwrap(), Op::Mask { a, mask }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let out = super::array::layer_norm(self.array(x), self.value(gain), self.value(bias))
            .expect("layer_norm shape");
        self.push(out, Op::LayerNorm { x, gain, bias }, &[x, gain, bias])
    }

    /// Gathers rows of `table` (`[V × d]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.rows_cols(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocab {
                    id,
                    vocab_size: vocab,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Array::new(vec![ids.len(), d], out).unwrap(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Output row `i` is `Σ w · a[src]` over `mix[i]`. A single `(src, 1.0)`
    /// entry is an exact row copy.
    pub fn mix_rows(&mut self, a: Var, mix: &[Vec<(usize, f32)>]) -> Var {
        let (rows, d) = self.rows_cols(a);
        let src = self.value(a);
        let mut out = vec![0.0f32; mix.len() * d];
        let mut offsets = Vec::with_capacity(mix.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for (i, terms) in mix.iter().enumerate() {
            let dst = &mut out[i * d..(i + 1) * d];
            for &(j, w) in terms {
                assert!(j < rows, "mix_rows source {j} out of {rows}");
                let s = &src[j * d..(j + 1) * d];
                if w == 1.0 && terms.len() == 1 {
                    dst.copy_from_slice(s);
                } else {
                    for (o, x) in dst.iter_mut().zip(s) {
                        *o += w * x;
                    }
                }
                entries.push((j, w));
            }
            offsets.push(entries.len());
        }
        self.push(
            Array::new(vec![mix.len(), d], out).unwrap(),
            Op::MixRows {
                a,
                offsets,
                entries,
            },
            &[a],
        )
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let mix: Vec<Vec<(usize, f32)>> = rows.iter().map(|&r| vec![(r, 1.0)]).collect();
        self.mix_rows(a, &mix)
    }

    /// Row-wise choice: `out[i] = take_a[i] ? a[i] : b[i]`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Var {
        let (rows, d) = self.rows_cols(a);
        assert_eq!(self.rows_cols(b), (rows, d));
        assert_eq!(take_a.len(), rows);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * d);
        for (i, &t) in take_a.iter().enumerate() {
            let src = if t { av } else { bv };
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            Array::new(vec![rows, d], out).unwrap(),
            Op::SelectRows {
                a,
                b,
                take_a: take_a.to_vec(),
            },
            &[a, b],
        )
    }

    /// Scaled dot-product attention per head with heads concatenated
    /// (no projections; those are separate `linear` calls).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (qr, d) = self.rows_cols(q);
        let AttentionLayout {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = layout;
        assert_eq!(qr, batch * q_len);
        assert_eq!(self.rows_cols(k), (batch * k_len, d));
        assert_eq!(self.rows_cols(v), (batch * k_len, d));
        assert_eq!(d % heads, 0);
        assert_eq!(layout.key_pad.len(), batch * k_len);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0f32; qr * d];
        let mut probs = vec![0.0f32; batch * heads * q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qi = &qv[(b * q_len + i) * d + off..][..dh];
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let mut any = false;
                    for (j, pj) in p.iter_mut().enumerate() {
                        if layout.key_pad[b * k_len + j] || (layout.causal && j > i) {
                            *pj = f32::NEG_INFINITY;
                        } else {
                            let kj = &kv[(b * k_len + j) * d + off..][..dh];
                            *pj = dot(qi, kj) * scale;
                            any = true;
                        }
                    }
                    if !any {
                        p.fill(0.0);
                        continue;
                    }
                    softmax_in_place(p);
                    let o = &mut out[(b * q_len + i) * d + off..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj != 0.0 {
                            let vj = &vv[(b * k_len + j) * d + off..][..dh];
                            for (oo, x) in o.iter_mut().zip(vj) {
                                *oo += pj * x;
                            }
                        }
                    }
                }
            }
        }
        let keep = if self.grad_enabled { probs } else { Vec::new() };
        self.push(
            Array::new(vec![qr, d], out).unwrap(),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs: keep,
            },
            &[q, k, v],
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.array(a).clone();
        out.clear_grad();
        let c = out.cols();
        for row in out.data_mut().chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Weighted mean token cross-entropy with optional label smoothing.
    ///
    /// Rows with weight zero contribute nothing, and their logit gradient
    /// stays exactly zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
        smoothing: f32,
        what: &'static str,
    ) -> Result<Var> {
        let (n, vocab) = self.rows_cols(logits);
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let norm: f32 = weights.iter().sum();
        if norm <= 0.0 {
            return Err(Error::DegenerateBatch(what));
        }
        let z = self.value(logits);
        let mut lse = vec![0.0f32; n];
        let mut total = 0.0f64;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            if t >= vocab {
                return Err(Error::OutOfVocab {
                    id: t,
                    vocab_size: vocab,
                });
            }
            let row = &z[i * vocab..(i + 1) * vocab];
            let l = log_sum_exp_f64(row);
            lse[i] = l as f32;
            let nll = l - row[t] as f64;
            let loss = if smoothing > 0.0 {
                let mean_z = row.iter().map(|&x| x as f64).sum::<f64>() / vocab as f64;
                (1.0 - smoothing as f64) * nll + smoothing as f64 * (l - mean_z)
            } else {
                nll
            };
            total += weights[i] as f64 * loss;
        }
        let value = total / norm as f64;
        Ok(self.push_exact(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
                norm,
                lse,
            },
            &[logits],
        ))
    }

    /// `Σ c · x` over single-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, c)| c as f64 * self.scalar_f64(v)).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push_exact(total, Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Backpropagates from a single-element node. Returns one gradient per
    /// store parameter, in store order; parameters off the path get zeros.
    pub fn backward(&self, loss: Var) -> Result<Vec<Vec<f32>>> {
        let mut grads = self.backward_all(loss)?;
        let store = self
            .store
            .ok_or_else(|| Error::Invariant("backward on a detached tape".into()))?;
        let mut out: Vec<Vec<f32>> = Vec::with_capacity(store.len());
        for idx in 0..store.len() {
            let g = self.param_vars[idx]
                .and_then(|v| grads[v.0].take())
                .unwrap_or_else(|| vec![0.0; store.by_index(idx).len()]);
            out.push(g);
        }
        Ok(out)
    }

    /// Gradient with respect to every node (None where nothing flowed).
    pub fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<f32>>>> {
        if !self.grad_enabled {
            return Err(Error::Invariant("backward on a no-grad tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        if !self.value(loss)[0].is_finite() {
            return Err(Error::NonFinite(format!("loss {}", self.value(loss)[0])));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.rows_cols(*a);
                let n = g.len() / m;
                if self.needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    // dA = dC · Bᵀ  (or dC · B when B was used transposed)
                    gemm(m, n, k, g, false, self.value(*b), !trans_b, ga, true);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    if *trans_b {
                        // B is [n × k]: dB = dCᵀ · A
                        gemm(n, m, k, g, true, self.value(*a), false, gb, true);
                    } else {
                        gemm(k, m, n, self.value(*a), true, g, false, gb, true);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.rows_cols(*x);
                let n = g.len() / m;
                if self.needs(*x) {
                    let gx = acc(grads, *x, m * k);
                    gemm(m, n, k, g, false, self.value(*w), true, gx, true);
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, k * n);
                    gemm(k, m, n, self.value(*x), true, g, false, gw, true);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = acc(grads, *b, n);
                        for row in g.chunks_exact(n) {
                            for (o, x) in gb.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    add_into(grads, self, *v, g);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += s * x;
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let y = self.value(Var(i));
                    let ga = acc(grads, *a, g.len());
                    for ((o, x), yv) in ga.iter_mut().zip(g).zip(y) {
                        if *yv > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mask { a, mask } => {
                if self.needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((o, x), m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += x * m;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (rows, c) = self.rows_cols(*x);
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut dgain = vec![0.0f32; c];
                let mut dbias = vec![0.0f32; c];
                let mut dx = vec![0.0f32; rows * c];
                let mut xhat = vec![0.0f32; c];
                let mut dxhat = vec![0.0f32; c];
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let (mean, rstd) = row_moments(row);
                    let mut s1 = 0.0f32;
                    let mut s2 = 0.0f32;
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let inv_c = 1.0 / c as f32;
                    for j in 0..c {
                        dx[r * c + j] = rstd * (dxhat[j] - s1 * inv_c - xhat[j] * s2 * inv_c);
                    }
                }
                add_owned(grads, self, *x, dx);
                add_owned(grads, self, *gain, dgain);
                add_owned(grads, self, *bias, dbias);
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let (vocab, d) = self.rows_cols(*table);
                    let gt = acc(grads, *table, vocab * d);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d])
                        {
                            *o += x;
                        }
                    }
                }
            }
            Op::MixRows {
                a,
                offsets,
                entries,
            } => {
                if self.needs(*a) {
                    let (rows, d) = self.rows_cols(*a);
                    let ga = acc(grads, *a, rows * d);
                    for r in 0..offsets.len() - 1 {
                        let gr = &g[r * d..(r + 1) * d];
                        for &(j, w) in &entries[offsets[r]..offsets[r + 1]] {
                            for (o, x) in ga[j * d..(j + 1) * d].iter_mut().zip(gr) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
            Op::SelectRows { a, b, take_a } => {
                let d = g.len() / take_a.len();
                for (v, want) in [(a, true), (b, false)] {
                    if self.needs(*v) {
                        let gv = acc(grads, *v, g.len());
                        for (r, &t) in take_a.iter().enumerate() {
                            if t == want {
                                for (o, x) in gv[r * d..(r + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                    *o += x;
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.backprop_attention(*q, *k, *v, layout, probs, g, grads),
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = self.value(Var(i));
                    let c = self.array(Var(i)).cols();
                    let ga = acc(grads, *a, g.len());
                    for ((yr, gr), or) in y
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(ga.chunks_exact_mut(c))
                    {
                        let s: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yy), gg) in or.iter_mut().zip(yr).zip(gr) {
                            *o += yy * (gg - s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                norm,
                lse,
            } => {
                if self.needs(*logits) {
                    let (n, vocab) = self.rows_cols(*logits);
                    let z = self.value(*logits);
                    let gl = acc(grads, *logits, n * vocab);
                    let uniform = smoothing / vocab as f32;
                    for r in 0..n {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let scale = g[0] * weights[r] / norm;
                        let zr = &z[r * vocab..(r + 1) * vocab];
                        let out = &mut gl[r * vocab..(r + 1) * vocab];
                        for (c, (o, &zv)) in out.iter_mut().zip(zr).enumerate() {
                            let p = (zv - lse[r]).exp();
                            let target = if c == targets[r] { 1.0 - smoothing } else { 0.0 };
                            *o += scale * (p - target - uniform);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.needs(v) {
                        acc(grads, v, 1)[0] += c * g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (qr, d) = self.rows_cols(q);
        let AttentionLayout {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = *layout;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0f32; qr * d];
        let mut dk = vec![0.0f32; batch * k_len * d];
        let mut dv = vec![0.0f32; batch * k_len * d];
        let mut dp = vec![0.0f32; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let go = &g[(b * q_len + i) * d + off..][..dh];
                    let mut s = 0.0f32;
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let row = (b * k_len + j) * d + off;
                        dp[j] = dot(go, &vv[row..row + dh]);
                        s += p[j] * dp[j];
                        axpy(&mut dv[row..row + dh], p[j], go);
                    }
                    let qrow = (b * q_len + i) * d + off;
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let row = (b * k_len + j) * d + off;
                        axpy(&mut dq[qrow..qrow + dh], ds, &kv[row..row + dh]);
                        axpy(&mut dk[row..row + dh], ds, &qv[qrow..qrow + dh]);
                    }
                }
            }
        }
        add_owned(grads, self, q, dq);
        add_owned(grads, self, k, dk);
        add_owned(grads, self, v, dv);
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f32>>], tape: &Tape<'_>, v: Var, delta: &[f32]) {
    if !tape.needs(v) {
        return;
    }
    match &mut grads[v.0] {
        Some(gv) => {
            for (o, x) in gv.iter_mut().zip(delta) {
                *o += x;
            }
        }
        slot => *slot = Some(delta.to_vec()),
    }
}

/// Like `add_into` but takes ownership so a first contribution is moved
/// rather than copied into a fresh zeroed buffer.
fn add_owned(grads: &mut [Option<Vec<f32>>], tape: &Tape<'_>, v: Var, delta: Vec<f32>) {
    if !tape.needs(v) {
        return;
    }
    match &mut grads[v.0] {
        Some(gv) => {
            for (o, x) in gv.iter_mut().zip(&delta) {
                *o += x;
            }
        }
        slot => *slot = Some(delta),
    }
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `C (+)= op(A) · op(B)` for logical `A: [m × k]`, `B: [k × n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f32]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_and_transpose() {
        let mut t = Tape::detached(false);
        let a = t.constant(arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = t.constant(arr(&[3, 2], &[1., 0., 0., 1., 1., 1.]));
        let c = t.matmul(a, b, false);
        assert_eq!(t.value(c), &[4., 5., 10., 11.]);
        let bt = t.constant(arr(&[2, 3], &[1., 0., 1., 0., 1., 1.]));
        let c2 = t.matmul(a, bt, true);
        assert_eq!(t.value(c2), &[4., 5., 10., 11.]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut t = Tape::detached(false);
        let z = t.constant(Array::zeros(vec![1, 7]));
        let l = t.cross_entropy(z, &[3], &[1.0], 0.0, "test").unwrap();
        assert!((t.scalar(l) - (7f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_limit() {
        let mut t = Tape::detached(false);
        let z = t.constant(arr(&[1, 3], &[0., 60., 0.]));
        let l = t.cross_entropy(z, &[1], &[1.0], 0.0, "test").unwrap();
        assert!(t.scalar(l) < 1e-20);
    }

    #[test]
    fn cross_entropy_all_masked_is_degenerate() {
        let mut t = Tape::detached(false);
        let z = t.constant(Array::zeros(vec![2, 3]));
        assert!(matches!(
            t.cross_entropy(z, &[0, 1], &[0.0, 0.0], 0.0, "x"),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_scalar_loop_with_masked_rows() {
        let z = [
            0.3f32, -1.1, 2.0, 0.5, -0.7, 1.4, 0.2, -0.3, 0.9, 0.0, -2.0, 0.8, 1.7, -0.5, 0.1,
        ];
        let targets = [2usize, 4, 0];
        let weights = [1.0f32, 0.0, 1.0];
        let store = ParameterStore::new();
        let mut t = Tape::new(&store, true);
        let zv = t.constant(arr(&[3, 5], &z));
        let l = t.cross_entropy(zv, &targets, &weights, 0.0, "x").unwrap();
        // oracle
        let mut expect = 0.0f64;
        for r in [0usize, 2] {
            let row: Vec<f64> = z[r * 5..r * 5 + 5].iter().map(|&x| x as f64).collect();
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            expect += lse - row[targets[r]];
        }
        expect /= 2.0;
        assert!((t.scalar(l) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut t = Tape::detached(false);
        let q = t.constant(arr(&[2, 4], &[1., -2., 3., 0.5, 9., 9., -9., 1.]));
        let k = t.constant(arr(&[1, 4], &[0.3, 0.1, -0.2, 0.4]));
        let v = t.constant(arr(&[1, 4], &[5., 6., 7., 8.]));
        let layout = AttentionLayout {
            batch: 1,
            q_len: 2,
            k_len: 1,
            heads: 2,
            key_pad: vec![false],
            causal: false,
        };
        let o = t.attention(q, k, v, layout);
        assert_eq!(t.value(o), &[5., 6., 7., 8., 5., 6., 7., 8.]);
    }

    #[test]
    fn attention_identical_keys_split_evenly() {
        let store = ParameterStore::new();
        let mut t = Tape::new(&store, true);
        let q = t.constant(arr(&[1, 2], &[0.7, -0.2]));
        let k = t.constant(arr(&[2, 2], &[1., 2., 1., 2.]));
        let v = t.constant(arr(&[2, 2], &[2., 0., 0., 4.]));
        let layout = AttentionLayout {
            batch: 1,
            q_len: 1,
            k_len: 2,
            heads: 1,
            key_pad: vec![false, false],
            causal: false,
        };
        let o = t.attention(q, k, v, layout);
        assert_eq!(t.value(o), &[1.0, 2.0]);
        // the attention node is the last one; its saved probabilities are 0.5/0.5
        match &t.nodes[o.0].op {
            Op::Leaf => {}
            Op::Attention { probs, .. } => assert_eq!(probs, &[0.5, 0.5]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn select_rows_takes_exact_copies() {
        let mut t = Tape::detached(false);
        let a = t.constant(arr(&[2, 2], &[1., 2., 3., 4.]));
        let b = t.constant(arr(&[2, 2], &[5., 6., 7., 8.]));
        let s = t.select_rows(a, b, &[false, true]);
        assert_eq!(t.value(s), &[5., 6., 3., 4.]);
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut t = Tape::detached(false);
        let table = t.constant(Array::zeros(vec![4, 2]));
        assert!(matches!(
            t.embedding(table, &[1, 4]),
            Err(Error::OutOfVocab { id: 4, .. })
        ));
    }
}
