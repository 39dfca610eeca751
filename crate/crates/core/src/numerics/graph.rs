//! Reverse-mode tape.
//!
//! A [`Graph`] records every op executed through it together with whatever
//! the backward pass needs. Values are immutable once recorded. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every node that (transitively) depends on a `requires_grad`
//! leaf.
//!
//! Besides the usual building blocks the tape has a handful of fused ops for
//! the attention prior (Gaussian modes, mixing, position placement, row-norm
//! clipping, gate statistics) and for attention itself, each with a
//! hand-derived backward that is checked against finite differences.

use rand::Rng;

use super::array::Array;
use super::kernels::{self, gemm, Elementwise};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Unary(Var, Elementwise),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(Var),
    WeightedSumLast(Var, Vec<f64>),
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    ConcatLast(Var, Var),
    Attention(Box<AttentionSaved>),
    RowScale(Var, Var),
    ScalarMul(Var, Var),
    RepeatEach(Var, usize),
    WeightedPool(Var, Vec<f64>),
    GaussianModes {
        mu: Var,
        sigma: Var,
        lens: Vec<usize>,
    },
    Mix(Var, Var),
    Place {
        x: Var,
        starts: Vec<usize>,
        lens: Vec<usize>,
    },
    ClipRowNorm(Var, f64),
    GateFeatures {
        p: Var,
        w: Var,
        lens: Vec<usize>,
    },
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: Vec<f64>,
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Key visibility rule for [`Graph::attention`].
#[derive(Clone, Debug)]
pub struct AttentionMask {
    /// Query `i` may see key `j` only if `j <= i + (Lk - Lq)`.
    pub causal: bool,
    /// Per batch row, which keys are real tokens (`B * Lk` entries).
    pub key_valid: Option<Vec<bool>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Array> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Array::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient or zeros when the node did not influence the root.
    pub fn get_or_zeros(&self, v: Var) -> Array {
        self.get(v)
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }
}

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn unary(&mut self, x: Var, kind: Elementwise) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|&&v| kind.out_of_domain(v)) {
            return Err(Error::Domain(format!("{kind:?} of {bad}")));
        }
        let out = xv.map(|v| kind.apply(v));
        let n = self.needs(x);
        Ok(self.push(out, Op::Unary(x, kind), n))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Elementwise::Relu).expect("relu is total")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Elementwise::Gelu).expect("gelu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Elementwise::Sigmoid)
            .expect("sigmoid is total")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Elementwise::Square).expect("square is total")
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Elementwise::Abs).expect("abs is total")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Elementwise::Neg).expect("neg is total")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Elementwise::Sqrt)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Elementwise::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Elementwise::Exp).expect("exp is total")
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        av.check_same_shape(bv, what)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Array::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), n))
    }

    /// `x[..., j] + bias[j]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.last_dim();
        if bv.len() != n {
            return dim_err(format!("bias of {} for last axis {}", bv.len(), n));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let n = self.needs(x);
        self.push(out, Op::Affine(x, scale), n)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Array) -> Result<Var> {
        let xv = self.value(x);
        xv.check_same_shape(c, "mul_const")?;
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Array::new(xv.shape().to_vec(), data)?;
        let n = self.needs(x);
        Ok(self.push(out, Op::MulConst(x, c.data().to_vec()), n))
    }

    /// Elementwise sum with a constant array of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Array) -> Result<Var> {
        let xv = self.value(x);
        xv.check_same_shape(c, "add_const")?;
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Array::new(xv.shape().to_vec(), data)?;
        let n = self.needs(x);
        Ok(self.push(out, Op::AddConst(x), n))
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.ndim() != 2 {
            return dim_err(format!("matmul rhs must be 2-D, got {:?}", bv.shape()));
        }
        let k = av.last_dim();
        if av.ndim() == 0 || bv.shape()[0] != k {
            return dim_err(format!(
                "matmul inner dimensions disagree: {:?} · {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let m = leading(av.shape());
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Array::new(shape, out)?, Op::MatMul { a, b, m, k, n }, ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let n = self.needs(x);
        self.push(Array::scalar(s), Op::Sum(x), n)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / len)
    }

    /// `Σ_j w[..., j] x[..., j]` with constant weights; drops the last axis.
    pub fn weighted_sum_last(&mut self, x: Var, w: &Array) -> Result<Var> {
        let xv = self.value(x);
        xv.check_same_shape(w, "weighted_sum_last")?;
        let n = xv.last_dim();
        let data: Vec<f64> = xv
            .data()
            .chunks(n)
            .zip(w.data().chunks(n))
            .map(|(r, c)| r.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect();
        let mut shape = xv.shape()[..xv.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Array::new(shape, data)?,
            Op::WeightedSumLast(x, w.data().to_vec()),
            ng,
        ))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_mut(n) {
            kernels::softmax_row(row);
        }
        let ng = self.needs(x);
        self.push(out, Op::SoftmaxLast(x), ng)
    }

    /// Normalizes the last axis then applies `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != n || bv.len() != n {
            return dim_err(format!(
                "layernorm affine of {} / {} for width {}",
                gv.len(),
                bv.len(),
                n
            ));
        }
        let rows = xv.len() / n.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Array::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Inverted dropout. Returns `x` itself when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Array::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout(x, mask), ng))
    }

    /// Mean token cross-entropy over rows of `logits[..., V]`; `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.len() / v.max(1);
        if targets.len() != rows {
            return dim_err(format!("{} targets for {} logit rows", targets.len(), rows));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyTarget);
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, row) in lv.data().chunks(v).enumerate() {
            let Some(t) = targets[r] else { continue };
            if t >= v {
                return Err(Error::Range(format!(
                    "target {t} outside vocabulary of {v}"
                )));
            }
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / count as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Array::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Row lookup: `table[ids[i], :]`, laid out as `out_shape + [d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return dim_err("embedding table must be 2-D");
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        if out_shape.iter().product::<usize>() != ids.len() {
            return dim_err(format!("{} ids for shape {:?}", ids.len(), out_shape));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Range(format!(
                    "id {id} outside table of {rows} rows"
                )));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let ng = self.needs(table);
        Ok(self.push(
            Array::new(shape, data)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let n = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), n))
    }

    /// Concatenates two arrays along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (na, nb) = (av.last_dim(), bv.last_dim());
        if av.shape()[..av.ndim() - 1] != bv.shape()[..bv.ndim() - 1] {
            return dim_err(format!("concat of {:?} and {:?}", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(na).zip(bv.data().chunks(nb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Array::new(shape, data)?, Op::ConcatLast(a, b), ng))
    }

    /// Multi-head scaled dot-product attention. `q` is `[B, Lq, d]`, `k` and
    /// `v` are `[B, Lk, d]`. Queries with no visible key produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.ndim() != 3 || kv.ndim() != 3 || kv.shape() != vv.shape() {
            return dim_err("attention expects [B, L, d] operands");
        }
        let (b, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let lk = kv.shape()[1];
        if kv.shape()[0] != b || kv.shape()[2] != d || heads == 0 || d % heads != 0 {
            return dim_err(format!(
                "attention shapes q {:?} k {:?} with {heads} heads",
                qv.shape(),
                kv.shape()
            ));
        }
        if lk < lq && mask.causal {
            return dim_err("causal attention needs at least as many keys as queries");
        }
        if let Some(kvld) = &mask.key_valid {
            if kvld.len() != b * lk {
                return dim_err("key mask length");
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let offset = lk.saturating_sub(lq);
        let mut probs = vec![0.0; b * heads * lq * lk];
        let mut out = vec![0.0; b * lq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![0.0; lk];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..lq {
                    let qrow = &qd[(bi * lq + i) * d + h * dh..][..dh];
                    let limit = if mask.causal {
                        (i + offset + 1).min(lk)
                    } else {
                        lk
                    };
                    let mut any = false;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        let visible =
                            j < limit && mask.key_valid.as_ref().is_none_or(|m| m[bi * lk + j]);
                        if visible {
                            let krow = &kd[(bi * lk + j) * d + h * dh..][..dh];
                            let s = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                            any = true;
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    if !any {
                        continue;
                    }
                    let prow = &mut probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    let mut sum = 0.0;
                    for j in 0..lk {
                        let e = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        prow[j] = e;
                        sum += e;
                    }
                    let orow = &mut out[(bi * lq + i) * d + h * dh..][..dh];
                    for j in 0..lk {
                        prow[j] /= sum;
                        let p = prow[j];
                        if p != 0.0 {
                            let vrow = &vd[(bi * lk + j) * d + h * dh..][..dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Array::new(vec![b, lq, d], out)?,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                heads,
                probs,
            })),
            ng,
        ))
    }

    /// `x[n, :] * s[n]` for `x` of shape `[N, d]` (or `[.., d]` with N leading rows).
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let d = xv.last_dim();
        if leading(xv.shape()) != sv.len() {
            return dim_err(format!(
                "row_scale of {:?} by {} scales",
                xv.shape(),
                sv.len()
            ));
        }
        let mut out = xv.clone();
        for (row, &c) in out.data_mut().chunks_mut(d).zip(sv.data()) {
            for o in row {
                *o *= c;
            }
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::RowScale(x, s), ng))
    }

    /// `s * x` with a learnable single-element `s`.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return dim_err("scalar_mul expects a single-element scale");
        }
        let c = sv.item();
        let out = self.value(x).map(|v| c * v);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ScalarMul(x, s), ng))
    }

    /// `[B] -> [B * times]`, each entry repeated `times` times.
    pub fn repeat_each(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = xv
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let ng = self.needs(x);
        let len = data.len();
        self.push(
            Array::new(vec![len], data).unwrap(),
            Op::RepeatEach(x, times),
            ng,
        )
    }

    /// `out[b, :] = Σ_i w[b, i] h[b, i, :]` with constant weights `w: [B, L]`.
    pub fn weighted_pool(&mut self, h: Var, w: &Array) -> Result<Var> {
        let hv = self.value(h);
        if hv.ndim() != 3 || w.shape() != &hv.shape()[..2] {
            return dim_err(format!(
                "weighted_pool of {:?} with weights {:?}",
                hv.shape(),
                w.shape()
            ));
        }
        let (b, l, d) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for i in 0..l {
                let c = w.data()[bi * l + i];
                if c == 0.0 {
                    continue;
                }
                let row = &hv.data()[(bi * l + i) * d..][..d];
                for (o, x) in out[bi * d..][..d].iter_mut().zip(row) {
                    *o += c * x;
                }
            }
        }
        let ng = self.needs(h);
        Ok(self.push(
            Array::new(vec![b, d], out)?,
            Op::WeightedPool(h, w.data().to_vec()),
            ng,
        ))
    }

    /// Per-mode normalized Gaussians over positions `0..lens[b]`.
    ///
    /// `mu` and `sigma` are `[B, K]`; the output is `[B, K, max(lens)]`, zero
    /// past each row's length.
    pub fn gaussian_modes(&mut self, mu: Var, sigma: Var, lens: &[usize]) -> Result<Var> {
        let (mv, sv) = (self.value(mu), self.value(sigma));
        mv.check_same_shape(sv, "gaussian_modes")?;
        if mv.ndim() != 2 || mv.shape()[0] != lens.len() {
            return dim_err(format!(
                "gaussian_modes params {:?} for {} lengths",
                mv.shape(),
                lens.len()
            ));
        }
        if lens.contains(&0) {
            return dim_err("mixture over zero positions");
        }
        if let Some(s) = sv.data().iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Domain(format!("mode spread {s} must be positive")));
        }
        let (b, k) = (mv.shape()[0], mv.shape()[1]);
        let lmax = *lens.iter().max().unwrap();
        let mut out = vec![0.0; b * k * lmax];
        for bi in 0..b {
            for ki in 0..k {
                let row = &mut out[(bi * k + ki) * lmax..][..lens[bi]];
                kernels::gaussian_row(mv.data()[bi * k + ki], sv.data()[bi * k + ki], row);
            }
        }
        let ng = self.needs(mu) || self.needs(sigma);
        Ok(self.push(
            Array::new(vec![b, k, lmax], out)?,
            Op::GaussianModes {
                mu,
                sigma,
                lens: lens.to_vec(),
            },
            ng,
        ))
    }

    /// `P[b, i] = Σ_k w[b, k] pk[b, k, i]`.
    pub fn mix(&mut self, w: Var, pk: Var) -> Result<Var> {
        let (wv, pv) = (self.value(w), self.value(pk));
        if pv.ndim() != 3 || wv.shape() != &pv.shape()[..2] {
            return dim_err(format!(
                "mix weights {:?} with modes {:?}",
                wv.shape(),
                pv.shape()
            ));
        }
        let (b, k, l) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
        let mut out = vec![0.0; b * l];
        for bi in 0..b {
            for ki in 0..k {
                let c = wv.data()[bi * k + ki];
                let row = &pv.data()[(bi * k + ki) * l..][..l];
                for (o, p) in out[bi * l..][..l].iter_mut().zip(row) {
                    *o += c * p;
                }
            }
        }
        let ng = self.needs(w) || self.needs(pk);
        Ok(self.push(Array::new(vec![b, l], out)?, Op::Mix(w, pk), ng))
    }

    /// Writes `x[b, i]` (`i < lens[b]`) into position `starts[b] + i` of a
    /// zero `[B, width]` array.
    pub fn place(&mut self, x: Var, starts: &[usize], lens: &[usize], width: usize) -> Result<Var> {
        let xv = self.value(x);
        let b = starts.len();
        if xv.ndim() != 2 || xv.shape()[0] != b || lens.len() != b {
            return dim_err("place expects [B, Lc] with one start and length per row");
        }
        let lc = xv.shape()[1];
        let mut out = vec![0.0; b * width];
        for bi in 0..b {
            if lens[bi] > lc || starts[bi] + lens[bi] > width {
                return dim_err(format!(
                    "row {bi}: span {}..{} does not fit",
                    starts[bi],
                    starts[bi] + lens[bi]
                ));
            }
            out[bi * width + starts[bi]..][..lens[bi]]
                .copy_from_slice(&xv.data()[bi * lc..][..lens[bi]]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Array::new(vec![b, width], out)?,
            Op::Place {
                x,
                starts: starts.to_vec(),
                lens: lens.to_vec(),
            },
            ng,
        ))
    }

    /// Rescales each last-axis row so its 2-norm is at most `max_norm`.
    pub fn clip_row_norm(&mut self, x: Var, max_norm: f64) -> Var {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > max_norm {
                let c = max_norm / norm;
                row.iter_mut().for_each(|v| *v *= c);
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::ClipRowNorm(x, max_norm), ng)
    }

    /// Summary statistics of a prior and its mode weights, `[B, 4]`:
    /// entropy of `p[b, ..lens[b]]`, its maximum, the number of weights above
    /// `tau` (no gradient), and the entropy of the weights.
    pub fn gate_features(&mut self, p: Var, w: Var, lens: &[usize], tau: f64) -> Result<Var> {
        let (pv, wv) = (self.value(p), self.value(w));
        if pv.ndim() != 2
            || wv.ndim() != 2
            || pv.shape()[0] != lens.len()
            || wv.shape()[0] != lens.len()
        {
            return dim_err("gate_features expects p [B, L] and w [B, K]");
        }
        let (l, k) = (pv.shape()[1], wv.shape()[1]);
        let mut out = Vec::with_capacity(lens.len() * 4);
        for (bi, &n) in lens.iter().enumerate() {
            let row = &pv.data()[bi * l..][..n];
            let wrow = &wv.data()[bi * k..][..k];
            out.push(kernels::entropy(row));
            out.push(row.iter().copied().fold(0.0, f64::max));
            out.push(wrow.iter().filter(|&&x| x > tau).count() as f64);
            out.push(kernels::entropy(wrow));
        }
        let ng = self.needs(p) || self.needs(w);
        Ok(self.push(
            Array::new(vec![lens.len(), 4], out)?,
            Op::GateFeatures {
                p,
                w,
                lens: lens.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return dim_err(format!("backward root has shape {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if self.needs(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(t) = self.acc(grads, v) {
            for (i, o) in t.iter_mut().enumerate() {
                *o += f(i);
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, |i| g[i] * kind.derivative(xv[i], out[i]));
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |i| g[i]);
                self.acc_with(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |i| g[i]);
                self.acc_with(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |i| g[i] * bv[i]);
                self.acc_with(grads, *b, |i| g[i] * av[i]);
            }
            Op::AddBias(x, bias) => {
                self.acc_with(grads, *x, |i| g[i]);
                if let Some(t) = self.acc(grads, *bias) {
                    let n = t.len();
                    for row in g.chunks(n) {
                        for (o, v) in t.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Affine(x, s) => self.acc_with(grads, *x, |i| g[i] * s),
            Op::MulConst(x, c) => self.acc_with(grads, *x, |i| g[i] * c[i]),
            Op::AddConst(x) | Op::Reshape(x) => self.acc_with(grads, *x, |i| g[i]),
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(t) = self.acc(grads, *a) {
                    gemm(*m, *n, *k, g, false, bv, true, t, true);
                }
                if let Some(t) = self.acc(grads, *b) {
                    gemm(*k, *m, *n, av, true, g, false, t, true);
                }
            }
            Op::Sum(x) => self.acc_with(grads, *x, |_| g[0]),
            Op::WeightedSumLast(x, w) => {
                let n = self.value(*x).last_dim();
                self.acc_with(grads, *x, |i| g[i / n] * w[i]);
            }
            Op::SoftmaxLast(x) => {
                let n = node.value.last_dim();
                if let Some(t) = self.acc(grads, *x) {
                    for ((trow, grow), yrow) in t.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            trow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.last_dim();
                let gv = self.value(*gamma).data();
                if let Some(t) = self.acc(grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            t[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(t) = self.acc(grads, *beta) {
                    for grow in g.chunks(n) {
                        for j in 0..n {
                            t[j] += grow[j];
                        }
                    }
                }
                if let Some(t) = self.acc(grads, *x) {
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            t[r * n + j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Dropout(x, mask) => self.acc_with(grads, *x, |i| g[i] * mask[i]),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                if let Some(t) = self.acc(grads, *logits) {
                    for (r, tgt) in targets.iter().enumerate() {
                        let Some(tgt) = tgt else { continue };
                        for j in 0..v {
                            t[r * v + j] += scale * probs[r * v + j];
                        }
                        t[r * v + tgt] -= scale;
                    }
                }
            }
            Op::Embed { table, ids } => {
                let d = self.value(*table).last_dim();
                if let Some(t) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            t[id * d + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let (na, nb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let w = na + nb;
                self.acc_with(grads, *a, |i| g[(i / na) * w + i % na]);
                self.acc_with(grads, *b, |i| g[(i / nb) * w + na + i % nb]);
            }
            Op::Attention(saved) => self.backprop_attention(saved, g, grads),
            Op::RowScale(x, s) => {
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                let d = self.value(*x).last_dim();
                self.acc_with(grads, *x, |i| g[i] * sv[i / d]);
                if let Some(t) = self.acc(grads, *s) {
                    for (r, o) in t.iter_mut().enumerate() {
                        *o += (0..d).map(|j| g[r * d + j] * xv[r * d + j]).sum::<f64>();
                    }
                }
            }
            Op::ScalarMul(x, s) => {
                let c = self.value(*s).item();
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, |i| g[i] * c);
                if let Some(t) = self.acc(grads, *s) {
                    t[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::RepeatEach(x, times) => {
                if let Some(t) = self.acc(grads, *x) {
                    for (i, o) in t.iter_mut().enumerate() {
                        *o += g[i * times..(i + 1) * times].iter().sum::<f64>();
                    }
                }
            }
            Op::WeightedPool(h, w) => {
                let d = self.value(*h).last_dim();
                let l = self.value(*h).shape()[1];
                self.acc_with(grads, *h, |i| {
                    let row = i / d;
                    let bi = row / l;
                    w[row] * g[bi * d + i % d]
                });
            }
            Op::GaussianModes { mu, sigma, lens } => {
                let (mv, sv) = (self.value(*mu).data(), self.value(*sigma).data());
                let k = self.value(*mu).shape()[1];
                let lmax = node.value.shape()[2];
                let mut gmu = vec![0.0; mv.len()];
                let mut gsig = vec![0.0; sv.len()];
                for (bi, &n) in lens.iter().enumerate() {
                    for ki in 0..k {
                        let base = (bi * k + ki) * lmax;
                        let (m, s) = (mv[bi * k + ki], sv[bi * k + ki]);
                        let (mut gp, mut pa, mut pc, mut gpa, mut gpc) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for i in 0..n {
                            let p = out[base + i];
                            let dx = i as f64 - m;
                            let a = dx / (s * s);
                            let c = dx * dx / (s * s * s);
                            gp += g[base + i] * p;
                            pa += p * a;
                            pc += p * c;
                            gpa += g[base + i] * p * a;
                            gpc += g[base + i] * p * c;
                        }
                        gmu[bi * k + ki] = gpa - gp * pa;
                        gsig[bi * k + ki] = gpc - gp * pc;
                    }
                }
                self.acc_with(grads, *mu, |i| gmu[i]);
                self.acc_with(grads, *sigma, |i| gsig[i]);
            }
            Op::Mix(w, pk) => {
                let pv = self.value(*pk);
                let wv = self.value(*w).data();
                let (k, l) = (pv.shape()[1], pv.shape()[2]);
                if let Some(t) = self.acc(grads, *w) {
                    for (r, o) in t.iter_mut().enumerate() {
                        let bi = r / k;
                        *o += (0..l)
                            .map(|i| g[bi * l + i] * pv.data()[r * l + i])
                            .sum::<f64>();
                    }
                }
                self.acc_with(grads, *pk, |i| {
                    let r = i / l;
                    wv[r] * g[(r / k) * l + i % l]
                });
            }
            Op::Place { x, starts, lens } => {
                let lc = self.value(*x).shape()[1];
                let width = node.value.shape()[1];
                self.acc_with(grads, *x, |i| {
                    let (bi, j) = (i / lc, i % lc);
                    if j < lens[bi] {
                        g[bi * width + starts[bi] + j]
                    } else {
                        0.0
                    }
                });
            }
            Op::ClipRowNorm(x, max_norm) => {
                let xv = self.value(*x).data();
                let d = node.value.last_dim();
                if let Some(t) = self.acc(grads, *x) {
                    for ((trow, grow), xrow) in t.chunks_mut(d).zip(g.chunks(d)).zip(xv.chunks(d)) {
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > *max_norm {
                            let c = max_norm / norm;
                            let dot = xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>()
                                / (norm * norm);
                            for j in 0..d {
                                trow[j] += c * (grow[j] - xrow[j] * dot);
                            }
                        } else {
                            for j in 0..d {
                                trow[j] += grow[j];
                            }
                        }
                    }
                }
            }
            Op::GateFeatures { p, w, lens } => {
                let (pv, wv) = (self.value(*p), self.value(*w));
                let (l, k) = (pv.shape()[1], wv.shape()[1]);
                if let Some(t) = self.acc(grads, *p) {
                    for (bi, &n) in lens.iter().enumerate() {
                        let row = &pv.data()[bi * l..][..n];
                        let mut arg = 0;
                        for (i, &v) in row.iter().enumerate() {
                            if v > 0.0 {
                                t[bi * l + i] -= g[bi * 4] * (v.ln() + 1.0);
                            }
                            if v > row[arg] {
                                arg = i;
                            }
                        }
                        t[bi * l + arg] += g[bi * 4 + 1];
                    }
                }
                if let Some(t) = self.acc(grads, *w) {
                    for bi in 0..lens.len() {
                        for ki in 0..k {
                            let v = wv.data()[bi * k + ki];
                            if v > 0.0 {
                                t[bi * k + ki] -= g[bi * 4 + 3] * (v.ln() + 1.0);
                            }
                        }
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let (b, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let lk = kv.shape()[1];
        let heads = s.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; lk];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..lq {
                    let prow = &s.probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    let go = &g[(bi * lq + i) * d + h * dh..][..dh];
                    let mut dot = 0.0;
                    for j in 0..lk {
                        let p = prow[j];
                        if p == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let off = (bi * lk + j) * d + h * dh;
                        let vrow = &vv.data()[off..][..dh];
                        dp[j] = go.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        dot += p * dp[j];
                        for (t, x) in gv[off..][..dh].iter_mut().zip(go) {
                            *t += p * x;
                        }
                    }
                    let qoff = (bi * lq + i) * d + h * dh;
                    for j in 0..lk {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let koff = (bi * lk + j) * d + h * dh;
                        for c in 0..dh {
                            gq[qoff + c] += ds * kv.data()[koff + c];
                            gk[koff + c] += ds * qv.data()[qoff + c];
                        }
                    }
                }
            }
        }
        self.acc_with(grads, s.q, |i| gq[i]);
        self.acc_with(grads, s.k, |i| gk[i]);
        self.acc_with(grads, s.v, |i| gv[i]);
    }
}
