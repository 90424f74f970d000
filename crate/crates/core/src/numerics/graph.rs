//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in creation order, which is a topological order of the
//! computation, so the backward pass is a single reverse sweep. Parameters
//! are copied onto the tape as leaves and their gradients are added into the
//! owning [`ParamStore`] when [`Graph::backward`] runs. Calling `backward`
//! twice on the same loss therefore accumulates twice.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, for_each_block};
use super::params::{ParamId, ParamStore};
use super::tensor::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Floor applied to model probabilities inside the KL divergence.
pub const KL_Q_FLOOR: f64 = 1e-12;

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

enum Op<T: Scalar> {
    Constant,
    Param,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBroadcast {
        x: Var,
        y: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        inv_temp: T,
    },
    Gelu(Var),
    SplitHeads {
        x: Var,
        part: usize,
        parts: usize,
        heads: usize,
    },
    MergeHeads(Var),
    PrependTokens {
        x: Var,
        tokens: Vec<Var>,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        sample_weights: Vec<T>,
        probs: Vec<T>,
    },
    KlDiv {
        p: Var,
        q: Var,
    },
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        geom: Conv2dGeometry,
    },
    SpatialMean(Var),
    Reshape(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::gradients`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

/// Recorded computation for one forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) && !value.all_finite() {
            panic!("non-finite output from `{name}` on finite inputs");
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf with gradient tracking that is not backed by a store. Its
    /// gradient is only visible through [`Graph::gradients`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a store parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.tensor(id);
        self.nodes.push(Node {
            value: Tensor::from_vec(t.shape(), t.data().to_vec()).expect("valid param"),
            op: Op::Param,
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// `a[.., k] · b[k, n]`. Leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = sa.iter().product::<usize>() / k;
        let mut out = vec![T::zero(); rows * n];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push("matmul", value, Op::MatMul { a, b, rows, k, n }, &[a, b]))
    }

    /// Batched product over matching leading axes: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::dim("batch_matmul", &sa, &sb);
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let n = if trans_b {
            if sb[r - 1] != k {
                return Err(bad());
            }
            sb[r - 2]
        } else {
            if sb[r - 2] != k {
                return Err(bad());
            }
            sb[r - 1]
        };
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for_each_block(&mut out, m * n, m * n * k, |i, c| {
                let ab = &ad[i * m * k..(i + 1) * m * k];
                let bb = &bd[i * k * n..(i + 1) * k * n];
                if trans_b {
                    kernels::gemm_nt(ab, bb, c, m, k, n);
                } else {
                    kernels::gemm(ab, bb, c, m, k, n);
                }
            });
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        let value = Tensor::from_vec(&shape, out)?;
        let op = Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push("batch_matmul", value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push("add", value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push("mul", value, Op::Mul(a, b), &[a, b]))
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::dim("add_broadcast", sx, sy));
        }
        let inner = self.value(y).len();
        let yd = self.value(y).data();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(yd).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::from_vec(self.shape(x), data)?;
        Ok(self.push("add_broadcast", value, Op::AddBroadcast { x, y }, &[x, y]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor: T = lit(factor);
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same shape");
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    /// Normalizes over the last axis with biased variance; `eps` sits inside the root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::dim("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", &sx, self.shape(gamma)));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let eps: T = lit(eps);
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d;
        let dn: T = lit(d as f64);
        let mut out = vec![T::zero(); xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, o) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::from_vec(&sx, out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean: means,
            rstd: rstds,
        };
        Ok(self.push("layer_norm", value, op, &[x, gamma, beta]))
    }

    /// `softmax(x / temperature)` over the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let inv_temp: T = lit(1.0 / temperature);
        let c = *self.shape(x).last().expect("non-empty shape");
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(c).for_each(|row| softmax_row(row, inv_temp));
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push("softmax", value, Op::Softmax { x, inv_temp }, &[x]))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu(v).0).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same shape");
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// `[b, n, parts·d] → [b, heads, n, d/heads]`, taking chunk `part` of the last axis.
    pub fn split_heads(&mut self, x: Var, part: usize, parts: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || part >= parts || !s[2].is_multiple_of(parts * heads) {
            return Err(Error::dim("split_heads", &s, &[parts, heads]));
        }
        let (b, n, w) = (s[0], s[1], s[2]);
        let d = w / parts;
        let dh = d / heads;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * heads * n * dh];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..n {
                    let src = bi * n * w + t * w + part * d + h * dh;
                    let dst = ((bi * heads + h) * n + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let value = Tensor::from_vec(&[b, heads, n, dh], out)?;
        let op = Op::SplitHeads { x, part, parts, heads };
        Ok(self.push("split_heads", value, op, &[x]))
    }

    /// `[b, heads, n, dh] → [b, n, heads·dh]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("merge_heads", &s, &[4]));
        }
        let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for hi in 0..h {
                for t in 0..n {
                    let src = ((bi * h + hi) * n + t) * dh;
                    let dst = (bi * n + t) * h * dh + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let value = Tensor::from_vec(&[b, n, h * dh], out)?;
        Ok(self.push("merge_heads", value, Op::MergeHeads(x), &[x]))
    }

    /// Prepends the `[d]`-shaped `tokens`, in order, to every sequence of `x[b, n, d]`.
    pub fn prepend_tokens(&mut self, x: Var, tokens: &[Var]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("prepend_tokens", &s, &[3]));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        for &t in tokens {
            if self.shape(t) != [d] {
                return Err(Error::dim("prepend_tokens", &s, self.shape(t)));
            }
        }
        let k = tokens.len();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * (n + k) * d);
        for bi in 0..b {
            for &t in tokens {
                out.extend_from_slice(self.nodes[t.0].value.data());
            }
            out.extend_from_slice(&xd[bi * n * d..(bi + 1) * n * d]);
        }
        let value = Tensor::from_vec(&[b, n + k, d], out)?;
        let mut inputs = vec![x];
        inputs.extend_from_slice(tokens);
        let op = Op::PrependTokens {
            x,
            tokens: tokens.to_vec(),
        };
        Ok(self.push("prepend_tokens", value, op, &inputs))
    }

    /// `x[b, n, d] → x[:, index, :]`
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("select_token", &s, &[3]));
        }
        if index >= s[1] {
            return Err(Error::Index {
                what: "token",
                index,
                len: s[1],
            });
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * n + index) * d;
            out.extend_from_slice(&xd[off..off + d]);
        }
        let value = Tensor::from_vec(&[b, d], out)?;
        Ok(self.push("select_token", value, Op::SelectToken { x, index }, &[x]))
    }

    /// `x[r, d] → x[rows, d]`
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.is_empty() {
            return Err(Error::dim("gather_rows", &s, &[rows.len()]));
        }
        let d = s[1];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: r,
                    len: s[0],
                });
            }
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let value = Tensor::from_vec(&[rows.len(), d], out)?;
        let op = Op::GatherRows { x, rows: rows.to_vec() };
        Ok(self.push("gather_rows", value, op, &[x]))
    }

    /// Inverted dropout. A zero rate returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep: T = lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(self.shape(x), data)?;
        Ok(self.push("dropout", value, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_weighted(logits, targets, None)
    }

    /// Cross-entropy with optional per-class weights; the result is
    /// `Σ w[t_i]·nll_i / Σ w[t_i]`.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim("cross_entropy", &s, &[targets.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::dim("cross_entropy weights", &s, &[w.len()]));
            }
        }
        for &t in targets {
            if t >= c {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    len: c,
                });
            }
        }
        let sample_weights: Vec<T> = targets
            .iter()
            .map(|&t| lit(class_weights.map_or(1.0, |w| w[t])))
            .collect();
        let total_w: T = sample_weights.iter().copied().sum();
        if total_w <= T::zero() {
            return Err(Error::Parameter("cross_entropy weights sum to zero".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += sample_weights[i] * (lse - row[targets[i]]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let value = Tensor::scalar(loss / total_w);
        let sample_weights = sample_weights.into_iter().map(|w| w / total_w).collect();
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            sample_weights,
            probs,
        };
        debug_assert_eq!(b, targets.len());
        Ok(self.push("cross_entropy", value, op, &[logits]))
    }

    /// Mean over rows of `Σ p·ln(p/q)`. Zero `p` entries contribute nothing and
    /// `q` is floored at [`KL_Q_FLOOR`].
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (sp, sq) = (self.shape(p).to_vec(), self.shape(q).to_vec());
        if sp != sq || sp.len() != 2 {
            return Err(Error::dim("kl_divergence", &sp, &sq));
        }
        let c = sp[1];
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        if cfg!(debug_assertions) {
            for (name, d) in [("p", pd), ("q", qd)] {
                for (r, row) in d.chunks(c).enumerate() {
                    let sum: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum();
                    if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < T::zero()) {
                        return Err(Error::Validation(format!(
                            "kl_divergence: row {r} of {name} is not a distribution (sum {sum})"
                        )));
                    }
                }
            }
        }
        let floor: T = lit(KL_Q_FLOOR);
        let mut total = T::zero();
        for (&pv, &qv) in pd.iter().zip(qd) {
            if pv > T::zero() {
                total += pv * (pv.ln() - qv.max(floor).ln());
            }
        }
        let value = Tensor::scalar(total / lit(sp[0] as f64));
        Ok(self.push("kl_divergence", value, Op::KlDiv { p, q }, &[p, q]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / lit(t.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `x[b, c, h, w] ⊛ w[o, c, kh, kw] + bias[o]`
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, geom: Conv2dGeometry) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || self.shape(bias) != [sw[0]] {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        if geom.stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let cg = ConvShape::new(&sx, &sw, geom)?;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
        let plane = cg.oh * cg.ow;
        let mut out = vec![T::zero(); cg.b * cg.o * plane];
        for_each_block(&mut out, cg.o * plane, cg.o * plane * cg.ckk(), |bi, ob| {
            let cols = cg.im2col(&xd[bi * cg.in_len()..(bi + 1) * cg.in_len()]);
            for (oc, row) in ob.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[oc]);
            }
            kernels::gemm(wd, &cols, ob, cg.o, cg.ckk(), plane);
        });
        let value = Tensor::from_vec(&[cg.b, cg.o, cg.oh, cg.ow], out)?;
        Ok(self.push("conv2d", value, Op::Conv2d { x, w, bias, geom }, &[x, w, bias]))
    }

    /// `[b, c, h, w] → [b, c]` mean over the spatial axes.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("spatial_mean", &s, &[4]));
        }
        let plane = s[2] * s[3];
        let inv: T = lit(1.0 / plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[s[0], s[1]], data)?;
        Ok(self.push("spatial_mean", value, Op::SpatialMean(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push("reshape", value, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`, returning every node's gradient.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates the gradient of `loss` into every parameter it reaches.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if id.index() >= store.len() {
                return Err(Error::Usage(format!(
                    "graph references parameter {} missing from store",
                    id.index()
                )));
            }
            if let Some(g) = grads.get(v) {
                store.tensor_mut(id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param => {}
            &Op::MatMul { a, b, rows, k, n } => {
                if self.wants(a) {
                    let mut da = vec![T::zero(); rows * k];
                    kernels::gemm_nt(g, self.value(b).data(), &mut da, rows, n, k);
                    acc(grads, a, &da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(self.value(a).data(), g, &mut db, k, rows, n);
                    acc(grads, b, &db);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for_each_block(&mut da, m * k, m * n * k, |i, blk| {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bd[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            kernels::gemm(gb, bb, blk, m, n, k);
                        } else {
                            kernels::gemm_nt(gb, bb, blk, m, n, k);
                        }
                    });
                    acc(grads, a, &da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for_each_block(&mut db, k * n, m * n * k, |i, blk| {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &ad[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            kernels::gemm_tn(gb, ab, blk, n, m, k);
                        } else {
                            kernels::gemm_tn(ab, gb, blk, k, m, n);
                        }
                    });
                    acc(grads, b, &db);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    acc(grads, a, g);
                }
                if self.wants(b) {
                    acc(grads, b, g);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let da: Vec<T> = g.iter().zip(self.value(b).data()).map(|(&u, &v)| u * v).collect();
                    acc(grads, a, &da);
                }
                if self.wants(b) {
                    let db: Vec<T> = g.iter().zip(self.value(a).data()).map(|(&u, &v)| u * v).collect();
                    acc(grads, b, &db);
                }
            }
            &Op::AddBroadcast { x, y } => {
                if self.wants(x) {
                    acc(grads, x, g);
                }
                if self.wants(y) {
                    let inner = self.value(y).len();
                    let mut dy = vec![T::zero(); inner];
                    for row in g.chunks(inner) {
                        dy.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    acc(grads, y, &dy);
                }
            }
            &Op::Scale { x, factor } => {
                if self.wants(x) {
                    let dx: Vec<T> = g.iter().map(|&v| v * factor).collect();
                    acc(grads, x, &dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let d = gd.len();
                let dn: T = lit(d as f64);
                let mut dx = vec![T::zero(); xd.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..xd.len() / d {
                    let row = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gd[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let m1 = sum_dxhat / dn;
                    let m2 = sum_dxhat_xhat / dn;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    acc(grads, *x, &dx);
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, &dgamma);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, &dbeta);
                }
            }
            &Op::Softmax { x, inv_temp } => {
                if self.wants(x) {
                    let y = node.value.data();
                    let c = *node.value.shape().last().unwrap();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - s) * inv_temp;
                        }
                    }
                    acc(grads, x, &dx);
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let dx: Vec<T> = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| gv * gelu(v).1)
                        .collect();
                    acc(grads, x, &dx);
                }
            }
            &Op::SplitHeads { x, part, parts, heads } => {
                if self.wants(x) {
                    let s = self.shape(x);
                    let (b, n, w) = (s[0], s[1], s[2]);
                    let d = w / parts;
                    let dh = d / heads;
                    let mut dx = vec![T::zero(); b * n * w];
                    for bi in 0..b {
                        for h in 0..heads {
                            for t in 0..n {
                                let dst = bi * n * w + t * w + part * d + h * dh;
                                let src = ((bi * heads + h) * n + t) * dh;
                                dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    acc(grads, x, &dx);
                }
            }
            &Op::MergeHeads(x) => {
                if self.wants(x) {
                    let s = self.shape(x);
                    let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
                    let mut dx = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for hi in 0..h {
                            for t in 0..n {
                                let dst = ((bi * h + hi) * n + t) * dh;
                                let src = (bi * n + t) * h * dh + hi * dh;
                                dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    acc(grads, x, &dx);
                }
            }
            Op::PrependTokens { x, tokens } => {
                let s = self.shape(*x);
                let (b, n, d) = (s[0], s[1], s[2]);
                let k = tokens.len();
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(b * n * d);
                    for bi in 0..b {
                        let off = (bi * (n + k) + k) * d;
                        dx.extend_from_slice(&g[off..off + n * d]);
                    }
                    acc(grads, *x, &dx);
                }
                for (j, &t) in tokens.iter().enumerate() {
                    if self.wants(t) {
                        let mut dt = vec![T::zero(); d];
                        for bi in 0..b {
                            let off = (bi * (n + k) + j) * d;
                            dt.iter_mut().zip(&g[off..off + d]).for_each(|(a, &v)| *a += v);
                        }
                        acc(grads, t, &dt);
                    }
                }
            }
            &Op::SelectToken { x, index } => {
                if self.wants(x) {
                    let s = self.shape(x);
                    let (b, n, d) = (s[0], s[1], s[2]);
                    let mut dx = vec![T::zero(); b * n * d];
                    for bi in 0..b {
                        let off = (bi * n + index) * d;
                        dx[off..off + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                    }
                    acc(grads, x, &dx);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let d = self.shape(*x)[1];
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (i, &r) in rows.iter().enumerate() {
                        dx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(a, &v)| *a += v);
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let dx: Vec<T> = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    acc(grads, *x, &dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                sample_weights,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.shape(*logits)[1];
                    let mut dx = probs.clone();
                    for (i, row) in dx.chunks_mut(c).enumerate() {
                        row[targets[i]] -= T::one();
                        let w = sample_weights[i] * g[0];
                        row.iter_mut().for_each(|v| *v *= w);
                    }
                    acc(grads, *logits, &dx);
                }
            }
            &Op::KlDiv { p, q } => {
                let (pd, qd) = (self.value(p).data(), self.value(q).data());
                let scale = g[0] / lit(self.shape(p)[0] as f64);
                let floor: T = lit(KL_Q_FLOOR);
                if self.wants(p) {
                    let dp: Vec<T> = pd
                        .iter()
                        .zip(qd)
                        .map(|(&pv, &qv)| {
                            if pv > T::zero() {
                                (pv.ln() - qv.max(floor).ln() + T::one()) * scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    acc(grads, p, &dp);
                }
                if self.wants(q) {
                    let dq: Vec<T> = pd
                        .iter()
                        .zip(qd)
                        .map(|(&pv, &qv)| if qv > floor { -pv / qv * scale } else { T::zero() })
                        .collect();
                    acc(grads, q, &dq);
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    acc(grads, x, &vec![g[0]; self.value(x).len()]);
                }
            }
            &Op::Mean(x) => {
                if self.wants(x) {
                    let n = self.value(x).len();
                    acc(grads, x, &vec![g[0] / lit(n as f64); n]);
                }
            }
            &Op::Conv2d { x, w, bias, geom } => {
                let cg = ConvShape::new(self.shape(x), self.shape(w), geom).expect("validated");
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                let plane = cg.oh * cg.ow;
                if self.wants(bias) {
                    let mut db = vec![T::zero(); cg.o];
                    for blk in g.chunks(cg.o * plane) {
                        for (oc, row) in blk.chunks(plane).enumerate() {
                            db[oc] += row.iter().copied().sum::<T>();
                        }
                    }
                    acc(grads, bias, &db);
                }
                if self.wants(w) {
                    let mut dw = vec![T::zero(); wd.len()];
                    for bi in 0..cg.b {
                        let cols = cg.im2col(&xd[bi * cg.in_len()..(bi + 1) * cg.in_len()]);
                        let gb = &g[bi * cg.o * plane..(bi + 1) * cg.o * plane];
                        kernels::gemm_nt(gb, &cols, &mut dw, cg.o, plane, cg.ckk());
                    }
                    acc(grads, w, &dw);
                }
                if self.wants(x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    for_each_block(&mut dx, cg.in_len(), cg.o * plane * cg.ckk(), |bi, dxb| {
                        let gb = &g[bi * cg.o * plane..(bi + 1) * cg.o * plane];
                        let mut dcols = vec![T::zero(); cg.ckk() * plane];
                        kernels::gemm_tn(wd, gb, &mut dcols, cg.ckk(), cg.o, plane);
                        cg.col2im(&dcols, dxb);
                    });
                    acc(grads, x, &dx);
                }
            }
            &Op::SpatialMean(x) => {
                if self.wants(x) {
                    let s = self.shape(x);
                    let plane = s[2] * s[3];
                    let inv: T = lit(1.0 / plane as f64);
                    let dx: Vec<T> = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect();
                    acc(grads, x, &dx);
                }
            }
            &Op::Reshape(x) => {
                if self.wants(x) {
                    acc(grads, x, g);
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// In-place `softmax(row · inv_temp)` with max subtraction.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], inv_temp: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_temp).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// GELU value and derivative.
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c: T = lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a: T = lit(0.044_715);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (value, deriv)
}

#[derive(Clone, Copy)]
struct ConvShape {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvShape {
    fn new(sx: &[usize], sw: &[usize], geom: Conv2dGeometry) -> Result<Self> {
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (s, p) = (geom.stride, geom.padding);
        if h + 2 * p < kh || w + 2 * p < kw {
            return Err(Error::dim("conv2d", sx, sw));
        }
        Ok(Self {
            b,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: (h + 2 * p - kh) / s + 1,
            ow: (w + 2 * p - kw) / s + 1,
            stride: s,
            pad: p,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Source pixel offset for column row `r` at output position (`oy`, `ox`).
    #[inline]
    fn source(&self, r: usize, oy: usize, ox: usize) -> Option<usize> {
        let ch = r / (self.kh * self.kw);
        let ky = (r / self.kw) % self.kh;
        let kx = r % self.kw;
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((ch * self.h + y as usize) * self.w + x as usize)
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let plane = self.oh * self.ow;
        let mut cols = vec![T::zero(); self.ckk() * plane];
        for r in 0..self.ckk() {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    if let Some(src) = self.source(r, oy, ox) {
                        cols[r * plane + oy * self.ow + ox] = x[src];
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.oh * self.ow;
        for r in 0..self.ckk() {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    if let Some(dst) = self.source(r, oy, ox) {
                        dx[dst] += cols[r * plane + oy * self.ow + ox];
                    }
                }
            }
        }
    }
}
