use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tensor::{broadcast_index_map, broadcast_shape, numel, Tensor};

/// Additive logit applied at masked slots before normalization.
pub const MASK_FILL: f64 = -1e9;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        map_a: Vec<usize>,
        map_b: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Tanh(Var),
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Select {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording tape for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the tape order is already a
/// topological order and backward is a single reverse sweep. A graph is not
/// `Sync`; build one per thread.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode graph with a seeded dropout stream.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Learnable leaf; its gradient is retained after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Var {
        #[cfg(debug_assertions)]
        if !value.all_finite() && parents.iter().all(|p| self.nodes[p.0].value.all_finite()) {
            panic!("{}", TensorError::NonFinite(name));
        }
        #[cfg(not(debug_assertions))]
        let _ = name;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a learnable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Vec<usize>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<f64> = if sa == out && sb == out {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&out, &sa);
            let mb = broadcast_index_map(&out, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok((Tensor::new(out.clone(), data)?, out))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b], "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b], "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b], "mul"))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e * s).collect()).expect("same shape");
        self.push(t, Op::Scale(x, s), &[x], "scale")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e.max(0.0)).collect()).expect("same shape");
        self.push(t, Op::Relu(x), &[x], "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e.tanh()).collect()).expect("same shape");
        self.push(t, Op::Tanh(x), &[x], "tanh")
    }

    /// Inverted dropout. Identity (the same `Var`) in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().zip(&keep).map(|(a, k)| a * k).collect())?;
        Ok(self.push(t, Op::Dropout { x, keep }, &[x], "dropout"))
    }

    // ----- linear algebra ----------------------------------------------

    /// `x Wᵀ + b` over the last axis of `x`; `w` is `[n_out, n_in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let n_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || xs.is_empty() || ws[1] != n_in {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        let n_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "affine(bias)",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let m = numel(&xs) / n_in.max(1);
        let mut out = vec![0.0; m * n_out];
        gemm(m, n_in, n_out, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(n_out) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut os = xs;
        *os.last_mut().unwrap() = n_out;
        let t = Tensor::new(os, out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Affine { x, w, b }, &parents, "affine"))
    }

    /// Batched `a · b` with broadcast leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` (transpose of the last two axes of `b`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
        let map_a = broadcast_index_map(&batch, ba);
        let map_b = broadcast_index_map(&batch, bb);
        let nb = numel(&batch);
        let mut out = vec![0.0; nb * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for i in 0..nb {
            gemm(
                m,
                k,
                n,
                &ad[map_a[i] * m * k..],
                false,
                &bd[map_b[i] * k * n..],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut os = batch;
        os.extend([m, n]);
        let t = Tensor::new(os, out)?;
        let op = Op::MatMul {
            a,
            b,
            tb,
            m,
            k,
            n,
            map_a,
            map_b,
        };
        Ok(self.push(t, op, &[a, b], "matmul"))
    }

    // ----- normalization ------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis where `mask` (1 = invalid, broadcastable to
    /// `x`) excludes positions. Masked slots get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let t_len = *xs.last().ok_or(TensorError::InvalidArgument {
            op: "masked_softmax",
            msg: "scalar input".into(),
        })?;
        let rows = numel(&xs) / t_len.max(1);
        let row_map = match mask {
            Some(mk) => {
                let ms = mk.shape();
                if ms.is_empty() || *ms.last().unwrap() != t_len || broadcast_shape(&xs, ms).as_deref() != Some(&xs[..]) {
                    return Err(TensorError::ShapeMismatch {
                        op: "masked_softmax",
                        lhs: xs,
                        rhs: ms.to_vec(),
                    });
                }
                Some(broadcast_index_map(&xs[..xs.len() - 1], &ms[..ms.len() - 1]))
            }
            None => None,
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        let mut z = vec![0.0; t_len];
        for r in 0..rows {
            let src = &xd[r * t_len..(r + 1) * t_len];
            let mrow = row_map.as_ref().map(|map| {
                let mi = map[r];
                &mask.unwrap().data()[mi * t_len..(mi + 1) * t_len]
            });
            let mut any_valid = false;
            for t in 0..t_len {
                let invalid = mrow.is_some_and(|m| m[t] > 0.5);
                any_valid |= !invalid;
                z[t] = if invalid { src[t] + MASK_FILL } else { src[t] };
            }
            if !any_valid {
                return Err(TensorError::AllMasked { row: r });
            }
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * t_len..(r + 1) * t_len];
            let mut s = 0.0;
            for t in 0..t_len {
                dst[t] = (z[t] - mx).exp();
                s += dst[t];
            }
            for t in 0..t_len {
                dst[t] /= s;
                if mrow.is_some_and(|m| m[t] > 0.5) {
                    dst[t] = 0.0;
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(t, Op::Softmax(x), &[x], "masked_softmax"))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = numel(&xs) / d;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
            "layer_norm",
        ))
    }

    // ----- shape ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x], "reshape"))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", xs.len()),
            });
        }
        let os: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let src_idx = permute_source_index(&xs, perm);
        let xd = self.value(x).data();
        let out: Vec<f64> = src_idx.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new(os, out)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
            "permute",
        ))
    }

    /// Concatenation along `axis`; other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(TensorError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut os = first;
        os[axis] = total;
        let t = Tensor::new(os, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "concat",
        ))
    }

    /// For `x: [B, T, ...]`, picks `x[b, index[b], ...]` giving `[B, ...]`.
    pub fn select(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || index.len() != xs[0] || index.iter().any(|&i| i >= xs[1]) {
            return Err(TensorError::InvalidArgument {
                op: "select",
                msg: format!("index {index:?} invalid for shape {xs:?}"),
            });
        }
        let inner = numel(&xs[2..]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xs[0] * inner);
        for (b, &i) in index.iter().enumerate() {
            let off = (b * xs[1] + i) * inner;
            out.extend_from_slice(&xd[off..off + inner]);
        }
        let mut os = vec![xs[0]];
        os.extend_from_slice(&xs[2..]);
        let t = Tensor::new(os, out)?;
        Ok(self.push(
            t,
            Op::Select {
                x,
                index: index.to_vec(),
            },
            &[x],
            "select",
        ))
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean"))
    }

    // ----- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out_shape = nodes[i].value.shape();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    let shape = nodes[v.0].value.shape().to_vec();
                    if let Some(ga) = grad_slot(nodes, grads, v) {
                        if shape == out_shape {
                            ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                        } else {
                            for (o, &src) in broadcast_index_map(out_shape, &shape).iter().enumerate() {
                                ga[src] += s * g[o];
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let shape = nodes[v.0].value.shape().to_vec();
                    let oshape = nodes[other.0].value.shape().to_vec();
                    let od = nodes[other.0].value.data();
                    if let Some(ga) = grad_slot(nodes, grads, v) {
                        let map_v = broadcast_index_map(out_shape, &shape);
                        let map_o = broadcast_index_map(out_shape, &oshape);
                        for o in 0..g.len() {
                            ga[map_v[o]] += g[o] * od[map_o[o]];
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::Relu(x) => {
                let xd = nodes[x.0].value.data();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(xd) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((a, b), yv) in gx.iter_mut().zip(g).zip(y) {
                        *a += b * (1.0 - yv * yv);
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((a, b), k) in gx.iter_mut().zip(g).zip(keep) {
                        *a += b * k;
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let n_in = *xs.last().unwrap();
                let n_out = nodes[w.0].value.shape()[0];
                let m = numel(xs) / n_in.max(1);
                let xd = nodes[x.0].value.data();
                let wd = nodes[w.0].value.data();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    gemm(m, n_out, n_in, g, false, wd, false, gx, true);
                }
                if let Some(gw) = grad_slot(nodes, grads, *w) {
                    gemm(n_out, m, n_in, g, true, xd, false, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = grad_slot(nodes, grads, *b) {
                        for row in g.chunks(n_out) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                tb,
                m,
                k,
                n,
                map_a,
                map_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    for (bi, &ia) in map_a.iter().enumerate() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bd[map_b[bi] * k * n..];
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, gc, false, bs, !*tb, &mut ga[ia * m * k..(ia + 1) * m * k], true);
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for (bi, &ib) in map_b.iter().enumerate() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &ad[map_a[bi] * m * k..];
                        let dst = &mut gb[ib * k * n..(ib + 1) * k * n];
                        if *tb {
                            // B stored n×k: dB = dCᵀ · A
                            gemm(n, m, k, gc, true, asl, false, dst, true);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, asl, true, gc, false, dst, true);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let t_len = *out_shape.last().unwrap();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((gr, yr), dst) in g.chunks(t_len).zip(y.chunks(t_len)).zip(gx.chunks_mut(t_len)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for t in 0..t_len {
                            dst[t] += yr[t] * (gr[t] - dot);
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
                let d = *out_shape.last().unwrap();
                let gd = nodes[gamma.0].value.data();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(gg) = grad_slot(nodes, grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, *beta) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[*axis + 1..]);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    if let Some(gp) = grad_slot(nodes, grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Permute { x, perm } => {
                let xs = nodes[x.0].value.shape().to_vec();
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for (o, &src) in permute_source_index(&xs, perm).iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::Select { x, index } => {
                let xs = nodes[x.0].value.shape().to_vec();
                let inner = numel(&xs[2..]);
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for (b, &t) in index.iter().enumerate() {
                        let off = (b * xs[1] + t) * inner;
                        gx[off..off + inner]
                            .iter_mut()
                            .zip(&g[b * inner..(b + 1) * inner])
                            .for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Flat source index in `shape` for every flat index of the permuted output.
fn permute_source_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = numel(shape);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
