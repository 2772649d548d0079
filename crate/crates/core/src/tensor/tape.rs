use super::{gemm_acc, transpose2, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectPosition {
        x: Var,
        pos: usize,
    },
    SelectLast {
        x: Var,
        index: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Operands always precede their results, so reverse insertion order is a
/// valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let src: usize = idx
            .iter()
            .zip(axes)
            .map(|(&i, &a)| i * in_strides[a])
            .sum();
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_acc(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[..×d] + bias[d]`, broadcasting the bias over every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let d = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let bd = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bd).map(|(v, b)| v + b))
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Scale(x, factor), rg))
    }

    /// Adds a constant (non-differentiable) tensor, e.g. an attention mask.
    pub fn add_const(&mut self, x: Var, constant: &Tensor) -> Result<Var> {
        let sx = self.shape(x);
        if sx != constant.shape() {
            return Err(Error::shape("add_const", sx, constant.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(constant.data())
            .map(|(a, c)| a + c)
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = axes.len() == sx.len()
            && axes
                .iter()
                .all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape("permute", &sx, axes));
        }
        let (data, shape) = permute_data(self.value(x).data(), &sx, axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Row-wise layer normalization over the last dimension, then `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        for p in [gamma, beta] {
            let sp = self.shape(p);
            if sp.len() != 1 || sp[0] != d {
                return Err(Error::shape("layer_norm", &sx, sp));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let rows = xd.len() / d;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = Tensor::new(sx, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| gelu_scalar(a)).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gelu(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.tanh()).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Tanh(x), rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &a in row {
                let e = (a - max).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Gathers rows of `table[V×d]`; the result has shape `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("embedding", st, prefix));
        }
        let (vocab, d) = (st[0], st[1]);
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", prefix, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `x[b×s×d]` → `x[:, pos, :]` of shape `[b×d]`.
    pub fn select_position(&mut self, x: Var, pos: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(Error::shape("select_position", sx, &[pos]));
        }
        let (b, s, d) = (sx[0], sx[1], sx[2]);
        if pos >= s {
            return Err(Error::Index {
                op: "select_position",
                index: pos,
                bound: s,
            });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let off = (i * s + pos) * d;
            data.extend_from_slice(&xd[off..off + d]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![b, d], data)?, Op::SelectPosition { x, pos }, rg))
    }

    /// `x[..×k]` → `x[.., index]`, dropping the last axis.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::shape("select_last", &sx, &[index]));
        }
        let k = sx[sx.len() - 1];
        if index >= k {
            return Err(Error::Index {
                op: "select_last",
                index,
                bound: k,
            });
        }
        let data = self.value(x).data().chunks(k).map(|r| r[index]).collect();
        let rg = self.any_grad(&[x]);
        let out = Tensor::new(sx[..sx.len() - 1].to_vec(), data)?;
        Ok(self.push(out, Op::SelectLast { x, index }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::shape("softmax_cross_entropy", sl, &[targets.len()]));
        }
        let k = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: k,
            });
        }
        let b = targets.len();
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (row, &t) in self.value(logits).data().chunks(k).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|a| (a - lse).exp()));
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf gets an entry: the accumulated gradient if it
    /// is reachable from `loss`, zeros otherwise.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let bt = transpose2(self.value(*b).data(), k, n);
                    let mut da = vec![0.0; m * k];
                    gemm_acc(gd, &bt, &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da)?)?;
                }
                if self.requires_grad(*b) {
                    let at = transpose2(self.value(*a).data(), m, k);
                    let mut db = vec![0.0; k * n];
                    gemm_acc(&at, gd, &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(sb.to_vec(), db)?)?;
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        let bt = transpose2(&bd[i * k * n..(i + 1) * k * n], k, n);
                        gemm_acc(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bt,
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da)?)?;
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let at = transpose2(&ad[i * m * k..(i + 1) * m * k], m, k);
                        gemm_acc(
                            &at,
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(sb.to_vec(), db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?)?;
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?)?;
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*bias) {
                    let d = g.last_dim();
                    let mut db = vec![0.0; d];
                    for row in gd.chunks(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![d], db)?)?;
                }
            }
            Op::Scale(x, f) => {
                let d = gd.iter().map(|v| v * f).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?)?;
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone())?,
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.reshaped(&shape)?)?;
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (d, shape) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *x, Tensor::new(shape, d)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = g.last_dim();
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = Vec::with_capacity(gd.len());
                    let n = d as f64;
                    for ((grow, hrow), is) in gd.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for (dhj, hj) in dh.iter().zip(hrow) {
                            dx.push(is / n * (n * dhj - sum_dh - hj * sum_dh_h));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?)?;
                }
                if self.requires_grad(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![d], dg)?)?;
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![0.0; d];
                    for grow in gd.chunks(d) {
                        for (acc, v) in db.iter_mut().zip(grow) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *beta, Tensor::new(vec![d], db)?)?;
                }
            }
            Op::Gelu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?)?;
            }
            Op::Tanh(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?)?;
            }
            Op::Softmax(x) => {
                let k = g.last_dim();
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(k).zip(node.value.data().chunks(k)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?)?;
            }
            Op::Embedding { table, ids } => {
                let st = self.shape(*table).to_vec();
                let d = st[1];
                let mut dt = vec![0.0; st[0] * d];
                for (row, &id) in gd.chunks(d).zip(ids) {
                    for (acc, v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(st, dt)?)?;
            }
            Op::SelectPosition { x, pos } => {
                let sx = self.shape(*x).to_vec();
                let (s, d) = (sx[1], sx[2]);
                let mut dx = vec![0.0; sx.iter().product()];
                for (i, row) in gd.chunks(d).enumerate() {
                    let off = (i * s + pos) * d;
                    dx[off..off + d].copy_from_slice(row);
                }
                self.accumulate(grads, *x, Tensor::new(sx, dx)?)?;
            }
            Op::SelectLast { x, index } => {
                let sx = self.shape(*x).to_vec();
                let k = sx[sx.len() - 1];
                let mut dx = vec![0.0; sx.iter().product()];
                for (i, v) in gd.iter().enumerate() {
                    dx[i * k + index] = *v;
                }
                self.accumulate(grads, *x, Tensor::new(sx, dx)?)?;
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0]))?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.shape(*logits).to_vec();
                let k = shape[1];
                let scale = gd[0] / targets.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * k + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(shape, dl)?)?;
            }
        }
        Ok(())
    }
}
