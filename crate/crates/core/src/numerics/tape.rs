//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in exact reverse order and *adds* the result into the gradient slot
//! of every leaf created with `requires_grad`. Calling `backward` twice
//! without [`Tape::zero_grad`] therefore doubles leaf gradients.
//!
//! A tape is confined to one thread; independent tapes may run in parallel.

use super::kernels::{self, ConvGeom};
use super::tensor::{nchw, Tensor};
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
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Square(Var),
    Upsample2x(Var),
    Reshape(Var),
    TransposeLast2(Var),
    ConcatChannels(Vec<Var>),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    visited: Vec<Var>,
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

    /// Records a leaf. Its gradient is kept iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Node order visited by the last `backward` call.
    pub fn visited(&self) -> &[Var] {
        &self.visited
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = nchw(self.value(x), "conv2d")?;
        let (cout, wcin, k) = match *self.shape(w) {
            [co, ci, k1, k2] if k1 == k2 => (co, ci, k1),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    "weight",
                    format!("expected [C_out, C_in, k, k], got {s:?}"),
                ))
            }
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                1,
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    "bias",
                    format!("expected [{cout}], got {:?}", self.shape(b)),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < k {
            return Err(Error::shape("conv2d", 2, format!("padded height {} < kernel {k}", h + 2 * padding)));
        }
        if wd + 2 * padding < k {
            return Err(Error::shape("conv2d", 3, format!("padded width {} < kernel {k}", wd + 2 * padding)));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad: padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (wd + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.data(x),
            n,
            &geom,
            self.data(w),
            cout,
            b.map(|b| self.data(b)),
        );
        let needs = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        let value = Tensor::new([n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("group_norm", "rank", format!("expected [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Config("group_norm: eps must be positive".into()));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "group_norm",
                    name,
                    format!("expected [{c}], got {:?}", self.shape(v)),
                ));
            }
        }
        let spatial: usize = shape[2..].iter().product();
        let (y, xhat, inv_std) = kernels::group_norm_forward(
            self.data(x),
            n,
            c,
            spatial,
            groups,
            self.data(gamma),
            self.data(beta),
            eps,
        );
        let needs = self.needs(&[x, gamma, beta]);
        let value = Tensor::new(shape, y)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// `y = x W^T + b` over the trailing axis; `W` is `[m, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some(&n) = xs.last() else {
            return Err(Error::shape("linear", "rank", "scalar input"));
        };
        let (m, wn) = match *self.shape(w) {
            [m, wn] => (m, wn),
            ref s => return Err(Error::shape("linear", "weight", format!("expected [m, n], got {s:?}"))),
        };
        if wn != n {
            return Err(Error::shape(
                "linear",
                xs.len() - 1,
                format!("input trailing dim {n}, weight expects {wn}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::shape("linear", "bias", format!("expected [{m}], got {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / n.max(1);
        let mut out = vec![0.0; rows * m];
        let beta = if let Some(b) = b {
            let bd = self.data(b);
            out.chunks_mut(m).for_each(|r| r.copy_from_slice(bd));
            1.0
        } else {
            0.0
        };
        kernels::gemm(rows, n, m, self.data(x), false, self.data(w), true, beta, &mut out);
        let mut oshape = xs;
        *oshape.last_mut().unwrap() = m;
        let needs = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Matrix product over the last two axes, batched over a shared leading
    /// axis when both operands are rank 3. With `trans_b`, `b` is `[.., n, k]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k, n) = self.matmul_dims(a, b, trans_b)?;
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for s in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &ad[s * m * k..(s + 1) * m * k],
                false,
                &bd[s * k * n..(s + 1) * k * n],
                trans_b,
                0.0,
                &mut out[s * m * n..(s + 1) * m * n],
            );
        }
        let shape = if self.value(a).rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let needs = self.needs(&[a, b]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, needs))
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, b0, b1) = match (sa, sb) {
            (&[m, k], &[b0, b1]) => (1, m, k, b0, b1),
            (&[na, m, k], &[nb, b0, b1]) if na == nb => (na, m, k, b0, b1),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    "rank",
                    format!("incompatible operands {sa:?} and {sb:?}"),
                ))
            }
        };
        let (bk, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if bk != k {
            return Err(Error::shape(
                "matmul",
                "k",
                format!("inner dims differ: {k} vs {bk}"),
            ));
        }
        Ok((batch, m, k, n))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb, name)?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = kernels::broadcast_index(&out_shape, &kernels::broadcast_strides(&sa, &out_shape));
            let ib = kernels::broadcast_index(&out_shape, &kernels::broadcast_strides(&sb, &out_shape));
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok((Tensor::new(out_shape, data)?, self.needs(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, needs) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, needs) = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, needs) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|e| e * s);
        let needs = self.needs(&[x]);
        self.push(v, Op::Scale(x, s), needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * kernels::sigmoid(e));
        let needs = self.needs(&[x]);
        self.push(v, Op::Silu(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        let needs = self.needs(&[x]);
        self.push(v, Op::Square(x), needs)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "upsample_nearest2x")?;
        let out = kernels::upsample2x(self.data(x), n * c, h, w);
        let needs = self.needs(&[x]);
        let value = Tensor::new([n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", "rank", format!("need rank >= 2, got {shape:?}")));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let out = transpose_blocks(self.data(x), r, c);
        let mut oshape = shape;
        let l = oshape.len();
        oshape.swap(l - 2, l - 1);
        let needs = self.needs(&[x]);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::TransposeLast2(x), needs))
    }

    /// Concatenates along axis 1 (channels).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", "rank", format!("need rank >= 2, got {first:?}")));
        }
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape(
                    "concat",
                    "non-channel",
                    format!("{s:?} vs {first:?}"),
                ));
            }
            channels += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let n = first[0];
        let mut out = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[s * c * inner..(s + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let needs = self.needs(xs);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatChannels(xs.to_vec()), needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let len = *v.shape().last().unwrap_or(&1);
        let out = kernels::softmax_rows(v.data(), len);
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Row lookup: `table` is `[K, E]`, result `[ids.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (k, e) = match *self.shape(table) {
            [k, e] => (k, e),
            ref s => return Err(Error::shape("gather_rows", "table", format!("expected [K, E], got {s:?}"))),
        };
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            if i >= k {
                return Err(Error::shape("gather_rows", 0, format!("row {i} out of range for {k} rows")));
            }
            out.extend_from_slice(&self.data(table)[i * e..(i + 1) * e]);
        }
        let needs = self.needs(&[table]);
        let value = Tensor::new([ids.len(), e], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Softmax-attention block: `o(softmax(q k^T / sqrt d) v)` for one head.
    /// Input and output are `[N, T, d]`.
    pub fn self_attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Result<Var> {
        let d = match *self.shape(x) {
            [_, _, d] if d >= 1 => d,
            ref s => return Err(Error::shape("self_attention", "rank", format!("expected [N, T, d], got {s:?}"))),
        };
        let q = self.linear(x, wq, None)?;
        let k = self.linear(x, wk, None)?;
        let v = self.linear(x, wv, None)?;
        let logits = self.matmul(q, k, true)?;
        let logits = self.scale(logits, 1.0 / (d as f64).sqrt());
        let attn = self.softmax(logits)?;
        let mixed = self.matmul(attn, v, false)?;
        self.linear(mixed, wo, None)
    }

    /// Accumulates `d root / d leaf` into every leaf that requires a gradient.
    /// A non-scalar root is seeded with ones (i.e. differentiates its sum).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);
        self.visited.clear();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.visited.push(Var(i));
            self.backward_node(i, &g, &mut grads)?;
            if self.nodes[i].value.requires_grad() {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&d).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(d),
            }
        };
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let r = kernels::conv2d_backward(
                    self.data(*x),
                    n,
                    geom,
                    self.data(*w),
                    cout,
                    g,
                    needs(*x),
                    needs(*w),
                    b.is_some_and(needs),
                );
                if let Some(dx) = r.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = r.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                groups,
                xhat,
                inv_std,
                beta,
            } => {
                let s = self.shape(*x);
                let spatial: usize = s[2..].iter().product();
                let r = kernels::group_norm_backward(
                    g,
                    xhat,
                    inv_std,
                    s[0],
                    s[1],
                    spatial,
                    *groups,
                    self.data(*gamma),
                );
                acc(*x, r.dx);
                acc(*gamma, r.dgamma);
                acc(*beta, r.dbeta);
            }
            Op::Linear { x, w, b } => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = g.len() / m.max(1);
                if needs(*x) {
                    let mut dx = vec![0.0; rows * n];
                    kernels::gemm(rows, m, n, g, false, self.data(*w), false, 0.0, &mut dx);
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; m * n];
                    kernels::gemm(m, rows, n, g, true, self.data(*x), false, 0.0, &mut dw);
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let mut db = vec![0.0; m];
                    g.chunks(m).for_each(|r| db.iter_mut().zip(r).for_each(|(a, v)| *a += v));
                    acc(b, db);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (batch, m, k, n) = self.matmul_dims(*a, *b, *trans_b)?;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for s in 0..batch {
                        // da = g * op(b)^T
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &bd[s * k * n..(s + 1) * k * n],
                            !*trans_b,
                            0.0,
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &ad[s * m * k..(s + 1) * m * k];
                        let dst = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            // b is [n, k]: db = g^T a
                            kernels::gemm(n, m, k, gs, true, as_, false, 0.0, dst);
                        } else {
                            // b is [k, n]: db = a^T g
                            kernels::gemm(k, m, n, as_, true, gs, false, 0.0, dst);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out_shape = node.value.shape();
                if needs(*a) {
                    acc(*a, reduce_broadcast(g, out_shape, self.shape(*a), |v, _| v));
                }
                if needs(*b) {
                    acc(*b, reduce_broadcast(g, out_shape, self.shape(*b), |v, _| sign * v));
                }
            }
            Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if needs(*a) {
                    let other = expand(self.data(*b), sb, out_shape);
                    acc(*a, reduce_broadcast(g, out_shape, sa, |v, j| v * other[j]));
                }
                if needs(*b) {
                    let other = expand(self.data(*a), sa, out_shape);
                    acc(*b, reduce_broadcast(g, out_shape, sb, |v, j| v * other[j]));
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Silu(x) => {
                let d = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = kernels::sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                acc(*x, d);
            }
            Op::Square(x) => acc(*x, self.data(*x).iter().zip(g).map(|(v, gv)| 2.0 * v * gv).collect()),
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                acc(*x, kernels::upsample2x_backward(g, s[0] * s[1], s[2], s[3]));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::TransposeLast2(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                acc(*x, transpose_blocks(g, r, c));
            }
            Op::ConcatChannels(xs) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let total_c = s[1];
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if needs(v) {
                        let mut d = Vec::with_capacity(s[0] * c * inner);
                        for smp in 0..s[0] {
                            let lo = (smp * total_c + offset) * inner;
                            d.extend_from_slice(&g[lo..lo + c * inner]);
                        }
                        acc(v, d);
                    }
                    offset += c;
                }
            }
            Op::Softmax(x) => {
                let len = *node.value.shape().last().unwrap_or(&1);
                acc(*x, kernels::softmax_rows_backward(node.value.data(), g, len));
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Gather { table, ids } => {
                let (k, e) = (self.shape(*table)[0], self.shape(*table)[1]);
                let mut d = vec![0.0; k * e];
                for (r, &id) in ids.iter().enumerate() {
                    d[id * e..(id + 1) * e]
                        .iter_mut()
                        .zip(&g[r * e..(r + 1) * e])
                        .for_each(|(a, b)| *a += b);
                }
                acc(*table, d);
            }
        }
        Ok(())
    }
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    i,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Sums `f(g[j], j)` over broadcast axes into an operand-shaped buffer.
fn reduce_broadcast(g: &[f64], out: &[usize], shape: &[usize], f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    if out == shape {
        return g.iter().enumerate().map(|(j, &v)| f(v, j)).collect();
    }
    let idx = kernels::broadcast_index(out, &kernels::broadcast_strides(shape, out));
    let mut d = vec![0.0; shape.iter().product()];
    for (j, &i) in idx.iter().enumerate() {
        d[i] += f(g[j], j);
    }
    d
}

fn expand(data: &[f64], shape: &[usize], out: &[usize]) -> Vec<f64> {
    if shape == out {
        return data.to_vec();
    }
    kernels::broadcast_index(out, &kernels::broadcast_strides(shape, out))
        .into_iter()
        .map(|i| data[i])
        .collect()
}

fn transpose_blocks(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if r * c == 0 {
        return out;
    }
    for (src, dst) in x.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}
