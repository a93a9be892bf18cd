use super::array::Array;
use super::conv::{self, Window};
use super::scalar::{gemm, Scalar};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride / padding configuration of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    /// Extra length appended to the output of a transposed convolution.
    pub out_pad: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
            out_pad: 0,
        }
    }

    /// For odd kernels: halves an even length (conv) or doubles it (transposed conv).
    pub fn down2(kernel: usize) -> Self {
        Self {
            stride: 2,
            pad: kernel / 2,
            out_pad: 1,
        }
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    AddChannelEmbed(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu {
        x: Var,
        th: Vec<T>,
    },
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MeanPool(Var),
    Reshape(Var),
    Transpose(Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        win: Window,
        cout: usize,
        cols: Vec<T>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        win: Window,
        cin: usize,
        xmat: Vec<T>,
    },
    Sum(Var),
    Mse(Var, Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of operator applications.
///
/// Nodes are appended in evaluation order, so the tape is acyclic by
/// construction and reverse order is a valid topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T: Scalar>(a: &Array<T>) -> String {
    format!("{:?}", a.shape())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is propagated to it.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient in [`Graph::backward`].
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", dims(av), dims(bv)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let value = Array::from_vec(&[m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{} vs {}", dims(self.value(a)), dims(self.value(b))),
            ));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Array<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Array::from_vec(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `x (..., n) + b (n)`, broadcasting over leading dimensions.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [n] || n == 0 {
            return Err(Error::shape(
                "add_row_bias",
                format!("{} + {}", dims(xv), dims(bv)),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddRowBias(x, b), ng))
    }

    /// `x (B, C, L) + b (C)`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let s = xv.shape();
        if s.len() != 3 || bv.shape() != [s[1]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("{} + {}", dims(xv), dims(bv)),
            ));
        }
        let (c, l) = (s[1], s[2]);
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(l).enumerate() {
            let bb = bv.data()[i % c];
            chunk.iter_mut().for_each(|o| *o += bb);
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddChannelBias(x, b), ng))
    }

    /// `x (B, C, L) + e (B, C)`: a per-sample channel embedding broadcast over length.
    pub fn add_channel_embed(&mut self, x: Var, e: Var) -> Result<Var> {
        let (xv, ev) = (self.value(x), self.value(e));
        let s = xv.shape();
        if s.len() != 3 || ev.shape() != [s[0], s[1]] {
            return Err(Error::shape(
                "add_channel_embed",
                format!("{} + {}", dims(xv), dims(ev)),
            ));
        }
        let l = s[2];
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(l).enumerate() {
            let ee = ev.data()[i];
            chunk.iter_mut().for_each(|o| *o += ee);
        }
        let ng = self.ng(&[x, e]);
        Ok(self.push(out, Op::AddChannelEmbed(x, e), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(x).map(|a| a * c);
        let ng = self.ng(&[x]);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|a| if a > T::zero() { a } else { T::zero() });
        let ng = self.ng(&[x]);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, a, half) = gelu_consts::<T>();
        let th: Vec<T> = xv
            .data()
            .iter()
            .map(|&u| fast_tanh(c * (u + a * u * u * u)))
            .collect();
        let data = xv
            .data()
            .iter()
            .zip(&th)
            .map(|(&u, &t)| half * u * (T::one() + t))
            .collect();
        let v = Array::from_vec(xv.shape(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(v, Op::Gelu { x, th }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(fast_tanh);
        let ng = self.ng(&[x]);
        self.push(v, Op::Tanh(x), ng)
    }

    /// Normalizes over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {} gamma {} beta {}", dims(xv), dims(gv), dims(bv)),
            ));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gv.data()[i] + bv.data()[i];
            }
        }
        let value = Array::from_vec(xv.shape(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            value,
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

    /// Mean over axis 1 of `(B, N, D)` giving `(B, D)`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::shape(
                "mean_pool",
                format!("expected (B, N>0, D), got {}", dims(xv)),
            ));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for ni in 0..n {
                let row = &xv.data()[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                for (o, &a) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += a * inv;
                }
            }
        }
        let value = Array::from_vec(&[b, d], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::MeanPool(x), ng))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Transpose of a 2-D array.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected 2-D, got {}", dims(xv)),
            ));
        }
        let value = transpose2(xv);
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Transpose(x), ng))
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&0);
        if start + len > n || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) of {}", start + len, dims(xv)),
            ));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let data: Vec<T> = xv
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Array::from_vec(&shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Narrow { x, start }, ng))
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(
                "concat",
                format!("{} ++ {}", dims(av), dims(bv)),
            ));
        }
        let (na, nb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data().chunks(na).zip(bv.data().chunks(nb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let value = Array::from_vec(&shape, data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), ng))
    }

    /// 1-D convolution: `x (B, Cin, L)`, `w (Cout, Cin, K)` → `(B, Cout, Lout)`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        let bad = || {
            Error::shape(
                "conv1d",
                format!("x {} w {} {:?}", dims(xv), dims(wv), spec),
            )
        };
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || spec.stride == 0 {
            return Err(bad());
        }
        let (b, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let lout = conv::conv_out_len(l, k, spec.stride, spec.pad).ok_or_else(bad)?;
        let win = Window {
            batch: b,
            channels: cin,
            l_long: l,
            l_short: lout,
            kernel: k,
            stride: spec.stride,
            pad: spec.pad,
        };
        let cols = conv::im2col(xv.data(), &win);
        let mut ymat = vec![T::zero(); cout * b * lout];
        gemm(
            cout,
            cin * k,
            b * lout,
            wv.data(),
            false,
            &cols,
            false,
            &mut ymat,
            false,
        );
        let y = conv::from_channel_major(&ymat, b, cout, lout);
        let value = Array::from_vec(&[b, cout, lout], y)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                win,
                cout,
                cols,
            },
            ng,
        ))
    }

    /// Transposed 1-D convolution: `x (B, Cin, L)`, `w (Cin, Cout, K)` → `(B, Cout, Lout)`
    /// with `Lout = (L-1)·stride - 2·pad + K + out_pad`.
    pub fn conv1d_transpose(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        let bad = || {
            Error::shape(
                "conv1d_transpose",
                format!("x {} w {} {:?}", dims(xv), dims(wv), spec),
            )
        };
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[0] || spec.stride == 0 {
            return Err(bad());
        }
        let (b, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[1], sw[2]);
        let lout = conv::conv_transpose_out_len(l, k, spec.stride, spec.pad, spec.out_pad)
            .ok_or_else(bad)?;
        // Every input position must map back through the forward window.
        if conv::conv_out_len(lout, k, spec.stride, spec.pad).is_none_or(|n| n < l) {
            return Err(bad());
        }
        let win = Window {
            batch: b,
            channels: cout,
            l_long: lout,
            l_short: l,
            kernel: k,
            stride: spec.stride,
            pad: spec.pad,
        };
        let xmat = conv::to_channel_major(xv.data(), b, cin, l);
        let mut cols = vec![T::zero(); win.cols_len()];
        gemm(
            cout * k,
            cin,
            b * l,
            wv.data(),
            true,
            &xmat,
            false,
            &mut cols,
            false,
        );
        let mut y = vec![T::zero(); b * cout * lout];
        conv::col2im(&cols, &win, &mut y);
        let value = Array::from_vec(&[b, cout, lout], y)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(
            value,
            Op::ConvTranspose {
                x,
                w,
                win,
                cin,
                xmat,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(&[x]);
        self.push(Array::scalar(s), Op::Sum(x), ng)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = p.numel().max(1);
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / T::of(n as f64);
        let ng = self.ng(&[pred, target]);
        Ok(self.push(Array::scalar(s), Op::Mse(pred, target), ng))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {} with {} labels", dims(lv), labels.len()),
            ));
        }
        let (b, c) = (s[0], s[1]);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &lv.data()[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&a| (a - mx).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[r]];
        }
        loss = loss / T::of(b.max(1) as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Array::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", dims(lv)),
            ));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node<T>, gy: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let mut acc = |v: Var, g: Array<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, gy.data(), false, bv.data(), true, &mut ga, false);
                    acc(*a, Array::from_vec(&[m, k], ga).unwrap());
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, gy.data(), false, &mut gb, false);
                    acc(*b, Array::from_vec(&[k, n], gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, gy.clone());
                }
                if self.wants(*b) {
                    acc(*b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, gy.clone());
                }
                if self.wants(*b) {
                    acc(*b, gy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gy
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    acc(*a, Array::from_vec(av.shape(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = gy
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    acc(*b, Array::from_vec(bv.shape(), d).unwrap());
                }
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    acc(*x, gy.clone());
                }
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![T::zero(); n];
                    for row in gy.data().chunks(n) {
                        for (o, &g) in gb.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    acc(*b, Array::from_vec(&[n], gb).unwrap());
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*x) {
                    acc(*x, gy.clone());
                }
                if self.wants(*b) {
                    let s = gy.shape();
                    let (c, l) = (s[1], s[2]);
                    let mut gb = vec![T::zero(); c];
                    for (i, chunk) in gy.data().chunks(l).enumerate() {
                        gb[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    acc(*b, Array::from_vec(&[c], gb).unwrap());
                }
            }
            Op::AddChannelEmbed(x, e) => {
                if self.wants(*x) {
                    acc(*x, gy.clone());
                }
                if self.wants(*e) {
                    let s = gy.shape();
                    let ge: Vec<T> = gy
                        .data()
                        .chunks(s[2])
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    acc(*e, Array::from_vec(&[s[0], s[1]], ge).unwrap());
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, gy.map(|g| g * c));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*x, Array::from_vec(xv.shape(), d).unwrap());
            }
            Op::Gelu { x, th } => {
                let xv = self.value(*x);
                let (c, a, half) = gelu_consts::<T>();
                let three_a = T::of(3.0) * a;
                let d = gy
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(th))
                    .map(|(&g, (&u, &t))| {
                        let du = c * (T::one() + three_a * u * u);
                        g * (half * (T::one() + t) + half * u * (T::one() - t * t) * du)
                    })
                    .collect();
                acc(*x, Array::from_vec(xv.shape(), d).unwrap());
            }
            Op::Tanh(x) => {
                let d = gy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                acc(*x, Array::from_vec(node.value.shape(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let d = gv.numel();
                let rows = xhat.len() / d;
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gbeta = vec![T::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            let g = gy.data()[r * d + i];
                            gg[i] += g * xhat[r * d + i];
                            gbeta[i] += g;
                        }
                    }
                    if self.wants(*gamma) {
                        acc(*gamma, Array::from_vec(&[d], gg).unwrap());
                    }
                    if self.wants(*beta) {
                        acc(*beta, Array::from_vec(&[d], gbeta).unwrap());
                    }
                }
                if self.wants(*x) {
                    let dn = T::of(d as f64);
                    let mut gx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..d {
                            let dxh = gy.data()[r * d + i] * gv.data()[i];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + i];
                        }
                        for i in 0..d {
                            let dxh = gy.data()[r * d + i] * gv.data()[i];
                            gx[r * d + i] = rstd[r] / dn * (dn * dxh - s1 - xhat[r * d + i] * s2);
                        }
                    }
                    acc(*x, Array::from_vec(node.value.shape(), gx).unwrap());
                }
            }
            Op::MeanPool(x) => {
                let s = self.value(*x).shape().to_vec();
                let (b, n, d) = (s[0], s[1], s[2]);
                let inv = T::one() / T::of(n as f64);
                let mut gx = vec![T::zero(); b * n * d];
                for bi in 0..b {
                    for ni in 0..n {
                        for di in 0..d {
                            gx[(bi * n + ni) * d + di] = gy.data()[bi * d + di] * inv;
                        }
                    }
                }
                acc(*x, Array::from_vec(&s, gx).unwrap());
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                acc(*x, gy.clone().reshape(&s).unwrap());
            }
            Op::Transpose(x) => acc(*x, transpose2(gy)),
            Op::Narrow { x, start } => {
                let xv = self.value(*x);
                let n = *xv.shape().last().unwrap();
                let len = *gy.shape().last().unwrap();
                let mut gx = vec![T::zero(); xv.numel()];
                for (dst, src) in gx.chunks_mut(n).zip(gy.data().chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                acc(*x, Array::from_vec(xv.shape(), gx).unwrap());
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (
                    self.value(*a).shape().to_vec(),
                    self.value(*b).shape().to_vec(),
                );
                let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
                let mut ga = Vec::with_capacity(self.value(*a).numel());
                let mut gb = Vec::with_capacity(self.value(*b).numel());
                for row in gy.data().chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                if self.wants(*a) {
                    acc(*a, Array::from_vec(&sa, ga).unwrap());
                }
                if self.wants(*b) {
                    acc(*b, Array::from_vec(&sb, gb).unwrap());
                }
            }
            Op::Conv1d {
                x,
                w,
                win,
                cout,
                cols,
            } => {
                let (b, lout) = (win.batch, win.l_short);
                let ck = win.channels * win.kernel;
                let gmat = conv::to_channel_major(gy.data(), b, *cout, lout);
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); cout * ck];
                    gemm(
                        *cout,
                        b * lout,
                        ck,
                        &gmat,
                        false,
                        cols,
                        true,
                        &mut gw,
                        false,
                    );
                    acc(*w, Array::from_vec(self.value(*w).shape(), gw).unwrap());
                }
                if self.wants(*x) {
                    let wv = self.value(*w);
                    let mut gcols = vec![T::zero(); win.cols_len()];
                    gemm(
                        ck,
                        *cout,
                        b * lout,
                        wv.data(),
                        true,
                        &gmat,
                        false,
                        &mut gcols,
                        false,
                    );
                    let mut gx = vec![T::zero(); b * win.channels * win.l_long];
                    conv::col2im(&gcols, win, &mut gx);
                    acc(*x, Array::from_vec(self.value(*x).shape(), gx).unwrap());
                }
            }
            Op::ConvTranspose {
                x,
                w,
                win,
                cin,
                xmat,
            } => {
                let (b, l) = (win.batch, win.l_short);
                let ck = win.channels * win.kernel;
                let cols = conv::im2col(gy.data(), win);
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); cin * ck];
                    gemm(*cin, b * l, ck, xmat, false, &cols, true, &mut gw, false);
                    acc(*w, Array::from_vec(self.value(*w).shape(), gw).unwrap());
                }
                if self.wants(*x) {
                    let wv = self.value(*w);
                    let mut gxm = vec![T::zero(); cin * b * l];
                    gemm(
                        *cin,
                        ck,
                        b * l,
                        wv.data(),
                        false,
                        &cols,
                        false,
                        &mut gxm,
                        false,
                    );
                    let gx = conv::from_channel_major(&gxm, b, *cin, l);
                    acc(*x, Array::from_vec(self.value(*x).shape(), gx).unwrap());
                }
            }
            Op::Sum(x) => {
                let g = gy.item();
                acc(*x, Array::full(self.value(*x).shape(), g));
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let k = gy.item() * T::of(2.0) / T::of(pv.numel().max(1) as f64);
                let diff: Vec<T> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(&a, &b)| (a - b) * k)
                    .collect();
                if self.wants(*t) {
                    acc(
                        *t,
                        Array::from_vec(tv.shape(), diff.iter().map(|&d| -d).collect()).unwrap(),
                    );
                }
                if self.wants(*p) {
                    acc(*p, Array::from_vec(pv.shape(), diff).unwrap());
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let s = self.value(*logits).shape();
                let (b, c) = (s[0], s[1]);
                let k = gy.item() / T::of(b.max(1) as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (r, &y) in labels.iter().enumerate() {
                    g[r * c + y] -= k;
                }
                acc(*logits, Array::from_vec(&[b, c], g).unwrap());
            }
        }
    }
}

fn transpose2<T: Scalar>(a: &Array<T>) -> Array<T> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Array::from_vec(&[c, r], out).expect("transposed shape")
}

fn gelu_consts<T: Scalar>() -> (T, T, T) {
    (
        T::of((2.0 / std::f64::consts::PI).sqrt()),
        T::of(0.044715),
        T::of(0.5),
    )
}

/// `tanh` as `1 - 2/(e^{2u} + 1)`, with a short odd series near zero where that form
/// cancels. Several times cheaper than the libm routine.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let lim = T::of(20.0);
    if u > lim {
        return T::one();
    }
    if u < -lim {
        return -T::one();
    }
    if u.abs() < T::of(0.02) {
        let u2 = u * u;
        return u * (T::one() - u2 * (T::of(1.0 / 3.0) - u2 * T::of(2.0 / 15.0)));
    }
    let two = T::of(2.0);
    T::one() - two / ((u + u).exp() + T::one())
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Array<T> {
        self.get(v).cloned().unwrap_or_else(|| Array::zeros(like))
    }
}
