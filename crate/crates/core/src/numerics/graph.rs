//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every op in creation order, so the node list is already
//! topologically sorted and [`Graph::backward`] is a single reverse sweep.
//! Parameters enter through [`Graph::param`]; after the sweep,
//! [`Graph::accumulate_into`] adds their gradients back into the store.

use crate::error::{dim_err, Error, Result};
use crate::numerics::kernels::{self, Conv1dDims, Conv2dDims};
use crate::numerics::tensor::numel;
use crate::numerics::{ParamStore, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate backward-pass defects, used to prove the gradient checker
/// actually catches broken ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Conv1dBackward,
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    AddTrailing {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Relu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        end: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: Conv1dDims,
        cols: Vec<T>,
    },
    AvgPool1d {
        x: Var,
        rows: usize,
        n: usize,
        out_len: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: Conv2dDims,
        cols: Vec<T>,
    },
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
        spatial: usize,
    },
    Reshape {
        x: Var,
    },
    StackTokens {
        inputs: Vec<Var>,
        batch: usize,
    },
    CausalAttention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Var,
        weights: Option<Vec<T>>,
        denom: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    param: Option<String>,
}

/// Recording of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); nodes[v.0].value.len()]);
    }
    f(slot.as_mut().expect("allocated"));
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad, None)
    }

    fn push_node(
        &mut self,
        mut value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<String>,
    ) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            param,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false, None)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true, None)
    }

    /// Leaf mirroring a stored parameter; frozen entries enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        let trainable = !store.is_frozen(name);
        Ok(self.push_node(t, Op::Leaf, trainable, Some(name.to_string())))
    }

    /// Copies the current value of `v` into a fresh constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    // ---------------------------------------------------------------- ops

    /// `a[..., k] · b[k, n]`; leading dims of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 {
            return Err(dim_err!("matmul needs rank>=2 · rank-2, got {sa:?} · {sb:?}"));
        }
        let k = *sa.last().expect("rank>=2");
        if k != sb[0] {
            return Err(dim_err!("matmul inner extents differ: {sa:?} · {sb:?}"));
        }
        let (m, n) = (numel(&sa) / k, sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, &[a, b]))
    }

    /// Adds `b` broadcast over the leading dims of `x`; `b`'s shape must equal
    /// the trailing dims of `x` (bias vectors, positional tables).
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(dim_err!("cannot broadcast {sb:?} onto {sx:?}"));
        }
        let bl = self.value(b).len();
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        out.data_mut()
            .chunks_mut(bl)
            .for_each(|row| row.iter_mut().zip(&bd).for_each(|(o, &v)| *o += v));
        Ok(self.push(out, Op::AddTrailing { x, b }, &[x, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| e * s).collect());
        self.push(out, Op::Scale { x, s }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&e| if e > T::zero() { e } else { T::zero() }).collect(),
        );
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!("layer_norm affine params must have shape [{d}]"));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = match self.shape(x).last() {
            Some(&d) => d,
            None => return Err(dim_err!("softmax over an empty axis")),
        };
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        out.chunks_mut(d).for_each(softmax_in_place);
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(dim_err!("concat leading dims differ: {lead:?} vs {s:?}"));
            }
            widths.push(*s.last().expect("non-scalar"));
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            inputs,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(dim_err!("slice {start}..{end} on axis {axis} of {s:?}"));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let axis_len = s[axis];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * axis_len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                x,
                outer,
                axis_len,
                inner,
                start,
                end,
            },
            &[x],
        ))
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(dim_err!("embedding table must be rank 2, got {s:?}"));
        }
        let (rows, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(dim_err!("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(dim_err!("embedding id {bad} out of range for {rows} rows"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Cross-correlation over `x[C_in, N]` or `x[B, C_in, N]` with
    /// `w[C_out, C_in, k]` and `b[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, c_in, n_in) = match sx[..] {
            [c, n] => (1, c, n),
            [bt, c, n] => (bt, c, n),
            _ => return Err(dim_err!("conv1d input must be rank 2 or 3, got {sx:?}")),
        };
        if sw.len() != 3 || sw[1] != c_in {
            return Err(dim_err!("conv1d kernel {sw:?} does not match input channels {c_in}"));
        }
        let (c_out, kernel) = (sw[0], sw[2]);
        if self.shape(b) != [c_out] {
            return Err(dim_err!("conv1d bias must have shape [{c_out}]"));
        }
        if stride == 0 || kernel > n_in + 2 * pad {
            return Err(dim_err!(
                "conv1d produces an empty output (N={n_in}, k={kernel}, pad={pad}, stride={stride})"
            ));
        }
        let n_out = (n_in + 2 * pad - kernel) / stride + 1;
        let dims = Conv1dDims {
            batch,
            c_in,
            n_in,
            kernel,
            stride,
            pad,
            n_out,
        };
        let cols = kernels::im2col_1d(self.value(x).data(), &dims);
        let ncols = dims.cols();
        let mut tmp = vec![T::zero(); c_out * ncols];
        kernels::matmul(
            self.value(w).data(),
            false,
            &cols,
            false,
            c_out,
            dims.patch(),
            ncols,
            &mut tmp,
            false,
        );
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); batch * c_out * n_out];
        for bt in 0..batch {
            for co in 0..c_out {
                let dst = &mut out[(bt * c_out + co) * n_out..(bt * c_out + co + 1) * n_out];
                let src = &tmp[co * ncols + bt * n_out..co * ncols + (bt + 1) * n_out];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bias[co]);
            }
        }
        let shape = if sx.len() == 2 {
            vec![c_out, n_out]
        } else {
            vec![batch, c_out, n_out]
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv1d { x, w, b, dims, cols },
            &[x, w, b],
        ))
    }

    /// Adaptive average pooling over the last axis of `x[C, N]` or `x[B, C, N]`.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || out_len == 0 {
            return Err(dim_err!("adaptive_avg_pool1d on {s:?} to length {out_len}"));
        }
        let n = *s.last().expect("rank>=2");
        let rows = numel(&s) / n;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * out_len];
        for r in 0..rows {
            for i in 0..out_len {
                let (a, e) = kernels::pool_bin(i, n, out_len);
                let sum: T = src[r * n + a..r * n + e].iter().copied().sum();
                out[r * out_len + i] = sum / T::lit((e - a) as f64);
            }
        }
        let mut shape = s;
        *shape.last_mut().expect("rank>=2") = out_len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::AvgPool1d {
                x,
                rows,
                n,
                out_len,
            },
            &[x],
        ))
    }

    /// Cross-correlation over `x[B, C_in, H, W]` with `w[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] {
            return Err(dim_err!("conv2d shapes {sx:?} / {sw:?} incompatible"));
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if self.shape(b) != [c_out] {
            return Err(dim_err!("conv2d bias must have shape [{c_out}]"));
        }
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(dim_err!("conv2d produces an empty output"));
        }
        let dims = Conv2dDims {
            batch,
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let cols = kernels::im2col_2d(self.value(x).data(), &dims);
        let ncols = dims.cols();
        let so = dims.spatial_out();
        let mut tmp = vec![T::zero(); c_out * ncols];
        kernels::matmul(
            self.value(w).data(),
            false,
            &cols,
            false,
            c_out,
            dims.patch(),
            ncols,
            &mut tmp,
            false,
        );
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); batch * c_out * so];
        for bt in 0..batch {
            for co in 0..c_out {
                let dst = &mut out[(bt * c_out + co) * so..(bt * c_out + co + 1) * so];
                let src = &tmp[co * ncols + bt * so..co * ncols + (bt + 1) * so];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bias[co]);
            }
        }
        let shape = vec![batch, c_out, dims.ho, dims.wo];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d { x, w, b, dims, cols },
            &[x, w, b],
        ))
    }

    /// Per-channel `gamma ⊙ x + beta` with `x[B, C, ...]`, `gamma, beta[B, C]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || *self.shape(gamma) != sx[..2] || *self.shape(beta) != sx[..2] {
            return Err(dim_err!(
                "film: x {sx:?} needs gamma/beta of shape {:?}",
                &sx[..sx.len().min(2)]
            ));
        }
        let spatial = numel(&sx[2..]);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).data().to_vec();
        for (bc, chunk) in out.chunks_mut(spatial).enumerate() {
            chunk.iter_mut().for_each(|v| *v = g[bc] * *v + bt[bc]);
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::Film {
                x,
                gamma,
                beta,
                spatial,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Stacks `[B, D]` tokens (or `[1, D]` tokens broadcast over `B`) into
    /// a `[B, S, D]` sequence.
    pub fn stack_tokens(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(dim_err!("empty token sequence"));
        }
        let mut batch = 1;
        let mut width = None;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 {
                return Err(dim_err!("tokens must be rank 2, got {s:?}"));
            }
            if *width.get_or_insert(s[1]) != s[1] {
                return Err(dim_err!("token widths differ"));
            }
            if s[0] != 1 {
                if batch != 1 && batch != s[0] {
                    return Err(dim_err!("token batch sizes differ"));
                }
                batch = s[0];
            }
        }
        let d = width.expect("non-empty");
        let seq = inputs.len();
        let mut out = vec![T::zero(); batch * seq * d];
        for (p, &v) in inputs.iter().enumerate() {
            let src = self.value(v).data();
            let broadcast = self.shape(v)[0] == 1;
            for b in 0..batch {
                let row = if broadcast { &src[..d] } else { &src[b * d..(b + 1) * d] };
                out[(b * seq + p) * d..(b * seq + p + 1) * d].copy_from_slice(row);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, seq, d], out),
            Op::StackTokens {
                inputs: inputs.to_vec(),
                batch,
            },
            inputs,
        ))
    }

    /// Multi-head self-attention core with a causal mask. `qkv[B, S, 3D]`
    /// holds queries, keys and values side by side; returns `[B, S, D]`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || s[2] % 3 != 0 {
            return Err(dim_err!("attention input must be [B, S, 3D], got {s:?}"));
        }
        let (batch, seq, d) = (s[0], s[1], s[2] / 3);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let at = |b: usize, i: usize, part: usize, h: usize| (b * seq + i) * 3 * d + part * d + h * dh;
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let q = &src[at(b, i, 0, h)..][..dh];
                    for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
                        let k = &src[at(b, j, 1, h)..][..dh];
                        *pj = q.iter().zip(k).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    }
                    softmax_in_place(&mut p[..=i]);
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate().take(i + 1) {
                        let v = &src[at(b, j, 2, h)..][..dh];
                        o.iter_mut().zip(v).for_each(|(oe, &ve)| *oe += pj * ve);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, seq, d], out),
            Op::CausalAttention { qkv, heads, probs },
            &[qkv],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.weighted_mse(pred, target, None)
    }

    /// Squared error averaged over the elements whose weight is non-zero
    /// (weights act as a 0/1 validity mask). An all-zero mask gives loss 0.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: Option<&[T]>) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let n = self.value(pred).len();
        if let Some(w) = weights {
            if w.len() != n {
                return Err(dim_err!("mse mask has {} entries for {n} values", w.len()));
            }
        }
        let denom = match weights {
            Some(w) => w.iter().copied().sum::<T>(),
            None => T::lit(n as f64),
        };
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let mut total = T::zero();
        for i in 0..n {
            let d = p[i] - t[i];
            let w = weights.map_or(T::one(), |w| w[i]);
            total += w * d * d;
        }
        let loss = if denom > T::zero() { total / denom } else { T::zero() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target,
                weights: weights.map(<[T]>::to_vec),
                denom,
            },
            &[pred, target],
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err!("cross_entropy logits {s:?} vs {} labels", labels.len()));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range [0, {k})")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[y];
            softmax_in_place(row);
        }
        let loss = total / T::lit(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        self.value(loss).check_finite("loss")?;
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        let fault = self.fault;
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let k = *sa.last().expect("rank>=2");
                let m = numel(sa) / k;
                let n = sb[1];
                acc(nodes, grads, *a, |ga| {
                    kernels::matmul(g, false, nodes[b.0].value.data(), true, m, n, k, ga, true)
                });
                acc(nodes, grads, *b, |gb| {
                    kernels::matmul(nodes[a.0].value.data(), true, g, false, k, m, n, gb, true)
                });
            }
            Op::AddTrailing { x, b } => {
                acc(nodes, grads, *x, |gx| add_into(gx, g));
                let bl = nodes[b.0].value.len();
                acc(nodes, grads, *b, |gb| {
                    g.chunks(bl).for_each(|row| add_into(gb, row));
                });
            }
            Op::Add { a, b } => {
                acc(nodes, grads, *a, |ga| add_into(ga, g));
                acc(nodes, grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                acc(nodes, grads, *a, |ga| add_into(ga, g));
                acc(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(nodes, grads, *a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                });
                acc(nodes, grads, *b, |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                });
            }
            Op::Scale { x, s } => {
                acc(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, &e)| *d += e * *s));
            }
            Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                acc(nodes, grads, *x, |gx| {
                    for j in 0..g.len() {
                        if xv[j] > T::zero() {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = nodes[gamma.0].value.len();
                let gm = nodes[gamma.0].value.data();
                acc(nodes, grads, *beta, |gb| g.chunks(d).for_each(|r| add_into(gb, r)));
                acc(nodes, grads, *gamma, |gg| {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += gr[j] * xhat[r * d + j];
                        }
                    }
                });
                let dn = T::lit(d as f64);
                acc(nodes, grads, *x, |gx| {
                    for (r, gr) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            mean_d += dxh;
                            mean_dx += dxh * xh[j];
                        }
                        mean_d /= dn;
                        mean_dx /= dn;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            gx[r * d + j] += inv_std[r] * (dxh - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("rank>=1");
                acc(nodes, grads, *x, |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    acc(nodes, grads, v, |gv| {
                        for r in 0..rows {
                            add_into(
                                &mut gv[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                axis_len,
                inner,
                start,
                end,
            } => {
                let width = (end - start) * inner;
                acc(nodes, grads, *x, |gx| {
                    for o in 0..*outer {
                        let base = o * axis_len * inner + start * inner;
                        add_into(&mut gx[base..base + width], &g[o * width..(o + 1) * width]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                acc(nodes, grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Conv1d { x, w, b, dims, cols } => {
                let c_out = nodes[w.0].value.shape()[0];
                let ncols = dims.cols();
                let n_out = dims.n_out;
                let mut gtmp = vec![T::zero(); c_out * ncols];
                for bt in 0..dims.batch {
                    for co in 0..c_out {
                        gtmp[co * ncols + bt * n_out..co * ncols + (bt + 1) * n_out]
                            .copy_from_slice(&g[(bt * c_out + co) * n_out..(bt * c_out + co + 1) * n_out]);
                    }
                }
                acc(nodes, grads, *b, |gb| {
                    for co in 0..c_out {
                        gb[co] += gtmp[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
                    }
                });
                acc(nodes, grads, *w, |gw| {
                    if fault == Some(Fault::Conv1dBackward) {
                        let skewed: Vec<T> = gtmp.iter().map(|&v| v * T::lit(1.5)).collect();
                        kernels::matmul(&skewed, false, cols, true, c_out, ncols, dims.patch(), gw, true);
                    } else {
                        kernels::matmul(&gtmp, false, cols, true, c_out, ncols, dims.patch(), gw, true);
                    }
                });
                acc(nodes, grads, *x, |gx| {
                    let mut gcols = vec![T::zero(); dims.patch() * ncols];
                    kernels::matmul(
                        nodes[w.0].value.data(),
                        true,
                        &gtmp,
                        false,
                        dims.patch(),
                        c_out,
                        ncols,
                        &mut gcols,
                        false,
                    );
                    kernels::col2im_1d(&gcols, dims, gx);
                });
            }
            Op::AvgPool1d {
                x,
                rows,
                n,
                out_len,
            } => {
                acc(nodes, grads, *x, |gx| {
                    for r in 0..*rows {
                        for i in 0..*out_len {
                            let (a, e) = kernels::pool_bin(i, *n, *out_len);
                            let share = g[r * out_len + i] / T::lit((e - a) as f64);
                            gx[r * n + a..r * n + e].iter_mut().for_each(|v| *v += share);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, dims, cols } => {
                let c_out = nodes[w.0].value.shape()[0];
                let ncols = dims.cols();
                let so = dims.spatial_out();
                let mut gtmp = vec![T::zero(); c_out * ncols];
                for bt in 0..dims.batch {
                    for co in 0..c_out {
                        gtmp[co * ncols + bt * so..co * ncols + (bt + 1) * so]
                            .copy_from_slice(&g[(bt * c_out + co) * so..(bt * c_out + co + 1) * so]);
                    }
                }
                acc(nodes, grads, *b, |gb| {
                    for co in 0..c_out {
                        gb[co] += gtmp[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
                    }
                });
                acc(nodes, grads, *w, |gw| {
                    kernels::matmul(&gtmp, false, cols, true, c_out, ncols, dims.patch(), gw, true)
                });
                acc(nodes, grads, *x, |gx| {
                    let mut gcols = vec![T::zero(); dims.patch() * ncols];
                    kernels::matmul(
                        nodes[w.0].value.data(),
                        true,
                        &gtmp,
                        false,
                        dims.patch(),
                        c_out,
                        ncols,
                        &mut gcols,
                        false,
                    );
                    kernels::col2im_2d(&gcols, dims, gx);
                });
            }
            Op::Film {
                x,
                gamma,
                beta,
                spatial,
            } => {
                let xv = nodes[x.0].value.data();
                let gm = nodes[gamma.0].value.data();
                acc(nodes, grads, *x, |gx| {
                    for (bc, (gxc, gc)) in gx.chunks_mut(*spatial).zip(g.chunks(*spatial)).enumerate() {
                        gxc.iter_mut().zip(gc).for_each(|(d, &e)| *d += e * gm[bc]);
                    }
                });
                acc(nodes, grads, *gamma, |gg| {
                    for (bc, (xc, gc)) in xv.chunks(*spatial).zip(g.chunks(*spatial)).enumerate() {
                        gg[bc] += xc.iter().zip(gc).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
                acc(nodes, grads, *beta, |gb| {
                    for (bc, gc) in g.chunks(*spatial).enumerate() {
                        gb[bc] += gc.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Reshape { x } => acc(nodes, grads, *x, |gx| add_into(gx, g)),
            Op::StackTokens { inputs, batch } => {
                let seq = inputs.len();
                let d = g.len() / (batch * seq);
                for (p, &v) in inputs.iter().enumerate() {
                    let broadcast = nodes[v.0].value.shape()[0] == 1;
                    acc(nodes, grads, v, |gv| {
                        for b in 0..*batch {
                            let dst = if broadcast { &mut gv[..d] } else { &mut gv[b * d..(b + 1) * d] };
                            add_into(dst, &g[(b * seq + p) * d..(b * seq + p + 1) * d]);
                        }
                    });
                }
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let s = nodes[qkv.0].value.shape();
                let (batch, seq, d) = (s[0], s[1], s[2] / 3);
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let src = nodes[qkv.0].value.data();
                let at = |b: usize, i: usize, part: usize, h: usize| {
                    (b * seq + i) * 3 * d + part * d + h * dh
                };
                acc(nodes, grads, *qkv, |gq| {
                    let mut gp = vec![T::zero(); seq];
                    for b in 0..batch {
                        for h in 0..*heads {
                            for i in 0..seq {
                                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                                let go = &g[(b * seq + i) * d + h * dh..][..dh];
                                let mut dot = T::zero();
                                for j in 0..=i {
                                    let v = &src[at(b, j, 2, h)..][..dh];
                                    gp[j] = go.iter().zip(v).map(|(&a, &c)| a * c).sum();
                                    dot += p[j] * gp[j];
                                    let gv = &mut gq[at(b, j, 2, h)..][..dh];
                                    gv.iter_mut().zip(go).for_each(|(t, &e)| *t += p[j] * e);
                                }
                                for j in 0..=i {
                                    let gs = p[j] * (gp[j] - dot) * scale;
                                    for e in 0..dh {
                                        let kv = src[at(b, j, 1, h) + e];
                                        let qv = src[at(b, i, 0, h) + e];
                                        gq[at(b, i, 0, h) + e] += gs * kv;
                                        gq[at(b, j, 1, h) + e] += gs * qv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            } => {
                if *denom <= T::zero() {
                    return;
                }
                let (p, t) = (nodes[pred.0].value.data(), nodes[target.0].value.data());
                let two = T::lit(2.0) * g[0] / *denom;
                let diff = |j: usize| {
                    let w = weights.as_ref().map_or(T::one(), |w| w[j]);
                    two * w * (p[j] - t[j])
                };
                acc(nodes, grads, *pred, |gp| {
                    for (j, v) in gp.iter_mut().enumerate() {
                        *v += diff(j);
                    }
                });
                acc(nodes, grads, *target, |gt| {
                    for (j, v) in gt.iter_mut().enumerate() {
                        *v -= diff(j);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                acc(nodes, grads, *logits, |gl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            gl[r * k + j] += (probs[r * k + j] - onehot) * scale;
                        }
                    }
                });
            }
        }
    }

    /// Adds parameter-leaf gradients from the last backward pass into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(name), Some(g)) = (&node.param, grad) {
                if store.is_frozen(name) {
                    continue;
                }
                store.get_mut(name)?.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
