//! Dense tensors on a reverse-mode differentiation tape.
//!
//! Values live in an arena owned by [`Tape`]; every operation appends its
//! output as a new node and records enough state to replay itself backward.
//! [`Tape::backward`] walks the recorded operations once, in reverse, and
//! accumulates gradients for every node that (transitively) depends on a
//! registered parameter.
//!
//! The element type is generic over [`Scalar`] so the same operations run in
//! production at `f32` and in gradient checks at `f64`. Reductions (matrix
//! products, softmax sums, losses) accumulate in [`Scalar::Acc`], which is
//! `f64` for both instantiations, keeping row sums stable at large widths.
//!
//! A tape is single-threaded and lives for one forward/backward pass;
//! parameters are re-registered on each fresh tape.

use std::fmt::Debug;

use num_traits::{Float, NumCast, One, Zero};

use crate::error::{Error, Result};

// ── Element types ───────────────────────────────────────────────────────────

/// Floating-point element usable on a tape.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Copy + Debug + Send + Sync + 'static
{
    /// Wider type used for in-op accumulation.
    type Acc: num_traits::Float + num_traits::NumAssignOps + Copy;

    fn acc(self) -> Self::Acc;
    fn from_acc(a: Self::Acc) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    type Acc = f64;

    #[inline]
    fn acc(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_acc(a: f64) -> f32 {
        a as f32
    }
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    type Acc = f64;

    #[inline]
    fn acc(self) -> f64 {
        self
    }
    #[inline]
    fn from_acc(a: f64) -> f64 {
        a
    }
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

// ── Handles and nodes ───────────────────────────────────────────────────────

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(usize);

/// Activation applied by [`Tape::affine`] after the linear map.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Relu,
    None,
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
}

enum Op<T> {
    Affine {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        out: TensorId,
        relu: bool,
    },
    SoftmaxAxis {
        x: TensorId,
        out: TensorId,
        axis: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    /// Elementwise product where `s` has the same shape as `a` except its
    /// last axis is 1 and broadcasts over `a`'s last axis.
    MulBroadcastLast {
        a: TensorId,
        s: TensorId,
        out: TensorId,
    },
    Scale {
        x: TensorId,
        out: TensorId,
        factor: T,
    },
    ConcatLast {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    SliceLast {
        x: TensorId,
        out: TensorId,
        start: usize,
        len: usize,
    },
    MaxAxis {
        x: TensorId,
        out: TensorId,
        axis: usize,
        argmax: Vec<u32>,
    },
    GatherRows {
        x: TensorId,
        out: TensorId,
        indices: Vec<usize>,
    },
    ScatterAddRows {
        x: TensorId,
        out: TensorId,
        indices: Vec<usize>,
    },
    /// Row mixing with fixed weights: `out[d] = Σ_j w[d,j] · src[idx[d,j]]`.
    WeightedGather {
        src: TensorId,
        out: TensorId,
        indices: Vec<usize>,
        weights: Vec<T>,
        k: usize,
    },
    /// Per-channel matrix product: `out[i,k,c] = Σ_j g[i,j,c] · m[j,k,c]`.
    ChannelMatmul {
        g: TensorId,
        m: TensorId,
        out: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        out: TensorId,
        labels: Vec<usize>,
        weights: Option<Vec<T>>,
        /// Log-sum-exp per row, saved for the backward softmax.
        row_lse: Vec<T>,
    },
    SumAll {
        x: TensorId,
        out: TensorId,
    },
    MeanAll {
        x: TensorId,
        out: TensorId,
    },
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, mid, inner) extents for iterating slices along `axis`.
fn axis_spans(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

// ── Gradients ───────────────────────────────────────────────────────────────

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`, or `None` when the loss does not depend on it.
    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

/// Arena of tensors plus the operation record connecting them.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op<T>>,
    bindings: Vec<(String, TensorId)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn add_node(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel_of(&shape) {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Leaf tensor that gradients do not flow into.
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<TensorId> {
        self.add_node(data, shape, false)
    }

    /// Named parameter leaf; its gradient is retrievable through
    /// [`Tape::parameter_gradients`]. Names must be unique per tape.
    pub fn param(&mut self, name: &str, data: &[T], shape: &[usize]) -> Result<TensorId> {
        if self.bindings.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!(
                "parameter {name:?} registered twice on one tape"
            )));
        }
        let id = self.add_node(data.to_vec(), shape.to_vec(), true)?;
        self.bindings.push((name.to_string(), id));
        Ok(id)
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> T {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    /// Parameters registered via [`Tape::param`], in registration order.
    pub fn bindings(&self) -> &[(String, TensorId)] {
        &self.bindings
    }

    fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// `y = act(x · w + b)` where `x` is `[..., Cin]`, `w` is `[Cin, Cout]`
    /// and `b` is `[Cout]`. Leading axes of `x` are treated as batch.
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId, act: Activation) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 || xs.is_empty() || ws[0] == 0 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::Dimension {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        let (cin, cout) = (ws[0], ws[1]);
        if bs != [cout] {
            return Err(Error::Dimension {
                op: "affine bias",
                lhs: bs,
                rhs: vec![cout],
            });
        }
        let rows = numel_of(&xs) / cin;
        let mut out = vec![T::zero(); rows * cout];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            let mut acc = vec![T::Acc::zero(); cout];
            for r in 0..rows {
                for (o, slot) in acc.iter_mut().enumerate() {
                    *slot = bd[o].acc();
                }
                let xrow = &xd[r * cin..(r + 1) * cin];
                for (i, &xv) in xrow.iter().enumerate() {
                    let xa = xv.acc();
                    let wrow = &wd[i * cout..(i + 1) * cout];
                    for (slot, &wv) in acc.iter_mut().zip(wrow) {
                        *slot += xa * wv.acc();
                    }
                }
                let orow = &mut out[r * cout..(r + 1) * cout];
                for (dst, &a) in orow.iter_mut().zip(acc.iter()) {
                    let v = T::from_acc(a);
                    *dst = match act {
                        Activation::Relu => {
                            if v > T::zero() {
                                v
                            } else {
                                T::zero()
                            }
                        }
                        Activation::None => v,
                    };
                }
            }
        }
        let mut oshape = xs;
        *oshape.last_mut().unwrap() = cout;
        let rg = self.any_requires_grad(&[x, w, b]);
        let out_id = self.add_node(out, oshape, rg)?;
        self.ops.push(Op::Affine {
            x,
            w,
            b,
            out: out_id,
            relu: matches!(act, Activation::Relu),
        });
        Ok(out_id)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let rank = self.shape(x).len();
        if rank == 0 {
            return Err(Error::Dimension {
                op: "softmax_last",
                lhs: vec![],
                rhs: vec![],
            });
        }
        self.softmax_axis(x, rank - 1)
    }

    /// Numerically stable softmax over `axis`; every slice along the axis
    /// sums to 1.
    pub fn softmax_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Parameter {
                name: "softmax axis",
                message: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, mid, inner) = axis_spans(&shape, axis);
        let mut out = vec![T::zero(); numel_of(&shape)];
        {
            let xd = &self.nodes[x.0].data;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * mid * inner + i;
                    let mut max = T::neg_infinity();
                    for m in 0..mid {
                        let v = xd[base + m * inner];
                        if v > max {
                            max = v;
                        }
                    }
                    let mut sum = T::Acc::zero();
                    for m in 0..mid {
                        let e = (xd[base + m * inner] - max).exp();
                        out[base + m * inner] = e;
                        sum += e.acc();
                    }
                    for m in 0..mid {
                        out[base + m * inner] = T::from_acc(out[base + m * inner].acc() / sum);
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let out_id = self.add_node(out, shape, rg)?;
        self.ops.push(Op::SoftmaxAxis { x, out: out_id, axis });
        Ok(out_id)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dimension {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_requires_grad(&[a, b]);
        let out_id = self.add_node(data, sa, rg)?;
        self.ops.push(Op::Add { a, b, out: out_id });
        Ok(out_id)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dimension {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_requires_grad(&[a, b]);
        let out_id = self.add_node(data, sa, rg)?;
        self.ops.push(Op::Mul { a, b, out: out_id });
        Ok(out_id)
    }

    /// `a[..., c] * s[..., 0]` — `s` must match `a` except for a final axis
    /// of width 1, which broadcasts across `a`'s last axis.
    pub fn mul_broadcast_last(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let ss = self.shape(s).to_vec();
        let ok = !sa.is_empty()
            && ss.len() == sa.len()
            && ss[sa.len() - 1] == 1
            && ss[..sa.len() - 1] == sa[..sa.len() - 1];
        if !ok {
            return Err(Error::Dimension {
                op: "mul_broadcast_last",
                lhs: sa,
                rhs: ss,
            });
        }
        let width = sa[sa.len() - 1];
        let rows = numel_of(&sa) / width.max(1);
        let mut data = vec![T::zero(); numel_of(&sa)];
        {
            let ad = &self.nodes[a.0].data;
            let sd = &self.nodes[s.0].data;
            for r in 0..rows {
                let f = sd[r];
                for c in 0..width {
                    data[r * width + c] = ad[r * width + c] * f;
                }
            }
        }
        let rg = self.any_requires_grad(&[a, s]);
        let out_id = self.add_node(data, sa, rg)?;
        self.ops.push(Op::MulBroadcastLast { a, s, out: out_id });
        Ok(out_id)
    }

    pub fn scale(&mut self, x: TensorId, factor: T) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let data = self.nodes[x.0].data.iter().map(|&v| v * factor).collect();
        let rg = self.nodes[x.0].requires_grad;
        let out_id = self.add_node(data, shape, rg)?;
        self.ops.push(Op::Scale {
            x,
            out: out_id,
            factor,
        });
        Ok(out_id)
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = !sa.is_empty() && sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1];
        if !ok {
            return Err(Error::Dimension {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut data = vec![T::zero(); rows * (wa + wb)];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for r in 0..rows {
                data[r * (wa + wb)..r * (wa + wb) + wa].copy_from_slice(&ad[r * wa..(r + 1) * wa]);
                data[r * (wa + wb) + wa..(r + 1) * (wa + wb)]
                    .copy_from_slice(&bd[r * wb..(r + 1) * wb]);
            }
        }
        let mut oshape = sa;
        *oshape.last_mut().unwrap() = wa + wb;
        let rg = self.any_requires_grad(&[a, b]);
        let out_id = self.add_node(data, oshape, rg)?;
        self.ops.push(Op::ConcatLast { a, b, out: out_id });
        Ok(out_id)
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or(Error::Dimension {
            op: "slice_last",
            lhs: vec![],
            rhs: vec![],
        })?;
        if len == 0 || start + len > width {
            return Err(Error::Parameter {
                name: "slice range",
                message: format!("[{start}, {}) out of width {width}", start + len),
            });
        }
        let rows = numel_of(&shape) / width;
        let mut data = vec![T::zero(); rows * len];
        {
            let xd = &self.nodes[x.0].data;
            for r in 0..rows {
                data[r * len..(r + 1) * len]
                    .copy_from_slice(&xd[r * width + start..r * width + start + len]);
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let rg = self.nodes[x.0].requires_grad;
        let out_id = self.add_node(data, oshape, rg)?;
        self.ops.push(Op::SliceLast {
            x,
            out: out_id,
            start,
            len,
        });
        Ok(out_id)
    }

    /// Maximum over `axis`. Ties resolve to the first maximal element, which
    /// is also where the gradient flows.
    pub fn max_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Parameter {
                name: "max axis",
                message: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let (outer, mid, inner) = axis_spans(&shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        {
            let xd = &self.nodes[x.0].data;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * mid * inner + i;
                    let mut best = xd[base];
                    let mut best_m = 0u32;
                    for m in 1..mid {
                        let v = xd[base + m * inner];
                        if v > best {
                            best = v;
                            best_m = m as u32;
                        }
                    }
                    data[o * inner + i] = best;
                    argmax[o * inner + i] = best_m;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.nodes[x.0].requires_grad;
        let out_id = self.add_node(data, oshape, rg)?;
        self.ops.push(Op::MaxAxis {
            x,
            out: out_id,
            axis,
            argmax,
        });
        Ok(out_id)
    }

    /// Gather rows of `x` (its leading axis) by `indices`; output shape is
    /// `index_shape ++ x.shape[1..]`.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize], index_shape: &[usize]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: shape,
                rhs: index_shape.to_vec(),
            });
        }
        if indices.len() != numel_of(index_shape) {
            return Err(Error::Contract(format!(
                "gather_rows: {} indices for index shape {:?}",
                indices.len(),
                index_shape
            )));
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let row_size = numel_of(&shape) / rows;
        let mut data = vec![T::zero(); indices.len() * row_size];
        {
            let xd = &self.nodes[x.0].data;
            for (l, &idx) in indices.iter().enumerate() {
                data[l * row_size..(l + 1) * row_size]
                    .copy_from_slice(&xd[idx * row_size..(idx + 1) * row_size]);
            }
        }
        let mut oshape = index_shape.to_vec();
        oshape.extend_from_slice(&shape[1..]);
        let rg = self.nodes[x.0].requires_grad;
        let out_id = self.add_node(data, oshape, rg)?;
        self.ops.push(Op::GatherRows {
            x,
            out: out_id,
            indices: indices.to_vec(),
        });
        Ok(out_id)
    }

    /// Sum rows of `x` into an output with `out_rows` rows: row `l` of `x`
    /// (flattening the first `index_rank` axes) is added to output row
    /// `indices[l]`. The adjoint of [`Tape::gather_rows`].
    pub fn scatter_add_rows(
        &mut self,
        x: TensorId,
        indices: &[usize],
        index_rank: usize,
        out_rows: usize,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if index_rank == 0 || index_rank > shape.len() {
            return Err(Error::Parameter {
                name: "scatter index rank",
                message: format!("rank {index_rank} invalid for shape {shape:?}"),
            });
        }
        let lead: usize = shape[..index_rank].iter().product();
        if indices.len() != lead {
            return Err(Error::Contract(format!(
                "scatter_add_rows: {} indices for {} leading rows",
                indices.len(),
                lead
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Contract(format!(
                "scatter_add_rows: index {bad} out of range for {out_rows} rows"
            )));
        }
        let row_size: usize = shape[index_rank..].iter().product();
        let mut acc = vec![T::Acc::zero(); out_rows * row_size];
        {
            let xd = &self.nodes[x.0].data;
            for (l, &idx) in indices.iter().enumerate() {
                for c in 0..row_size {
                    acc[idx * row_size + c] += xd[l * row_size + c].acc();
                }
            }
        }
        let data = acc.into_iter().map(T::from_acc).collect();
        let mut oshape = vec![out_rows];
        oshape.extend_from_slice(&shape[index_rank..]);
        let rg = self.nodes[x.0].requires_grad;
        let out_id = self.add_node(data, oshape, rg)?;
        self.ops.push(Op::ScatterAddRows {
            x,
            out: out_id,
            indices: indices.to_vec(),
        });
        Ok(out_id)
    }

    /// Fixed-weight row mixture: with `src` of shape `[M, C...]` and a plan
    /// of `n` destinations × `k` sources each, `out[d] = Σ_j weights[d,k+j] ·
    /// src[indices[d,k+j]]`.
    pub fn weighted_gather(
        &mut self,
        src: TensorId,
        indices: &[usize],
        weights: &[T],
        k: usize,
    ) -> Result<TensorId> {
        let shape = self.shape(src).to_vec();
        if shape.is_empty() || shape[0] == 0 || k == 0 {
            return Err(Error::Dimension {
                op: "weighted_gather",
                lhs: shape,
                rhs: vec![k],
            });
        }
        if indices.len() != weights.len() || !indices.len().is_multiple_of(k) {
            return Err(Error::Contract(format!(
                "weighted_gather: {} indices, {} weights, group size {k}",
                indices.len(),
                weights.len()
            )));
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "weighted_gather: index {bad} out of range for {rows} rows"
            )));
        }
        let n = indices.len() / k;
        let row_size = numel_of(&shape) / rows;
        let mut data = vec![T::zero(); n * row_size];
        {
            let sd = &self.nodes[src.0].data;
            let mut acc = vec![T::Acc::zero(); row_size];
            for d in 0..n {
                for slot in acc.iter_mut() {
                    *slot = T::Acc::zero();
                }
                for j in 0..k {
                    let idx = indices[d * k + j];
                    let w = weights[d * k + j].acc();
                    let srow = &sd[idx * row_size..(idx + 1) * row_size];
                    for (slot, &v) in acc.iter_mut().zip(srow) {
                        *slot += w * v.acc();
                    }
                }
                for (dst, &a) in data[d * row_size..(d + 1) * row_size].iter_mut().zip(&acc) {
                    *dst = T::from_acc(a);
                }
            }
        }
        let mut oshape = vec![n];
        oshape.extend_from_slice(&shape[1..]);
        let rg = self.nodes[src.0].requires_grad;
        let out_id = self.add_node(data, oshape, rg)?;
        self.ops.push(Op::WeightedGather {
            src,
            out: out_id,
            indices: indices.to_vec(),
            weights: weights.to_vec(),
            k,
        });
        Ok(out_id)
    }

    /// Per-channel matrix product: `g` is `[N, M, C]`, `m` is `[M, K, C]`,
    /// output `[N, K, C]` with `out[i,k,c] = Σ_j g[i,j,c] · m[j,k,c]`.
    pub fn channel_matmul(&mut self, g: TensorId, m: TensorId) -> Result<TensorId> {
        let gs = self.shape(g).to_vec();
        let ms = self.shape(m).to_vec();
        if gs.len() != 3 || ms.len() != 3 || gs[1] != ms[0] || gs[2] != ms[2] {
            return Err(Error::Dimension {
                op: "channel_matmul",
                lhs: gs,
                rhs: ms,
            });
        }
        let (n, mid, c) = (gs[0], gs[1], gs[2]);
        let k = ms[1];
        let mut data = vec![T::zero(); n * k * c];
        {
            let gd = &self.nodes[g.0].data;
            let md = &self.nodes[m.0].data;
            let mut acc = vec![T::Acc::zero(); k * c];
            for i in 0..n {
                for slot in acc.iter_mut() {
                    *slot = T::Acc::zero();
                }
                for j in 0..mid {
                    let grow = &gd[(i * mid + j) * c..(i * mid + j + 1) * c];
                    let mrow = &md[j * k * c..(j + 1) * k * c];
                    for kk in 0..k {
                        let mslice = &mrow[kk * c..(kk + 1) * c];
                        let aslice = &mut acc[kk * c..(kk + 1) * c];
                        for ((slot, &gv), &mv) in aslice.iter_mut().zip(grow).zip(mslice) {
                            *slot += gv.acc() * mv.acc();
                        }
                    }
                }
                for (dst, &a) in data[i * k * c..(i + 1) * k * c].iter_mut().zip(&acc) {
                    *dst = T::from_acc(a);
                }
            }
        }
        let rg = self.any_requires_grad(&[g, m]);
        let out_id = self.add_node(data, vec![n, k, c], rg)?;
        self.ops.push(Op::ChannelMatmul { g, m, out: out_id });
        Ok(out_id)
    }

    /// Mean over rows of the weighted negative log softmax probability of
    /// the true class: `(1/N) Σ_i w[y_i] · (lse(logits_i) − logits_i[y_i])`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[u32],
        weights: Option<&[T]>,
    ) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy labels",
                lhs: vec![labels.len()],
                rhs: vec![n],
            });
        }
        if let Some(w) = weights {
            if w.len() != c {
                return Err(Error::Dimension {
                    op: "cross_entropy weights",
                    lhs: vec![w.len()],
                    rhs: vec![c],
                });
            }
        }
        let mut idx_labels = Vec::with_capacity(n);
        for (i, &l) in labels.iter().enumerate() {
            if (l as usize) >= c {
                return Err(Error::Data {
                    index: i,
                    message: format!("label {l} out of range for {c} classes"),
                });
            }
            idx_labels.push(l as usize);
        }
        let mut row_lse = vec![T::zero(); n];
        let mut total = T::Acc::zero();
        {
            let xd = &self.nodes[logits.0].data;
            for r in 0..n {
                let row = &xd[r * c..(r + 1) * c];
                let mut max = T::neg_infinity();
                for &v in row {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::Acc::zero();
                for &v in row {
                    sum += (v - max).exp().acc();
                }
                let lse = max.acc() + sum.ln();
                row_lse[r] = T::from_acc(lse);
                let nll = lse - row[idx_labels[r]].acc();
                let w = weights.map_or(T::Acc::one(), |w| w[idx_labels[r]].acc());
                total += w * nll;
            }
        }
        let loss = T::from_acc(total / <T::Acc as NumCast>::from(n).unwrap());
        let rg = self.nodes[logits.0].requires_grad;
        let out_id = self.add_node(vec![loss], vec![1], rg)?;
        self.ops.push(Op::CrossEntropy {
            logits,
            out: out_id,
            labels: idx_labels,
            weights: weights.map(|w| w.to_vec()),
            row_lse,
        });
        Ok(out_id)
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut total = T::Acc::zero();
        for &v in &self.nodes[x.0].data {
            total += v.acc();
        }
        let rg = self.nodes[x.0].requires_grad;
        let out_id = self.add_node(vec![T::from_acc(total)], vec![1], rg)?;
        self.ops.push(Op::SumAll { x, out: out_id });
        Ok(out_id)
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.numel(x);
        if n == 0 {
            return Err(Error::Contract("mean_all of empty tensor".into()));
        }
        let mut total = T::Acc::zero();
        for &v in &self.nodes[x.0].data {
            total += v.acc();
        }
        let mean = T::from_acc(total / <T::Acc as NumCast>::from(n).unwrap());
        let rg = self.nodes[x.0].requires_grad;
        let out_id = self.add_node(vec![mean], vec![1], rg)?;
        self.ops.push(Op::MeanAll { x, out: out_id });
        Ok(out_id)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode replay seeded with `∂loss/∂loss = 1`. `loss` must be a
    /// single-element tensor. Each recorded operation is visited exactly
    /// once, in reverse order.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<T>> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = self.nodes.iter().map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every registered parameter, zero-filled when the loss
    /// does not reach it, in registration order.
    pub fn parameter_gradients(&self, grads: &Gradients<T>) -> Vec<(String, Vec<T>)> {
        self.bindings
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(*id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); self.numel(*id)]);
                (name.clone(), g)
            })
            .collect()
    }

    fn accum(&self, grads: &mut Vec<Option<Vec<T>>>, id: TensorId, delta: &[T]) {
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (dst, &d) in g.iter_mut().zip(delta) {
                    *dst += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, op: &Op<T>, grads: &mut Vec<Option<Vec<T>>>) {
        match op {
            Op::Affine { x, w, b, out, relu } => {
                let Some(gout) = grads[out.0].clone() else { return };
                let ws = &self.nodes[w.0].shape;
                let (cin, cout) = (ws[0], ws[1]);
                let rows = self.nodes[x.0].data.len() / cin;
                let gpre: Vec<T> = if *relu {
                    gout.iter()
                        .zip(&self.nodes[out.0].data)
                        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                        .collect()
                } else {
                    gout
                };
                if self.nodes[x.0].requires_grad {
                    let wd = &self.nodes[w.0].data;
                    let mut dx = vec![T::zero(); rows * cin];
                    for r in 0..rows {
                        let grow = &gpre[r * cout..(r + 1) * cout];
                        for i in 0..cin {
                            let wrow = &wd[i * cout..(i + 1) * cout];
                            let mut acc = T::Acc::zero();
                            for (&g, &wv) in grow.iter().zip(wrow) {
                                acc += g.acc() * wv.acc();
                            }
                            dx[r * cin + i] = T::from_acc(acc);
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
                if self.nodes[w.0].requires_grad {
                    let xd = &self.nodes[x.0].data;
                    let mut dw = vec![T::Acc::zero(); cin * cout];
                    for r in 0..rows {
                        let xrow = &xd[r * cin..(r + 1) * cin];
                        let grow = &gpre[r * cout..(r + 1) * cout];
                        for (i, &xv) in xrow.iter().enumerate() {
                            let xa = xv.acc();
                            let drow = &mut dw[i * cout..(i + 1) * cout];
                            for (slot, &g) in drow.iter_mut().zip(grow) {
                                *slot += xa * g.acc();
                            }
                        }
                    }
                    let dw: Vec<T> = dw.into_iter().map(T::from_acc).collect();
                    self.accum(grads, *w, &dw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::Acc::zero(); cout];
                    for r in 0..rows {
                        for (slot, &g) in db.iter_mut().zip(&gpre[r * cout..(r + 1) * cout]) {
                            *slot += g.acc();
                        }
                    }
                    let db: Vec<T> = db.into_iter().map(T::from_acc).collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::SoftmaxAxis { x, out, axis } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let shape = &self.nodes[out.0].shape;
                let (outer, mid, inner) = axis_spans(shape, *axis);
                let yd = &self.nodes[out.0].data;
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * mid * inner + i;
                        let mut dot = T::Acc::zero();
                        for m in 0..mid {
                            let p = base + m * inner;
                            dot += gout[p].acc() * yd[p].acc();
                        }
                        for m in 0..mid {
                            let p = base + m * inner;
                            dx[p] = T::from_acc(yd[p].acc() * (gout[p].acc() - dot));
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::Add { a, b, out } => {
                let Some(gout) = grads[out.0].clone() else { return };
                if self.nodes[a.0].requires_grad {
                    self.accum(grads, *a, &gout);
                }
                if self.nodes[b.0].requires_grad {
                    self.accum(grads, *b, &gout);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(gout) = grads[out.0].clone() else { return };
                if self.nodes[a.0].requires_grad {
                    let da: Vec<T> = gout
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<T> = gout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::MulBroadcastLast { a, s, out } => {
                let Some(gout) = grads[out.0].clone() else { return };
                let shape = &self.nodes[a.0].shape;
                let width = shape[shape.len() - 1];
                let rows = self.nodes[a.0].data.len() / width.max(1);
                if self.nodes[a.0].requires_grad {
                    let sd = &self.nodes[s.0].data;
                    let mut da = vec![T::zero(); self.nodes[a.0].data.len()];
                    for r in 0..rows {
                        let f = sd[r];
                        for c in 0..width {
                            da[r * width + c] = gout[r * width + c] * f;
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[s.0].requires_grad {
                    let ad = &self.nodes[a.0].data;
                    let mut ds = vec![T::zero(); rows];
                    for (r, item) in ds.iter_mut().enumerate() {
                        let mut acc = T::Acc::zero();
                        for c in 0..width {
                            acc += gout[r * width + c].acc() * ad[r * width + c].acc();
                        }
                        *item = T::from_acc(acc);
                    }
                    self.accum(grads, *s, &ds);
                }
            }
            Op::Scale { x, out, factor } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let dx: Vec<T> = gout.iter().map(|&g| g * *factor).collect();
                self.accum(grads, *x, &dx);
            }
            Op::ConcatLast { a, b, out } => {
                let Some(gout) = grads[out.0].clone() else { return };
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
                let rows: usize = sa[..sa.len() - 1].iter().product();
                if self.nodes[a.0].requires_grad && wa > 0 {
                    let mut da = vec![T::zero(); rows * wa];
                    for r in 0..rows {
                        da[r * wa..(r + 1) * wa]
                            .copy_from_slice(&gout[r * (wa + wb)..r * (wa + wb) + wa]);
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad && wb > 0 {
                    let mut db = vec![T::zero(); rows * wb];
                    for r in 0..rows {
                        db[r * wb..(r + 1) * wb]
                            .copy_from_slice(&gout[r * (wa + wb) + wa..(r + 1) * (wa + wb)]);
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::SliceLast { x, out, start, len } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let shape = &self.nodes[x.0].shape;
                let width = shape[shape.len() - 1];
                let rows = self.nodes[x.0].data.len() / width;
                let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                for r in 0..rows {
                    dx[r * width + start..r * width + start + len]
                        .copy_from_slice(&gout[r * len..(r + 1) * len]);
                }
                self.accum(grads, *x, &dx);
            }
            Op::MaxAxis { x, out, axis, argmax } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let shape = &self.nodes[x.0].shape;
                let (outer, mid, inner) = axis_spans(shape, *axis);
                let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let m = argmax[o * inner + i] as usize;
                        dx[o * mid * inner + m * inner + i] += gout[o * inner + i];
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::GatherRows { x, out, indices } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let rows = self.nodes[x.0].shape[0];
                let row_size = self.nodes[x.0].data.len() / rows;
                let mut acc = vec![T::Acc::zero(); rows * row_size];
                for (l, &idx) in indices.iter().enumerate() {
                    for c in 0..row_size {
                        acc[idx * row_size + c] += gout[l * row_size + c].acc();
                    }
                }
                let dx: Vec<T> = acc.into_iter().map(T::from_acc).collect();
                self.accum(grads, *x, &dx);
            }
            Op::ScatterAddRows { x, out, indices } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let out_rows = self.nodes[out.0].shape[0];
                let row_size = self.nodes[out.0].data.len() / out_rows;
                let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                for (l, &idx) in indices.iter().enumerate() {
                    dx[l * row_size..(l + 1) * row_size]
                        .copy_from_slice(&gout[idx * row_size..(idx + 1) * row_size]);
                }
                self.accum(grads, *x, &dx);
            }
            Op::WeightedGather {
                src,
                out,
                indices,
                weights,
                k,
            } => {
                if !self.nodes[src.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let rows = self.nodes[src.0].shape[0];
                let row_size = self.nodes[src.0].data.len() / rows;
                let n = indices.len() / k;
                let mut acc = vec![T::Acc::zero(); rows * row_size];
                for d in 0..n {
                    let grow = &gout[d * row_size..(d + 1) * row_size];
                    for j in 0..*k {
                        let idx = indices[d * k + j];
                        let w = weights[d * k + j].acc();
                        for (c, &g) in grow.iter().enumerate() {
                            acc[idx * row_size + c] += w * g.acc();
                        }
                    }
                }
                let dsrc: Vec<T> = acc.into_iter().map(T::from_acc).collect();
                self.accum(grads, *src, &dsrc);
            }
            Op::ChannelMatmul { g, m, out } => {
                let Some(gout) = grads[out.0].clone() else { return };
                let gs = &self.nodes[g.0].shape;
                let ms = &self.nodes[m.0].shape;
                let (n, mid, c) = (gs[0], gs[1], gs[2]);
                let k = ms[1];
                let gd = &self.nodes[g.0].data;
                let md = &self.nodes[m.0].data;
                if self.nodes[g.0].requires_grad {
                    let mut dg = vec![T::zero(); n * mid * c];
                    let mut acc = vec![T::Acc::zero(); c];
                    for i in 0..n {
                        let orow = &gout[i * k * c..(i + 1) * k * c];
                        for j in 0..mid {
                            for slot in acc.iter_mut() {
                                *slot = T::Acc::zero();
                            }
                            let mrow = &md[j * k * c..(j + 1) * k * c];
                            for kk in 0..k {
                                let os = &orow[kk * c..(kk + 1) * c];
                                let msl = &mrow[kk * c..(kk + 1) * c];
                                for ((slot, &ov), &mv) in acc.iter_mut().zip(os).zip(msl) {
                                    *slot += ov.acc() * mv.acc();
                                }
                            }
                            for (dst, &a) in dg[(i * mid + j) * c..(i * mid + j + 1) * c]
                                .iter_mut()
                                .zip(&acc)
                            {
                                *dst = T::from_acc(a);
                            }
                        }
                    }
                    self.accum(grads, *g, &dg);
                }
                if self.nodes[m.0].requires_grad {
                    let mut acc = vec![T::Acc::zero(); k * c];
                    let mut dm = vec![T::zero(); mid * k * c];
                    for j in 0..mid {
                        for slot in acc.iter_mut() {
                            *slot = T::Acc::zero();
                        }
                        for i in 0..n {
                            let grow = &gd[(i * mid + j) * c..(i * mid + j + 1) * c];
                            let orow = &gout[i * k * c..(i + 1) * k * c];
                            for kk in 0..k {
                                let os = &orow[kk * c..(kk + 1) * c];
                                let asl = &mut acc[kk * c..(kk + 1) * c];
                                for ((slot, &gv), &ov) in asl.iter_mut().zip(grow).zip(os) {
                                    *slot += gv.acc() * ov.acc();
                                }
                            }
                        }
                        for (dst, &a) in dm[j * k * c..(j + 1) * k * c].iter_mut().zip(&acc) {
                            *dst = T::from_acc(a);
                        }
                    }
                    self.accum(grads, *m, &dm);
                }
            }
            Op::CrossEntropy {
                logits,
                out,
                labels,
                weights,
                row_lse,
            } => {
                if !self.nodes[logits.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let g = gout[0];
                let shape = &self.nodes[logits.0].shape;
                let (n, c) = (shape[0], shape[1]);
                let xd = &self.nodes[logits.0].data;
                let inv_n = T::Acc::one() / <T::Acc as NumCast>::from(n).unwrap();
                let mut dx = vec![T::zero(); n * c];
                for r in 0..n {
                    let w = weights
                        .as_ref()
                        .map_or(T::Acc::one(), |w| w[labels[r]].acc());
                    let scale = g.acc() * w * inv_n;
                    let lse = row_lse[r].acc();
                    for col in 0..c {
                        let p = (xd[r * c + col].acc() - lse).exp();
                        let ind = if col == labels[r] {
                            T::Acc::one()
                        } else {
                            T::Acc::zero()
                        };
                        dx[r * c + col] = T::from_acc(scale * (p - ind));
                    }
                }
                self.accum(grads, *logits, &dx);
            }
            Op::SumAll { x, out } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let dx = vec![gout[0]; self.nodes[x.0].data.len()];
                self.accum(grads, *x, &dx);
            }
            Op::MeanAll { x, out } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let Some(gout) = grads[out.0].clone() else { return };
                let n = self.nodes[x.0].data.len();
                let g = T::from_acc(gout[0].acc() / <T::Acc as NumCast>::from(n).unwrap());
                let dx = vec![g; n];
                self.accum(grads, *x, &dx);
            }
        }
    }
}

// ── Parameter container ─────────────────────────────────────────────────────

/// One affine layer's parameters, owned outside any tape.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Scalar> Linear<T> {
    /// Weights drawn uniformly from ±sqrt(6 / (fan_in + fan_out)), biases
    /// zero.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Linear {
            weight,
            bias: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    /// Register this layer's parameters on `tape` under `name` and apply the
    /// affine map to `x`.
    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId, name: &str, act: Activation) -> Result<TensorId> {
        let w = tape.param(&format!("{name}.weight"), &self.weight, &[self.in_dim, self.out_dim])?;
        let b = tape.param(&format!("{name}.bias"), &self.bias, &[self.out_dim])?;
        tape.affine(x, w, b, act)
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(&str, &[T], &[usize])) {
        f(&format!("{name}.weight"), &self.weight, &[self.in_dim, self.out_dim]);
        f(&format!("{name}.bias"), &self.bias, &[self.out_dim]);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(&str, &mut Vec<T>, &[usize])) {
        f(&format!("{name}.weight"), &mut self.weight, &[self.in_dim, self.out_dim]);
        f(&format!("{name}.bias"), &mut self.bias, &[self.out_dim]);
    }
}

// ── Gradient checking ───────────────────────────────────────────────────────

/// Floor for the relative-error denominator in [`grad_check`]. Differences
/// between two near-zero derivatives sit at the rounding-noise level of the
/// central difference (≈ machine epsilon × |f| / step) and must not be
/// amplified into spurious relative errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compare an analytic gradient against central finite differences of `f`.
///
/// Returns the maximum over parameters of
/// `|analytic − cd| / max(|analytic|, |cd|, GRAD_CHECK_FLOOR)` where
/// `cd = (f(p + step) − f(p − step)) / (2 · step)`. The objective should be
/// evaluated away from ReLU kinks and max-pool ties for the comparison to be
/// meaningful.
pub fn grad_check<F>(mut f: F, analytic: &[f64], params: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), params.len());
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let fp = f(&p);
        p[i] = orig - step;
        let fm = f(&p);
        p[i] = orig;
        let cd = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(cd.abs()).max(GRAD_CHECK_FLOOR);
        let err = (analytic[i] - cd).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

// ── Tests ───────────────────────────────────────────────────────────────────
