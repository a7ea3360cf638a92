//! Differentiable shape algebra, elementwise arithmetic, matmul and reductions.

use super::{gemm, strides, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarOp {
    Add,
    Mul,
    /// `max(x, s)`; the gradient flows where `x > s`.
    Max,
}

/// Sums `g` (shaped like the broadcast output) down to a trailing block of
/// length `inner`.
fn reduce_leading(g: &[f32], inner: usize) -> Vec<f32> {
    let mut out = vec![0.0; inner];
    for chunk in g.chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Tape {
    /// Elementwise `a op b`. `b` may have the same shape as `a` or a
    /// trailing suffix of it, in which case it is broadcast over the
    /// leading dimensions.
    pub fn ewise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err!("{op:?}: {sa:?} and {sb:?} are not broadcast-compatible"));
        }
        let inner = bv.numel();
        let bd = bv.data();
        let data: Vec<f32> = av
            .data()
            .chunks_exact(inner)
            .flat_map(|chunk| {
                chunk.iter().zip(bd).map(move |(&x, &y)| match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                })
            })
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        self.record("ewise", out, &[a, b], move |ctx| {
            let g = ctx.grad;
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.needs[0].then(|| match op {
                BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                BinaryOp::Mul => g
                    .chunks_exact(inner)
                    .flat_map(|gc| gc.iter().zip(y).map(|(gv, yv)| gv * yv))
                    .collect(),
            });
            let gb = ctx.needs[1].then(|| match op {
                BinaryOp::Add => reduce_leading(g, inner),
                BinaryOp::Sub => reduce_leading(g, inner).into_iter().map(|v| -v).collect(),
                BinaryOp::Mul => {
                    let prod: Vec<f32> = g.iter().zip(x).map(|(gv, xv)| gv * xv).collect();
                    reduce_leading(&prod, inner)
                }
            });
            vec![ga, gb]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(BinaryOp::Mul, a, b)
    }

    /// Elementwise operation against a scalar operand.
    pub fn ewise_scalar(&mut self, op: ScalarOp, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).map(|x| match op {
            ScalarOp::Add => x + s,
            ScalarOp::Mul => x * s,
            ScalarOp::Max => x.max(s),
        });
        self.record("ewise_scalar", out, &[a], move |ctx| {
            let g = ctx.grad;
            let ga = match op {
                ScalarOp::Add => g.to_vec(),
                ScalarOp::Mul => g.iter().map(|v| v * s).collect(),
                ScalarOp::Max => g
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(gv, &x)| if x > s { *gv } else { 0.0 })
                    .collect(),
            };
            vec![Some(ga)]
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.ewise_scalar(ScalarOp::Add, a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.ewise_scalar(ScalarOp::Mul, a, s)
    }

    pub fn max_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.ewise_scalar(ScalarOp::Max, a, s)
    }

    /// Batched matrix product `[..×M×K] · [..×K×N] → [..×M×N]`.
    ///
    /// Leading batch dimensions broadcast NumPy-style.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = MatmulPlan::new(av.shape(), bv.shape())?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        for (bi, (oa, ob)) in plan.offsets.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                (&av.data()[oa * m * k..], k, 1),
                (&bv.data()[ob * k * n..], n, 1),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out = Tensor::from_parts(plan.out_shape.clone(), out);
        self.record("matmul", out, &[a, b], move |ctx| {
            let (x, y, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut ga = ctx.needs[0].then(|| vec![0.0; x.len()]);
            let mut gb = ctx.needs[1].then(|| vec![0.0; y.len()]);
            for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
                let gblk = &g[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        (gblk, n, 1),
                        (&y[ob * k * n..], 1, n),
                        1.0,
                        &mut ga[oa * m * k..(oa + 1) * m * k],
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        (&x[oa * m * k..], 1, k),
                        (gblk, n, 1),
                        1.0,
                        &mut gb[ob * k * n..(ob + 1) * k * n],
                    );
                }
            }
            vec![ga, gb]
        })
    }

    /// Sum over `axes`, which are removed from the shape.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    /// Mean over `axes`: the sum divided by the number of reduced elements.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.mean(a, &axes)
    }

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || reduced[ax] {
                return Err(shape_err!("invalid reduction axis {ax} for {shape:?}"));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        let index_map = reduction_index_map(&shape, &reduced);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in av.data().iter().zip(&index_map) {
            out[o] += v;
        }
        let scale = if mean { 1.0 / count as f32 } else { 1.0 };
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let out = Tensor::from_parts(out_shape, out);
        self.record(if mean { "mean" } else { "sum" }, out, &[a], move |ctx| {
            let g = ctx.grad;
            vec![Some(index_map.iter().map(|&o| g[o] * scale).collect())]
        })
    }

    /// Differentiable reshape; the element order is unchanged.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.record("reshape", out, &[a], |ctx| vec![Some(ctx.grad.to_vec())])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut seen = vec![false; av.rank()];
        if perm.len() != av.rank() || perm.iter().any(|&p| p >= av.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("{perm:?} is not a permutation of {:?}", av.shape()));
        }
        let (data, shape) = permute_data(av.data(), av.shape(), perm);
        let in_shape = av.shape().to_vec();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out = Tensor::from_parts(shape.clone(), data);
        self.record("permute", out, &[a], move |ctx| {
            let (g, s) = permute_data(ctx.grad, &shape, &inverse);
            debug_assert_eq!(s, in_shape);
            vec![Some(g)]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(shape_err!("transpose needs rank ≥ 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }
}

/// Maps each input flat index to its output flat index under a reduction.
fn reduction_index_map(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let kept: Vec<usize> = shape
        .iter()
        .zip(reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let out_strides = strides(&kept);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let o: usize = idx
            .iter()
            .zip(&out_strides)
            .zip(reduced)
            .map(|((&i, &s), &r)| if r { 0 } else { i * s })
            .sum();
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

pub(crate) fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if out_shape.is_empty() {
        return (data.to_vec(), out_shape);
    }
    // Walk the output in order; the innermost axis is copied with a stride.
    let last = out_shape.len() - 1;
    let (inner_len, inner_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; last];
    for _ in 0..n / inner_len {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner_len).map(|j| data[base + j * inner_stride]));
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Batch bookkeeping for a broadcast matmul.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// `(lhs batch, rhs batch)` for every output batch, in order.
    offsets: Vec<(usize, usize)>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank ≥ 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err!("matmul inner dims differ: {sa:?} · {sb:?}"));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(shape_err!("matmul batch dims {ba:?} and {bb:?} do not broadcast"));
            }
            batch.push(x.max(y));
        }
        let (sta, stb) = (strides(&pa), strides(&pb));
        let nb: usize = batch.iter().product();
        let mut offsets = Vec::with_capacity(nb);
        let mut idx = vec![0usize; rank];
        for _ in 0..nb {
            let mut oa = 0;
            let mut ob = 0;
            for ax in 0..rank {
                if pa[ax] != 1 {
                    oa += idx[ax] * sta[ax];
                }
                if pb[ax] != 1 {
                    ob += idx[ax] * stb[ax];
                }
            }
            offsets.push((oa, ob));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            offsets,
        })
    }
}
