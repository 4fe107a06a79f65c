//! Static reverse-mode autodiff tape.
//!
//! A tape is rebuilt every optimization step. Nodes are appended in forward
//! order (so the list is already topologically sorted), values are computed
//! eagerly at construction, and one backward sweep fills gradients for every
//! node on a path from parameters to the loss. The op set is exactly what the
//! models need; each op implements its own backward in closed form.

use std::rc::Rc;
use std::sync::Arc;

use super::kernels::{
    conv3x3, conv3x3_backward, matmul, upsample2x, upsample2x_backward, ImageShape,
};
use super::params::{ParamId, ParamStore};
use super::tensor::{sc, Scalar, Tensor};
use crate::geometry::{se3_exp, Twist};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Per-sample ray packing for the volume-rendering ops. Samples of ray `r`
/// occupy `offsets[r]..offsets[r+1]`; `t` are segment midpoints, `delta`
/// segment widths, and `snorm`/`dnorm` their counterparts normalized to the
/// ray's [near, far] span (used by the distortion penalty).
#[derive(Clone, Debug)]
pub struct RayPack<T> {
    pub offsets: Vec<usize>,
    pub t: Vec<T>,
    pub delta: Vec<T>,
    pub snorm: Vec<T>,
    pub dnorm: Vec<T>,
}

impl<T: Scalar> RayPack<T> {
    pub fn n_rays(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_samples(&self) -> usize {
        *self.offsets.last().unwrap()
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Affine { w: NodeId, x: NodeId, b: Option<NodeId> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: T },
    Relu { x: NodeId },
    Softplus { x: NodeId },
    Sigmoid { x: NodeId },
    Exp { x: NodeId },
    Abs { x: NodeId },
    SoftmaxCols { x: NodeId },
    LogSoftmaxCols { x: NodeId },
    LseCols { x: NodeId },
    NormalizeCols { x: NodeId },
    Transpose { x: NodeId },
    Diag { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    RowSum { x: NodeId },
    ColSum { x: NodeId },
    ScaleCols { x: NodeId, s: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { x: NodeId, start: usize },
    GatherCols { x: NodeId, idx: Rc<Vec<u32>> },
    StopGrad,
    MaxPair { a: NodeId, b: NodeId },
    ReduceMax { x: NodeId },
    RenderWeights { sigma: NodeId, pack: Rc<RayPack<T>> },
    RaySum { x: NodeId, pack: Rc<RayPack<T>> },
    RayApply { w: NodeId, payload: NodeId, pack: Rc<RayPack<T>> },
    Distortion { w: NodeId, pack: Rc<RayPack<T>> },
    Conv { x: NodeId, w: NodeId, b: NodeId, shape: ImageShape, stride: usize },
    Upsample { x: NodeId, shape: ImageShape },
    Crop { x: NodeId, shape: ImageShape, hc: usize, wc: usize },
    BilinearGather { map: NodeId, shape: ImageShape, pts: Rc<Vec<(f64, f64)>> },
    ShiftDiff { x: NodeId, shape: ImageShape, horizontal: bool },
    Se3Transform { twist: NodeId, base: Rc<Tensor<T>> },
    HashEncode { pos: NodeId, tables: Vec<NodeId>, grid: Arc<GridMeta> },
}

/// Multi-resolution hash grid geometry (shared by forward and backward).
#[derive(Debug)]
pub struct GridMeta {
    pub levels: Vec<LevelMeta>,
    pub feats: usize,
    /// Samples clamped into the unit cube, for diagnostics.
    pub clamped: std::sync::atomic::AtomicU64,
}

#[derive(Clone, Copy, Debug)]
pub struct LevelMeta {
    pub res: usize,
    pub table_size: usize,
    /// Dense indexing when the level fits in the table, spatial hash otherwise.
    pub hashed: bool,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_bindings: Vec<(NodeId, ParamId)>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_bindings: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows, v.cols)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Copies the current parameter value onto the tape and binds the node so
    /// `accumulate_grads` can write back into the store.
    pub fn param(&mut self, store: &ParamStore<T>, pid: ParamId) -> NodeId {
        let id = self.push(store.value(pid).clone(), Op::Leaf, true);
        self.param_bindings.push((id, pid));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let v = matmul(self.value(a), self.value(b), ta, tb);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul { a, b, ta, tb }, g)
    }

    /// w (out x in) @ x (in x batch) + column-broadcast bias (out x 1).
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: Option<NodeId>) -> NodeId {
        let mut v = matmul(self.value(w), self.value(x), false, false);
        if let Some(bid) = b {
            let bias = self.value(bid);
            assert_eq!(bias.rows, v.rows);
            assert_eq!(bias.cols, 1);
            for r in 0..v.rows {
                let bv = bias.data[r];
                for e in v.row_mut(r) {
                    *e += bv;
                }
            }
        }
        let g = self.ng(w) || self.ng(x) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        self.push(v, Op::Affine { w, x, b }, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows);
        assert_eq!(va.cols, vb.cols);
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect(),
        };
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add { a, b }, g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows);
        assert_eq!(va.cols, vb.cols);
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| x - y).collect(),
        };
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub { a, b }, g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows);
        assert_eq!(va.cols, vb.cols);
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect(),
        };
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul { a, b }, g)
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let v = self.value(x).map(|e| e * k);
        let g = self.ng(x);
        self.push(v, Op::Scale { x, k }, g)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        let g = self.ng(x);
        self.push(v, Op::Relu { x }, g)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus_stable);
        let g = self.ng(x);
        self.push(v, Op::Softplus { x }, g)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid_stable);
        let g = self.ng(x);
        self.push(v, Op::Sigmoid { x }, g)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.exp());
        let g = self.ng(x);
        self.push(v, Op::Exp { x }, g)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.abs());
        let g = self.ng(x);
        self.push(v, Op::Abs { x }, g)
    }

    /// Softmax over rows, independently per column.
    pub fn softmax_cols(&mut self, x: NodeId) -> NodeId {
        let v = softmax_cols_val(self.value(x));
        let g = self.ng(x);
        self.push(v, Op::SoftmaxCols { x }, g)
    }

    pub fn log_softmax_cols(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let lse = lse_cols_val(xv);
        let mut v = xv.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                *v.at_mut(r, c) -= lse.data[c];
            }
        }
        let g = self.ng(x);
        self.push(v, Op::LogSoftmaxCols { x }, g)
    }

    /// log(sum(exp)) over rows, per column: (R x C) -> (1 x C).
    pub fn lse_cols(&mut self, x: NodeId) -> NodeId {
        let v = lse_cols_val(self.value(x));
        let g = self.ng(x);
        self.push(v, Op::LseCols { x }, g)
    }

    /// L2-normalize each column to unit length.
    pub fn normalize_cols(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = xv.clone();
        for c in 0..v.cols {
            let mut n = T::zero();
            for r in 0..v.rows {
                let e = v.at(r, c);
                n += e * e;
            }
            let n = n.sqrt().max(sc(1e-12));
            for r in 0..v.rows {
                *v.at_mut(r, c) = v.at(r, c) / n;
            }
        }
        let g = self.ng(x);
        self.push(v, Op::NormalizeCols { x }, g)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        let g = self.ng(x);
        self.push(v, Op::Transpose { x }, g)
    }

    /// Main diagonal of a square matrix as (1 x N).
    pub fn diag(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows, xv.cols);
        let v = Tensor::from_fn(1, xv.rows, |_, i| xv.at(i, i));
        let g = self.ng(x);
        self.push(v, Op::Diag { x }, g)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &e in &self.value(x).data {
            s += e;
        }
        let g = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, g)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut s = T::zero();
        for &e in &xv.data {
            s += e;
        }
        let v = s / sc(xv.len() as f64);
        let g = self.ng(x);
        self.push(Tensor::scalar(v), Op::MeanAll { x }, g)
    }

    /// Sum over columns: (R x C) -> (R x 1).
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::from_fn(xv.rows, 1, |r, _| {
            let mut s = T::zero();
            for &e in xv.row(r) {
                s += e;
            }
            s
        });
        let g = self.ng(x);
        self.push(v, Op::RowSum { x }, g)
    }

    /// Sum over rows: (R x C) -> (1 x C).
    pub fn col_sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = Tensor::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (acc, &e) in v.data.iter_mut().zip(xv.row(r)) {
                *acc += e;
            }
        }
        let g = self.ng(x);
        self.push(v, Op::ColSum { x }, g)
    }

    /// Multiply each column of x (R x C) by the matching entry of s (1 x C).
    pub fn scale_cols(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.rows, 1);
        assert_eq!(sv.cols, xv.cols);
        let mut v = xv.clone();
        for r in 0..v.rows {
            for (e, &k) in v.row_mut(r).iter_mut().zip(&sv.data) {
                *e *= k;
            }
        }
        let g = self.ng(x) || self.ng(s);
        self.push(v, Op::ScaleCols { x, s }, g)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.cols);
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let v = Tensor::from_vec(va.rows + vb.rows, va.cols, data);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::ConcatRows { a, b }, g)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.rows);
        let v = Tensor::from_vec(
            len,
            xv.cols,
            xv.data[start * xv.cols..(start + len) * xv.cols].to_vec(),
        );
        let g = self.ng(x);
        self.push(v, Op::SliceRows { x, start }, g)
    }

    pub fn gather_cols(&mut self, x: NodeId, idx: Rc<Vec<u32>>) -> NodeId {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows, idx.len());
        for r in 0..xv.rows {
            let src = xv.row(r);
            for (j, &i) in idx.iter().enumerate() {
                *v.at_mut(r, j) = src[i as usize];
            }
        }
        let g = self.ng(x);
        self.push(v, Op::GatherCols { x, idx }, g)
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// Elementwise max, subgradient to the winning side (ties go to a).
    pub fn max_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows);
        assert_eq!(va.cols, vb.cols);
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data: va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(&x, &y)| if x >= y { x } else { y })
                .collect(),
        };
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MaxPair { a, b }, g)
    }

    /// Maximum entry as (1 x 1), subgradient to the first argmax.
    pub fn reduce_max(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut best = xv.data[0];
        for &e in &xv.data {
            if e > best {
                best = e;
            }
        }
        let g = self.ng(x);
        self.push(Tensor::scalar(best), Op::ReduceMax { x }, g)
    }

    /// Volume-rendering weights w_i = T_i * (1 - exp(-sigma_i * delta_i)).
    pub fn render_weights(&mut self, sigma: NodeId, pack: Rc<RayPack<T>>) -> NodeId {
        let sv = self.value(sigma);
        assert_eq!(sv.rows, 1);
        assert_eq!(sv.cols, pack.n_samples());
        let mut w = Tensor::zeros(1, sv.cols);
        for r in 0..pack.n_rays() {
            let (lo, hi) = (pack.offsets[r], pack.offsets[r + 1]);
            let mut trans = T::one();
            for i in lo..hi {
                let a = T::one() - (-sv.data[i] * pack.delta[i]).exp();
                w.data[i] = trans * a;
                trans *= T::one() - a;
            }
        }
        let g = self.ng(sigma);
        self.push(w, Op::RenderWeights { sigma, pack }, g)
    }

    /// Per-ray sum of a per-sample row: (1 x S) -> (1 x N).
    pub fn ray_sum(&mut self, x: NodeId, pack: Rc<RayPack<T>>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1);
        assert_eq!(xv.cols, pack.n_samples());
        let mut v = Tensor::zeros(1, pack.n_rays());
        for r in 0..pack.n_rays() {
            let mut s = T::zero();
            for i in pack.offsets[r]..pack.offsets[r + 1] {
                s += xv.data[i];
            }
            v.data[r] = s;
        }
        let g = self.ng(x);
        self.push(v, Op::RaySum { x, pack }, g)
    }

    /// Weighted per-ray reduction of a payload: (P x S) with weights (1 x S)
    /// -> (P x N).
    pub fn ray_apply(&mut self, w: NodeId, payload: NodeId, pack: Rc<RayPack<T>>) -> NodeId {
        let (wv, pv) = (self.value(w), self.value(payload));
        assert_eq!(wv.rows, 1);
        assert_eq!(wv.cols, pack.n_samples());
        assert_eq!(pv.cols, pack.n_samples());
        let mut v = Tensor::zeros(pv.rows, pack.n_rays());
        for p in 0..pv.rows {
            let prow = pv.row(p);
            let orow = v.row_mut(p);
            for r in 0..pack.n_rays() {
                let mut s = T::zero();
                for i in pack.offsets[r]..pack.offsets[r + 1] {
                    s += wv.data[i] * prow[i];
                }
                orow[r] = s;
            }
        }
        let g = self.ng(w) || self.ng(payload);
        self.push(v, Op::RayApply { w, payload, pack }, g)
    }

    /// Mean over rays of the distortion penalty
    /// sum_ij w_i w_j |s_i - s_j| + (1/3) sum_i w_i^2 d_i on normalized spans.
    pub fn distortion(&mut self, w: NodeId, pack: Rc<RayPack<T>>) -> NodeId {
        let wv = self.value(w);
        let third = sc::<T>(1.0 / 3.0);
        let mut total = T::zero();
        for r in 0..pack.n_rays() {
            let (lo, hi) = (pack.offsets[r], pack.offsets[r + 1]);
            let mut wsum = T::zero();
            let mut swsum = T::zero();
            let mut acc = T::zero();
            for i in lo..hi {
                let (wi, si) = (wv.data[i], pack.snorm[i]);
                // Pairwise term via prefix sums (samples sorted by depth).
                acc += sc::<T>(2.0) * wi * (si * wsum - swsum);
                acc += third * wi * wi * pack.dnorm[i];
                wsum += wi;
                swsum += wi * si;
            }
            total += acc;
        }
        total = total / sc(pack.n_rays() as f64);
        let g = self.ng(w);
        self.push(Tensor::scalar(total), Op::Distortion { w, pack }, g)
    }

    /// 3x3 conv with pad 1 over a (C x h*w) image tensor.
    pub fn conv3x3(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        shape: ImageShape,
        stride: usize,
    ) -> NodeId {
        let v = conv3x3(self.value(x), self.value(w), self.value(b), shape, stride);
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv { x, w, b, shape, stride }, g)
    }

    pub fn upsample2x(&mut self, x: NodeId, shape: ImageShape) -> NodeId {
        let v = upsample2x(self.value(x), shape);
        let g = self.ng(x);
        self.push(v, Op::Upsample { x, shape }, g)
    }

    /// Top-left crop of a (C x h*w) tensor to (C x hc*wc).
    pub fn crop(&mut self, x: NodeId, shape: ImageShape, hc: usize, wc: usize) -> NodeId {
        assert!(hc <= shape.h && wc <= shape.w);
        let xv = self.value(x);
        let mut v = Tensor::zeros(shape.c, hc * wc);
        for c in 0..shape.c {
            let src = xv.row(c);
            let dst = v.row_mut(c);
            for y in 0..hc {
                dst[y * wc..(y + 1) * wc].copy_from_slice(&src[y * shape.w..y * shape.w + wc]);
            }
        }
        let g = self.ng(x);
        self.push(v, Op::Crop { x, shape, hc, wc }, g)
    }

    /// Bilinear sample of a (C x h*w) map at continuous pixel coordinates
    /// (pixel centers sit at integer + 0.5). Gradient flows into the map.
    pub fn bilinear_gather(
        &mut self,
        map: NodeId,
        shape: ImageShape,
        pts: Rc<Vec<(f64, f64)>>,
    ) -> NodeId {
        let mv = self.value(map);
        assert_eq!(mv.rows, shape.c);
        let mut v = Tensor::zeros(shape.c, pts.len());
        for (j, &(u, vv)) in pts.iter().enumerate() {
            let (x0, y0, fx, fy) = bilinear_setup(u, vv, shape);
            for c in 0..shape.c {
                let row = mv.row(c);
                let s = bilinear_read(row, shape, x0, y0, fx, fy);
                *v.at_mut(c, j) = s;
            }
        }
        let g = self.ng(map);
        self.push(v, Op::BilinearGather { map, shape, pts }, g)
    }

    /// Forward difference along x or y with zero at the trailing edge.
    pub fn shift_diff(&mut self, x: NodeId, shape: ImageShape, horizontal: bool) -> NodeId {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows, xv.cols);
        for c in 0..shape.c {
            let src = xv.row(c);
            let dst = v.row_mut(c);
            for y in 0..shape.h {
                for xx in 0..shape.w {
                    let i = y * shape.w + xx;
                    if horizontal {
                        if xx + 1 < shape.w {
                            dst[i] = src[i + 1] - src[i];
                        }
                    } else if y + 1 < shape.h {
                        dst[i] = src[i + shape.w] - src[i];
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(v, Op::ShiftDiff { x, shape, horizontal }, g)
    }

    /// World points exp(twist) * base for a left-multiplied pose chart.
    /// The analytic backward is the chart Jacobian at twist = 0, so callers
    /// must re-zero the twist after folding each update into the pose.
    pub fn se3_transform(&mut self, twist: NodeId, base: Rc<Tensor<T>>) -> NodeId {
        let tv = self.value(twist);
        assert_eq!((tv.rows, tv.cols), (6, 1));
        assert_eq!(base.rows, 3);
        let xi: Twist = {
            let mut a = [0.0; 6];
            for (i, v) in tv.data.iter().enumerate() {
                a[i] = v.to_f64().unwrap();
            }
            a
        };
        let p = se3_exp(&xi);
        let mut v = Tensor::zeros(3, base.cols);
        for j in 0..base.cols {
            let q = [
                base.at(0, j).to_f64().unwrap(),
                base.at(1, j).to_f64().unwrap(),
                base.at(2, j).to_f64().unwrap(),
            ];
            let w = p.apply(q);
            for r in 0..3 {
                *v.at_mut(r, j) = sc(w[r]);
            }
        }
        let g = self.ng(twist);
        self.push(v, Op::Se3Transform { twist, base }, g)
    }

    /// Multi-resolution hash-grid encoding of (3 x B) positions in [0,1]^3;
    /// output ((levels * feats) x B). Gradients flow to the per-level tables
    /// and, when requested, to the positions.
    pub fn hash_encode(&mut self, pos: NodeId, tables: Vec<NodeId>, grid: Arc<GridMeta>) -> NodeId {
        let pv = self.value(pos);
        assert_eq!(pv.rows, 3);
        let b = pv.cols;
        let f = grid.feats;
        let mut out = Tensor::zeros(grid.levels.len() * f, b);
        let mut clamped = 0u64;
        for (li, level) in grid.levels.iter().enumerate() {
            let table = self.value(tables[li]);
            for j in 0..b {
                let (corners, weights, _fr, cl) = corner_setup::<T>(
                    pv.at(0, j).to_f64().unwrap(),
                    pv.at(1, j).to_f64().unwrap(),
                    pv.at(2, j).to_f64().unwrap(),
                    level,
                );
                clamped += cl as u64;
                for (&idx, &wt) in corners.iter().zip(&weights) {
                    let trow = table.row(idx as usize);
                    for k in 0..f {
                        *out.at_mut(li * f + k, j) += wt * trow[k];
                    }
                }
            }
        }
        grid.clamped
            .fetch_add(clamped, std::sync::atomic::Ordering::Relaxed);
        let g = self.ng(pos) || tables.iter().any(|&t| self.ng(t));
        self.push(out, Op::HashEncode { pos, tables, grid }, g)
    }

    /// Weighted sum of scalar nodes; the usual way to combine loss terms.
    pub fn weighted_sum(&mut self, parts: &[(NodeId, f64)]) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for &(id, w) in parts {
            let scaled = self.scale(id, sc(w));
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.expect("at least one loss term")
    }

    /// Reverse sweep from a scalar loss; returns per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { by_node: grads }
    }

    /// Adds parameter gradients from a backward pass into the store.
    pub fn accumulate_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for &(nid, pid) in &self.param_bindings {
            if let Some(g) = &grads.by_node[nid.0] {
                store.params[pid.0].grad.add_in_place(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let add_to = |grads: &mut [Option<Tensor<T>>], id: NodeId, t: Tensor<T>| {
            match &mut grads[id.0] {
                Some(acc) => acc.add_in_place(&t),
                slot => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.ng(*a) {
                    let da = match (ta, tb) {
                        (false, false) => matmul(g, vb, false, true),
                        (false, true) => matmul(g, vb, false, false),
                        (true, false) => matmul(vb, g, false, true),
                        (true, true) => matmul(vb, g, true, true),
                    };
                    add_to(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = match (ta, tb) {
                        (false, false) => matmul(va, g, true, false),
                        (false, true) => matmul(g, va, true, false),
                        (true, false) => matmul(va, g, false, false),
                        (true, true) => matmul(g, va, true, true),
                    };
                    add_to(grads, *b, db);
                }
            }
            Op::Affine { w, x, b } => {
                let (vw, vx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
                if self.ng(*w) {
                    add_to(grads, *w, matmul(g, vx, false, true));
                }
                if self.ng(*x) {
                    add_to(grads, *x, matmul(vw, g, true, false));
                }
                if let Some(bid) = b {
                    if self.ng(*bid) {
                        let mut db = Tensor::zeros(g.rows, 1);
                        for r in 0..g.rows {
                            let mut s = T::zero();
                            for &e in g.row(r) {
                                s += e;
                            }
                            db.data[r] = s;
                        }
                        add_to(grads, *bid, db);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    add_to(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.ng(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    add_to(grads, *b, g.map(|e| -e));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.ng(*a) {
                    let mut t = g.clone();
                    for (e, &y) in t.data.iter_mut().zip(&vb.data) {
                        *e *= y;
                    }
                    add_to(grads, *a, t);
                }
                if self.ng(*b) {
                    let mut t = g.clone();
                    for (e, &x) in t.data.iter_mut().zip(&va.data) {
                        *e *= x;
                    }
                    add_to(grads, *b, t);
                }
            }
            Op::Scale { x, k } => {
                if self.ng(*x) {
                    add_to(grads, *x, g.map(|e| e * *k));
                }
            }
            Op::Relu { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut t = g.clone();
                    for (e, &xx) in t.data.iter_mut().zip(&vx.data) {
                        if xx <= T::zero() {
                            *e = T::zero();
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::Softplus { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut t = g.clone();
                    for (e, &xx) in t.data.iter_mut().zip(&vx.data) {
                        *e *= sigmoid_stable(xx);
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::Sigmoid { x } => {
                if self.ng(*x) {
                    let vy = &self.nodes[i].value;
                    let mut t = g.clone();
                    for (e, &y) in t.data.iter_mut().zip(&vy.data) {
                        *e *= y * (T::one() - y);
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::Exp { x } => {
                if self.ng(*x) {
                    let vy = &self.nodes[i].value;
                    let mut t = g.clone();
                    for (e, &y) in t.data.iter_mut().zip(&vy.data) {
                        *e *= y;
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::Abs { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut t = g.clone();
                    for (e, &xx) in t.data.iter_mut().zip(&vx.data) {
                        *e *= if xx > T::zero() {
                            T::one()
                        } else if xx < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::SoftmaxCols { x } => {
                if self.ng(*x) {
                    let vy = &self.nodes[i].value;
                    let mut t = Tensor::zeros(vy.rows, vy.cols);
                    for c in 0..vy.cols {
                        let mut dotv = T::zero();
                        for r in 0..vy.rows {
                            dotv += g.at(r, c) * vy.at(r, c);
                        }
                        for r in 0..vy.rows {
                            *t.at_mut(r, c) = vy.at(r, c) * (g.at(r, c) - dotv);
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::LogSoftmaxCols { x } => {
                if self.ng(*x) {
                    let vy = &self.nodes[i].value;
                    let mut t = Tensor::zeros(vy.rows, vy.cols);
                    for c in 0..vy.cols {
                        let mut gsum = T::zero();
                        for r in 0..vy.rows {
                            gsum += g.at(r, c);
                        }
                        for r in 0..vy.rows {
                            *t.at_mut(r, c) = g.at(r, c) - vy.at(r, c).exp() * gsum;
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::LseCols { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let vy = &self.nodes[i].value;
                    let mut t = Tensor::zeros(vx.rows, vx.cols);
                    for c in 0..vx.cols {
                        for r in 0..vx.rows {
                            *t.at_mut(r, c) = g.at(0, c) * (vx.at(r, c) - vy.at(0, c)).exp();
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::NormalizeCols { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let vy = &self.nodes[i].value;
                    let mut t = Tensor::zeros(vx.rows, vx.cols);
                    for c in 0..vx.cols {
                        let mut n = T::zero();
                        let mut ydg = T::zero();
                        for r in 0..vx.rows {
                            n += vx.at(r, c) * vx.at(r, c);
                            ydg += vy.at(r, c) * g.at(r, c);
                        }
                        let n = n.sqrt().max(sc(1e-12));
                        for r in 0..vx.rows {
                            *t.at_mut(r, c) = (g.at(r, c) - vy.at(r, c) * ydg) / n;
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::Transpose { x } => {
                if self.ng(*x) {
                    add_to(grads, *x, g.transpose());
                }
            }
            Op::Diag { x } => {
                if self.ng(*x) {
                    let n = g.cols;
                    let mut t = Tensor::zeros(n, n);
                    for j in 0..n {
                        *t.at_mut(j, j) = g.at(0, j);
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::SumAll { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    add_to(grads, *x, Tensor::full(vx.rows, vx.cols, g.item()));
                }
            }
            Op::MeanAll { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let k = g.item() / sc(vx.len() as f64);
                    add_to(grads, *x, Tensor::full(vx.rows, vx.cols, k));
                }
            }
            Op::RowSum { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut t = Tensor::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        let gv = g.at(r, 0);
                        for e in t.row_mut(r) {
                            *e = gv;
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::ColSum { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut t = Tensor::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        t.row_mut(r).copy_from_slice(g.row(0));
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::ScaleCols { x, s } => {
                let (vx, vs) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
                if self.ng(*x) {
                    let mut t = g.clone();
                    for r in 0..t.rows {
                        for (e, &k) in t.row_mut(r).iter_mut().zip(&vs.data) {
                            *e *= k;
                        }
                    }
                    add_to(grads, *x, t);
                }
                if self.ng(*s) {
                    let mut t = Tensor::zeros(1, vs.cols);
                    for r in 0..vx.rows {
                        for c in 0..vx.cols {
                            t.data[c] += g.at(r, c) * vx.at(r, c);
                        }
                    }
                    add_to(grads, *s, t);
                }
            }
            Op::ConcatRows { a, b } => {
                let ra = self.nodes[a.0].value.rows;
                if self.ng(*a) {
                    let t = Tensor::from_vec(ra, g.cols, g.data[..ra * g.cols].to_vec());
                    add_to(grads, *a, t);
                }
                if self.ng(*b) {
                    let rb = self.nodes[b.0].value.rows;
                    let t = Tensor::from_vec(rb, g.cols, g.data[ra * g.cols..].to_vec());
                    add_to(grads, *b, t);
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut t = Tensor::zeros(vx.rows, vx.cols);
                    t.data[start * vx.cols..start * vx.cols + g.len()].copy_from_slice(&g.data);
                    add_to(grads, *x, t);
                }
            }
            Op::GatherCols { x, idx } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut t = Tensor::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        for (j, &ii) in idx.iter().enumerate() {
                            *t.at_mut(r, ii as usize) += g.at(r, j);
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::StopGrad => {}
            Op::MaxPair { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.ng(*a) {
                    let mut t = g.clone();
                    for ((e, &x), &y) in t.data.iter_mut().zip(&va.data).zip(&vb.data) {
                        if x < y {
                            *e = T::zero();
                        }
                    }
                    add_to(grads, *a, t);
                }
                if self.ng(*b) {
                    let mut t = g.clone();
                    for ((e, &x), &y) in t.data.iter_mut().zip(&va.data).zip(&vb.data) {
                        if x >= y {
                            *e = T::zero();
                        }
                    }
                    add_to(grads, *b, t);
                }
            }
            Op::ReduceMax { x } => {
                if self.ng(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut best = 0usize;
                    for (j, &e) in vx.data.iter().enumerate() {
                        if e > vx.data[best] {
                            best = j;
                        }
                    }
                    let mut t = Tensor::zeros(vx.rows, vx.cols);
                    t.data[best] = g.item();
                    add_to(grads, *x, t);
                }
            }
            Op::RenderWeights { sigma, pack } => {
                if self.ng(*sigma) {
                    let sv = &self.nodes[sigma.0].value;
                    let wv = &self.nodes[i].value;
                    let mut t = Tensor::zeros(1, sv.cols);
                    for r in 0..pack.n_rays() {
                        let (lo, hi) = (pack.offsets[r], pack.offsets[r + 1]);
                        // dL/dsigma_k = delta_k (g_k T_{k+1} - sum_{i>k} g_i w_i).
                        let mut suffix = T::zero();
                        let mut trans_next: Vec<T> = Vec::with_capacity(hi - lo);
                        let mut trans = T::one();
                        for ii in lo..hi {
                            let a = T::one() - (-sv.data[ii] * pack.delta[ii]).exp();
                            trans *= T::one() - a;
                            trans_next.push(trans);
                        }
                        for k in (lo..hi).rev() {
                            let gk = g.data[k];
                            t.data[k] = pack.delta[k] * (gk * trans_next[k - lo] - suffix);
                            suffix += gk * wv.data[k];
                        }
                    }
                    add_to(grads, *sigma, t);
                }
            }
            Op::RaySum { x, pack } => {
                if self.ng(*x) {
                    let mut t = Tensor::zeros(1, pack.n_samples());
                    for r in 0..pack.n_rays() {
                        let gv = g.data[r];
                        for e in &mut t.data[pack.offsets[r]..pack.offsets[r + 1]] {
                            *e = gv;
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::RayApply { w, payload, pack } => {
                let (wv, pv) = (&self.nodes[w.0].value, &self.nodes[payload.0].value);
                if self.ng(*w) {
                    let mut t = Tensor::zeros(1, pack.n_samples());
                    for p in 0..pv.rows {
                        let prow = pv.row(p);
                        for r in 0..pack.n_rays() {
                            let gv = g.at(p, r);
                            for ii in pack.offsets[r]..pack.offsets[r + 1] {
                                t.data[ii] += gv * prow[ii];
                            }
                        }
                    }
                    add_to(grads, *w, t);
                }
                if self.ng(*payload) {
                    let mut t = Tensor::zeros(pv.rows, pv.cols);
                    for p in 0..pv.rows {
                        let trow = t.row_mut(p);
                        for r in 0..pack.n_rays() {
                            let gv = g.at(p, r);
                            for ii in pack.offsets[r]..pack.offsets[r + 1] {
                                trow[ii] += gv * wv.data[ii];
                            }
                        }
                    }
                    add_to(grads, *payload, t);
                }
            }
            Op::Distortion { w, pack } => {
                if self.ng(*w) {
                    let wv = &self.nodes[w.0].value;
                    let gv = g.item() / sc(pack.n_rays() as f64);
                    let third = sc::<T>(2.0 / 3.0);
                    let mut t = Tensor::zeros(1, pack.n_samples());
                    for r in 0..pack.n_rays() {
                        let (lo, hi) = (pack.offsets[r], pack.offsets[r + 1]);
                        // d/dw_k = 2 sum_j w_j |s_k - s_j| + (2/3) w_k d_k.
                        let mut wpre = T::zero();
                        let mut swpre = T::zero();
                        for k in lo..hi {
                            t.data[k] = sc::<T>(2.0) * (pack.snorm[k] * wpre - swpre);
                            wpre += wv.data[k];
                            swpre += wv.data[k] * pack.snorm[k];
                        }
                        let mut wpost = T::zero();
                        let mut swpost = T::zero();
                        for k in (lo..hi).rev() {
                            t.data[k] += sc::<T>(2.0) * (swpost - pack.snorm[k] * wpost);
                            t.data[k] += third * wv.data[k] * pack.dnorm[k];
                            t.data[k] *= gv;
                            wpost += wv.data[k];
                            swpost += wv.data[k] * pack.snorm[k];
                        }
                    }
                    add_to(grads, *w, t);
                }
            }
            Op::Conv { x, w, b, shape, stride } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (dx, dw, db) = conv3x3_backward(vx, vw, g, *shape, *stride);
                if self.ng(*x) {
                    add_to(grads, *x, dx);
                }
                if self.ng(*w) {
                    add_to(grads, *w, dw);
                }
                if self.ng(*b) {
                    add_to(grads, *b, db);
                }
            }
            Op::Upsample { x, shape } => {
                if self.ng(*x) {
                    add_to(grads, *x, upsample2x_backward(g, *shape));
                }
            }
            Op::Crop { x, shape, hc, wc } => {
                if self.ng(*x) {
                    let mut t = Tensor::zeros(shape.c, shape.pixels());
                    for c in 0..shape.c {
                        let src = g.row(c);
                        let dst = t.row_mut(c);
                        for y in 0..*hc {
                            dst[y * shape.w..y * shape.w + wc]
                                .copy_from_slice(&src[y * wc..(y + 1) * wc]);
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::BilinearGather { map, shape, pts } => {
                if self.ng(*map) {
                    let mut t = Tensor::zeros(shape.c, shape.pixels());
                    for (j, &(u, vv)) in pts.iter().enumerate() {
                        let (x0, y0, fx, fy) = bilinear_setup(u, vv, *shape);
                        for c in 0..shape.c {
                            let gv = g.at(c, j);
                            bilinear_scatter(t.row_mut(c), *shape, x0, y0, fx, fy, gv);
                        }
                    }
                    add_to(grads, *map, t);
                }
            }
            Op::ShiftDiff { x, shape, horizontal } => {
                if self.ng(*x) {
                    let mut t = Tensor::zeros(g.rows, g.cols);
                    for c in 0..shape.c {
                        let src = g.row(c);
                        let dst = t.row_mut(c);
                        for y in 0..shape.h {
                            for xx in 0..shape.w {
                                let ii = y * shape.w + xx;
                                if *horizontal {
                                    if xx + 1 < shape.w {
                                        dst[ii] -= src[ii];
                                        dst[ii + 1] += src[ii];
                                    }
                                } else if y + 1 < shape.h {
                                    dst[ii] -= src[ii];
                                    dst[ii + shape.w] += src[ii];
                                }
                            }
                        }
                    }
                    add_to(grads, *x, t);
                }
            }
            Op::Se3Transform { twist, base } => {
                if self.ng(*twist) {
                    let tv = &self.nodes[twist.0].value;
                    let mag: f64 = tv.data.iter().map(|e| e.to_f64().unwrap().abs()).sum();
                    assert!(
                        mag < 1e-9,
                        "se3_transform backward is the chart Jacobian at zero; fold updates into the base pose first"
                    );
                    // dL/drho = sum_i g_i; dL/dw = sum_i base_i x g_i.
                    let mut t = Tensor::zeros(6, 1);
                    for j in 0..base.cols {
                        let bx = [
                            base.at(0, j).to_f64().unwrap(),
                            base.at(1, j).to_f64().unwrap(),
                            base.at(2, j).to_f64().unwrap(),
                        ];
                        let gj = [
                            g.at(0, j).to_f64().unwrap(),
                            g.at(1, j).to_f64().unwrap(),
                            g.at(2, j).to_f64().unwrap(),
                        ];
                        let cr = crate::geometry::cross(bx, gj);
                        for r in 0..3 {
                            t.data[r] += sc(cr[r]);
                            t.data[3 + r] += sc(gj[r]);
                        }
                    }
                    add_to(grads, *twist, t);
                }
            }
            Op::HashEncode { pos, tables, grid } => {
                let pv = &self.nodes[pos.0].value;
                let f = grid.feats;
                let pos_grad = self.ng(*pos);
                let mut dpos = if pos_grad {
                    Some(Tensor::zeros(3, pv.cols))
                } else {
                    None
                };
                for (li, level) in grid.levels.iter().enumerate() {
                    if !self.ng(tables[li]) && !pos_grad {
                        continue;
                    }
                    let tv = &self.nodes[tables[li].0].value;
                    let mut dt = if self.ng(tables[li]) {
                        Some(Tensor::zeros(tv.rows, tv.cols))
                    } else {
                        None
                    };
                    for j in 0..pv.cols {
                        let (corners, weights, fr, _cl) = corner_setup::<T>(
                            pv.at(0, j).to_f64().unwrap(),
                            pv.at(1, j).to_f64().unwrap(),
                            pv.at(2, j).to_f64().unwrap(),
                            level,
                        );
                        if let Some(dt) = &mut dt {
                            for (&idx, &wt) in corners.iter().zip(&weights) {
                                let drow = dt.row_mut(idx as usize);
                                for k in 0..f {
                                    drow[k] += wt * g.at(li * f + k, j);
                                }
                            }
                        }
                        if let Some(dp) = &mut dpos {
                            // d out / d frac axis, then scale by level resolution.
                            if let Some(scale) = fr.in_bounds_scale {
                                for axis in 0..3 {
                                    let mut acc = T::zero();
                                    for (ci, &idx) in corners.iter().enumerate() {
                                        let dw = corner_weight_grad::<T>(ci, fr.f, axis);
                                        let trow = tv.row(idx as usize);
                                        for k in 0..f {
                                            acc += dw * trow[k] * g.at(li * f + k, j);
                                        }
                                    }
                                    *dp.at_mut(axis, j) += acc * sc(scale);
                                }
                            }
                        }
                    }
                    if let Some(dt) = dt {
                        match &mut grads[tables[li].0] {
                            Some(acc) => acc.add_in_place(&dt),
                            slot => *slot = Some(dt),
                        }
                    }
                }
                if let Some(dp) = dpos {
                    add_to(grads, *pos, dp);
                }
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    pub by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node[id.0].as_ref()
    }
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_cols_val<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut v = x.clone();
    for c in 0..v.cols {
        let mut m = v.at(0, c);
        for r in 1..v.rows {
            m = m.max(v.at(r, c));
        }
        let mut s = T::zero();
        for r in 0..v.rows {
            let e = (v.at(r, c) - m).exp();
            *v.at_mut(r, c) = e;
            s += e;
        }
        for r in 0..v.rows {
            *v.at_mut(r, c) = v.at(r, c) / s;
        }
    }
    v
}

fn lse_cols_val<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut v = Tensor::zeros(1, x.cols);
    for c in 0..x.cols {
        let mut m = x.at(0, c);
        for r in 1..x.rows {
            m = m.max(x.at(r, c));
        }
        let mut s = T::zero();
        for r in 0..x.rows {
            s += (x.at(r, c) - m).exp();
        }
        v.data[c] = m + s.ln();
    }
    v
}

/// Bilinear interpolation stencil over pixel centers; clamps to the border.
fn bilinear_setup(u: f64, v: f64, shape: ImageShape) -> (usize, usize, f64, f64) {
    let gx = (u - 0.5).clamp(0.0, (shape.w - 1) as f64);
    let gy = (v - 0.5).clamp(0.0, (shape.h - 1) as f64);
    let x0 = (gx.floor() as usize).min(shape.w.saturating_sub(2));
    let y0 = (gy.floor() as usize).min(shape.h.saturating_sub(2));
    (x0, y0, gx - x0 as f64, gy - y0 as f64)
}

fn bilinear_read<T: Scalar>(
    row: &[T],
    shape: ImageShape,
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
) -> T {
    let x1 = (x0 + 1).min(shape.w - 1);
    let y1 = (y0 + 1).min(shape.h - 1);
    let (fx, fy) = (sc::<T>(fx), sc::<T>(fy));
    let one = T::one();
    row[y0 * shape.w + x0] * (one - fx) * (one - fy)
        + row[y0 * shape.w + x1] * fx * (one - fy)
        + row[y1 * shape.w + x0] * (one - fx) * fy
        + row[y1 * shape.w + x1] * fx * fy
}

fn bilinear_scatter<T: Scalar>(
    row: &mut [T],
    shape: ImageShape,
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    g: T,
) {
    let x1 = (x0 + 1).min(shape.w - 1);
    let y1 = (y0 + 1).min(shape.h - 1);
    let (fx, fy) = (sc::<T>(fx), sc::<T>(fy));
    let one = T::one();
    row[y0 * shape.w + x0] += g * (one - fx) * (one - fy);
    row[y0 * shape.w + x1] += g * fx * (one - fy);
    row[y1 * shape.w + x0] += g * (one - fx) * fy;
    row[y1 * shape.w + x1] += g * fx * fy;
}

/// Fractional coordinates of a sample inside its grid cell.
pub struct Fracs {
    pub f: [f64; 3],
    /// Some(res) when the position was strictly inside [0,1] on every axis,
    /// carrying d(cell coord)/d(position); None suppresses position grads at
    /// the clamp boundary.
    pub in_bounds_scale: Option<f64>,
}

/// Corner table indices and trilinear weights for one position at one level.
pub fn corner_setup<T: Scalar>(
    x: f64,
    y: f64,
    z: f64,
    level: &LevelMeta,
) -> ([u32; 8], [T; 8], Fracs, bool) {
    let clamped = !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) || !(0.0..=1.0).contains(&z);
    let res = level.res as f64;
    let cx = (x.clamp(0.0, 1.0) * res).min(res - 1e-9);
    let cy = (y.clamp(0.0, 1.0) * res).min(res - 1e-9);
    let cz = (z.clamp(0.0, 1.0) * res).min(res - 1e-9);
    let (ix, iy, iz) = (cx.floor() as usize, cy.floor() as usize, cz.floor() as usize);
    let f = [cx - ix as f64, cy - iy as f64, cz - iz as f64];
    let mut corners = [0u32; 8];
    let mut weights = [T::zero(); 8];
    for ci in 0..8 {
        let (dx, dy, dz) = (ci & 1, (ci >> 1) & 1, (ci >> 2) & 1);
        let gx = ix + dx;
        let gy = iy + dy;
        let gz = iz + dz;
        corners[ci] = grid_index(gx, gy, gz, level);
        let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
        let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
        let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
        weights[ci] = sc(wx * wy * wz);
    }
    let in_bounds = !clamped && cx < res - 1e-6 && cy < res - 1e-6 && cz < res - 1e-6;
    let fr = Fracs {
        f,
        in_bounds_scale: if in_bounds { Some(res) } else { None },
    };
    (corners, weights, fr, clamped)
}

/// d(trilinear weight of corner ci) / d(frac along axis).
fn corner_weight_grad<T: Scalar>(ci: usize, f: [f64; 3], axis: usize) -> T {
    let bits = [ci & 1, (ci >> 1) & 1, (ci >> 2) & 1];
    let mut v = 1.0;
    for a in 0..3 {
        if a == axis {
            v *= if bits[a] == 1 { 1.0 } else { -1.0 };
        } else {
            v *= if bits[a] == 1 { f[a] } else { 1.0 - f[a] };
        }
    }
    sc(v)
}

/// Dense index when the level fits its table, spatial hash otherwise.
fn grid_index(x: usize, y: usize, z: usize, level: &LevelMeta) -> u32 {
    if level.hashed {
        let h = (x as u64)
            ^ (y as u64).wrapping_mul(2_654_435_761)
            ^ (z as u64).wrapping_mul(805_459_861);
        (h % level.table_size as u64) as u32
    } else {
        let side = level.res + 1;
        (x + side * (y + side * z)) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_values_of_simple_ops() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data, vec![1.0, 0.0, 3.0, 0.0]);
        let s = tape.softmax_cols(a);
        let v = tape.value(s);
        assert!((v.at(0, 0) + v.at(1, 0) - 1.0).abs() < 1e-12);
        assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-12);

        let sp = tape.softplus(a);
        assert!((tape.value(sp).at(0, 0) - (1.0f64.exp() + 1.0).ln()).abs() < 1e-12);

        let m = tape.mean_all(a);
        assert!((tape.value(m).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_through_affine_matches_hand_result() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", super::super::params::Group::Field, Tensor::from_vec(1, 2, vec![2.0, -1.0]));
        let mut tape: Tape<f64> = Tape::new();
        let wn = tape.param(&store, w);
        let x = tape.constant(Tensor::from_vec(2, 1, vec![3.0, 4.0]));
        let y = tape.affine(wn, x, None);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        tape.accumulate_grads(&grads, &mut store);
        // dL/dw = x^T.
        assert_eq!(store.grad(w).data, vec![3.0, 4.0]);
    }

    #[test]
    fn render_weights_sum_below_one() {
        let mut tape: Tape<f64> = Tape::new();
        let pack = Rc::new(RayPack {
            offsets: vec![0, 3, 5],
            t: vec![0.1, 0.2, 0.3, 0.1, 0.2],
            delta: vec![0.1; 5],
            snorm: vec![0.1, 0.5, 0.9, 0.25, 0.75],
            dnorm: vec![0.2; 5],
        });
        let sigma = tape.constant(Tensor::from_vec(1, 5, vec![5.0, 2.0, 8.0, 0.0, 1.0]));
        let w = tape.render_weights(sigma, pack.clone());
        let op = tape.ray_sum(w, pack);
        let o = tape.value(op);
        assert!(o.data.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
        // First ray has meaningful density, second almost none.
        assert!(o.data[0] > 0.5 && o.data[1] < 0.2);
    }

    #[test]
    fn stop_grad_blocks_backward() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = store.add("p", super::super::params::Group::Field, Tensor::scalar(2.0));
        let mut tape: Tape<f64> = Tape::new();
        let pn = tape.param(&store, p);
        let sg = tape.stop_grad(pn);
        let y = tape.mul(sg, sg);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        tape.accumulate_grads(&grads, &mut store);
        assert_eq!(store.grad(p).data[0], 0.0);
    }
}
