//! Hot numeric kernels shared by tape ops; plain loops shaped so the
//! autovectorizer can work on contiguous rows.

use super::tensor::{Scalar, Tensor};

/// C = op(A) * op(B) with optional transposes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    match (ta, tb) {
        (false, false) => matmul_nn(a, b),
        (true, false) => matmul_tn(a, b),
        (false, true) => matmul_nt(a, b),
        (true, true) => matmul_nn(&a.transpose(), &b.transpose()),
    }
}

fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols, b.rows, "matmul_nn shape");
    let mut c = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (k, &aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// A is (K x M); returns A^T * B of shape (M x N).
fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.rows, b.rows, "matmul_tn shape");
    let mut c = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let crow = c.row_mut(i);
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aki * bv;
            }
        }
    }
    c
}

/// B is (N x K); returns A * B^T of shape (M x N).
fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols, b.cols, "matmul_nt shape");
    let mut c = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *cv = s;
        }
    }
    c
}

/// Shape bookkeeping for conv/upsample ops on (channels x h*w) tensors.
#[derive(Clone, Copy, Debug)]
pub struct ImageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        ImageShape { c, h, w }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Output spatial size of a 3x3 conv with pad 1 at `stride`.
pub fn conv_out(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

/// 3x3 convolution, pad 1. Input (Cin x h*w), weight (Cout x Cin*9),
/// bias (Cout x 1), output (Cout x ho*wo).
pub fn conv3x3<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    shape: ImageShape,
    stride: usize,
) -> Tensor<T> {
    let (ho, wo) = conv_out(shape.h, shape.w, stride);
    let cout = w.rows;
    assert_eq!(x.rows, shape.c);
    assert_eq!(w.cols, shape.c * 9);
    let mut out = Tensor::zeros(cout, ho * wo);
    for co in 0..cout {
        let bias = b.data[co];
        let orow = out.row_mut(co);
        for v in orow.iter_mut() {
            *v = bias;
        }
        for ci in 0..shape.c {
            let xrow = x.row(ci);
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = w.at(co, ci * 9 + ky * 3 + kx);
                    if wv == T::zero() {
                        continue;
                    }
                    accumulate_shift(orow, xrow, wv, shape, stride, ky, kx, ho, wo);
                }
            }
        }
    }
    out
}

/// out[yo, xo] += wv * x[yo*s + ky - 1, xo*s + kx - 1] over valid positions.
#[inline]
fn accumulate_shift<T: Scalar>(
    out: &mut [T],
    x: &[T],
    wv: T,
    shape: ImageShape,
    stride: usize,
    ky: usize,
    kx: usize,
    ho: usize,
    wo: usize,
) {
    for yo in 0..ho {
        let yi = (yo * stride + ky) as isize - 1;
        if yi < 0 || yi >= shape.h as isize {
            continue;
        }
        let orow = &mut out[yo * wo..(yo + 1) * wo];
        let xrow = &x[yi as usize * shape.w..(yi as usize + 1) * shape.w];
        if stride == 1 {
            // xi = xo + kx - 1; contiguous slices shifted by kx-1.
            match kx {
                0 => {
                    for (o, &xv) in orow[1..].iter_mut().zip(&xrow[..wo - 1]) {
                        *o += wv * xv;
                    }
                }
                1 => {
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += wv * xv;
                    }
                }
                _ => {
                    for (o, &xv) in orow[..wo - 1].iter_mut().zip(&xrow[1..]) {
                        *o += wv * xv;
                    }
                }
            }
        } else {
            for (xo, o) in orow.iter_mut().enumerate() {
                let xi = (xo * stride + kx) as isize - 1;
                if xi >= 0 && (xi as usize) < shape.w {
                    *o += wv * xrow[xi as usize];
                }
            }
        }
    }
}

/// Gradients of [`conv3x3`]: returns (dx, dw, db) given upstream dout.
pub fn conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    shape: ImageShape,
    stride: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ho, wo) = conv_out(shape.h, shape.w, stride);
    let cout = w.rows;
    let mut dx = Tensor::zeros(shape.c, shape.pixels());
    let mut dw = Tensor::zeros(w.rows, w.cols);
    let mut db = Tensor::zeros(cout, 1);
    for co in 0..cout {
        let grow = dout.row(co);
        let mut bsum = T::zero();
        for &g in grow {
            bsum += g;
        }
        db.data[co] = bsum;
        for ci in 0..shape.c {
            let xrow = x.row(ci);
            let dxrow_start = ci * shape.pixels();
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = w.at(co, ci * 9 + ky * 3 + kx);
                    let mut wsum = T::zero();
                    for yo in 0..ho {
                        let yi = (yo * stride + ky) as isize - 1;
                        if yi < 0 || yi >= shape.h as isize {
                            continue;
                        }
                        let gslice = &grow[yo * wo..(yo + 1) * wo];
                        let xbase = yi as usize * shape.w;
                        for (xo, &g) in gslice.iter().enumerate() {
                            let xi = (xo * stride + kx) as isize - 1;
                            if xi >= 0 && (xi as usize) < shape.w {
                                let xi = xi as usize;
                                wsum += g * xrow[xbase + xi];
                                dx.data[dxrow_start + xbase + xi] += g * wv;
                            }
                        }
                    }
                    *dw.at_mut(co, ci * 9 + ky * 3 + kx) += wsum;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Nearest-neighbor 2x upsample of (C x h*w) to (C x 2h*2w).
pub fn upsample2x<T: Scalar>(x: &Tensor<T>, shape: ImageShape) -> Tensor<T> {
    let (h2, w2) = (shape.h * 2, shape.w * 2);
    let mut out = Tensor::zeros(shape.c, h2 * w2);
    for c in 0..shape.c {
        let xr = x.row(c);
        let or = out.row_mut(c);
        for y in 0..h2 {
            let sy = y / 2;
            for xo in 0..w2 {
                or[y * w2 + xo] = xr[sy * shape.w + xo / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dout: &Tensor<T>, shape: ImageShape) -> Tensor<T> {
    let (h2, w2) = (shape.h * 2, shape.w * 2);
    let mut dx = Tensor::zeros(shape.c, shape.pixels());
    for c in 0..shape.c {
        let gr = dout.row(c);
        let dr = dx.row_mut(c);
        for y in 0..h2 {
            let sy = y / 2;
            for xo in 0..w2 {
                dr[sy * shape.w + xo / 2] += gr[y * w2 + xo];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut c = Tensor::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.at(i, k) * b.at(k, j);
                }
                *c.at_mut(i, j) = s;
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = Tensor::from_fn(4, 6, |r, c| (r as f64 - 1.5) * 0.3 + c as f64 * 0.11);
        let b = Tensor::from_fn(6, 5, |r, c| (c as f64 - 2.0) * 0.2 - r as f64 * 0.07);
        let want = naive_matmul(&a, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let am = if ta { a.transpose() } else { a.clone() };
            let bm = if tb { b.transpose() } else { b.clone() };
            let got = matmul(&am, &bm, ta, tb);
            for (x, y) in got.data.iter().zip(&want.data) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: ImageShape, st: usize) -> Tensor<f64> {
        let (ho, wo) = conv_out(s.h, s.w, st);
        let mut out = Tensor::zeros(w.rows, ho * wo);
        for co in 0..w.rows {
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut acc = b.data[co];
                    for ci in 0..s.c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let yi = (yo * st + ky) as isize - 1;
                                let xi = (xo * st + kx) as isize - 1;
                                if yi >= 0 && xi >= 0 && (yi as usize) < s.h && (xi as usize) < s.w {
                                    acc += w.at(co, ci * 9 + ky * 3 + kx)
                                        * x.at(ci, yi as usize * s.w + xi as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(co, yo * wo + xo) = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_both_strides() {
        let s = ImageShape::new(3, 5, 7);
        let x = Tensor::from_fn(3, 35, |r, c| ((r * 35 + c) as f64 * 0.37).sin());
        let w = Tensor::from_fn(4, 27, |r, c| ((r * 27 + c) as f64 * 0.21).cos() * 0.3);
        let b = Tensor::from_vec(4, 1, vec![0.1, -0.2, 0.0, 0.4]);
        for st in [1, 2] {
            let got = conv3x3(&x, &w, &b, s, st);
            let want = naive_conv(&x, &w, &b, s, st);
            assert_eq!(got.rows, want.rows);
            for (a, bb) in got.data.iter().zip(&want.data) {
                assert!((a - bb).abs() < 1e-12, "stride {st}");
            }
        }
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let s = ImageShape::new(2, 3, 4);
        let x = Tensor::from_fn(2, 12, |r, c| (r * 12 + c) as f64);
        let up = upsample2x(&x, s);
        assert_eq!(up.cols, 48);
        assert_eq!(up.at(1, 0), x.at(1, 0));
        let back = upsample2x_backward(&up, s);
        // Each source pixel is copied 4 times.
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }
}
