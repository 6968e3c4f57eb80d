//! Forward/backward kernels used by the graph ops.

use crate::float::{gemm, MatRef};
use crate::tensor::numel;
use crate::{par, Float, Tensor};

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed over the dims of `out` (0 where broadcast).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let offset = out.len() - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output element with the matching offsets into two broadcast operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let nd = out.len();
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(o, pa, pb);
            o += 1;
            pa += ia;
            pb += ib;
        }
        // odometer over the leading dims
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn binary<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape(), data).unwrap();
    }
    let out = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!(
            "shapes {:?} and {:?} are not broadcast-compatible",
            a.shape(),
            b.shape()
        )
    });
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, pa, pb| data[o] = f(ad[pa], bd[pb]));
    Tensor::from_vec(&out, data).unwrap()
}

/// Sum `g` down to `shape` (inverse of broadcasting).
pub fn reduce_to<T: Float>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let sa = broadcast_strides(shape, &out);
    let zero = vec![0; out.len()];
    let mut acc = vec![T::zero(); numel(shape)];
    let gd = g.data();
    for_each_broadcast(&out, &sa, &zero, |o, pa, _| acc[pa] += gd[o]);
    Tensor::from_vec(shape, acc).unwrap()
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn sum_axis<T: Float>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(&xd[base..base + inner]) {
                *d += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::from_vec(&shape, out).unwrap()
}

/// Repeat a keepdim-reduced gradient back along `axis`.
pub fn expand_axis<T: Float>(g: &Tensor<T>, shape: &[usize], axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let gd = g.data();
    let mut out = vec![T::zero(); numel(shape)];
    for o in 0..outer {
        let src = &gd[o * inner..(o + 1) * inner];
        for a in 0..len {
            let base = (o * len + a) * inner;
            out[base..base + inner].copy_from_slice(src);
        }
    }
    Tensor::from_vec(shape, out).unwrap()
}

/// Convolution geometry for NCHW input and OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW, got {:?}", x);
        assert_eq!(w.len(), 4, "conv2d weight must be OIHW, got {:?}", w);
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {:?} weight {:?}", x, w);
        assert!(stride >= 1);
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
        Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        }
    }

    /// Rows of the column matrix.
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output pixels per sample.
    pub fn l(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_size(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn out_size(&self) -> usize {
        self.o * self.l()
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    pub fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.ho, self.wo]
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.l();
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.l();
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution. Returns the output and, when `keep_cols`, the column
/// matrices of every sample (needed for the weight gradient).
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Tensor<T>, Option<Vec<T>>) {
    let (k, l, o) = (g.k(), g.l(), g.o);
    let wm = MatRef::new(w.data(), o, k);
    let xd = x.data();
    let mut y = vec![T::zero(); g.n * g.out_size()];
    let bias = |yi: &mut [T]| {
        if let Some(b) = b {
            for (oc, chunk) in yi.chunks_mut(l).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    };
    let saved = if g.pointwise() {
        par::for_each_chunk_mut(&mut y, g.out_size(), |i, yi| {
            let xi = &xd[i * g.in_size()..(i + 1) * g.in_size()];
            gemm(T::one(), wm, MatRef::new(xi, k, l), T::zero(), yi);
            bias(yi);
        });
        None
    } else if keep_cols {
        let mut cols = vec![T::zero(); g.n * k * l];
        par::for_each_chunk_mut2(&mut y, g.out_size(), &mut cols, k * l, |i, yi, ci| {
            im2col(&xd[i * g.in_size()..(i + 1) * g.in_size()], g, ci);
            gemm(T::one(), wm, MatRef::new(ci, k, l), T::zero(), yi);
            bias(yi);
        });
        Some(cols)
    } else {
        par::for_each_chunk_mut(&mut y, g.out_size(), |i, yi| {
            let mut ci = vec![T::zero(); k * l];
            im2col(&xd[i * g.in_size()..(i + 1) * g.in_size()], g, &mut ci);
            gemm(T::one(), wm, MatRef::new(&ci, k, l), T::zero(), yi);
            bias(yi);
        });
        None
    };
    (Tensor::from_vec(&g.out_shape(), y).unwrap(), saved)
}

/// Weight gradient `sum_n dY_n * cols_n^T`, reduced in sample order.
pub fn conv2d_grad_weight<T: Float>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    cols: Option<&[T]>,
    g: &ConvGeom,
) -> Tensor<T> {
    let (k, l, o) = (g.k(), g.l(), g.o);
    let dyd = dy.data();
    let partials: Vec<Vec<T>> = par::map_range(g.n, |i| {
        let dyi = MatRef::new(&dyd[i * o * l..(i + 1) * o * l], o, l);
        let colsi: &[T] = if g.pointwise() {
            &x.data()[i * g.in_size()..(i + 1) * g.in_size()]
        } else {
            &cols.expect("conv columns were not saved")[i * k * l..(i + 1) * k * l]
        };
        let mut dw = vec![T::zero(); o * k];
        gemm(T::one(), dyi, MatRef::new(colsi, k, l).t(), T::zero(), &mut dw);
        dw
    });
    let mut dw = vec![T::zero(); o * k];
    for p in partials {
        dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    Tensor::from_vec(&[g.o, g.c, g.kh, g.kw], dw).unwrap()
}

pub fn conv2d_grad_bias<T: Float>(dy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let l = g.l();
    let mut db = vec![T::zero(); g.o];
    for (idx, chunk) in dy.data().chunks(l).enumerate() {
        db[idx % g.o] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec(&[g.o], db).unwrap()
}

pub fn conv2d_grad_input<T: Float>(dy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (k, l, o) = (g.k(), g.l(), g.o);
    let wt = MatRef::new(w.data(), o, k).t();
    let dyd = dy.data();
    let mut dx = vec![T::zero(); g.n * g.in_size()];
    par::for_each_chunk_mut(&mut dx, g.in_size(), |i, dxi| {
        let dyi = MatRef::new(&dyd[i * o * l..(i + 1) * o * l], o, l);
        if g.pointwise() {
            gemm(T::one(), wt, dyi, T::zero(), dxi);
        } else {
            let mut dcols = vec![T::zero(); k * l];
            gemm(T::one(), wt, dyi, T::zero(), &mut dcols);
            col2im(&dcols, g, dxi);
        }
    });
    Tensor::from_vec(&[g.n, g.c, g.h, g.w], dx).unwrap()
}

/// `x (N, I) * w (O, I)^T + b`.
pub fn linear_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    assert_eq!(x.ndim(), 2, "linear input must be 2-D, got {:?}", x.shape());
    assert_eq!(w.ndim(), 2, "linear weight must be 2-D, got {:?}", w.shape());
    let (n, i, o) = (x.dim(0), x.dim(1), w.dim(0));
    assert_eq!(w.dim(1), i, "linear dims {:?} x {:?}", x.shape(), w.shape());
    let mut y = vec![T::zero(); n * o];
    gemm(
        T::one(),
        MatRef::new(x.data(), n, i),
        MatRef::new(w.data(), o, i).t(),
        T::zero(),
        &mut y,
    );
    if let Some(b) = b {
        assert_eq!(b.len(), o);
        for row in y.chunks_mut(o) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
        }
    }
    Tensor::from_vec(&[n, o], y).unwrap()
}

pub fn linear_backward<T: Float>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (n, i, o) = (x.dim(0), x.dim(1), w.dim(0));
    let dym = MatRef::new(dy.data(), n, o);
    let dx = need_x.then(|| {
        let mut dx = vec![T::zero(); n * i];
        gemm(T::one(), dym, MatRef::new(w.data(), o, i), T::zero(), &mut dx);
        Tensor::from_vec(&[n, i], dx).unwrap()
    });
    let dw = need_w.then(|| {
        let mut dw = vec![T::zero(); o * i];
        gemm(T::one(), dym.t(), MatRef::new(x.data(), n, i), T::zero(), &mut dw);
        Tensor::from_vec(&[o, i], dw).unwrap()
    });
    let mut db = vec![T::zero(); o];
    for row in dy.data().chunks(o) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    (dx, dw, Tensor::from_vec(&[o], db).unwrap())
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {:?}", shape);
    (shape[0], shape[1], shape[2], shape[3])
}

pub fn upsample2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = nchw(x.shape());
    let mut y = vec![T::zero(); n * c * 4 * h * w];
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        let dst = &mut y[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                let r0 = 2 * i * 2 * w + 2 * j;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + 2 * w] = v;
                dst[r0 + 2 * w + 1] = v;
            }
        }
    }
    Tensor::from_vec(&[n, c, 2 * h, 2 * w], y).unwrap()
}

/// Adjoint of [`upsample2x`]: sum each 2x2 block.
pub fn upsample2x_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = nchw(dy.shape());
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (p, plane) in dy.data().chunks(h2 * w2).enumerate() {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * w2 + 2 * j;
                dst[i * w + j] = plane[r0] + plane[r0 + 1] + plane[r0 + w2] + plane[r0 + w2 + 1];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], dx).unwrap()
}

pub fn avgpool2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = nchw(x.shape());
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2x needs even extent, got {:?}", x.shape());
    let mut y = upsample2x_backward(x);
    let q = T::of(0.25);
    y.data_mut().iter_mut().for_each(|v| *v *= q);
    debug_assert_eq!(y.shape(), &[n, c, h / 2, w / 2]);
    y
}

pub fn avgpool2x_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = upsample2x(dy);
    let q = T::of(0.25);
    dx.data_mut().iter_mut().for_each(|v| *v *= q);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.n * g.out_size()];
        for n in 0..g.n {
            for o in 0..g.o {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut s = 0.0;
                        for c in 0..g.c {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * g.c + c) * g.h + iy as usize) * g.w
                                        + ix as usize];
                                    let wv = w.data()[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                                    s += xv * wv;
                                }
                            }
                        }
                        y[((n * g.o + o) * g.ho + oy) * g.wo + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
            let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
            let (y, _) = conv2d_forward(&x, &w, None, &g, true);
            let want = naive_conv(&x, &w, &g);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let a = Tensor::<f64>::from_vec(&[2, 1, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::<f64>::from_vec(&[4, 1], vec![10., 20., 30., 40.]).unwrap();
        let s = binary(&a, &b, |x, y| x + y);
        assert_eq!(s.shape(), &[2, 4, 3]);
        assert_eq!(s.data()[0..3], [10., 11., 12.]);
        assert_eq!(s.data()[3..6], [20., 21., 22.]);
        let r = reduce_to(&s, &[4, 1]);
        // each b entry is broadcast over 6 entries of a
        assert_eq!(r.data()[0], 6.0 * 10.0 + 15.0);
    }

    #[test]
    fn pool_and_upsample() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let u = upsample2x(&x);
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(avgpool2x(&u), x);
    }
}
