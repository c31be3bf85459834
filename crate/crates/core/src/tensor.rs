//! Dense `f64` tensors and the raw numeric kernels behind the autodiff tape.
//!
//! Everything here works on plain values. Differentiation lives in
//! [`crate::autograd`], which composes these kernels.

use std::fmt;

/// A dense row-major `f64` array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "bad reshape to {shape:?}");
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies items `[start, start + count)` along the leading axis.
    pub fn slice_outer(&self, start: usize, count: usize) -> Self {
        let inner = numel(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self::new(shape, self.data[start * inner..(start + count) * inner].to_vec())
    }

    /// Gathers items along the leading axis.
    pub fn select_outer(&self, items: &[usize]) -> Self {
        let inner = numel(&self.shape[1..]);
        let mut data = Vec::with_capacity(items.len() * inner);
        for &i in items {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = items.len();
        Self::new(shape, data)
    }

    /// Concatenates along the leading axis.
    pub fn cat_outer(parts: &[&Tensor]) -> Self {
        assert!(!parts.is_empty());
        let tail = &parts[0].shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "cat_outer shape mismatch");
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = rows;
        Self::new(shape, data)
    }
}

/// Splits `shape` around `axis` into (outer, n, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Sums over every axis except `axis`.
pub(crate) fn reduce_keep_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_extents(x.shape(), axis);
    let mut out = vec![0.0; n];
    let d = x.data();
    for o in 0..outer {
        for (a, slot) in out.iter_mut().enumerate() {
            let base = (o * n + a) * inner;
            *slot += d[base..base + inner].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![n], out)
}

/// Inverse shape action of [`reduce_keep_axis`]: repeats a vector along `axis`.
pub(crate) fn broadcast_axis(v: &Tensor, axis: usize, shape: &[usize]) -> Tensor {
    let (outer, n, inner) = axis_extents(shape, axis);
    assert_eq!(v.len(), n, "broadcast_axis length mismatch");
    let mut out = Vec::with_capacity(outer * n * inner);
    for _ in 0..outer {
        for &val in v.data() {
            out.extend(std::iter::repeat_n(val, inner));
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// `C = op(A) · op(B)` for 2-D tensors, where `op` optionally transposes.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-D");
    assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D");
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe in-bounds views of `a`, `b` and `out`.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Geometry of a stride-1, zero-padded ("same") square convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x_shape: &[usize], w_shape: &[usize]) -> Self {
        assert_eq!(x_shape.len(), 4, "conv input must be [B,C,H,W]");
        assert_eq!(w_shape.len(), 4, "conv weight must be [Co,Ci,k,k]");
        assert_eq!(x_shape[1], w_shape[1], "conv channel mismatch");
        assert_eq!(w_shape[2], w_shape[3], "conv kernel must be square");
        assert!(w_shape[2] % 2 == 1, "conv kernel must be odd");
        Self {
            batch: x_shape[0],
            cin: x_shape[1],
            cout: w_shape[0],
            h: x_shape[2],
            w: x_shape[3],
            k: w_shape[2],
            pad: w_shape[2] / 2,
        }
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.batch * self.hw()
    }
}

/// Lays out receptive fields as a `[Ci·k·k, B·H·W]` matrix.
fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    let (hw, ncol) = (g.hw(), g.cols());
    let mut cols = vec![0.0; g.rows() * ncol];
    let xd = x.data();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let src = &xd[(b * g.cin + ci) * hw..(b * g.cin + ci + 1) * hw];
                    for y in 0..g.h {
                        let sy = y as isize + ky as isize - g.pad as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..g.w {
                            let sx = xx as isize + kx as isize - g.pad as isize;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            dst[b * hw + y * g.w + xx] = src[sy * g.w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.rows(), ncol], cols)
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back to `[B,Ci,H,W]`.
fn col2im(cols: &Tensor, g: &ConvGeom) -> Tensor {
    let (hw, ncol) = (g.hw(), g.cols());
    let mut x = vec![0.0; g.batch * g.cin * hw];
    let cd = cols.data();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cd[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.cin + ci) * hw..(b * g.cin + ci + 1) * hw];
                    for y in 0..g.h {
                        let sy = y as isize + ky as isize - g.pad as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..g.w {
                            let sx = xx as isize + kx as isize - g.pad as isize;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            dst[sy * g.w + sx as usize] += src[b * hw + y * g.w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.cin, g.h, g.w], x)
}

/// `[B,C,HW]` → `[C, B·HW]`.
fn batch_to_channel_major(t: &Tensor, batch: usize, ch: usize, hw: usize) -> Tensor {
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for c in 0..ch {
            out[c * batch * hw + b * hw..c * batch * hw + (b + 1) * hw]
                .copy_from_slice(&src[(b * ch + c) * hw..(b * ch + c + 1) * hw]);
        }
    }
    Tensor::new(vec![ch, batch * hw], out)
}

/// `[C, B·HW]` → `[B,C,H,W]`.
fn channel_major_to_batch(t: &Tensor, batch: usize, ch: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for c in 0..ch {
            out[(b * ch + c) * hw..(b * ch + c + 1) * hw]
                .copy_from_slice(&src[c * batch * hw + b * hw..c * batch * hw + (b + 1) * hw]);
        }
    }
    Tensor::new(vec![batch, ch, h, w], out)
}

/// Stride-1 "same" cross-correlation without bias.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor) -> Tensor {
    let g = ConvGeom::new(x.shape(), w.shape());
    let cols = im2col(x, &g);
    let wm = w.clone().reshaped(&[g.cout, g.rows()]);
    let out = matmul(&wm, &cols, false, false);
    channel_major_to_batch(&out, g.batch, g.cout, g.h, g.w)
}

/// Gradient of [`conv2d`] w.r.t. its input, given the output cotangent.
pub(crate) fn conv2d_input_grad(gout: &Tensor, w: &Tensor, x_shape: &[usize]) -> Tensor {
    let g = ConvGeom::new(x_shape, w.shape());
    let gm = batch_to_channel_major(gout, g.batch, g.cout, g.hw());
    let wm = w.clone().reshaped(&[g.cout, g.rows()]);
    let dcols = matmul(&wm, &gm, true, false);
    col2im(&dcols, &g)
}

/// Gradient of [`conv2d`] w.r.t. its weight, given input and output cotangent.
pub(crate) fn conv2d_weight_grad(x: &Tensor, gout: &Tensor, w_shape: &[usize]) -> Tensor {
    let g = ConvGeom::new(x.shape(), w_shape);
    let cols = im2col(x, &g);
    let gm = batch_to_channel_major(gout, g.batch, g.cout, g.hw());
    matmul(&gm, &cols, false, true).reshaped(w_shape)
}

/// 2×2 stride-2 max pooling with ceil-mode windows. Returns the pooled
/// values and, for every output element, the flat index of its source.
pub(crate) fn maxpool2x2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "maxpool input must be [B,C,H,W]");
    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xd = x.data();
    let mut vals = Vec::with_capacity(bc * oh * ow);
    let mut idx = Vec::with_capacity(bc * oh * ow);
    for p in 0..bc {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + y * w + xx;
                        if best == usize::MAX || xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                vals.push(xd[best]);
                idx.push(best);
            }
        }
    }
    (Tensor::new(vec![s[0], s[1], oh, ow], vals), idx)
}

/// Row-wise log-sum-exp of a `[B,N]` tensor.
pub(crate) fn row_logsumexp(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 2, "row_logsumexp input must be 2-D");
    let n = s[1];
    let out = x
        .data()
        .chunks(n)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect();
    Tensor::new(vec![s[0]], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor) -> Tensor {
        let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[b, co, h, wd]);
        for bi in 0..b {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((bi * ci + c) * h + sy as usize) * wd + sx as usize]
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((bi * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n = numel(shape);
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.3).collect(),
        )
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = ramp(&[2, 3, 5, 4], 0.05);
        let w = ramp(&[4, 3, 3, 3], 0.03);
        let fast = conv2d(&x, &w);
        let slow = naive_conv(&x, &w);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), g> = <x, dx(g, w)> = <w, dw(x, g)>
        let x = ramp(&[2, 2, 4, 3], 0.07);
        let w = ramp(&[3, 2, 3, 3], 0.02);
        let g = ramp(&[2, 3, 4, 3], 0.11);
        let y = conv2d(&x, &w);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let dx = conv2d_input_grad(&g, &w, x.shape());
        let dw = conv2d_weight_grad(&x, &g, w.shape());
        let via_x: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn maxpool_ceil_mode_keeps_odd_border() {
        let x = Tensor::new(vec![1, 1, 3, 3], (0..9).map(f64::from).collect());
        let (y, idx) = maxpool2x2(&x);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 5.0, 7.0, 8.0]);
        assert_eq!(idx, vec![4, 5, 7, 8]);
    }

    #[test]
    fn matmul_transpose_flags() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]);
        assert_eq!(matmul(&a, &b, false, false).data(), &[4., 5., 10., 11.]);
        let at = Tensor::new(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(matmul(&at, &b, true, false).data(), &[4., 5., 10., 11.]);
        let bt = Tensor::new(vec![2, 3], vec![1., 0., 1., 0., 1., 1.]);
        assert_eq!(matmul(&a, &bt, false, true).data(), &[4., 5., 10., 11.]);
    }

    #[test]
    fn logsumexp_is_stable() {
        let x = Tensor::new(vec![1, 2], vec![1000.0, 1000.0]);
        let y = row_logsumexp(&x);
        assert!((y.item() - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
