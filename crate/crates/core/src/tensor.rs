//! Dense NCHW `f64` tensors and the raw convolution kernels used by the
//! autodiff tape.

use std::fmt;

/// Shape in `[batch, channels, height, width]` order.
pub type Shape = [usize; 4];

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(numel(shape), self.data.len(), "reshape size mismatch");
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copy of batch item `i` as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, i: usize) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor::from_vec(
            [1, self.shape[1], self.shape[2], self.shape[3]],
            self.data[i * per..(i + 1) * per].to_vec(),
        )
    }

    /// Stacks `[1, C, H, W]` tensors of equal shape along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            assert_eq!([t.c(), t.h(), t.w()], [c, h, w], "stack shape mismatch");
            data.extend_from_slice(&t.data);
            n += t.n();
        }
        Tensor::from_vec([n, c, h, w], data)
    }
}

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Output size of a strided convolution with symmetric zero padding.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Output size of a transposed convolution.
pub fn conv_t_out(size: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (size - 1) * stride + kernel + out_pad - 2 * pad
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked against the logical matrix extents.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Weight layout `[out, in, k, k]`, bias `[out]` (stored as `[1, out, 1, 1]`).
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, k2] = w.shape();
    assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, weight {wcin}");
    assert_eq!(k, k2, "square kernels only");
    let g = ConvGeom {
        channels: cin,
        in_h: h,
        in_w: wd,
        kernel: k,
        stride,
        pad,
        out_h: conv_out(h, k, stride, pad),
        out_w: conv_out(wd, k, stride, pad),
    };
    let mut out = Tensor::zeros([n, cout, g.out_h, g.out_w]);
    let in_per = cin * h * wd;
    let out_per = cout * g.cols();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.rows() * g.cols()] };
    for i in 0..n {
        let img = &x.data[i * in_per..(i + 1) * in_per];
        let dst = &mut out.data[i * out_per..(i + 1) * out_per];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(g.cols()).enumerate() {
                chunk.fill(b.data[o]);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut cols);
            &cols
        };
        gemm(cout, g.rows(), g.cols(), 1.0, &w.data, false, src, false, 1.0, dst);
    }
    out
}

pub struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let g = ConvGeom {
        channels: cin,
        in_h: h,
        in_w: wd,
        kernel: k,
        stride,
        pad,
        out_h: gy.h(),
        out_w: gy.w(),
    };
    let in_per = cin * h * wd;
    let out_per = cout * g.cols();
    let mut gx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = need[1].then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        let gyi = &gy.data[i * out_per..(i + 1) * out_per];
        if let Some(gw) = gw.as_mut() {
            let img = &x.data[i * in_per..(i + 1) * in_per];
            let src: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(img, &g, &mut cols);
                &cols
            };
            gemm(cout, g.cols(), g.rows(), 1.0, gyi, false, src, true, 1.0, &mut gw.data);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data[i * in_per..(i + 1) * in_per];
            if g.is_pointwise() {
                gemm(g.rows(), cout, g.cols(), 1.0, &w.data, true, gyi, false, 1.0, dst);
            } else {
                gemm(g.rows(), cout, g.cols(), 1.0, &w.data, true, gyi, false, 0.0, &mut cols);
                col2im(&cols, &g, dst);
            }
        }
    }
    let gb = need[2].then(|| channel_sums(gy));
    ConvGrads { x: gx, w: gw, b: gb }
}

/// Transposed convolution. Weight layout `[in, out, k, k]`.
pub fn conv_t_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [wcin, cout, k, _] = w.shape();
    assert_eq!(cin, wcin, "conv_t channel mismatch: input {cin}, weight {wcin}");
    let oh = conv_t_out(h, k, stride, pad, out_pad);
    let ow = conv_t_out(wd, k, stride, pad, out_pad);
    // A transposed convolution is the data-gradient of a convolution that
    // maps the output grid back onto the input grid.
    let g = ConvGeom {
        channels: cout,
        in_h: oh,
        in_w: ow,
        kernel: k,
        stride,
        pad,
        out_h: h,
        out_w: wd,
    };
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let in_per = cin * h * wd;
    let out_per = cout * oh * ow;
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        let xi = &x.data[i * in_per..(i + 1) * in_per];
        gemm(g.rows(), cin, g.cols(), 1.0, &w.data, true, xi, false, 0.0, &mut cols);
        let dst = &mut out.data[i * out_per..(i + 1) * out_per];
        col2im(&cols, &g, dst);
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                let bv = b.data[o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub fn conv_t_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, k, _] = w.shape();
    let g = ConvGeom {
        channels: cout,
        in_h: gy.h(),
        in_w: gy.w(),
        kernel: k,
        stride,
        pad,
        out_h: h,
        out_w: wd,
    };
    let in_per = cin * h * wd;
    let out_per = cout * gy.h() * gy.w();
    let mut gx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = need[1].then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        im2col(&gy.data[i * out_per..(i + 1) * out_per], &g, &mut cols);
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data[i * in_per..(i + 1) * in_per];
            gemm(cin, g.rows(), g.cols(), 1.0, &w.data, false, &cols, false, 0.0, dst);
        }
        if let Some(gw) = gw.as_mut() {
            let xi = &x.data[i * in_per..(i + 1) * in_per];
            gemm(cin, g.cols(), g.rows(), 1.0, xi, false, &cols, true, 1.0, &mut gw.data);
        }
    }
    let gb = need[2].then(|| channel_sums(gy));
    ConvGrads { x: gx, w: gw, b: gb }
}

fn channel_sums(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros([1, c, 1, 1]);
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * h * w;
            out.data[ch] += t.data[start..start + h * w].iter().sum::<f64>();
        }
    }
    out
}
