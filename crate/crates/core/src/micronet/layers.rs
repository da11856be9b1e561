//! Layer kernels: convolution via im2col + GEMM, leaky ReLU, nearest
//! upsampling, channel concatenation and residual addition, each with its
//! exact reverse-mode counterpart.

use super::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    /// Square kernel side, 1 or 3; padding is `k / 2`.
    pub k: usize,
    pub stride: usize,
    pub leaky: bool,
    /// Offsets of the weight block (`cout x cin*k*k`) and bias block in the
    /// flat parameter vector.
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvSpec {
    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// `C = A * B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * a_strides.0 + (k.max(1) - 1) * a_strides.1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice extents are checked above for `a` and `c`, and callers
    // pass `b` with matching `k x n` extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(spec: &ConvSpec, x: &Tensor, ho: usize, wo: usize) -> Vec<f64> {
    let k = spec.k;
    let pad = (k / 2) as isize;
    let n = ho * wo;
    let mut cols = vec![0.0; spec.fan_in() * n];
    for ci in 0..spec.cin {
        let plane = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * spec.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(spec: &ConvSpec, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
    let k = spec.k;
    let pad = (k / 2) as isize;
    let n = ho * wo;
    let mut dx = Tensor::zeros(spec.cin, h, w);
    for ci in 0..spec.cin {
        let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv_forward(spec: &ConvSpec, params: &[f64], x: &Tensor) -> Tensor {
    debug_assert_eq!(x.c, spec.cin);
    let (ho, wo) = spec.out_size(x.h, x.w);
    let n = ho * wo;
    let kk = spec.fan_in();
    let weights = &params[spec.w_off..spec.w_off + spec.weight_len()];
    let bias = &params[spec.b_off..spec.b_off + spec.cout];

    let mut out = Tensor::zeros(spec.cout, ho, wo);
    for (co, b) in bias.iter().enumerate() {
        out.data[co * n..(co + 1) * n].fill(*b);
    }
    let owned;
    let cols: &[f64] = if spec.is_pointwise() {
        &x.data
    } else {
        owned = im2col(spec, x, ho, wo);
        &owned
    };
    gemm(spec.cout, kk, n, weights, (kk, 1), cols, (n, 1), 1.0, &mut out.data);
    if spec.leaky {
        for v in &mut out.data {
            if *v < 0.0 {
                *v *= LEAKY_SLOPE;
            }
        }
    }
    debug_assert!(out.is_finite(), "non-finite activation");
    out
}

/// Backpropagates through one convolution (and its activation).
///
/// `out` is the layer's forward output; the activation derivative is read
/// from its sign. Parameter gradients accumulate into `grads`; the input
/// gradient is returned when `need_dx` is set.
pub fn conv_backward(
    spec: &ConvSpec,
    params: &[f64],
    x: &Tensor,
    out: &Tensor,
    dout: &Tensor,
    grads: &mut [f64],
    need_dx: bool,
) -> Option<Tensor> {
    let (ho, wo) = (out.h, out.w);
    let n = ho * wo;
    let kk = spec.fan_in();

    let mut dpre = dout.data.clone();
    if spec.leaky {
        for (g, &o) in dpre.iter_mut().zip(&out.data) {
            if o <= 0.0 {
                *g *= LEAKY_SLOPE;
            }
        }
    }

    {
        let db = &mut grads[spec.b_off..spec.b_off + spec.cout];
        for (co, g) in db.iter_mut().enumerate() {
            *g += dpre[co * n..(co + 1) * n].iter().sum::<f64>();
        }
    }

    let owned;
    let cols: &[f64] = if spec.is_pointwise() {
        &x.data
    } else {
        owned = im2col(spec, x, ho, wo);
        &owned
    };
    // dW (cout x kk) += dpre (cout x n) * cols^T (n x kk)
    gemm(
        spec.cout,
        n,
        kk,
        &dpre,
        (n, 1),
        cols,
        (1, n),
        1.0,
        &mut grads[spec.w_off..spec.w_off + spec.weight_len()],
    );

    if !need_dx {
        return None;
    }
    let weights = &params[spec.w_off..spec.w_off + spec.weight_len()];
    // dcols (kk x n) = W^T (kk x cout) * dpre (cout x n)
    let mut dcols = vec![0.0; kk * n];
    gemm(kk, spec.cout, n, weights, (1, kk), &dpre, (n, 1), 0.0, &mut dcols);
    if spec.is_pointwise() {
        Some(Tensor {
            c: spec.cin,
            h: x.h,
            w: x.w,
            data: dcols,
        })
    } else {
        Some(col2im(spec, &dcols, x.h, x.w, ho, wo))
    }
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_forward(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.c, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for y in 0..out.h {
            for xx in 0..out.w {
                *out.at_mut(c, y, xx) = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn upsample_backward(dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(dout.c, dout.h / 2, dout.w / 2);
    for c in 0..dout.c {
        for y in 0..dout.h {
            for x in 0..dout.w {
                *dx.at_mut(c, y / 2, x / 2) += dout.at(c, y, x);
            }
        }
    }
    dx
}

/// Stacks `a`'s channels before `b`'s.
pub fn concat_forward(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn concat_backward(dout: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let split = ca * dout.plane();
    let a = Tensor {
        c: ca,
        h: dout.h,
        w: dout.w,
        data: dout.data[..split].to_vec(),
    };
    let b = Tensor {
        c: dout.c - ca,
        h: dout.h,
        w: dout.w,
        data: dout.data[split..].to_vec(),
    };
    (a, b)
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.add_assign(b);
    out
}
