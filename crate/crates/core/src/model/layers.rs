//! 3x3 convolution (padding 1) via im2col + GEMM, plus the element-wise
//! pieces of the network. Tensors are `[channels][rows][cols]` contiguous.

/// Spatial tensor with its shape.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }
}

/// `c = a * b` (row-major, `a` is m x k, `b` is k x n), overwriting or
/// accumulating into `c` according to `beta`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the extents implied by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

pub(crate) fn conv_out_dim(input: usize, stride: usize) -> usize {
    (input - 1) / stride + 1
}

/// Unfolds 3x3 patches into a `(channels * 9) x (out_rows * out_cols)` matrix.
fn im2col(x: &Tensor, stride: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let p = out_rows * out_cols;
    let mut col = vec![0.0; x.channels * 9 * p];
    for c in 0..x.channels {
        let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * p..((c * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..out_rows {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= x.rows as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.cols..(iy as usize + 1) * x.cols];
                    let dst = &mut row[oy * out_cols..(oy + 1) * out_cols];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < x.cols as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im(col: &[f64], shape: (usize, usize, usize), stride: usize, out_rows: usize, out_cols: usize) -> Tensor {
    let (channels, rows, cols) = shape;
    let mut x = Tensor::zeros(channels, rows, cols);
    let p = out_rows * out_cols;
    let plane_len = rows * cols;
    for c in 0..channels {
        let plane = &mut x.data[c * plane_len..(c + 1) * plane_len];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * p..((c * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..out_rows {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= rows as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * cols..(iy as usize + 1) * cols];
                    for ox in 0..out_cols {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < cols as isize {
                            dst[ix as usize] += row[oy * out_cols + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution. Returns the output and the unfolded input for backward.
pub(crate) fn conv_forward(
    x: &Tensor,
    weights: &[f64],
    bias: &[f64],
    out_channels: usize,
    stride: usize,
) -> (Tensor, Vec<f64>) {
    let (orows, ocols) = (conv_out_dim(x.rows, stride), conv_out_dim(x.cols, stride));
    let p = orows * ocols;
    let col = im2col(x, stride, orows, ocols);
    let mut out = Tensor::zeros(out_channels, orows, ocols);
    for (o, b) in bias.iter().enumerate() {
        out.data[o * p..(o + 1) * p].fill(*b);
    }
    gemm(out_channels, x.channels * 9, p, weights, false, &col, false, 1.0, &mut out.data);
    (out, col)
}

/// Backward convolution. Accumulates into `grad_w`/`grad_b` and returns the
/// gradient with respect to the layer input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    grad_out: &Tensor,
    col: &[f64],
    weights: &[f64],
    input_shape: (usize, usize, usize),
    stride: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let oc = grad_out.channels;
    let p = grad_out.plane();
    let k = input_shape.0 * 9;
    gemm(oc, p, k, &grad_out.data, false, col, true, 1.0, grad_w);
    for (o, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out.data[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    if !need_input_grad {
        return None;
    }
    let mut grad_col = vec![0.0; k * p];
    gemm(k, oc, p, weights, true, &grad_out.data, false, 0.0, &mut grad_col);
    Some(col2im(&grad_col, input_shape, stride, grad_out.rows, grad_out.cols))
}

pub(crate) fn leaky_relu(x: &mut Tensor, slope: f64) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Uses the activation output; sign is preserved by a positive slope.
pub(crate) fn leaky_relu_backward(grad: &mut Tensor, activated: &Tensor, slope: f64) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a < 0.0 {
            *g *= slope;
        }
    }
}

pub(crate) fn sigmoid(x: &mut Tensor) {
    for v in &mut x.data {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

pub(crate) fn sigmoid_backward(grad: &mut Tensor, activated: &Tensor) {
    for (g, &s) in grad.data.iter_mut().zip(&activated.data) {
        *g *= s * (1.0 - s);
    }
}

pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.channels, x.rows * 2, x.cols * 2);
    for c in 0..x.channels {
        for r in 0..out.rows {
            for col in 0..out.cols {
                out.data[(c * out.rows + r) * out.cols + col] =
                    x.data[(c * x.rows + r / 2) * x.cols + col / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(grad.channels, grad.rows / 2, grad.cols / 2);
    for c in 0..grad.channels {
        for r in 0..grad.rows {
            for col in 0..grad.cols {
                out.data[(c * out.rows + r / 2) * out.cols + col / 2] +=
                    grad.data[(c * grad.rows + r) * grad.cols + col];
            }
        }
    }
    out
}
