//! Dense 3D convolution kernels built on im2col + GEMM.
//!
//! All three kernels share one [`ConvGeometry`] which always describes the
//! *forward* convolution: `input` is the larger (pre-convolution) lattice and
//! `output` the lattice the kernel slides over. A transposed convolution
//! simply runs the same geometry in reverse: its input lives on
//! `geometry.output` and its output on `geometry.input`.
//!
//! Buffers use `N×C×D×H×W` layout. Kernels are `F×C×k×k×k`, where `C` is the
//! channel count on the `input` lattice and `F` the count on `output`.

use crate::error::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution over `input`.
    pub fn forward(input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::invalid("conv3d", "stride must be >= 1"));
        }
        if kernel == 0 {
            return Err(TensorError::invalid("conv3d", "kernel extent must be >= 1"));
        }
        let mut output = [0; 3];
        for (o, &i) in output.iter_mut().zip(&input) {
            if kernel > i + 2 * pad {
                return Err(TensorError::invalid(
                    "conv3d",
                    format!("kernel {kernel} larger than padded extent {}", i + 2 * pad),
                ));
            }
            *o = (i + 2 * pad - kernel) / stride + 1;
        }
        Ok(Self {
            input,
            output,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry of a transposed convolution whose input lattice is
    /// `transposed_input`; the result's `input` field is the upsampled extent
    /// `(in - 1) * stride - 2 * pad + kernel`.
    pub fn transposed(
        transposed_input: [usize; 3],
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::invalid("conv_transpose3d", "stride must be >= 1"));
        }
        let mut big = [0; 3];
        for (b, &i) in big.iter_mut().zip(&transposed_input) {
            let full = (i.max(1) - 1) * stride + kernel;
            if i == 0 || full <= 2 * pad {
                return Err(TensorError::invalid(
                    "conv_transpose3d",
                    format!("extent {i} with kernel {kernel}, pad {pad} yields an empty output"),
                ));
            }
            *b = full - 2 * pad;
        }
        let g = Self::forward(big, kernel, stride, pad)?;
        debug_assert_eq!(g.output, transposed_input);
        Ok(g)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.pow(3)
    }
}

/// `c = a·b + beta·c` for row/column strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (c_rs, c_cs): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, a_rs, a_cs) < a.len());
        assert!(last(k, n, b_rs, b_cs) < b.len());
    }
    assert!(last(m, n, c_rs, c_cs) < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

/// Dense `[m×k]·[k×n]` product, optionally transposing either operand.
pub fn matmul(
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    (m, k, n): (usize, usize, usize),
    out: &mut [f64],
    accumulate: bool,
) {
    let a_strides = if a_transposed { (1, m) } else { (k, 1) };
    let b_strides = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(m, k, n, a, a_strides, b, b_strides, beta, out, (n, 1));
}

/// `[N, C, P]` → `[C, N·P]`.
fn to_channel_major(x: &[f64], batch: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let src = &x[(n * channels + c) * len..][..len];
            out[c * batch * len + n * len..][..len].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N·P]` → `[N, C, P]`.
fn from_channel_major(x: &[f64], batch: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let src = &x[c * batch * len + n * len..][..len];
            out[(n * channels + c) * len..][..len].copy_from_slice(src);
        }
    }
    out
}

/// Walks every (column-row, input offset) pair of the im2col matrix.
///
/// For kernel offset `(kd, kh, kw)` calls `visit(dst_index, src_index)` for
/// each output position whose receptive field tap lands inside the input.
#[inline]
fn for_each_tap(g: &ConvGeometry, kd: usize, kh: usize, kw: usize, mut visit: impl FnMut(usize, usize)) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (s, p) = (g.stride, g.pad);
    for z in 0..od {
        let iz = z * s + kd;
        if iz < p || iz - p >= id {
            continue;
        }
        let iz = iz - p;
        for y in 0..oh {
            let iy = y * s + kh;
            if iy < p || iy - p >= ih {
                continue;
            }
            let iy = iy - p;
            let dst = (z * oh + y) * ow;
            let src = (iz * ih + iy) * iw;
            for x in 0..ow {
                let ix = x * s + kw;
                if ix < p || ix - p >= iw {
                    continue;
                }
                visit(dst + x, src + ix - p);
            }
        }
    }
}

/// Unfolds `x: [N, C, input]` into `[C·k³, N·output]`.
fn im2col(x: &[f64], batch: usize, channels: usize, g: &ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let in_len = g.input_len();
    let out_len = g.output_len();
    let ncols = batch * out_len;
    let mut cols = vec![0.0; channels * g.kernel_volume() * ncols];
    for c in 0..channels {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let row = &mut cols[row * ncols..][..ncols];
                    for n in 0..batch {
                        let src = &x[(n * channels + c) * in_len..][..in_len];
                        let dst = &mut row[n * out_len..][..out_len];
                        for_each_tap(g, kd, kh, kw, |d, s| dst[d] = src[s]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds `[C·k³, N·output]` into `[N, C, input]`.
fn col2im(cols: &[f64], batch: usize, channels: usize, g: &ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let in_len = g.input_len();
    let out_len = g.output_len();
    let ncols = batch * out_len;
    let mut x = vec![0.0; batch * channels * in_len];
    for c in 0..channels {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let row = &cols[row * ncols..][..ncols];
                    for n in 0..batch {
                        let dst = &mut x[(n * channels + c) * in_len..][..in_len];
                        let src = &row[n * out_len..][..out_len];
                        for_each_tap(g, kd, kh, kw, |s, d| dst[d] += src[s]);
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution: `x: [N, C, input]`, `kernel: [F, C, k³]` → `[N, F, output]`.
pub fn conv_forward(
    x: &[f64],
    kernel: &[f64],
    batch: usize,
    channels: usize,
    filters: usize,
    g: &ConvGeometry,
) -> Vec<f64> {
    let rows = channels * g.kernel_volume();
    let ncols = batch * g.output_len();
    let cols = im2col(x, batch, channels, g);
    let mut out = vec![0.0; filters * ncols];
    matmul(kernel, false, &cols, false, (filters, rows, ncols), &mut out, false);
    from_channel_major(&out, batch, filters, g.output_len())
}

/// Gradient of the forward convolution w.r.t. its input; equivalently the
/// transposed convolution of `dy: [N, F, output]` → `[N, C, input]`.
pub fn conv_backward_data(
    dy: &[f64],
    kernel: &[f64],
    batch: usize,
    channels: usize,
    filters: usize,
    g: &ConvGeometry,
) -> Vec<f64> {
    let rows = channels * g.kernel_volume();
    let ncols = batch * g.output_len();
    let dy = to_channel_major(dy, batch, filters, g.output_len());
    let mut cols = vec![0.0; rows * ncols];
    matmul(kernel, true, &dy, false, (rows, filters, ncols), &mut cols, false);
    col2im(&cols, batch, channels, g)
}

/// Gradient of the forward convolution w.r.t. its kernel, accumulated into
/// `dkernel: [F, C·k³]`.
pub fn conv_backward_kernel(
    dy: &[f64],
    x: &[f64],
    batch: usize,
    channels: usize,
    filters: usize,
    g: &ConvGeometry,
    dkernel: &mut [f64],
) {
    let rows = channels * g.kernel_volume();
    let ncols = batch * g.output_len();
    let dy = to_channel_major(dy, batch, filters, g.output_len());
    let cols = im2col(x, batch, channels, g);
    matmul(&dy, false, &cols, true, (filters, ncols, rows), dkernel, true);
}
