//! Raw numeric kernels shared by the graph operations.

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    /// Logical row count after any transpose.
    pub rows: usize,
    /// Logical column count after any transpose.
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// View of the transpose of a stored `rows x cols` matrix.
    pub fn transpose_of(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, with `out` stored row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(out.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every index touched by the strided
    // access stays inside the three slices, and `out` does not alias inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a valid, stride-1 convolution over NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 1 - self.kernel
    }

    /// Rows of the patch matrix: one per output pixel.
    pub fn patch_rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Columns of the patch matrix, ordered (ky, kx, c_in) to match the kernel layout.
    pub fn patch_cols(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Unrolls NHWC input into a `[patch_rows, patch_cols]` matrix.
#[cfg(test)]
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch_rows() * g.patch_cols()];
    im2col_into(input, g, &mut cols);
    cols
}

/// [`im2col`] into a caller-provided buffer of exactly the right length.
pub(crate) fn im2col_into(input: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow, k, c) = (g.out_height(), g.out_width(), g.kernel, g.in_channels);
    let row_len = g.patch_cols();
    debug_assert_eq!(cols.len(), g.patch_rows() * row_len);
    let mut rows = cols.chunks_exact_mut(row_len);
    for n in 0..g.batch {
        let image = &input[n * g.height * g.width * c..(n + 1) * g.height * g.width * c];
        for y in 0..oh {
            for x in 0..ow {
                let dst = rows.next().expect("buffer sized by geometry");
                for ky in 0..k {
                    let src_start = ((y + ky) * g.width + x) * c;
                    dst[ky * k * c..(ky + 1) * k * c]
                        .copy_from_slice(&image[src_start..src_start + k * c]);
                }
            }
        }
    }
}

// The convolution drivers below work one image at a time so the patch
// matrix stays small enough to live in cache, and reuse a single buffer.

impl ConvGeometry {
    fn single(&self) -> Self {
        Self { batch: 1, ..*self }
    }

    fn input_len(&self) -> usize {
        self.height * self.width * self.in_channels
    }

    fn output_len(&self) -> usize {
        self.out_height() * self.out_width() * self.out_channels
    }
}

/// Forward convolution: NHWC output with `bias` added per channel.
pub(crate) fn conv_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let one = g.single();
    let (rows, cols) = (one.patch_rows(), one.patch_cols());
    let mut out = vec![0.0; g.batch * g.output_len()];
    for row in out.chunks_exact_mut(g.out_channels) {
        row.copy_from_slice(bias);
    }
    let mut patches = vec![0.0; rows * cols];
    for (image, dst) in input.chunks_exact(g.input_len()).zip(out.chunks_exact_mut(g.output_len())) {
        im2col_into(image, &one, &mut patches);
        gemm(
            MatRef::new(&patches, rows, cols),
            MatRef::new(kernel, cols, g.out_channels),
            1.0,
            dst,
        );
    }
    out
}

/// Kernel gradient `[k, k, Cin, Cout]` given the upstream output gradient.
pub(crate) fn conv_kernel_grad(input: &[f64], up: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let one = g.single();
    let (rows, cols) = (one.patch_rows(), one.patch_cols());
    let mut grad = vec![0.0; cols * g.out_channels];
    let mut patches = vec![0.0; rows * cols];
    for (image, up) in input.chunks_exact(g.input_len()).zip(up.chunks_exact(g.output_len())) {
        im2col_into(image, &one, &mut patches);
        gemm(
            MatRef::transpose_of(&patches, rows, cols),
            MatRef::new(up, rows, g.out_channels),
            1.0,
            &mut grad,
        );
    }
    grad
}

/// Input gradient, NHWC, given the upstream output gradient.
pub(crate) fn conv_input_grad(kernel: &[f64], up: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let one = g.single();
    let (rows, cols) = (one.patch_rows(), one.patch_cols());
    let mut grad = vec![0.0; g.batch * g.input_len()];
    let mut dpatches = vec![0.0; rows * cols];
    for (dst, up) in grad.chunks_exact_mut(g.input_len()).zip(up.chunks_exact(g.output_len())) {
        gemm(
            MatRef::new(up, rows, g.out_channels),
            MatRef::transpose_of(kernel, cols, g.out_channels),
            0.0,
            &mut dpatches,
        );
        col2im(&dpatches, &one, dst);
    }
    grad
}

/// Scatter-adds a patch-matrix gradient back onto NHWC input positions.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let (oh, ow, k, c) = (g.out_height(), g.out_width(), g.kernel, g.in_channels);
    let row_len = g.patch_cols();
    let mut row = 0;
    for n in 0..g.batch {
        let image = &mut out[n * g.height * g.width * c..(n + 1) * g.height * g.width * c];
        for y in 0..oh {
            for x in 0..ow {
                let src = &cols[row * row_len..(row + 1) * row_len];
                for ky in 0..k {
                    let dst_start = ((y + ky) * g.width + x) * c;
                    for (d, s) in image[dst_start..dst_start + k * c]
                        .iter_mut()
                        .zip(&src[ky * k * c..(ky + 1) * k * c])
                    {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2x2 stride-2 max pooling in floor mode over NHWC input.
///
/// Returns pooled values and, for each output, the flat input index of the
/// winning cell. Ties go to the lowest flat index.
pub(crate) fn maxpool2x2(
    input: &[f64],
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut values = Vec::with_capacity(batch * oh * ow * channels);
    let mut argmax = Vec::with_capacity(values.capacity());
    for n in 0..batch {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..channels {
                    let at = |dy: usize, dx: usize| {
                        ((n * height + 2 * y + dy) * width + 2 * x + dx) * channels + ch
                    };
                    // Candidates in increasing flat-index order.
                    let candidates = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)];
                    let mut best = candidates[0];
                    for &idx in &candidates[1..] {
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                    values.push(input[best]);
                    argmax.push(best);
                }
            }
        }
    }
    (values, argmax)
}
