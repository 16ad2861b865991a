use super::{gemm, shape_err, Real, Result, Tensor};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

/// SAME padding for one spatial axis: `(output size, padding before)`.
pub fn same_padding(dim: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = dim.div_ceil(stride);
    let needed = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(dim);
    (out, needed / 2)
}

/// Resolved shapes of one SAME-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub filters: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Self> {
        let [n, h, w, cin] = input.dims4("conv2d")?;
        let [kh, kw, kcin, filters] = kernel.dims4("conv2d")?;
        if kh != kw || kh == 0 {
            return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let (oh, pad_top) = same_padding(h, kh, stride);
        let (ow, pad_left) = same_padding(w, kh, stride);
        Ok(Self {
            n,
            h,
            w,
            cin,
            k: kh,
            filters,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.filters]
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Examples per im2col chunk.
    fn chunk(&self) -> usize {
        let per_example = (self.oh * self.ow * self.patch_len()).max(1);
        (COL_BUDGET / per_example).clamp(1, self.n.max(1))
    }

    /// Writes the patches of `count` examples starting at `first` into `cols`.
    fn im2col<T: Real>(&self, input: &[T], first: usize, count: usize, cols: &mut [T]) {
        let patch = self.patch_len();
        let img = self.h * self.w * self.cin;
        for e in 0..count {
            let src = &input[(first + e) * img..(first + e + 1) * img];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (e * self.oh + oy) * self.ow + ox;
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            let at = (ky * self.k + kx) * self.cin;
                            let seg = &mut dst[at..at + self.cin];
                            if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                seg.fill(T::zero());
                            } else {
                                let from = (iy as usize * self.w + ix as usize) * self.cin;
                                seg.copy_from_slice(&src[from..from + self.cin]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto `count` input examples.
    fn col2im<T: Real>(&self, cols: &[T], first: usize, count: usize, grad: &mut [T]) {
        let patch = self.patch_len();
        let img = self.h * self.w * self.cin;
        for e in 0..count {
            let dst = &mut grad[(first + e) * img..(first + e + 1) * img];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (e * self.oh + oy) * self.ow + ox;
                    let src = &cols[row * patch..(row + 1) * patch];
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let at = (ky * self.k + kx) * self.cin;
                            let to = (iy as usize * self.w + ix as usize) * self.cin;
                            for (d, &s) in dst[to..to + self.cin]
                                .iter_mut()
                                .zip(&src[at..at + self.cin])
                            {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// SAME-padded 2-D convolution, NHWC input and `[k,k,Cin,F]` kernel, no bias.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernel, stride)?;
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * g.filters];
    let rows_per_example = g.oh * g.ow;
    let patch = g.patch_len();
    if g.is_pointwise() {
        gemm(
            g.n * rows_per_example,
            patch,
            g.filters,
            input.data(),
            false,
            kernel.data(),
            false,
            &mut out,
            false,
        );
    } else {
        let chunk = g.chunk();
        let mut cols = vec![T::zero(); chunk * rows_per_example * patch];
        let mut first = 0;
        while first < g.n {
            let count = chunk.min(g.n - first);
            let rows = count * rows_per_example;
            g.im2col(input.data(), first, count, &mut cols);
            let o = first * rows_per_example * g.filters;
            gemm(
                rows,
                patch,
                g.filters,
                &cols,
                false,
                kernel.data(),
                false,
                &mut out[o..o + rows * g.filters],
                false,
            );
            first += count;
        }
    }
    let out = Tensor::new(g.output_shape().to_vec(), out)?;
    out.check_finite("conv2d")?;
    Ok(out)
}

fn check_upstream<T: Real>(g: &ConvGeometry, upstream: &Tensor<T>) -> Result<()> {
    if upstream.shape() != g.output_shape() {
        return Err(shape_err(
            "conv2d_grad",
            format!(
                "upstream {:?} does not match forward output {:?}",
                upstream.shape(),
                g.output_shape()
            ),
        ));
    }
    Ok(())
}

fn conv_backward<T: Real>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = ConvGeometry::new(input, kernel, stride)?;
    check_upstream(&g, upstream)?;
    let patch = g.patch_len();
    let rows_per_example = g.oh * g.ow;
    let mut d_kernel = vec![T::zero(); patch * g.filters];
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);

    if g.is_pointwise() {
        let rows = g.n * rows_per_example;
        gemm(patch, rows, g.filters, input.data(), true, upstream.data(), false, &mut d_kernel, false);
        if let Some(d) = d_input.as_mut() {
            gemm(rows, g.filters, patch, upstream.data(), false, kernel.data(), true, d, false);
        }
    } else {
        let chunk = g.chunk();
        let mut cols = vec![T::zero(); chunk * rows_per_example * patch];
        let mut first = 0;
        while first < g.n {
            let count = chunk.min(g.n - first);
            let rows = count * rows_per_example;
            let o = first * rows_per_example * g.filters;
            let up = &upstream.data()[o..o + rows * g.filters];
            g.im2col(input.data(), first, count, &mut cols);
            gemm(patch, rows, g.filters, &cols, true, up, false, &mut d_kernel, true);
            if let Some(d) = d_input.as_mut() {
                gemm(rows, g.filters, patch, up, false, kernel.data(), true, &mut cols, false);
                g.col2im(&cols, first, count, d);
            }
            first += count;
        }
    }

    let d_kernel = Tensor::new(kernel.shape().to_vec(), d_kernel)?;
    d_kernel.check_finite("conv2d_grad")?;
    let d_input = match d_input {
        Some(d) => {
            let t = Tensor::new(input.shape().to_vec(), d)?;
            t.check_finite("conv2d_grad")?;
            Some(t)
        }
        None => None,
    };
    Ok((d_input, d_kernel))
}

/// Gradients of a scalar loss w.r.t. the convolution input and kernel.
pub fn conv2d_grad<T: Real>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d_input, d_kernel) = conv_backward(upstream, input, kernel, stride, true)?;
    Ok((d_input.expect("requested"), d_kernel))
}

/// Kernel gradient only; used for the first layer, whose input is data.
pub fn conv2d_grad_kernel_only<T: Real>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    Ok(conv_backward(upstream, input, kernel, stride, false)?.1)
}
