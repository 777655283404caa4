use super::{Element, Tensor};
use crate::error::{Error, Result};

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k, 1),
        b.data(),
        (n, 1),
        T::zero(),
        &mut out,
        (n, 1),
    );
    Tensor::new(vec![m, n], out)
}

/// Gradients of `c = a * b` given `dc`.
pub(crate) fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &[T],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let da = want_a.then(|| {
        // da = dc * b^T
        let mut da = vec![T::zero(); m * k];
        T::gemm(m, n, k, T::one(), dc, (n, 1), b.data(), (1, n), T::zero(), &mut da, (k, 1));
        da
    });
    let db = want_b.then(|| {
        // db = a^T * dc
        let mut db = vec![T::zero(); k * n];
        T::gemm(k, m, n, T::one(), a.data(), (1, k), dc, (n, 1), T::zero(), &mut db, (n, 1));
        db
    });
    (da, db)
}

fn dims2<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{what} must be 2-D, got {s:?}"))),
    }
}

pub(crate) fn dims4<T: Element>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        s => Err(Error::dim(format!("{what} must be 4-D, got {s:?}"))),
    }
}

/// Output extent of a square convolution along one axis.
pub fn conv_output_extent(size: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::param("convolution stride must be positive"));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::dim(format!(
            "input extent {size} with padding {padding} is smaller than kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new<T: Element>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, channels, height, width] = dims4(input, "conv2d input")?;
        let [filters, kc, kh, kw] = dims4(kernel, "conv2d kernel")?;
        if kc != channels {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kc} channels, input has {channels}"
            )));
        }
        if kh != kw {
            return Err(Error::dim(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        let out_h = conv_output_extent(height, kh, padding, stride)?;
        let out_w = conv_output_extent(width, kw, padding, stride)?;
        Ok(Self {
            batch,
            channels,
            height,
            width,
            filters,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds one sample into a `[C*k*k, out_h*out_w]` column matrix.
fn im2col<T: Element>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let positions = g.positions();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let positions = g.positions();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation via im2col + gemm.
///
/// `input` is `N x C x H x W`, `kernel` is `F x C x k x k`, `bias` (if any)
/// has length `F`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.filters {
            return Err(Error::dim(format!(
                "conv2d bias has {} entries for {} filters",
                b.len(),
                g.filters
            )));
        }
    }
    let (patch, positions) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); patch * positions];
    let mut out = vec![T::zero(); g.batch * g.filters * positions];
    for n in 0..g.batch {
        let x = &input.data()[n * g.sample_len()..(n + 1) * g.sample_len()];
        im2col(&g, x, &mut cols);
        let y = &mut out[n * g.filters * positions..(n + 1) * g.filters * positions];
        if let Some(b) = bias {
            for (f, row) in y.chunks_mut(positions).enumerate() {
                row.fill(b.data()[f]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.filters,
            patch,
            positions,
            T::one(),
            kernel.data(),
            (patch, 1),
            &cols,
            (positions, 1),
            beta,
            y,
            (positions, 1),
        );
    }
    Tensor::new(vec![g.batch, g.filters, g.out_h, g.out_w], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    padding: usize,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    let (patch, positions) = (g.patch(), g.positions());
    let (want_input, want_kernel, want_bias) = want;
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
    let mut d_kernel = want_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut d_bias = want_bias.then(|| vec![T::zero(); g.filters]);
    let mut cols = vec![T::zero(); patch * positions];
    let mut d_cols = vec![T::zero(); patch * positions];
    for n in 0..g.batch {
        let dy = &grad_out[n * g.filters * positions..(n + 1) * g.filters * positions];
        if let Some(db) = d_bias.as_mut() {
            for (f, row) in dy.chunks(positions).enumerate() {
                db[f] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            let x = &input.data()[n * g.sample_len()..(n + 1) * g.sample_len()];
            im2col(&g, x, &mut cols);
            // dk += dy * cols^T
            T::gemm(
                g.filters,
                positions,
                patch,
                T::one(),
                dy,
                (positions, 1),
                &cols,
                (1, positions),
                T::one(),
                dk,
                (patch, 1),
            );
        }
        if let Some(dx) = d_input.as_mut() {
            // dcols = k^T * dy
            T::gemm(
                patch,
                g.filters,
                positions,
                T::one(),
                kernel.data(),
                (1, patch),
                dy,
                (positions, 1),
                T::zero(),
                &mut d_cols,
                (positions, 1),
            );
            col2im(&g, &d_cols, &mut dx[n * g.sample_len()..(n + 1) * g.sample_len()]);
        }
    }
    Ok(ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    })
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn maxpool2x2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool2x2_with_argmax(input).map(|(t, _)| t)
}

/// Also returns, for each output element, the flat input index it was taken
/// from. Ties resolve to the first element in row-major window order.
pub(crate) fn maxpool2x2_with_argmax<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = dims4(input, "maxpool input")?;
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("maxpool needs H, W >= 2, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// Temperature softmax of one logit vector, computed with max-subtraction.
pub fn softmax_temp<T: Element>(logits: &[T], temperature: f64) -> Result<Vec<T>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!("temperature must be > 0, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let mut out = logits.to_vec();
    softmax_row(&mut out, T::from_f64_lossy(temperature));
    Ok(out)
}

/// In-place temperature softmax of one row.
pub(crate) fn softmax_row<T: Element>(row: &mut [T], temperature: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// In-place temperature log-softmax of one row (log-sum-exp form).
pub(crate) fn log_softmax_row<T: Element>(row: &mut [T], temperature: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max) / temperature;
        total += v.exp();
    }
    let lse = total.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}
