//! Raw NCHW kernels over contiguous slices. Every reduction runs in a fixed
//! left-to-right order so results are bit-reproducible.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn in_plane(&self) -> usize {
        self.height * self.width
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

#[inline]
fn axpy(out: &mut [f32], a: f32, x: &[f32]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * *v;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Valid output index range `[lo, hi)` along one axis for kernel offset `i`.
#[inline]
fn valid_range(i: usize, padding: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + i - padding < in_len
    let lo = if i >= padding {
        0
    } else {
        (padding - i).div_ceil(stride)
    };
    let hi = if in_len + padding > i {
        ((in_len + padding - i - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn depthwise_forward(g: &ConvGeom, x: &[f32], f: &[f32]) -> Vec<f32> {
    let k = g.kernel;
    let mut y = vec![0.0f32; g.batch * g.channels * g.out_plane()];
    for b in 0..g.batch {
        for m in 0..g.channels {
            let plane = b * g.channels + m;
            let xin = &x[plane * g.in_plane()..(plane + 1) * g.in_plane()];
            let out = &mut y[plane * g.out_plane()..(plane + 1) * g.out_plane()];
            let filt = &f[m * k * k..(m + 1) * k * k];
            for i in 0..k {
                let (oh_lo, oh_hi) = valid_range(i, g.padding, g.stride, g.height, g.out_h);
                for j in 0..k {
                    let w = filt[i * k + j];
                    let (ow_lo, ow_hi) = valid_range(j, g.padding, g.stride, g.width, g.out_w);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + i - g.padding;
                        let row = &xin[ih * g.width..(ih + 1) * g.width];
                        let orow = &mut out[oh * g.out_w..(oh + 1) * g.out_w];
                        if g.stride == 1 {
                            let iw0 = ow_lo + j - g.padding;
                            axpy(&mut orow[ow_lo..ow_hi], w, &row[iw0..iw0 + (ow_hi - ow_lo)]);
                        } else {
                            for ow in ow_lo..ow_hi {
                                orow[ow] += w * row[ow * g.stride + j - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns (grad_input, grad_filters); either may be skipped.
pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    x: &[f32],
    f: &[f32],
    gy: &[f32],
    need_gx: bool,
    need_gf: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let k = g.kernel;
    let mut gx = need_gx.then(|| vec![0.0f32; x.len()]);
    let mut gf = need_gf.then(|| vec![0.0f32; f.len()]);
    for b in 0..g.batch {
        for m in 0..g.channels {
            let plane = b * g.channels + m;
            let xin = &x[plane * g.in_plane()..(plane + 1) * g.in_plane()];
            let gout = &gy[plane * g.out_plane()..(plane + 1) * g.out_plane()];
            for i in 0..k {
                let (oh_lo, oh_hi) = valid_range(i, g.padding, g.stride, g.height, g.out_h);
                for j in 0..k {
                    let (ow_lo, ow_hi) = valid_range(j, g.padding, g.stride, g.width, g.out_w);
                    let w = f[m * k * k + i * k + j];
                    let mut acc = 0.0f32;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + i - g.padding;
                        for ow in ow_lo..ow_hi {
                            let iw = ow * g.stride + j - g.padding;
                            let go = gout[oh * g.out_w + ow];
                            acc += go * xin[ih * g.width + iw];
                            if let Some(gx) = gx.as_mut() {
                                gx[plane * g.in_plane() + ih * g.width + iw] += w * go;
                            }
                        }
                    }
                    if let Some(gf) = gf.as_mut() {
                        gf[m * k * k + i * k + j] += acc;
                    }
                }
            }
        }
    }
    (gx, gf)
}

/// `y[b,n,p] = sum_m f[m,n] * x[b,m,p]`.
pub(crate) fn pointwise_forward(
    batch: usize,
    m_in: usize,
    n_out: usize,
    plane: usize,
    x: &[f32],
    f: &[f32],
) -> Vec<f32> {
    let mut y = vec![0.0f32; batch * n_out * plane];
    for b in 0..batch {
        for n in 0..n_out {
            let out = &mut y[(b * n_out + n) * plane..(b * n_out + n + 1) * plane];
            for m in 0..m_in {
                let w = f[m * n_out + n];
                axpy(out, w, &x[(b * m_in + m) * plane..(b * m_in + m + 1) * plane]);
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pointwise_backward(
    batch: usize,
    m_in: usize,
    n_out: usize,
    plane: usize,
    x: &[f32],
    f: &[f32],
    gy: &[f32],
    need_gx: bool,
    need_gf: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let gx = need_gx.then(|| {
        let mut gx = vec![0.0f32; x.len()];
        for b in 0..batch {
            for m in 0..m_in {
                let out = &mut gx[(b * m_in + m) * plane..(b * m_in + m + 1) * plane];
                for n in 0..n_out {
                    axpy(
                        out,
                        f[m * n_out + n],
                        &gy[(b * n_out + n) * plane..(b * n_out + n + 1) * plane],
                    );
                }
            }
        }
        gx
    });
    let gf = need_gf.then(|| {
        let mut gf = vec![0.0f32; f.len()];
        for b in 0..batch {
            for m in 0..m_in {
                let xs = &x[(b * m_in + m) * plane..(b * m_in + m + 1) * plane];
                for n in 0..n_out {
                    gf[m * n_out + n] += dot(xs, &gy[(b * n_out + n) * plane..(b * n_out + n + 1) * plane]);
                }
            }
        }
        gf
    });
    (gx, gf)
}

/// `y = x · w + bias` for `x: [rows, d]`, `w: [d, c]`.
pub(crate) fn linear_forward(rows: usize, d: usize, c: usize, x: &[f32], w: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0f32; rows * c];
    for r in 0..rows {
        let out = &mut y[r * c..(r + 1) * c];
        for k in 0..d {
            axpy(out, x[r * d + k], &w[k * c..(k + 1) * c]);
        }
        for (o, b) in out.iter_mut().zip(bias) {
            *o += *b;
        }
    }
    y
}
