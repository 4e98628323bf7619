//! Raw forward/backward kernels over flat NCHW buffers.

use super::Shape4;

/// "Same"-style padding on each side: `floor((k - 1) * dilation / 2)`.
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    (kernel - 1) * dilation / 2
}

/// Output length of a padded, dilated window sweep; `None` when empty.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, dilation: usize) -> Option<usize> {
    let pad = same_padding(kernel, dilation);
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * pad;
    if len == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub input: Shape4,
    pub output: Shape4,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.input.c / self.groups
    }

    fn cout_g(&self) -> usize {
        self.output.c / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kernel * self.kernel
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    #[inline]
    fn src(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.pad as isize;
        (pos >= 0).then_some(pos as usize)
    }
}

fn im2col(g: &ConvGeom, x: &[f64], n: usize, group: usize, cols: &mut [f64]) {
    let (h, w) = (g.input.h, g.input.w);
    let (ho, wo) = (g.output.h, g.output.w);
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..g.cin_g() {
        let c = group * g.cin_g() + ci;
        let xin = &x[(n * g.input.c + c) * h * w..][..h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut cols[row * plane_out..][..plane_out];
                for oh in 0..ho {
                    let ih = g.src(oh, kh).filter(|&v| v < h);
                    for ow in 0..wo {
                        dst[oh * wo + ow] = match (ih, g.src(ow, kw).filter(|&v| v < w)) {
                            (Some(ih), Some(iw)) => xin[ih * w + iw],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], n: usize, group: usize, dx: &mut [f64]) {
    let (h, w) = (g.input.h, g.input.w);
    let (ho, wo) = (g.output.h, g.output.w);
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..g.cin_g() {
        let c = group * g.cin_g() + ci;
        let dxin = &mut dx[(n * g.input.c + c) * h * w..][..h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &cols[row * plane_out..][..plane_out];
                for oh in 0..ho {
                    let Some(ih) = g.src(oh, kh).filter(|&v| v < h) else {
                        continue;
                    };
                    for ow in 0..wo {
                        if let Some(iw) = g.src(ow, kw).filter(|&v| v < w) {
                            dxin[ih * w + iw] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n] (+ c when accumulate)`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index implied by the strides above.
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

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], wt: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.output.numel()];
    if g.is_depthwise() {
        depthwise_forward(g, x, wt, &mut out);
        return out;
    }
    let plane_out = g.output.plane();
    let rows = g.col_rows();
    let mut cols = vec![0.0; rows * plane_out];
    for n in 0..g.input.n {
        for group in 0..g.groups {
            im2col(g, x, n, group, &mut cols);
            let wg = &wt[group * g.cout_g() * rows..][..g.cout_g() * rows];
            let dst = &mut out[(n * g.output.c + group * g.cout_g()) * plane_out..][..g.cout_g() * plane_out];
            gemm(g.cout_g(), rows, plane_out, wg, false, &cols, false, dst, false);
        }
    }
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = want_dx.then(|| vec![0.0; g.input.numel()]);
    let mut dw = want_dw.then(|| vec![0.0; wt.len()]);
    if g.is_depthwise() {
        depthwise_backward(g, x, wt, dy, dx.as_deref_mut(), dw.as_deref_mut());
        return (dx, dw);
    }
    let plane_out = g.output.plane();
    let rows = g.col_rows();
    let cog = g.cout_g();
    let mut cols = vec![0.0; rows * plane_out];
    for n in 0..g.input.n {
        for group in 0..g.groups {
            let dyg = &dy[(n * g.output.c + group * cog) * plane_out..][..cog * plane_out];
            if let Some(dw) = dw.as_deref_mut() {
                im2col(g, x, n, group, &mut cols);
                let dwg = &mut dw[group * cog * rows..][..cog * rows];
                // dW[cog x rows] += dY[cog x P] * cols^T[P x rows]
                gemm(cog, plane_out, rows, dyg, false, &cols, true, dwg, true);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wg = &wt[group * cog * rows..][..cog * rows];
                // dcols[rows x P] = W^T[rows x cog] * dY[cog x P]
                gemm(rows, cog, plane_out, wg, true, dyg, false, &mut cols, false);
                col2im(g, &cols, n, group, dx);
            }
        }
    }
    (dx, dw)
}

fn depthwise_forward(g: &ConvGeom, x: &[f64], wt: &[f64], out: &mut [f64]) {
    let (h, w) = (g.input.h, g.input.w);
    let (ho, wo) = (g.output.h, g.output.w);
    let k = g.kernel;
    for n in 0..g.input.n {
        for c in 0..g.input.c {
            let xin = &x[(n * g.input.c + c) * h * w..][..h * w];
            let wc = &wt[c * k * k..][..k * k];
            let dst = &mut out[(n * g.output.c + c) * ho * wo..][..ho * wo];
            for kh in 0..k {
                for oh in 0..ho {
                    let Some(ih) = g.src(oh, kh).filter(|&v| v < h) else {
                        continue;
                    };
                    for kw in 0..k {
                        let wv = wc[kh * k + kw];
                        for ow in 0..wo {
                            if let Some(iw) = g.src(ow, kw).filter(|&v| v < w) {
                                dst[oh * wo + ow] += wv * xin[ih * w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (h, w) = (g.input.h, g.input.w);
    let (ho, wo) = (g.output.h, g.output.w);
    let k = g.kernel;
    for n in 0..g.input.n {
        for c in 0..g.input.c {
            let base_in = (n * g.input.c + c) * h * w;
            let dyc = &dy[(n * g.output.c + c) * ho * wo..][..ho * wo];
            for kh in 0..k {
                for kw in 0..k {
                    let widx = c * k * k + kh * k + kw;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for oh in 0..ho {
                        let Some(ih) = g.src(oh, kh).filter(|&v| v < h) else {
                            continue;
                        };
                        for ow in 0..wo {
                            if let Some(iw) = g.src(ow, kw).filter(|&v| v < w) {
                                let d = dyc[oh * wo + ow];
                                let xi = base_in + ih * w + iw;
                                acc += d * x[xi];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += d * wv;
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// 3x3 max pooling with padding 1; returns values and the input flat index of
/// each window's maximum (ties resolve to the lowest index).
pub(crate) fn max_pool3_forward(input: Shape4, x: &[f64], output: Shape4, stride: usize) -> (Vec<f64>, Vec<u32>) {
    let (h, w) = (input.h, input.w);
    let (ho, wo) = (output.h, output.w);
    let mut out = Vec::with_capacity(output.numel());
    let mut arg = Vec::with_capacity(output.numel());
    for nc in 0..input.n * input.c {
        let base = nc * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for kh in 0..3 {
                    let ih = (oh * stride + kh) as isize - 1;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for kw in 0..3 {
                        let iw = (ow * stride + kw) as isize - 1;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

/// Source taps for bilinear upsampling by an integer factor (half-pixel centers).
pub(crate) fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(input: Shape4, x: &[f64], factor: usize) -> Vec<f64> {
    let (h, w) = (input.h, input.w);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut out = Vec::with_capacity(input.n * input.c * ty.len() * tx.len());
    for nc in 0..input.n * input.c {
        let src = &x[nc * h * w..][..h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(input: Shape4, dy: &[f64], factor: usize) -> Vec<f64> {
    let (h, w) = (input.h, input.w);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut dx = vec![0.0; input.numel()];
    let mut it = dy.iter();
    for nc in 0..input.n * input.c {
        let dst = &mut dx[nc * h * w..][..h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let g = *it.next().expect("upsample grad length");
                dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                dst[y1 * w + x0] += g * ly * (1.0 - lx);
                dst[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    dx
}
