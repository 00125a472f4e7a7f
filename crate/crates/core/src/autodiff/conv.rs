//! Convolution kernels on single (unbatched) `C × H × W` planes.
//!
//! All routines lower to one GEMM over an im2col buffer. Callers loop over the
//! batch axis.

/// `c = a · b + beta · c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let max_index = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs
    };
    assert!(max_index(m, k, rsa, csa) < a.len() as isize);
    assert!(max_index(k, n, rsb, csb) < b.len() as isize);
    // SAFETY: bounds of every operand were checked above for non-negative strides.
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

/// Geometry of a strided 2-D cross-correlation with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// "SAME" padding: output extent `ceil(in / stride)`, padding split with the
    /// smaller half before.
    pub fn same(c_in: usize, c_out: usize, in_h: usize, in_w: usize, k_h: usize, k_w: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h.saturating_sub(1)) * stride + k_h).saturating_sub(in_h);
        let pad_w = ((out_w.saturating_sub(1)) * stride + k_w).saturating_sub(in_w);
        Self {
            c_in,
            c_out,
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            out_h,
            out_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, d: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + d) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let pixels = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &input[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for dy in 0..self.k_h {
                for dx in 0..self.k_w {
                    let row = ((ci * self.k_h + dy) * self.k_w + dx) * pixels;
                    for oy in 0..self.out_h {
                        let dst = &mut cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        match self.source(oy, dy, self.pad_top, self.in_h) {
                            None => dst.fill(0.0),
                            Some(y) => {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.source(ox, dx, self.pad_left, self.in_w) {
                                        Some(x) => plane[y * self.in_w + x],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let pixels = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &mut grad_input[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for dy in 0..self.k_h {
                for dx in 0..self.k_w {
                    let row = ((ci * self.k_h + dy) * self.k_w + dx) * pixels;
                    for oy in 0..self.out_h {
                        let Some(y) = self.source(oy, dy, self.pad_top, self.in_h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(x) = self.source(ox, dx, self.pad_left, self.in_w) {
                                plane[y * self.in_w + x] += cols[row + oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Writes `kernel ⋆ input (+ bias)` into `out` (`c_out × out_h × out_w`).
    pub fn forward(&self, input: &[f64], kernel: &[f64], bias: Option<&[f64]>, out: &mut [f64], scratch: &mut Vec<f64>) {
        let (k, n) = (self.patch_len(), self.out_pixels());
        scratch.resize(k * n, 0.0);
        self.im2col(input, scratch);
        gemm(self.c_out, k, n, kernel, (k as isize, 1), scratch, (n as isize, 1), 0.0, out);
        if let Some(bias) = bias {
            for (co, b) in bias.iter().enumerate() {
                for v in &mut out[co * n..(co + 1) * n] {
                    *v += b;
                }
            }
        }
    }

    /// Accumulates the kernel gradient `grad_out · im2col(input)ᵀ` into `grad_kernel`.
    pub fn backward_kernel(&self, input: &[f64], grad_out: &[f64], grad_kernel: &mut [f64], scratch: &mut Vec<f64>) {
        let (k, n) = (self.patch_len(), self.out_pixels());
        scratch.resize(k * n, 0.0);
        self.im2col(input, scratch);
        gemm(self.c_out, n, k, grad_out, (n as isize, 1), scratch, (1, n as isize), 1.0, grad_kernel);
    }

    /// Accumulates the input gradient `col2im(kernelᵀ · grad_out)` into `grad_input`.
    pub fn backward_input(&self, kernel: &[f64], grad_out: &[f64], grad_input: &mut [f64], scratch: &mut Vec<f64>) {
        let (k, n) = (self.patch_len(), self.out_pixels());
        scratch.resize(k * n, 0.0);
        gemm(k, self.c_out, n, kernel, (1, k as isize), grad_out, (n as isize, 1), 0.0, scratch);
        self.col2im(scratch, grad_input);
    }
}

/// Nearest-neighbour upsampling by `factor` fused with a stride-1 "SAME"
/// convolution at the upsampled resolution.
///
/// Each of the `factor²` output phases sees a fixed linear combination of kernel
/// taps over a small low-resolution window, so the whole layer is one GEMM at
/// the input resolution.
#[derive(Debug, Clone)]
pub struct UpsampleConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub factor: usize,
    off_min_y: isize,
    off_min_x: isize,
    win_h: usize,
    win_w: usize,
    // (phase, tap) -> window offset index
    tap_row: Vec<usize>,
    tap_col: Vec<usize>,
}

fn floor_div(a: isize, b: isize) -> isize {
    a.div_euclid(b)
}

impl UpsampleConvGeometry {
    pub fn new(c_in: usize, c_out: usize, in_h: usize, in_w: usize, k_h: usize, k_w: usize, factor: usize) -> Self {
        let f = factor as isize;
        let axis = |k: usize| {
            let pad = ((k - 1) / 2) as isize;
            let lo = floor_div(-pad, f);
            let hi = floor_div(f - 1 + k as isize - 1 - pad, f);
            let map: Vec<usize> = (0..factor)
                .flat_map(|p| (0..k).map(move |d| (floor_div(p as isize + d as isize - pad, f) - lo) as usize))
                .collect();
            (lo, (hi - lo + 1) as usize, map)
        };
        let (off_min_y, win_h, tap_row) = axis(k_h);
        let (off_min_x, win_w, tap_col) = axis(k_w);
        Self {
            c_in,
            c_out,
            in_h,
            in_w,
            k_h,
            k_w,
            factor,
            off_min_y,
            off_min_x,
            win_h,
            win_w,
            tap_row,
            tap_col,
        }
    }

    pub fn out_h(&self) -> usize {
        self.in_h * self.factor
    }

    pub fn out_w(&self) -> usize {
        self.in_w * self.factor
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.win_h * self.win_w
    }

    fn phases(&self) -> usize {
        self.factor * self.factor
    }

    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let n = self.in_h * self.in_w;
        for ci in 0..self.c_in {
            let plane = &input[ci * n..(ci + 1) * n];
            for a in 0..self.win_h {
                for b in 0..self.win_w {
                    let row = ((ci * self.win_h + a) * self.win_w + b) * n;
                    for i in 0..self.in_h {
                        let y = i as isize + self.off_min_y + a as isize;
                        for j in 0..self.in_w {
                            let x = j as isize + self.off_min_x + b as isize;
                            cols[row + i * self.in_w + j] =
                                if y >= 0 && (y as usize) < self.in_h && x >= 0 && (x as usize) < self.in_w {
                                    plane[y as usize * self.in_w + x as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let n = self.in_h * self.in_w;
        for ci in 0..self.c_in {
            let plane = &mut grad_input[ci * n..(ci + 1) * n];
            for a in 0..self.win_h {
                for b in 0..self.win_w {
                    let row = ((ci * self.win_h + a) * self.win_w + b) * n;
                    for i in 0..self.in_h {
                        let y = i as isize + self.off_min_y + a as isize;
                        if y < 0 || y as usize >= self.in_h {
                            continue;
                        }
                        for j in 0..self.in_w {
                            let x = j as isize + self.off_min_x + b as isize;
                            if x >= 0 && (x as usize) < self.in_w {
                                plane[y as usize * self.in_w + x as usize] += cols[row + i * self.in_w + j];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Per-phase effective kernels, `(phases · c_out) × patch_len`.
    pub fn effective_kernel(&self, kernel: &[f64]) -> Vec<f64> {
        let plen = self.patch_len();
        let mut eff = vec![0.0; self.phases() * self.c_out * plen];
        for p in 0..self.factor {
            for q in 0..self.factor {
                let phase = p * self.factor + q;
                for co in 0..self.c_out {
                    let dst = &mut eff[(phase * self.c_out + co) * plen..(phase * self.c_out + co + 1) * plen];
                    for ci in 0..self.c_in {
                        for dy in 0..self.k_h {
                            let a = self.tap_row[p * self.k_h + dy];
                            for dx in 0..self.k_w {
                                let b = self.tap_col[q * self.k_w + dx];
                                dst[(ci * self.win_h + a) * self.win_w + b] +=
                                    kernel[((co * self.c_in + ci) * self.k_h + dy) * self.k_w + dx];
                            }
                        }
                    }
                }
            }
        }
        eff
    }

    fn fold_kernel_grad(&self, grad_eff: &[f64], grad_kernel: &mut [f64]) {
        let plen = self.patch_len();
        for p in 0..self.factor {
            for q in 0..self.factor {
                let phase = p * self.factor + q;
                for co in 0..self.c_out {
                    let src = &grad_eff[(phase * self.c_out + co) * plen..(phase * self.c_out + co + 1) * plen];
                    for ci in 0..self.c_in {
                        for dy in 0..self.k_h {
                            let a = self.tap_row[p * self.k_h + dy];
                            for dx in 0..self.k_w {
                                let b = self.tap_col[q * self.k_w + dx];
                                grad_kernel[((co * self.c_in + ci) * self.k_h + dy) * self.k_w + dx] +=
                                    src[(ci * self.win_h + a) * self.win_w + b];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], eff_kernel: &[f64], bias: Option<&[f64]>, out: &mut [f64], scratch: &mut Vec<f64>) {
        let (k, n, m) = (self.patch_len(), self.in_h * self.in_w, self.phases() * self.c_out);
        let mut phased = vec![0.0; m * n];
        scratch.resize(k * n, 0.0);
        self.im2col(input, scratch);
        gemm(m, k, n, eff_kernel, (k as isize, 1), scratch, (n as isize, 1), 0.0, &mut phased);
        let (oh, ow, f) = (self.out_h(), self.out_w(), self.factor);
        for p in 0..f {
            for q in 0..f {
                let phase = p * f + q;
                for co in 0..self.c_out {
                    let b = bias.map_or(0.0, |b| b[co]);
                    let src = &phased[(phase * self.c_out + co) * n..(phase * self.c_out + co + 1) * n];
                    let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
                    for i in 0..self.in_h {
                        for j in 0..self.in_w {
                            plane[(f * i + p) * ow + f * j + q] = src[i * self.in_w + j] + b;
                        }
                    }
                }
            }
        }
    }

    fn gather_phases(&self, grad_out: &[f64]) -> Vec<f64> {
        let (n, f) = (self.in_h * self.in_w, self.factor);
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut phased = vec![0.0; self.phases() * self.c_out * n];
        for p in 0..f {
            for q in 0..f {
                let phase = p * f + q;
                for co in 0..self.c_out {
                    let dst = &mut phased[(phase * self.c_out + co) * n..(phase * self.c_out + co + 1) * n];
                    let plane = &grad_out[co * oh * ow..(co + 1) * oh * ow];
                    for i in 0..self.in_h {
                        for j in 0..self.in_w {
                            dst[i * self.in_w + j] = plane[(f * i + p) * ow + f * j + q];
                        }
                    }
                }
            }
        }
        phased
    }

    /// Accumulates kernel and input gradients for one plane.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        input: &[f64],
        eff_kernel: &[f64],
        grad_out: &[f64],
        grad_eff: Option<&mut [f64]>,
        grad_input: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) {
        let (k, n, m) = (self.patch_len(), self.in_h * self.in_w, self.phases() * self.c_out);
        let phased = self.gather_phases(grad_out);
        scratch.resize(k * n, 0.0);
        if let Some(grad_eff) = grad_eff {
            self.im2col(input, scratch);
            gemm(m, n, k, &phased, (n as isize, 1), scratch, (1, n as isize), 1.0, grad_eff);
        }
        if let Some(grad_input) = grad_input {
            gemm(k, m, n, eff_kernel, (1, k as isize), &phased, (n as isize, 1), 0.0, scratch);
            self.col2im(scratch, grad_input);
        }
    }

    pub fn effective_len(&self) -> usize {
        self.phases() * self.c_out * self.patch_len()
    }

    pub fn kernel_grad_from_effective(&self, grad_eff: &[f64], grad_kernel: &mut [f64]) {
        self.fold_kernel_grad(grad_eff, grad_kernel);
    }
}
