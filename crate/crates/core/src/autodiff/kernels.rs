//! Raw numeric kernels shared by forward and backward passes.

/// `c[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,k] = g[m,n] * b[k,n]^T`
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T * g[m,n]`
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Geometry of a stride-1 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad_h + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad_w + 1 - self.kw
    }

    /// Output rows `i` for which input row `i + u - pad` is in bounds.
    fn rows_for(&self, u: usize) -> std::ops::Range<usize> {
        let lo = self.pad_h.saturating_sub(u);
        let hi = (self.h + self.pad_h).saturating_sub(u).min(self.out_h());
        lo..hi.max(lo)
    }

    fn cols_for(&self, v: usize) -> std::ops::Range<usize> {
        let lo = self.pad_w.saturating_sub(v);
        let hi = (self.w + self.pad_w).saturating_sub(v).min(self.out_w());
        lo..hi.max(lo)
    }
}

pub(crate) fn conv2d(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = vec![0.0; g.batch * g.out_ch * oh * ow];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let ybase = (b * g.out_ch + o) * oh * ow;
            if let Some(bias) = bias {
                y[ybase..ybase + oh * ow].fill(bias[o]);
            }
            for c in 0..g.in_ch {
                let xbase = (b * g.in_ch + c) * g.h * g.w;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let wv = w[((o * g.in_ch + c) * g.kh + u) * g.kw + v];
                        let cols = g.cols_for(v);
                        for i in g.rows_for(u) {
                            let xi = i + u - g.pad_h;
                            let xrow = xbase + xi * g.w;
                            let yrow = ybase + i * ow;
                            for j in cols.clone() {
                                y[yrow + j] += wv * x[xrow + j + v - g.pad_w];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_ch];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let ybase = (b * g.out_ch + o) * oh * ow;
            gb[o] += gy[ybase..ybase + oh * ow].iter().sum::<f64>();
            for c in 0..g.in_ch {
                let xbase = (b * g.in_ch + c) * g.h * g.w;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let widx = ((o * g.in_ch + c) * g.kh + u) * g.kw + v;
                        let wv = w[widx];
                        let cols = g.cols_for(v);
                        let mut acc = 0.0;
                        for i in g.rows_for(u) {
                            let xrow = xbase + (i + u - g.pad_h) * g.w;
                            let yrow = ybase + i * ow;
                            for j in cols.clone() {
                                let gv = gy[yrow + j];
                                let xi = xrow + j + v - g.pad_w;
                                acc += gv * x[xi];
                                gx[xi] += gv * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Non-overlapping max pooling; returns output and the flat input index of
/// each selected maximum (first occurrence wins on ties).
pub(crate) fn maxpool2d(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * size * w + j * size;
                for u in 0..size {
                    for v in 0..size {
                        let idx = base + (i * size + u) * w + j * size + v;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub(crate) fn avgpool2d(x: &[f64], planes: usize, h: usize, w: usize, size: usize) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for u in 0..size {
                    for v in 0..size {
                        s += x[base + (i * size + u) * w + j * size + v];
                    }
                }
                y.push(s * norm);
            }
        }
    }
    y
}

pub(crate) fn avgpool2d_backward(
    gy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let gv = gy[(p * oh + i) * ow + j] * norm;
                for u in 0..size {
                    for v in 0..size {
                        gx[base + (i * size + u) * w + j * size + v] += gv;
                    }
                }
            }
        }
    }
    gx
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
