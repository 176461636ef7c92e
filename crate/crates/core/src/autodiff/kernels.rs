//! Raw loops behind the heavier primitives. Everything here works on flat
//! row-major slices; shape validation happens in the tape layer.

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `da[m,k] += dc[m,n] * b[k,n]^T`
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, n, k, dc, (n, 1), b, (1, n), da);
}

/// `db[k,n] += a[m,k]^T * dc[m,n]`
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k), dc, (n, 1), db);
}

/// `c[m,n] += a[m,k] * b[k,n]` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * sa.0 + (k - 1) * sa.1 + 1);
    assert!(b.len() >= (k - 1) * sb.0 + (n - 1) * sb.1 + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Input row/col for an output position and kernel tap, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        if pos < 0 || pos >= extent as isize {
            None
        } else {
            Some(pos as usize)
        }
    }
}

/// Unfolds one batch image into `[oh*ow, kh*kw*ci]` patch rows (zero padded).
fn im2col(g: &ConvGeom, input: &[f64], b: usize, cols: &mut [f64]) {
    let kc = g.kh * g.kw * g.ci;
    cols.fill(0.0);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * kc..(oy * g.ow + ox + 1) * kc];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let ibase = ((b * g.h + iy) * g.w + ix) * g.ci;
                    let cbase = (ky * g.kw + kx) * g.ci;
                    row[cbase..cbase + g.ci].copy_from_slice(&input[ibase..ibase + g.ci]);
                }
            }
        }
    }
}

/// Folds patch-row gradients back onto the input image.
fn col2im(g: &ConvGeom, cols: &[f64], b: usize, dinput: &mut [f64]) {
    let kc = g.kh * g.kw * g.ci;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * kc..(oy * g.ow + ox + 1) * kc];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let ibase = ((b * g.h + iy) * g.w + ix) * g.ci;
                    let cbase = (ky * g.kw + kx) * g.ci;
                    for (d, &v) in dinput[ibase..ibase + g.ci].iter_mut().zip(&row[cbase..cbase + g.ci]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], out: &mut [f64]) {
    let (p, kc) = (g.oh * g.ow, g.kh * g.kw * g.ci);
    let mut cols = vec![0.0; p * kc];
    for b in 0..g.n {
        im2col(g, input, b, &mut cols);
        matmul_acc(&cols, weight, &mut out[b * p * g.co..(b + 1) * p * g.co], p, kc, g.co);
    }
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    mut dinput: Option<&mut [f64]>,
    mut dweight: Option<&mut [f64]>,
) {
    let (p, kc) = (g.oh * g.ow, g.kh * g.kw * g.ci);
    let mut cols = vec![0.0; p * kc];
    for b in 0..g.n {
        let grad = &dout[b * p * g.co..(b + 1) * p * g.co];
        if let Some(dw) = dweight.as_deref_mut() {
            im2col(g, input, b, &mut cols);
            matmul_grad_b(&cols, grad, dw, p, kc, g.co);
        }
        if let Some(di) = dinput.as_deref_mut() {
            cols.fill(0.0);
            matmul_grad_a(grad, weight, &mut cols, p, kc, g.co);
            col2im(g, &cols, b, di);
        }
    }
}

/// Source taps for one output coordinate of the aligned 2x upsampler: even
/// outputs copy a texel, odd outputs average a texel with its successor
/// (clamped at the last texel).
#[inline]
pub(crate) fn upsample_taps(o: usize, extent: usize) -> [(usize, f64); 2] {
    let i = o / 2;
    if o % 2 == 0 {
        [(i, 1.0), (i, 0.0)]
    } else {
        [(i, 0.5), ((i + 1).min(extent - 1), 0.5)]
    }
}

/// Bilinear weights and the four texel offsets for a continuous coordinate.
/// Returns `None` outside `[0, w-1] x [0, h-1]`.
#[inline]
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Option<BilinearTaps> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    Some(BilinearTaps { x0, y0, fx: x - x0 as f64, fy: y - y0 as f64 })
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps {
    pub x0: usize,
    pub y0: usize,
    pub fx: f64,
    pub fy: f64,
}

/// Sorts a short slice in place; used to make view pooling independent of
/// view order down to the last bit.
#[inline]
pub(crate) fn sort_small(v: &mut [f64]) {
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
}
