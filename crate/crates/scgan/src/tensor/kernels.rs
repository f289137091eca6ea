//! Raw compute kernels on plain slices.
//!
//! Convolution is im2col + GEMM (`matrixmultiply::dgemm`); its backward
//! recomputes the column buffer rather than caching it, trading FLOPs for
//! memory. Everything here is shape-unchecked: the tape ops validate.

/// Gradient triple from a convolution backward pass: input, weight, bias.
pub(crate) type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

/// `c[m x n] = alpha * a . b + beta * c` with explicit strides, so callers
/// can pass transposed views without materializing them.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Scatter one image into columns: `col[(c*k + ki)*k + kj][oy*ow + ox]`
/// holds the input pixel under kernel tap `(ki, kj)` at output `(oy, ox)`,
/// zero where the tap falls in padding.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let plane = oh * ow;
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ch * k + ki) * k + kj) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        row[oy * ow..(oy + 1) * ow].fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        row[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: accumulate columns back into image layout.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let plane = oh * ow;
    for ch in 0..c {
        let dxc = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ch * k + ki) * k + kj) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dxc[iy as usize * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output spatial size of a convolution; `None` unless the division is exact.
pub fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (h + 2 * pad).checked_sub(k)?;
    (span % stride == 0).then_some(span / stride + 1)
}

/// Batched conv2d forward. `y[n,o,oy,ox] = b[o] + sum x[n,c,..] * wt[o,c,..]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    o: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let kk = c * k * k;
    let plane = oh * ow;
    let mut col = vec![0.0; kk * plane];
    let mut y = vec![0.0; n * o * plane];
    for img in 0..n {
        im2col(&x[img * c * h * w..], c, h, w, k, stride, pad, oh, ow, &mut col);
        let yi = &mut y[img * o * plane..(img + 1) * o * plane];
        // y_i = W[o x kk] . col[kk x plane]
        gemm(o, kk, plane, 1.0, wt, kk as isize, 1, &col, plane as isize, 1, 0.0, yi);
        for oc in 0..o {
            let b = bias[oc];
            for v in &mut yi[oc * plane..(oc + 1) * plane] {
                *v += b;
            }
        }
    }
    y
}

/// Batched conv2d backward. Returns `(dx, dw, db)`, each only if requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gy: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let kk = c * k * k;
    let plane = oh * ow;
    let mut dx = need_dx.then(|| vec![0.0; n * c * h * w]);
    let mut dw = need_dw.then(|| vec![0.0; o * kk]);
    let mut db = need_db.then(|| vec![0.0; o]);
    let mut col = vec![0.0; kk * plane];
    for img in 0..n {
        let gyi = &gy[img * o * plane..(img + 1) * o * plane];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[img * c * h * w..], c, h, w, k, stride, pad, oh, ow, &mut col);
            // dW += gy_i[o x plane] . col^T[plane x kk]
            gemm(
                o, plane, kk, 1.0, gyi, plane as isize, 1, &col, 1, plane as isize, 1.0, dw,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcol = W^T[kk x o] . gy_i[o x plane]
            gemm(
                kk, o, plane, 1.0, wt, 1, kk as isize, gyi, plane as isize, 1, 0.0, &mut col,
            );
            col2im_acc(
                &col,
                c,
                h,
                w,
                k,
                stride,
                pad,
                oh,
                ow,
                &mut dx[img * c * h * w..(img + 1) * c * h * w],
            );
        }
        if let Some(db) = db.as_deref_mut() {
            for oc in 0..o {
                db[oc] += gyi[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
            }
        }
    }
    (dx, dw, db)
}

/// `y[n x g] = x[n x f] . w^T[f x g] + b[g]`.
pub fn linear_forward(x: &[f64], n: usize, f: usize, w: &[f64], g: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * g];
    gemm(n, f, g, 1.0, x, f as isize, 1, w, 1, f as isize, 0.0, &mut y);
    for row in 0..n {
        for col in 0..g {
            y[row * g + col] += b[col];
        }
    }
    y
}

/// Backward of [`linear_forward`]. Returns `(dx, dw, db)` on request.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    n: usize,
    f: usize,
    w: &[f64],
    g: usize,
    gy: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; n * f];
        gemm(n, g, f, 1.0, gy, g as isize, 1, w, f as isize, 1, 0.0, &mut dx);
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![0.0; g * f];
        // dW = gy^T[g x n] . x[n x f]
        gemm(g, n, f, 1.0, gy, 1, g as isize, x, f as isize, 1, 0.0, &mut dw);
        dw
    });
    let db = need_db.then(|| {
        let mut db = vec![0.0; g];
        for row in 0..n {
            for col in 0..g {
                db[col] += gy[row * g + col];
            }
        }
        db
    });
    (dx, dw, db)
}

/// Nearest-neighbour upsample by an integer factor.
pub fn upsample_forward(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (nh, nw) = (h * f, w * f);
    let mut y = vec![0.0; planes * nh * nw];
    for p in 0..planes {
        let xp = &x[p * h * w..];
        let yp = &mut y[p * nh * nw..(p + 1) * nh * nw];
        for i in 0..nh {
            for j in 0..nw {
                yp[i * nw + j] = xp[(i / f) * w + j / f];
            }
        }
    }
    y
}

/// Each input pixel receives the sum over its `f x f` output block.
pub fn upsample_backward(gy: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (nh, nw) = (h * f, w * f);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &gy[p * nh * nw..];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..nh {
            for j in 0..nw {
                dp[(i / f) * w + j / f] += gp[i * nw + j];
            }
        }
    }
    dx
}

/// 2x2 average pooling with stride 2; `h` and `w` must be even.
pub fn avgpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let base = 2 * i * w + 2 * j;
                yp[i * ow + j] = 0.25 * (xp[base] + xp[base + 1] + xp[base + w] + xp[base + w + 1]);
            }
        }
    }
    y
}

pub fn avgpool2_backward(gy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &gy[p * oh * ow..];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * gp[i * ow + j];
                let base = 2 * i * w + 2 * j;
                dp[base] += g;
                dp[base + 1] += g;
                dp[base + w] += g;
                dp[base + w + 1] += g;
            }
        }
    }
    dx
}
