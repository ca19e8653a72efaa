//! Dense kernels shared by forward and backward rules.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `a` is `m×k` after the optional transpose, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe those buffers exactly.
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

/// Geometry of a 2-D convolution over a `[channels, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub(crate) fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub(crate) fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub(crate) fn valid(&self) -> bool {
        self.kernel > 0
            && self.stride > 0
            && self.in_h + 2 * self.pad >= self.kernel
            && self.in_w + 2 * self.pad >= self.kernel
    }
}

pub(crate) fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let cols = oh * ow;
    let mut col = vec![0.0; g.col_rows() * cols];
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = input[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

pub(crate) fn col2im_add(g: &ConvGeom, col: &[f64], out: &mut [f64]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let cols = oh * ow;
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        out[(c * g.in_h + iy as usize) * g.in_w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Coefficients of Rodrigues' formula `R = I + a K + b K²` and their
/// derivatives divided by the angle, `(da/dθ)/θ` and `(db/dθ)/θ`.
pub(crate) fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    let (a, b) = if theta < 1e-6 {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let s = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * s * s / t2)
    };
    let (da, db) = if theta < 1e-2 {
        let t4 = t2 * t2;
        (
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    };
    (a, b, da, db)
}

pub(crate) fn skew(w: &[f64]) -> [f64; 9] {
    [0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0]
}

pub(crate) fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = (0..3).map(|l| a[i * 3 + l] * b[l * 3 + j]).sum();
        }
    }
    out
}

/// Rotation matrix `exp([w]×)` by Rodrigues' formula.
pub fn exp_so3(w: &[f64; 3]) -> [f64; 9] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, _, _) = rodrigues_coeffs(theta);
    let k = skew(w);
    let k2 = mat3_mul(&k, &k);
    let mut r = [0.0; 9];
    for i in 0..9 {
        r[i] = a * k[i] + b * k2[i];
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;
    r
}
