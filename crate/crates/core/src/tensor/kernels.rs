//! Dense kernels: GEMM wrapper and im2col convolution over up to three spatial axes.

use crate::error::{Error, Result};
use crate::par;

/// `c = a·b + beta·c` for row-major `c` of shape (m, n); `a` and `b` are
/// described by explicit row/column strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // Parallelize over row blocks of the output; each block is an independent GEMM.
    let rows_per = if par::enabled() && m * n * k > 1 << 16 {
        m.div_ceil(4).max(1)
    } else {
        m
    };
    par::for_each_chunk_mut(c, rows_per * n, |blk, c_blk| {
        let r0 = blk * rows_per;
        let rows = c_blk.len() / n;
        // SAFETY: pointers and strides describe in-bounds views of the slices,
        // checked by the debug assertions in callers' shape validation.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(r0 * a_strides.0),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                beta,
                c_blk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Geometry of a convolution with `[depth, height, width]` spatial axes.
/// 2-D convolutions use depth 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 {
                return Err(Error::shape(op, "zero stride or kernel extent"));
            }
            let span = input[a] + 2 * pad[a];
            if span < kernel[a] {
                return Err(Error::shape(
                    op,
                    format!(
                        "axis {a}: padded input {span} smaller than kernel {}",
                        kernel[a]
                    ),
                ));
            }
            output[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeom {
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn k_len(&self) -> usize {
        self.cin * self.kvol()
    }

    pub fn n_out(&self) -> usize {
        self.output.iter().product()
    }

    fn n_in(&self) -> usize {
        self.input.iter().product()
    }

    /// Source coordinate along `axis` for output index `o` and kernel tap `k`.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let s = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        if s >= 0 && (s as usize) < self.input[axis] {
            Some(s as usize)
        } else {
            None
        }
    }

    fn tap(&self, r: usize) -> (usize, [usize; 3]) {
        let kvol = self.kvol();
        let ci = r / kvol;
        let kk = r % kvol;
        let kw = kk % self.kernel[2];
        let kh = (kk / self.kernel[2]) % self.kernel[1];
        let kd = kk / (self.kernel[2] * self.kernel[1]);
        (ci, [kd, kh, kw])
    }
}

fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let n = g.n_out();
    let n_in = g.n_in();
    let [_, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let mut col = vec![0.0; g.k_len() * n];
    par::for_each_chunk_mut(&mut col, n, |r, row| {
        let (ci, [kd, kh, kw]) = g.tap(r);
        let xc = &x[ci * n_in..(ci + 1) * n_in];
        for d in 0..od {
            let Some(sd) = g.src(0, d, kd) else { continue };
            for h in 0..oh {
                let Some(sh) = g.src(1, h, kh) else { continue };
                let base_in = (sd * ih + sh) * iw;
                let base_out = (d * oh + h) * ow;
                for w in 0..ow {
                    if let Some(sw) = g.src(2, w, kw) {
                        row[base_out + w] = xc[base_in + sw];
                    }
                }
            }
        }
    });
    col
}

fn col2im(g: &ConvGeom, col: &[f64]) -> Vec<f64> {
    let n = g.n_out();
    let n_in = g.n_in();
    let kvol = g.kvol();
    let [_, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let mut dx = vec![0.0; g.cin * n_in];
    par::for_each_chunk_mut(&mut dx, n_in, |ci, dxc| {
        for kk in 0..kvol {
            let (_, [kd, kh, kw]) = g.tap(kk);
            let row = &col[(ci * kvol + kk) * n..(ci * kvol + kk + 1) * n];
            for d in 0..od {
                let Some(sd) = g.src(0, d, kd) else { continue };
                for h in 0..oh {
                    let Some(sh) = g.src(1, h, kh) else { continue };
                    let base_in = (sd * ih + sh) * iw;
                    let base_out = (d * oh + h) * ow;
                    for w in 0..ow {
                        if let Some(sw) = g.src(2, w, kw) {
                            dxc[base_in + sw] += row[base_out + w];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Forward convolution: `x` is (cin, D, H, W), `w` is (cout, cin, kd, kh, kw),
/// `b` is (cout). Returns (cout, oD, oH, oW) flattened.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = g.n_out();
    let k = g.k_len();
    let col = im2col(g, x);
    let mut y = vec![0.0; g.cout * n];
    for (co, row) in y.chunks_mut(n).enumerate() {
        row.iter_mut().for_each(|v| *v = b[co]);
    }
    gemm(g.cout, k, n, w, (k, 1), &col, (n, 1), 1.0, &mut y);
    y
}

/// Gradients of a convolution with respect to input, weights and bias.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = g.n_out();
    let k = g.k_len();
    let col = im2col(g, x);
    let db: Vec<f64> = dy.chunks(n).map(|r| r.iter().sum()).collect();
    let mut dw = vec![0.0; g.cout * k];
    // dw = dy · colᵀ
    gemm(g.cout, n, k, dy, (n, 1), &col, (1, n), 0.0, &mut dw);
    let dx = need_dx.then(|| {
        let mut dcol = vec![0.0; k * n];
        // dcol = wᵀ · dy
        gemm(k, g.cout, n, w, (1, k), dy, (n, 1), 0.0, &mut dcol);
        col2im(g, &dcol)
    });
    (dx, dw, db)
}
