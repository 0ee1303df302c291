//! Dense row-major kernels and their adjoints.
//!
//! Every kernel processes rows independently with a fixed summation order, so
//! a row computed alone produces the same bits as the same row inside a
//! larger batch. The decoder relies on this.

use super::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Strided matrix with `rows x cols` logical shape.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> Mat<'a, T> {
    fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `C = A B + beta C` with `C` row-major `a.rows x b.cols`.
fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows);
    assert!(a.fits() && b.fits());
    assert!(c.len() >= a.rows * b.cols);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// `y[r] = x[r] W (+ b)`, overwriting `y`. `W` is `inp x out`.
pub fn matmul<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    inp: usize,
    out: usize,
    y: &mut [T],
) {
    let rows = x.len() / inp;
    debug_assert_eq!(rows, y.len() / out);
    let beta = match bias {
        Some(b) => {
            for yr in y.chunks_exact_mut(out) {
                yr.copy_from_slice(b);
            }
            T::one()
        }
        None => T::zero(),
    };
    gemm(
        Mat::row_major(x, rows, inp),
        Mat::row_major(w, inp, out),
        beta,
        y,
    );
}

/// Adjoint of [`matmul`]. Accumulates into `dw`, `db` and (if given) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    inp: usize,
    out: usize,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    let rows = x.len() / inp;
    let dym = Mat::row_major(dy, rows, out);
    gemm(Mat::row_major(x, rows, inp).t(), dym, T::one(), dw);
    if let Some(db) = db {
        for dyr in dy.chunks_exact(out) {
            for (g, &d) in db.iter_mut().zip(dyr) {
                *g += d;
            }
        }
    }
    if let Some(dx) = dx {
        gemm(dym, Mat::row_major(w, inp, out).t(), T::one(), dx);
    }
}

/// Inner product with eight interleaved partial sums.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// Normalized inputs and reciprocal standard deviations kept for the
/// backward pass.
#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &[T],
    g: &[T],
    b: &[T],
    d: usize,
    y: &mut [T],
    mut cache: Option<&mut LnCache<T>>,
) {
    let n = T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    if let Some(c) = cache.as_deref_mut() {
        c.xhat.resize(x.len(), T::zero());
        c.rstd.resize(x.len() / d, T::zero());
    }
    for (r, (xr, yr)) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).enumerate() {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (k, (yo, &xi)) in yr.iter_mut().zip(xr).enumerate() {
            let xh = (xi - mean) * rstd;
            *yo = g[k] * xh + b[k];
            if let Some(c) = cache.as_deref_mut() {
                c.xhat[r * d + k] = xh;
            }
        }
        if let Some(c) = cache.as_deref_mut() {
            c.rstd[r] = rstd;
        }
    }
}

/// Adjoint of [`layer_norm`]; accumulates into `dx`, `dg`, `db`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    g: &[T],
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let n = T::from_f64(d as f64);
    let mut dxh = vec![T::zero(); d];
    for (r, (dyr, dxr)) in dy.chunks_exact(d).zip(dx.chunks_exact_mut(d)).enumerate() {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for k in 0..d {
            dg[k] += dyr[k] * xh[k];
            db[k] += dyr[k];
            dxh[k] = dyr[k] * g[k];
            s1 += dxh[k];
            s2 += dxh[k] * xh[k];
        }
        let (m1, m2) = (s1 / n, s2 / n);
        let rstd = cache.rstd[r];
        for k in 0..d {
            dxr[k] += rstd * (dxh[k] - m1 - xh[k] * m2);
        }
    }
}

const GELU_A: f64 = 0.044_715;

fn gelu_c<T: Scalar>() -> T {
    T::from_f64((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh approximation of GELU, written as `x * sigmoid(2 c (x + a x^3))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let mut out = [T::zero()];
    gelu_slice(&[x], &mut out);
    out[0]
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let mut out = [T::zero()];
    gelu_grad_slice(&[x], &mut out);
    out[0]
}

fn gelu_sigmoid<T: Scalar>(x: &[T], s: &mut [T]) {
    let c2 = T::from_f64(-2.0) * gelu_c::<T>();
    let a = T::from_f64(GELU_A);
    for (o, &v) in s.iter_mut().zip(x) {
        *o = c2 * (v + a * v * v * v);
    }
    T::exp_in_place(s);
    for o in s.iter_mut() {
        *o = T::one() / (T::one() + *o);
    }
}

pub fn gelu_slice<T: Scalar>(x: &[T], y: &mut [T]) {
    gelu_sigmoid(x, y);
    for (o, &v) in y.iter_mut().zip(x) {
        *o *= v;
    }
}

pub fn gelu_grad_slice<T: Scalar>(x: &[T], y: &mut [T]) {
    gelu_sigmoid(x, y);
    let c = gelu_c::<T>();
    let a3 = T::from_f64(3.0 * GELU_A);
    let two = T::from_f64(2.0);
    for (o, &v) in y.iter_mut().zip(x) {
        let s = *o;
        *o = s + v * two * s * (T::one() - s) * c * (T::one() + a3 * v * v);
    }
}

/// Geometry of a fused `[q | k | v]` buffer with one row per position.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub d: usize,
    pub heads: usize,
}

impl Heads {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn stride(&self) -> usize {
        3 * self.d
    }
}

/// Key rows attended by one query: the rows `prefix.0..prefix.1`, then
/// `count` rows starting at `start` spaced `stride` apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Keys {
    pub prefix: (usize, usize),
    pub start: usize,
    pub stride: usize,
    pub count: usize,
}

impl Keys {
    pub fn len(&self) -> usize {
        self.prefix.1 - self.prefix.0 + self.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Calls `f(i, row)` for the `i`-th key row in order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let mut i = 0;
        for j in self.prefix.0..self.prefix.1 {
            f(i, j);
            i += 1;
        }
        for t in 0..self.count {
            f(i, self.start + t * self.stride);
            i += 1;
        }
    }
}

/// Softmax attention for the query in row `row` of `qkv`, writing the
/// concatenated head outputs to `out` and appending the attention weights
/// (head-major) to `probs` if given.
pub fn attend_row<T: Scalar>(
    qkv: &[T],
    geo: Heads,
    row: usize,
    keys: &Keys,
    out: &mut [T],
    mut probs: Option<&mut Vec<T>>,
) {
    let (d, hd, st) = (geo.d, geo.head_dim(), geo.stride());
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let n = keys.len();
    let mut w = vec![T::zero(); n];
    for h in 0..geo.heads {
        let q = &qkv[row * st + h * hd..row * st + (h + 1) * hd];
        let mut m = T::neg_infinity();
        keys.for_each(|idx, j| {
            let k = &qkv[j * st + d + h * hd..j * st + d + (h + 1) * hd];
            let sc = dot(q, k) * scale;
            w[idx] = sc;
            m = m.max(sc);
        });
        for v in w.iter_mut() {
            *v -= m;
        }
        T::exp_in_place(&mut w);
        let mut z = T::zero();
        for &v in &w {
            z += v;
        }
        let o = &mut out[h * hd..(h + 1) * hd];
        o.fill(T::zero());
        keys.for_each(|idx, j| {
            let p = w[idx] / z;
            w[idx] = p;
            let v = &qkv[j * st + 2 * d + h * hd..j * st + 2 * d + (h + 1) * hd];
            for (oo, &vv) in o.iter_mut().zip(v) {
                *oo += p * vv;
            }
        });
        if let Some(pr) = probs.as_deref_mut() {
            pr.extend_from_slice(&w);
        }
    }
}

/// Adjoint of [`attend_row`]; accumulates into `dqkv`.
pub fn attend_row_backward<T: Scalar>(
    qkv: &[T],
    geo: Heads,
    row: usize,
    keys: &Keys,
    probs: &[T],
    dout: &[T],
    dqkv: &mut [T],
) {
    let (d, hd, st) = (geo.d, geo.head_dim(), geo.stride());
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let n = keys.len();
    let mut ds = vec![T::zero(); n];
    for h in 0..geo.heads {
        let p = &probs[h * n..(h + 1) * n];
        let go = &dout[h * hd..(h + 1) * hd];
        let mut acc = T::zero();
        keys.for_each(|idx, j| {
            let vo = j * st + 2 * d + h * hd;
            let da = dot(go, &qkv[vo..vo + hd]);
            for (g, &x) in dqkv[vo..vo + hd].iter_mut().zip(go) {
                *g += p[idx] * x;
            }
            ds[idx] = da;
            acc += p[idx] * da;
        });
        let qo = row * st + h * hd;
        let mut dq = vec![T::zero(); hd];
        let q = &qkv[qo..qo + hd];
        keys.for_each(|idx, j| {
            let g = p[idx] * (ds[idx] - acc) * scale;
            let ko = j * st + d + h * hd;
            for ((a, &kv), (dk, &qv)) in dq
                .iter_mut()
                .zip(&qkv[ko..ko + hd])
                .zip(dqkv[ko..ko + hd].iter_mut().zip(q))
            {
                *a += g * kv;
                *dk += g * qv;
            }
        });
        for (a, &b) in dqkv[qo..qo + hd].iter_mut().zip(&dq) {
            *a += b;
        }
    }
}

/// Log-softmax of one row of logits.
pub fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut e: Vec<T> = z.iter().map(|&v| v - m).collect();
    T::exp_in_place(&mut e);
    let lse = e.iter().copied().sum::<T>().ln() + m;
    z.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut y = [0.0; 6];
        matmul(&x, &w, Some(&[0.0, 1.0, 0.0]), 2, 3, &mut y);
        assert_eq!(y, [5.0, 3.0, 0.0, 11.0, 5.0, -1.0]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = [1.0f64, 2.0, 3.0, 6.0];
        let mut y = [0.0; 4];
        layer_norm(&x, &[1.0; 4], &[0.0; 4], 4, &mut y, None);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "{x}");
        }
        assert!((gelu(1.0f64) - 0.841_192).abs() < 1e-5);
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1000.0f64, 1001.0, 999.0]);
        let total: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
