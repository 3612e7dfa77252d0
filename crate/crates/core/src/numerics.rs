//! Small dense complex/real linear algebra used by every layer.
//!
//! Storage is row-major with an explicit `(rows, cols)` record. Nothing
//! broadcasts: every shape coercion in the trace and gradient code is
//! spelled out at the call site.

pub use num_complex::Complex64 as Complex;

use crate::error::{Error, Result};

pub type ComplexVector = Vec<Complex>;

pub const ZERO: Complex = Complex::new(0.0, 0.0);
pub const I: Complex = Complex::new(0.0, 1.0);

#[inline]
pub fn cmul(a: Complex, b: Complex) -> Complex {
    Complex::new(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)
}

/// Row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "ComplexMatrix::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Real identity embedded in the complex plane (`rows x cols`, ones on the diagonal).
    pub fn identity(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m[(i, i)] = Complex::new(1.0, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[Complex] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Complex] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [Complex] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(ZERO);
    }
}

impl std::ops::Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex {
        &mut self.data[i * self.cols + j]
    }
}

/// Row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "Matrix::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(0.0);
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}

/// `M x` for a complex `M` and a real `x`.
pub fn cmatvec(m: &ComplexMatrix, x: &[f64]) -> Result<ComplexVector> {
    check_len("cmatvec", m.cols, x.len())?;
    let mut out = vec![ZERO; m.rows];
    cmatvec_into(m, x, &mut out);
    Ok(out)
}

/// `Re[C h]` for a complex `C` and complex `h`.
pub fn re_cmatvec(c: &ComplexMatrix, h: &[Complex]) -> Result<Vec<f64>> {
    check_len("re_cmatvec", c.cols, h.len())?;
    let mut out = vec![0.0; c.rows];
    re_cmatvec_into(c, h, &mut out);
    Ok(out)
}

// Unchecked kernels for the hot loops; callers guarantee shapes.

#[inline]
pub(crate) fn cmatvec_into(m: &ComplexMatrix, x: &[f64], out: &mut [Complex]) {
    debug_assert_eq!(m.cols, x.len());
    debug_assert_eq!(m.rows, out.len());
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(m.cols)) {
        let (mut re, mut im) = (0.0, 0.0);
        for (b, &xj) in row.iter().zip(x) {
            re += b.re * xj;
            im += b.im * xj;
        }
        *o = Complex::new(re, im);
    }
}

#[inline]
pub(crate) fn re_cmatvec_into(c: &ComplexMatrix, h: &[Complex], out: &mut [f64]) {
    debug_assert_eq!(c.cols, h.len());
    debug_assert_eq!(c.rows, out.len());
    for (o, row) in out.iter_mut().zip(c.data.chunks_exact(c.cols)) {
        let mut acc = 0.0;
        for (cij, hj) in row.iter().zip(h) {
            acc += cij.re * hj.re - cij.im * hj.im;
        }
        *o = acc;
    }
}

/// `out = M x` (real).
#[inline]
pub(crate) fn matvec_into(m: &Matrix, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, x.len());
    debug_assert_eq!(m.rows, out.len());
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(m.cols)) {
        *o = dot(row, x);
    }
}

/// `out += M^T g` (real).
#[inline]
pub(crate) fn matvec_t_acc(m: &Matrix, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.rows, g.len());
    debug_assert_eq!(m.cols, out.len());
    for (&gi, row) in g.iter().zip(m.data.chunks_exact(m.cols)) {
        if gi == 0.0 {
            continue;
        }
        for (o, &mij) in out.iter_mut().zip(row) {
            *o += gi * mij;
        }
    }
}

/// `acc += g x^T` (real outer product).
#[inline]
pub(crate) fn outer_acc(acc: &mut Matrix, g: &[f64], x: &[f64]) {
    debug_assert_eq!(acc.rows, g.len());
    debug_assert_eq!(acc.cols, x.len());
    let cols = acc.cols;
    for (&gi, row) in g.iter().zip(acc.data.chunks_exact_mut(cols)) {
        if gi == 0.0 {
            continue;
        }
        for (a, &xj) in row.iter_mut().zip(x) {
            *a += gi * xj;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex {
        Complex::new(re, im)
    }

    #[test]
    fn cmul_examples() {
        let x = c(-2.5, 7.25);
        assert_eq!(cmul(c(1.0, 0.0), x), x);
        assert_eq!(cmul(I, I), c(-1.0, 0.0));
        // (1/2 + i/2)(1/2 - i/2) = 1/4 + 1/4
        assert_eq!(cmul(c(0.5, 0.5), c(0.5, -0.5)), c(0.5, 0.0));
    }

    #[test]
    fn cmatvec_examples() {
        let id = ComplexMatrix::identity(2, 2);
        assert_eq!(cmatvec(&id, &[3.0, 4.0]).unwrap(), vec![c(3.0, 0.0), c(4.0, 0.0)]);

        let zero = ComplexMatrix::zeros(3, 2);
        assert_eq!(cmatvec(&zero, &[1.5, -2.0]).unwrap(), vec![ZERO; 3]);

        let m = ComplexMatrix::from_vec(2, 2, vec![c(1.0, 1.0), ZERO, ZERO, c(2.0, 0.0)]).unwrap();
        assert_eq!(cmatvec(&m, &[1.0, 1.0]).unwrap(), vec![c(1.0, 1.0), c(2.0, 0.0)]);
    }

    #[test]
    fn cmatvec_rejects_bad_shape() {
        let m = ComplexMatrix::zeros(2, 3);
        assert!(matches!(cmatvec(&m, &[1.0, 2.0]), Err(Error::Dimension { .. })));
        assert!(matches!(re_cmatvec(&m, &[ZERO; 2]), Err(Error::Dimension { .. })));
        assert!(ComplexMatrix::from_vec(2, 2, vec![ZERO; 3]).is_err());
    }

    #[test]
    fn re_cmatvec_examples() {
        let id = ComplexMatrix::identity(1, 1);
        assert_eq!(re_cmatvec(&id, &[c(1.0, 2.0)]).unwrap(), vec![1.0]);

        let m = ComplexMatrix::from_vec(1, 1, vec![I]).unwrap();
        assert_eq!(re_cmatvec(&m, &[c(1.0, 0.0)]).unwrap(), vec![0.0]);

        // (1+i)^2 = 2i
        let m = ComplexMatrix::from_vec(1, 1, vec![c(1.0, 1.0)]).unwrap();
        assert_eq!(re_cmatvec(&m, &[c(1.0, 1.0)]).unwrap(), vec![0.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
    }

    fn finite() -> impl Strategy<Value = f64> {
        -1e3..1e3f64
    }

    proptest! {
        #[test]
        fn cmul_commutes_and_conj_is_real(a in finite(), b in finite(), x in finite(), y in finite()) {
            let p = c(a, b);
            let q = c(x, y);
            prop_assert_eq!(cmul(p, q), cmul(q, p));
            prop_assert_eq!(cmul(p, p.conj()).im, 0.0);
        }

        #[test]
        fn re_cmatvec_matches_full_product(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(-2.0..2.0f64, 4 * 36),
        ) {
            let cm: Vec<Complex> = (0..rows * cols).map(|k| c(seed[2 * k], seed[2 * k + 1])).collect();
            let h: Vec<Complex> = (0..cols).map(|k| c(seed[100 + 2 * k], seed[101 + 2 * k])).collect();
            let m = ComplexMatrix::from_vec(rows, cols, cm).unwrap();
            let fast = re_cmatvec(&m, &h).unwrap();
            for i in 0..rows {
                let full: Complex = (0..cols).map(|j| m[(i, j)] * h[j]).sum();
                prop_assert!((fast[i] - full.re).abs() <= 1e-12);
            }
        }
    }
}
