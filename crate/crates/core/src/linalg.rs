//! Closed-form 2x2 real matrix helpers.

use num_complex::Complex64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2 {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
}

impl Mat2 {
    pub const fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Self { a11, a12, a21, a22 }
    }

    pub const fn diag(x: f64, y: f64) -> Self {
        Self::new(x, 0.0, 0.0, y)
    }

    pub const fn zero() -> Self {
        Self::diag(0.0, 0.0)
    }

    pub fn trace(&self) -> f64 {
        self.a11 + self.a22
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.a11, self.a21, self.a12, self.a22)
    }

    /// `(M + M^T) / 2`.
    pub fn sym(&self) -> Self {
        let off = 0.5 * (self.a12 + self.a21);
        Self::new(self.a11, off, off, self.a22)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.a11 * s, self.a12 * s, self.a21 * s, self.a22 * s)
    }

    pub fn sub(&self, o: &Mat2) -> Self {
        Self::new(
            self.a11 - o.a11,
            self.a12 - o.a12,
            self.a21 - o.a21,
            self.a22 - o.a22,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.a11.is_finite() && self.a12.is_finite() && self.a21.is_finite() && self.a22.is_finite()
    }

    /// Row-sum infinity norm.
    pub fn norm_inf(&self) -> f64 {
        (self.a11.abs() + self.a12.abs()).max(self.a21.abs() + self.a22.abs())
    }

    /// Eigenvalues from the characteristic polynomial `l^2 - tr l + det`,
    /// ordered by descending real part.
    pub fn eigenvalues(&self) -> [Complex64; 2] {
        let tr = self.trace();
        let half = 0.5 * tr;
        // (a11 - a22)^2/4 + a12 a21 avoids cancellation in tr^2/4 - det.
        let disc = 0.25 * (self.a11 - self.a22).powi(2) + self.a12 * self.a21;
        if disc >= 0.0 {
            let r = disc.sqrt();
            // larger-magnitude root first, the other via det / root
            let big = if half >= 0.0 { half + r } else { half - r };
            let small = if big != 0.0 { self.det() / big } else { half - r };
            let (hi, lo) = if big >= small { (big, small) } else { (small, big) };
            [Complex64::new(hi, 0.0), Complex64::new(lo, 0.0)]
        } else {
            let im = (-disc).sqrt();
            [Complex64::new(half, im), Complex64::new(half, -im)]
        }
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn sym_eigenvalues(&self) -> (f64, f64) {
        let s = self.sym();
        let half = 0.5 * s.trace();
        let r = (0.25 * (s.a11 - s.a22).powi(2) + s.a12 * s.a12).sqrt();
        (half - r, half + r)
    }

    /// Largest real part of the spectrum.
    pub fn spectral_abscissa(&self) -> f64 {
        self.eigenvalues()[0].re
    }
}
