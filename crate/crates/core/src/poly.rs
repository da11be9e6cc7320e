//! Dense real polynomials in the monomial basis and their roots via
//! companion-matrix eigenvalues.

use nalgebra::DMatrix;

use crate::C64;

/// Coefficients in ascending degree: `coeffs[i]` multiplies `x^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    coeffs: Vec<f64>,
}

impl Poly {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        Self { coeffs: vec![c] }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Degree after dropping trailing zero coefficients.
    pub fn degree(&self) -> usize {
        self.coeffs.iter().rposition(|&c| c != 0.0).unwrap_or(0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    /// Multiply in place by `(a - x)`.
    pub fn mul_linear(&mut self, a: f64) {
        let mut out = vec![0.0; self.coeffs.len() + 1];
        for (i, &c) in self.coeffs.iter().enumerate() {
            out[i] += a * c;
            out[i + 1] -= c;
        }
        self.coeffs = out;
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Poly) -> Poly {
        let len = self.coeffs.len().max(other.coeffs.len());
        let coeffs = (0..len)
            .map(|i| {
                self.coeffs.get(i).copied().unwrap_or(0.0) + s * other.coeffs.get(i).copied().unwrap_or(0.0)
            })
            .collect();
        Poly { coeffs }
    }

    /// All complex roots as eigenvalues of the companion matrix.
    ///
    /// Leading coefficients that are negligible relative to the largest one
    /// are treated as zero, so the returned vector may be shorter than the
    /// nominal degree (roots at infinity are dropped).
    pub fn roots(&self) -> Vec<C64> {
        let scale = self.coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if scale == 0.0 {
            return Vec::new();
        }
        let mut deg = self.degree();
        while deg > 0 && self.coeffs[deg].abs() <= 1e-14 * scale {
            deg -= 1;
        }
        if deg == 0 {
            return Vec::new();
        }
        let lead = self.coeffs[deg];
        if deg == 1 {
            return vec![C64::new(-self.coeffs[0] / lead, 0.0)];
        }
        let mut companion = DMatrix::<f64>::zeros(deg, deg);
        for i in 1..deg {
            companion[(i, i - 1)] = 1.0;
        }
        for i in 0..deg {
            companion[(i, deg - 1)] = -self.coeffs[i] / lead;
        }
        companion.complex_eigenvalues().iter().copied().collect()
    }
}
