//! Binomial anti-aliasing kernels.
//!
//! The 1-D weights are rows of Pascal's triangle divided by their sum, so the
//! exact rational form is kept next to the float form. The 2-D filter is the
//! outer product of the vector with itself.

use thiserror::Error;

pub const SUPPORTED_BLUR_SIZES: [usize; 4] = [2, 3, 5, 7];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unsupported blur kernel size {0}; expected one of 2, 3, 5, 7")]
pub struct UnsupportedKernelSize(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    numerators: Vec<u64>,
    denominator: u64,
    weights: Vec<f64>,
}

/// Returns the tabulated binomial smoothing kernel of size `m`.
pub fn binomial_kernel(m: usize) -> Result<BlurKernel, UnsupportedKernelSize> {
    if !SUPPORTED_BLUR_SIZES.contains(&m) {
        return Err(UnsupportedKernelSize(m));
    }
    // row m-1 of Pascal's triangle
    let mut row = vec![1u64];
    for _ in 1..m {
        let mut next = vec![1u64; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let denominator: u64 = row.iter().sum();
    let weights = row.iter().map(|&n| n as f64 / denominator as f64).collect();
    Ok(BlurKernel {
        size: m,
        numerators: row,
        denominator,
        weights,
    })
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integer numerators of the 1-D weights; each weight is `numerator / denominator`.
    pub fn numerators(&self) -> &[u64] {
        &self.numerators
    }

    pub fn denominator(&self) -> u64 {
        self.denominator
    }

    /// Tap offset of weight `t` relative to the output pixel.
    ///
    /// Odd kernels are centred. The 2-tap kernel covers `{0, +1}` so the
    /// subsampling grid keeps pixel 0 as its first sample.
    pub fn offset(&self, t: usize) -> isize {
        t as isize - ((self.size - 1) / 2) as isize
    }

    /// The `m x m` filter `w ⊗ w`, row-major.
    pub fn matrix(&self) -> Vec<f64> {
        let m = self.size;
        let mut h = Vec::with_capacity(m * m);
        for &a in &self.weights {
            for &b in &self.weights {
                h.push(a * b);
            }
        }
        h
    }

    /// Numerators of `w ⊗ w` over `denominator²`.
    pub fn matrix_numerators(&self) -> Vec<u64> {
        let mut h = Vec::with_capacity(self.size * self.size);
        for &a in &self.numerators {
            for &b in &self.numerators {
                h.push(a * b);
            }
        }
        h
    }
}

/// Outcome of checking a smoothing vector against the four kernel constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelReport {
    pub normalization: bool,
    /// `None` for even-length vectors, where the constraint is not applied.
    pub symmetry: Option<bool>,
    pub unimodal: bool,
    pub equal_contribution: bool,
}

impl KernelReport {
    pub fn passes(&self) -> bool {
        self.normalization
            && self.symmetry.unwrap_or(true)
            && self.unimodal
            && self.equal_contribution
    }
}

const CONSTRAINT_TOL: f64 = 1e-12;

/// Checks normalization, symmetry, unimodality and equal contribution.
///
/// Index `n` runs from `-(m-1)/2`; for even `m` the vector starts at `n = 0`
/// on the left tap, matching [`BlurKernel::offset`].
pub fn validate_kernel(w: &[f64]) -> KernelReport {
    let m = w.len();
    let center = (m.saturating_sub(1)) / 2;
    let sum: f64 = w.iter().sum();
    let normalization = (sum - 1.0).abs() <= CONSTRAINT_TOL;

    let symmetry =
        (m % 2 == 1).then(|| (0..m).all(|i| (w[i] - w[m - 1 - i]).abs() <= CONSTRAINT_TOL));

    // non-negative and non-increasing moving away from the centre on both sides
    let non_negative = w.iter().all(|&v| v >= 0.0);
    let right = w[center..]
        .windows(2)
        .all(|p| p[0] + CONSTRAINT_TOL >= p[1]);
    let left = w[..=center]
        .windows(2)
        .all(|p| p[1] + CONSTRAINT_TOL >= p[0]);
    let unimodal = non_negative && left && right;

    let (mut even, mut odd) = (0.0, 0.0);
    for (i, &v) in w.iter().enumerate() {
        let n = (i as isize - center as isize).unsigned_abs();
        if n % 2 == 0 {
            even += v;
        } else {
            odd += v;
        }
    }
    let equal_contribution = (even - odd).abs() <= CONSTRAINT_TOL;

    KernelReport {
        normalization,
        symmetry,
        unimodal,
        equal_contribution,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabulated_vectors_are_exact() {
        let expect: [(usize, &[u64], u64); 4] = [
            (2, &[1, 1], 2),
            (3, &[1, 2, 1], 4),
            (5, &[1, 4, 6, 4, 1], 16),
            (7, &[1, 6, 15, 20, 15, 6, 1], 64),
        ];
        for (m, nums, den) in expect {
            let k = binomial_kernel(m).unwrap();
            assert_eq!(k.numerators(), nums);
            assert_eq!(k.denominator(), den);
            assert_eq!(k.numerators().iter().sum::<u64>(), k.denominator());
        }
    }

    #[test]
    fn outer_products() {
        let k3 = binomial_kernel(3).unwrap();
        assert_eq!(k3.matrix_numerators(), vec![1, 2, 1, 2, 4, 2, 1, 2, 1]);
        assert_eq!(k3.denominator().pow(2), 16);
        let k2 = binomial_kernel(2).unwrap();
        assert_eq!(k2.matrix(), vec![0.25; 4]);
    }

    #[test]
    fn unsupported_sizes_rejected() {
        for m in [0, 1, 4, 6, 8, 9] {
            assert_eq!(binomial_kernel(m), Err(UnsupportedKernelSize(m)));
        }
    }

    #[test]
    fn constraint_reports() {
        let ok = validate_kernel(&[0.25, 0.5, 0.25]);
        assert!(ok.passes());

        let skew = validate_kernel(&[0.5, 0.25, 0.25]);
        assert_eq!(skew.symmetry, Some(false));
        assert!(skew.normalization);
        assert!(!skew.passes());

        let short = validate_kernel(&[0.3, 0.3, 0.3]);
        assert!(!short.normalization);
        assert_eq!(short.symmetry, Some(true));
    }

    #[test]
    fn binomial_kernels_satisfy_constraints() {
        for m in [3, 5, 7] {
            let r = validate_kernel(binomial_kernel(m).unwrap().weights());
            assert!(r.passes(), "m={m}: {r:?}");
        }
        let r2 = validate_kernel(binomial_kernel(2).unwrap().weights());
        assert!(r2.normalization && r2.unimodal && r2.equal_contribution);
        assert_eq!(r2.symmetry, None);
    }
}
