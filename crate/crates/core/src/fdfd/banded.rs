//! Direct solvers for complex banded systems.

use num_complex::Complex64;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Square complex matrix with `lower` sub- and `upper` super-diagonals.
///
/// Stored by rows: entry (i, j) lives at `i * width + (j + lower - i)`
/// with `width = lower + upper + 1`.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<Complex64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        Self {
            n,
            lower,
            upper,
            data: vec![ZERO; n * (lower + upper + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> usize {
        self.lower
    }

    pub fn upper(&self) -> usize {
        self.upper
    }

    fn width(&self) -> usize {
        self.lower + self.upper + 1
    }

    fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.lower >= i && j <= i + self.upper && i < self.n && j < self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        if self.in_band(i, j) {
            self.data[i * self.width() + (j + self.lower - i)]
        } else {
            ZERO
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: Complex64) {
        assert!(self.in_band(i, j), "({i}, {j}) outside band");
        let w = self.width();
        self.data[i * w + (j + self.lower - i)] += v;
    }

    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let w = self.width();
        (0..self.n)
            .map(|i| {
                let j0 = i.saturating_sub(self.lower);
                let j1 = (i + self.upper + 1).min(self.n);
                let row = &self.data[i * w..(i + 1) * w];
                (j0..j1).map(|j| row[j + self.lower - i] * x[j]).sum()
            })
            .collect()
    }

    /// ‖b − A x‖ / ‖b‖.
    pub fn relative_residual(&self, x: &[Complex64], b: &[Complex64]) -> f64 {
        let ax = self.matvec(x);
        let num: f64 = ax.iter().zip(b).map(|(a, b)| (b - a).norm_sqr()).sum();
        let den: f64 = b.iter().map(|v| v.norm_sqr()).sum();
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    /// Solves `A x = b` by Gaussian elimination with partial pivoting.
    /// Returns `None` when a pivot column is exactly zero.
    pub fn solve_pivoted(&self, b: &[Complex64]) -> Option<Vec<Complex64>> {
        let (n, kl, ku) = (self.n, self.lower, self.upper);
        // row interchanges widen the upper band to kl + ku
        let uw = kl + ku;
        let width = kl + uw + 1;
        let mut a = vec![ZERO; n * width];
        let at = |i: usize, j: usize| i * width + (j + kl - i);
        for i in 0..n {
            let j0 = i.saturating_sub(kl);
            let j1 = (i + ku + 1).min(n);
            for j in j0..j1 {
                a[at(i, j)] = self.get(i, j);
            }
        }
        let mut x = b.to_vec();
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut piv = k;
            let mut best = a[at(k, k)].norm_sqr();
            for i in k + 1..=last_row {
                let v = a[at(i, k)].norm_sqr();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best == 0.0 {
                return None;
            }
            let last_col = (k + uw).min(n - 1);
            if piv != k {
                for j in k..=last_col {
                    a.swap(at(k, j), at(piv, j));
                }
                x.swap(k, piv);
            }
            let inv = a[at(k, k)].inv();
            for i in k + 1..=last_row {
                let f = a[at(i, k)] * inv;
                if f == ZERO {
                    continue;
                }
                a[at(i, k)] = ZERO;
                for j in k + 1..=last_col {
                    let u = a[at(k, j)];
                    a[at(i, j)] -= f * u;
                }
                let xk = x[k];
                x[i] -= f * xk;
            }
        }
        for k in (0..n).rev() {
            let last_col = (k + uw).min(n - 1);
            let mut s = x[k];
            for j in k + 1..=last_col {
                s -= a[at(k, j)] * x[j];
            }
            x[k] = s / a[at(k, k)];
        }
        Some(x)
    }

    /// Solves a complex-symmetric system (`A = Aᵀ`, not Hermitian) by
    /// LDLᵀ without pivoting. Returns `None` on a zero pivot; callers
    /// check the residual and fall back to [`BandMatrix::solve_pivoted`].
    pub fn solve_symmetric(&self, b: &[Complex64]) -> Option<Vec<Complex64>> {
        let n = self.n;
        let kb = self.lower.max(self.upper);
        // upper triangle by rows: (i, j) for i ≤ j ≤ i + kb at i*(kb+1) + (j - i)
        let w = kb + 1;
        let mut u = vec![ZERO; n * w];
        for i in 0..n {
            for j in i..(i + kb + 1).min(n) {
                u[i * w + (j - i)] = self.get(i, j);
            }
        }
        let mut scratch = vec![ZERO; w];
        for k in 0..n {
            let d = u[k * w];
            if d.norm_sqr() == 0.0 || !d.is_finite() {
                return None;
            }
            let inv = d.inv();
            let last = (k + kb).min(n - 1);
            let len = last - k;
            scratch[..len].copy_from_slice(&u[k * w + 1..k * w + 1 + len]);
            for a in 0..len {
                let i = k + 1 + a;
                let f = scratch[a] * inv;
                if f == ZERO {
                    continue;
                }
                let row = &mut u[i * w..i * w + (last - i + 1)];
                for (dst, s) in row.iter_mut().zip(&scratch[a..len]) {
                    *dst -= f * s;
                }
            }
        }
        // forward: L y = b with L[i][k] = U[k][i] / D[k]
        let mut y = b.to_vec();
        for k in 0..n {
            let inv = u[k * w].inv();
            let last = (k + kb).min(n - 1);
            let yk = y[k];
            for i in k + 1..=last {
                y[i] -= u[k * w + (i - k)] * inv * yk;
            }
        }
        // backward: D Lᵀ x = y
        for k in (0..n).rev() {
            let last = (k + kb).min(n - 1);
            let mut s = y[k];
            for j in k + 1..=last {
                s -= u[k * w + (j - k)] * y[j];
            }
            y[k] = s / u[k * w];
        }
        Some(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_band(n: usize, kb: usize, symmetric: bool, seed: u64) -> BandMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BandMatrix::zeros(n, kb, kb);
        for i in 0..n {
            for j in i.saturating_sub(kb)..(i + kb + 1).min(n) {
                if symmetric && j < i {
                    continue;
                }
                let v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let v = if i == j { v + 4.0 } else { v };
                m.add(i, j, v);
                if symmetric && j != i {
                    m.add(j, i, v);
                }
            }
        }
        m
    }

    /// Dense Gaussian elimination as an independent reference.
    fn dense_solve(m: &BandMatrix, b: &[Complex64]) -> Vec<Complex64> {
        let n = m.n();
        let mut a: Vec<Vec<Complex64>> =
            (0..n).map(|i| (0..n).map(|j| m.get(i, j)).collect()).collect();
        let mut x = b.to_vec();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i][k].norm().partial_cmp(&a[j][k].norm()).unwrap())
                .unwrap();
            a.swap(k, p);
            x.swap(k, p);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    let t = a[k][j];
                    a[i][j] -= f * t;
                }
                let t = x[k];
                x[i] -= f * t;
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..n {
                s -= a[k][j] * x[j];
            }
            x[k] = s / a[k][k];
        }
        x
    }

    #[test]
    fn pivoted_matches_dense() {
        let m = random_band(40, 5, false, 1);
        let b: Vec<_> = (0..40).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let x = m.solve_pivoted(&b).unwrap();
        let r = dense_solve(&m, &b);
        for (a, b) in x.iter().zip(&r) {
            assert!((a - b).norm() < 1e-10);
        }
        assert!(m.relative_residual(&x, &b) < 1e-12);
    }

    #[test]
    fn symmetric_matches_dense() {
        let m = random_band(60, 7, true, 2);
        let b: Vec<_> = (0..60).map(|i| Complex64::new(1.0, -(i as f64))).collect();
        let x = m.solve_symmetric(&b).unwrap();
        let r = dense_solve(&m, &b);
        for (a, b) in x.iter().zip(&r) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        let mut m = BandMatrix::zeros(2, 1, 1);
        m.add(0, 1, Complex64::new(1.0, 0.0));
        m.add(1, 0, Complex64::new(1.0, 0.0));
        let b = [Complex64::new(2.0, 0.0), Complex64::new(3.0, 0.0)];
        assert!(m.solve_symmetric(&b).is_none());
        let x = m.solve_pivoted(&b).unwrap();
        assert_eq!(x, vec![Complex64::new(3.0, 0.0), Complex64::new(2.0, 0.0)]);
    }
}
