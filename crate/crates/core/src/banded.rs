//! Banded direct solvers for the structured-mesh FEM systems.

use crate::error::{Error, Result};

/// Square matrix with `bw` sub- and super-diagonals.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    bw: usize,
    /// Row-major band storage, `2 * bw + 1` entries per row, column `j` of row
    /// `i` at offset `j + bw - i`.
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, half_bandwidth: usize) -> Self {
        Self {
            n,
            bw: half_bandwidth,
            data: vec![0.0; n * (2 * half_bandwidth + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.bw
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.bw, "({i}, {j}) outside band {}", self.bw);
        i * (2 * self.bw + 1) + j + self.bw - i
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.bw);
                let hi = (i + self.bw + 1).min(self.n);
                (lo..hi).map(|j| self.data[self.idx(i, j)] * x[j]).sum()
            })
            .collect()
    }

    fn max_abs_diag(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i).abs()).fold(0.0, f64::max)
    }

    /// In-place `L L^T` factorization of a symmetric positive-definite matrix
    /// (lower triangle used).
    pub fn cholesky(mut self) -> Result<Cholesky> {
        let tol = 1e-13 * self.max_abs_diag();
        let bw = self.bw;
        for j in 0..self.n {
            let lo = j.saturating_sub(bw);
            let mut d = self.get(j, j);
            for k in lo..j {
                let l = self.get(j, k);
                d -= l * l;
            }
            if !(d > tol) {
                return Err(Error::Singular(format!(
                    "non-positive pivot {d:.3e} at row {j}; the system is not positive definite \
                     (missing Dirichlet constraints?)"
                )));
            }
            let d = d.sqrt();
            let k = self.idx(j, j);
            self.data[k] = d;
            for i in j + 1..(j + bw + 1).min(self.n) {
                let mut s = self.get(i, j);
                for k in i.saturating_sub(bw).max(lo)..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                let k = self.idx(i, j);
                self.data[k] = s / d;
            }
        }
        Ok(Cholesky { l: self })
    }

    /// In-place LU factorization without pivoting.
    pub fn lu(mut self) -> Result<Lu> {
        let tol = 1e-13 * self.max_abs_diag();
        let bw = self.bw;
        for k in 0..self.n {
            let p = self.get(k, k);
            if !(p.abs() > tol) {
                return Err(Error::Singular(format!("zero pivot {p:.3e} at row {k}")));
            }
            let hi = (k + bw + 1).min(self.n);
            for i in k + 1..hi {
                let f = self.get(i, k) / p;
                let ik = self.idx(i, k);
                self.data[ik] = f;
                if f == 0.0 {
                    continue;
                }
                for j in k + 1..hi {
                    let kj = self.get(k, j);
                    let ij = self.idx(i, j);
                    self.data[ij] -= f * kj;
                }
            }
        }
        Ok(Lu { lu: self })
    }
}

pub struct Cholesky {
    l: BandedMatrix,
}

impl Cholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.l.n, self.l.bw);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l.get(i, k) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.l.get(k, i) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        y
    }
}

pub struct Lu {
    lu: BandedMatrix,
}

impl Lu {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.lu.n, self.lu.bw);
        let mut y = b.to_vec();
        for i in 0..n {
            for k in i.saturating_sub(bw)..i {
                y[i] -= self.lu.get(i, k) * y[k];
            }
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.lu.get(i, k) * y[k];
            }
            y[i] = s / self.lu.get(i, i);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, p);
            b.swap(k, p);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    #[test]
    fn random_spd_matches_dense_solve() {
        let n = 50;
        let bw = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // A = M M^T + n I with banded M keeps A banded (bandwidth 2 * 3) and SPD
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in m.iter_mut().enumerate() {
            for j in i.saturating_sub(3)..=i {
                row[j] = rng.random_range(-1.0..1.0);
            }
        }
        let mut dense = vec![vec![0.0; n]; n];
        let mut band = BandedMatrix::zeros(n, bw);
        for i in 0..n {
            for j in 0..n {
                let mut v: f64 = (0..n).map(|k| m[i][k] * m[j][k]).sum();
                if i == j {
                    v += n as f64;
                }
                dense[i][j] = v;
                if i.abs_diff(j) <= bw {
                    band.add(i, j, v);
                } else {
                    assert!(v.abs() < 1e-15);
                }
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = dense_solve(dense, b.clone());
        let x = band.clone().cholesky().unwrap().solve(&b);
        let y = band.lu().unwrap().solve(&b);
        for i in 0..n {
            assert!((x[i] - want[i]).abs() < 1e-10);
            assert!((y[i] - want[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_system() {
        let mut a = BandedMatrix::zeros(4, 1);
        for i in 0..4 {
            a.add(i, i, 1.0);
        }
        let f = vec![1.0, -2.0, 3.5, 0.25];
        assert_eq!(a.cholesky().unwrap().solve(&f), f);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut a = BandedMatrix::zeros(2, 1);
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            a.add(i, j, 1.0);
        }
        assert!(matches!(a.clone().cholesky(), Err(Error::Singular(_))));
        assert!(matches!(a.lu(), Err(Error::Singular(_))));
    }
}
