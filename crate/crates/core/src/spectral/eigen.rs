//! Dense symmetric eigensolver: Householder tridiagonalization followed by
//! the implicit-shift QL iteration (the EISPACK `tred2`/`tql2` pair).
//!
//! Transformations are accumulated into a block matrix whose `i`-th row
//! block corresponds to the `i`-th tridiagonal coordinate. Seeding it with
//! `Q^T` yields eigenvectors as rows; seeding it with `Q^T F` for a few
//! vectors `F` yields only their eigen-coordinates, which avoids the
//! `O(n^3)` cost of forming the basis when just projections are needed.

use crate::error::{Error, Result};

/// Eigenvalues in ascending order with eigenvectors as rows.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub n: usize,
    pub values: Vec<f64>,
    /// Row `i` (length `n`) is the unit eigenvector of `values[i]`.
    pub vectors: Vec<f64>,
}

impl SymmetricEigen {
    /// Full decomposition of the symmetric row-major `n x n` matrix `a`.
    pub fn new(a: &[f64], n: usize) -> Result<Self> {
        let mut work = a.to_vec();
        let tri = tridiagonalize(&mut work, n)?;
        let mut basis = identity(n);
        tri.apply_qt(&mut basis, n);
        let (values, vectors) = tri.diagonalize(basis, n)?;
        Ok(Self { n, values, vectors })
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.n..(i + 1) * self.n]
    }
}

/// Eigenvalues of `a` (ascending) and the coordinates `u_i . f_j` of each
/// column vector `f_j` of `fs` (given as `k` separate vectors).
///
/// Returns `(values, coords)` with `coords[i * k + j] = u_i . f_j`.
pub fn eigen_project(a: &[f64], n: usize, fs: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = fs.len();
    for f in fs {
        if f.len() != n {
            return Err(Error::usage("projected vector has the wrong length"));
        }
    }
    let mut work = a.to_vec();
    let tri = tridiagonalize(&mut work, n)?;
    let mut block = vec![0.0; n * k];
    for (j, f) in fs.iter().enumerate() {
        for i in 0..n {
            block[i * k + j] = f[i];
        }
    }
    tri.apply_qt(&mut block, k);
    tri.diagonalize(block, k)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// `T = Q^T A Q` with `Q = H_0 H_1 ... H_{n-3}`.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    pub n: usize,
    pub diag: Vec<f64>,
    /// `offdiag[i] = T[i][i+1]`; the last entry is 0.
    pub offdiag: Vec<f64>,
    /// Reflector `k` acts on coordinates `k+1..n` as `I - beta v v^T`.
    reflectors: Vec<(f64, Vec<f64>)>,
}

/// Reduces the symmetric matrix in place (the contents are destroyed).
pub fn tridiagonalize(a: &mut [f64], n: usize) -> Result<Tridiagonal> {
    if a.len() != n * n {
        return Err(Error::usage("matrix storage does not match its dimension"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let mut diag = vec![0.0; n];
    let mut offdiag = vec![0.0; n];
    let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
    let mut p = vec![0.0; n];

    for k in 0..n.saturating_sub(2) {
        diag[k] = a[k * n + k];
        let m = n - k - 1;
        let lo = k + 1;
        let x: Vec<f64> = a[k * n + lo..k * n + n].to_vec();
        let scale = x.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        let tail: f64 = x[1..].iter().map(|v| (v / scale.max(f64::MIN_POSITIVE)).powi(2)).sum();
        if scale == 0.0 || tail == 0.0 {
            offdiag[k] = x[0];
            reflectors.push((0.0, Vec::new()));
            continue;
        }
        let norm = scale * (tail + (x[0] / scale).powi(2)).sqrt();
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|t| t * t).sum();
        let beta = 2.0 / vv;
        offdiag[k] = alpha;

        // p = beta B v on the trailing block
        for i in 0..m {
            let row = &a[(lo + i) * n + lo..(lo + i) * n + n];
            let mut s = 0.0;
            for (r, vj) in row.iter().zip(&v) {
                s += r * vj;
            }
            p[i] = beta * s;
        }
        let pv: f64 = p[..m].iter().zip(&v).map(|(a, b)| a * b).sum();
        let kcoef = 0.5 * beta * pv;
        for i in 0..m {
            p[i] -= kcoef * v[i];
        }
        // B -= v w^T + w v^T
        let w = &p[..m];
        for i in 0..m {
            let (vi, wi) = (v[i], w[i]);
            let row = &mut a[(lo + i) * n + lo..(lo + i) * n + n];
            for ((r, vj), wj) in row.iter_mut().zip(&v).zip(w) {
                *r -= vi * wj + wi * vj;
            }
        }
        reflectors.push((beta, v));
    }
    if n >= 2 {
        diag[n - 2] = a[(n - 2) * n + n - 2];
        offdiag[n - 2] = a[(n - 2) * n + n - 1];
    }
    if n >= 1 {
        diag[n - 1] = a[(n - 1) * n + n - 1];
    }
    Ok(Tridiagonal {
        n,
        diag,
        offdiag,
        reflectors,
    })
}

impl Tridiagonal {
    /// Left-multiplies the `n x width` row-major block by `Q^T`.
    pub fn apply_qt(&self, block: &mut [f64], width: usize) {
        let n = self.n;
        let mut s = vec![0.0; width];
        for (k, (beta, v)) in self.reflectors.iter().enumerate() {
            if *beta == 0.0 {
                continue;
            }
            let lo = k + 1;
            s.iter_mut().for_each(|x| *x = 0.0);
            for (i, vi) in v.iter().enumerate() {
                let row = &block[(lo + i) * width..(lo + i + 1) * width];
                for (sj, r) in s.iter_mut().zip(row) {
                    *sj += vi * r;
                }
            }
            for (i, vi) in v.iter().enumerate() {
                let f = beta * vi;
                let row = &mut block[(lo + i) * width..(lo + i + 1) * width];
                for (r, sj) in row.iter_mut().zip(&s) {
                    *r -= f * sj;
                }
            }
            debug_assert!(lo + v.len() == n);
        }
    }

    /// Runs the QL iteration, rotating the row blocks of `block` alongside,
    /// and returns eigenvalues sorted ascending with the permuted block.
    pub fn diagonalize(&self, mut block: Vec<f64>, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let mut d = self.diag.clone();
        let mut e = self.offdiag.clone();
        ql_implicit(&mut d, &mut e, &mut block, width)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
        let values = order.iter().map(|&i| d[i]).collect();
        let mut sorted = Vec::with_capacity(block.len());
        for &i in &order {
            sorted.extend_from_slice(&block[i * width..(i + 1) * width]);
        }
        Ok((values, sorted))
    }
}

/// Implicit-shift QL on the symmetric tridiagonal `(d, e)` where `e[i]`
/// couples `i` and `i+1` and `e[n-1] = 0`. Each Givens rotation of
/// coordinates `(i, i+1)` is applied to row blocks `i` and `i+1` of
/// `block`.
fn ql_implicit(d: &mut [f64], e: &mut [f64], block: &mut [f64], width: usize) -> Result<()> {
    let n = d.len();
    if n == 0 {
        return Ok(());
    }
    e[n - 1] = 0.0;
    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 64 {
                    return Err(Error::Numerical(format!(
                        "QL iteration did not converge for eigenvalue {l} of {n}"
                    )));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (head, tail) = block.split_at_mut((i + 1) * width);
                    let zi = &mut head[i * width..];
                    let zi1 = &mut tail[..width];
                    for (a, b) in zi.iter_mut().zip(zi1.iter_mut()) {
                        let h = *b;
                        *b = s * *a + c * h;
                        *a = c * *a - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Solves the SPD system `a x = b` by Cholesky factorization.
pub fn cholesky_solve(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::usage("dimension mismatch in dense solve"));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "matrix is not positive definite (pivot {s:e} at {i})"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_symmetric(n: usize, seed: u64) -> Vec<f64> {
        use crate::rng::{Domain, StreamRng};
        let mut r = StreamRng::new(seed, Domain::Normal, [n as u64, 0]);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = 2.0 * r.uniform() - 1.0;
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        a
    }

    fn check_decomposition(a: &[f64], n: usize, eig: &SymmetricEigen, tol: f64) {
        // A u_i = lambda_i u_i and orthonormality
        for i in 0..n {
            let u = eig.vector(i);
            for r in 0..n {
                let au: f64 = (0..n).map(|c| a[r * n + c] * u[c]).sum();
                assert!((au - eig.values[i] * u[r]).abs() < tol, "residual at {i},{r}");
            }
            for j in 0..n {
                let dot: f64 = u.iter().zip(eig.vector(j)).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < tol, "orthonormality {i},{j}: {dot}");
            }
        }
        assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn two_by_two() {
        let a = [5.0, -5.0, -5.0, 5.0];
        let eig = SymmetricEigen::new(&a, 2).unwrap();
        assert!(eig.values[0].abs() < 1e-14);
        assert!((eig.values[1] - 10.0).abs() < 1e-13);
        check_decomposition(&a, 2, &eig, 1e-13);
    }

    #[test]
    fn one_by_one_and_diagonal() {
        let eig = SymmetricEigen::new(&[3.5], 1).unwrap();
        assert_eq!(eig.values, vec![3.5]);
        assert_eq!(eig.vectors, vec![1.0]);
        let a = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let eig = SymmetricEigen::new(&a, 3).unwrap();
        assert_eq!(eig.values, vec![1.0, 2.0, 3.0]);
        check_decomposition(&a, 3, &eig, 1e-15);
    }

    #[test]
    fn circulant_spectrum() {
        // path Laplacian on a cycle of 8: eigenvalues 2 - 2 cos(2 pi k / 8)
        let n = 8;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 2.0;
            a[i * n + (i + 1) % n] = -1.0;
            a[i * n + (i + n - 1) % n] = -1.0;
        }
        let eig = SymmetricEigen::new(&a, n).unwrap();
        let mut expect: Vec<f64> = (0..n)
            .map(|k| 2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
            .collect();
        expect.sort_by(f64::total_cmp);
        for (x, y) in eig.values.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-13);
        }
        check_decomposition(&a, n, &eig, 1e-13);
    }

    #[test]
    fn projection_matches_full_basis() {
        let n = 40;
        let a = random_symmetric(n, 3);
        let f: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let eig = SymmetricEigen::new(&a, n).unwrap();
        let (values, coords) = eigen_project(&a, n, &[&f, &g]).unwrap();
        for i in 0..n {
            assert!((values[i] - eig.values[i]).abs() < 1e-12);
            let uf: f64 = eig.vector(i).iter().zip(&f).map(|(a, b)| a * b).sum();
            let ug: f64 = eig.vector(i).iter().zip(&g).map(|(a, b)| a * b).sum();
            assert!((coords[2 * i] - uf).abs() < 1e-10);
            assert!((coords[2 * i + 1] - ug).abs() < 1e-9);
        }
    }

    #[test]
    fn cholesky_small() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, 2, &[2.0, 1.0]).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-15);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-15);
        assert!(cholesky_solve(&[1.0, 2.0, 2.0, 1.0], 2, &[1.0, 1.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn random_matrices_decompose(n in 1usize..30, seed in any::<u64>()) {
            let a = random_symmetric(n, seed);
            let eig = SymmetricEigen::new(&a, n).unwrap();
            check_decomposition(&a, n, &eig, 1e-11);
            let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
            let sum: f64 = eig.values.iter().sum();
            prop_assert!((trace - sum).abs() < 1e-11);
        }
    }
}
