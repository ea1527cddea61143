//! Compressed sparse rows over complex values, with Jacobi-preconditioned
//! conjugate gradients for Hermitian systems and BiCGStab otherwise.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Triplet;
use crate::par;
use crate::stats::neumaier_sum;

/// Square CSR matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<Complex64>,
    /// Real parts, kept when every entry is real so products skip the imaginary half.
    real_vals: Option<Vec<f64>>,
}

impl CsrMatrix {
    /// Builds from triplets; duplicates are summed, columns sorted per row.
    pub fn from_triplets(n: usize, entries: &[Triplet]) -> Result<Self> {
        if n > u32::MAX as usize {
            return Err(Error::InvalidParameter(format!("dimension {n} exceeds u32 column range")));
        }
        if entries.iter().any(|t| t.row >= n || t.col >= n) {
            return Err(Error::InvalidParameter("triplet outside the matrix".into()));
        }
        let mut sorted = entries.to_vec();
        sorted.sort_by_key(|t| (t.row, t.col));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(sorted.len());
        let mut vals: Vec<Complex64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for t in sorted {
            if last == Some((t.row, t.col)) {
                *vals.last_mut().expect("previous entry") += t.value;
                continue;
            }
            row_ptr[t.row + 1] += 1;
            cols.push(t.col as u32);
            vals.push(t.value);
            last = Some((t.row, t.col));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self::from_parts(n, row_ptr, cols, vals))
    }

    /// Trusted constructor: rows in order, columns sorted and unique.
    pub(crate) fn from_parts(n: usize, row_ptr: Vec<usize>, cols: Vec<u32>, vals: Vec<Complex64>) -> Self {
        let real_vals = vals.iter().all(|v| v.im == 0.0).then(|| vals.iter().map(|v| v.re).collect());
        Self { n, row_ptr, cols, vals, real_vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_real(&self) -> bool {
        self.real_vals.is_some()
    }

    /// `(col, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().map(|&c| c as usize).zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&(j as u32)) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn diagonal(&self) -> Vec<Complex64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        (0..self.n).flat_map(|i| self.row(i).map(move |(col, value)| Triplet { row: i, col, value })).collect()
    }

    /// `max |A_ij − conj(A_ji)|` over stored entries; infinite if the
    /// sparsity pattern is not symmetric.
    pub fn hermitian_defect(&self) -> f64 {
        let per_row = par::map_range(self.n, |i| {
            let mut worst = 0.0f64;
            for (j, v) in self.row(i) {
                let span = self.row_ptr[j]..self.row_ptr[j + 1];
                match self.cols[span.clone()].binary_search(&(i as u32)) {
                    Ok(k) => worst = worst.max((v - self.vals[span.start + k].conj()).norm()),
                    Err(_) => return f64::INFINITY,
                }
            }
            worst
        });
        per_row.into_iter().fold(0.0, f64::max)
    }

    /// `y = A x`, rows in parallel.
    pub fn matvec(&self, x: &[Complex64], y: &mut [Complex64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        match &self.real_vals {
            Some(rv) => par::fill_indexed(y, |i| {
                let (mut re, mut im) = (0.0, 0.0);
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    let xv = x[self.cols[k] as usize];
                    re += rv[k] * xv.re;
                    im += rv[k] * xv.im;
                }
                Complex64::new(re, im)
            }),
            None => par::fill_indexed(y, |i| {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.vals[k] * x[self.cols[k] as usize];
                }
                acc
            }),
        }
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); self.n];
        self.matvec(x, &mut y);
        y
    }
}

/// `Σ conj(a_i) b_i` with a thread-count independent summation order.
pub fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let n = a.len();
    let chunks = n.div_ceil(par::REDUCE_CHUNK);
    let partial = par::map_range(chunks, |c| {
        let span = c * par::REDUCE_CHUNK..((c + 1) * par::REDUCE_CHUNK).min(n);
        let re = neumaier_sum(span.clone().map(|i| a[i].re * b[i].re + a[i].im * b[i].im));
        let im = neumaier_sum(span.map(|i| a[i].re * b[i].im - a[i].im * b[i].re));
        (re, im)
    });
    Complex64::new(neumaier_sum(partial.iter().map(|p| p.0)), neumaier_sum(partial.iter().map(|p| p.1)))
}

pub fn norm2(a: &[Complex64]) -> f64 {
    cdot(a, a).re.max(0.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    CgHermitian,
    Bicgstab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
    pub method: SolveMethod,
    /// Seconds.
    pub wall_time: f64,
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 1e-14 && tol < 1e-2 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("tolerance {tol:e} outside (1e-14, 1e-2)")))
    }
}

fn inverse_diagonal(a: &CsrMatrix) -> Result<Vec<Complex64>> {
    a.diagonal()
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            if d.norm() > 0.0 {
                Ok(d.inv())
            } else {
                Err(Error::InvalidParameter(format!("zero diagonal in row {i}")))
            }
        })
        .collect()
}

fn true_residual(a: &CsrMatrix, b: &[Complex64], x: &[Complex64], bnorm: f64) -> f64 {
    let ax = a.apply(x);
    let r: Vec<Complex64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    norm2(&r) / bnorm
}

/// Jacobi-preconditioned conjugate gradients for Hermitian positive definite `a`.
pub fn cg(a: &CsrMatrix, b: &[Complex64], tol: f64) -> Result<(Vec<Complex64>, SolveStats)> {
    check_tol(tol)?;
    let start = Instant::now();
    let n = a.dim();
    let zero = Complex64::new(0.0, 0.0);
    let mut x = vec![zero; n];
    let bnorm = norm2(b);
    let stats = |iterations, relative_residual| SolveStats {
        iterations,
        relative_residual,
        method: SolveMethod::CgHermitian,
        wall_time: start.elapsed().as_secs_f64(),
    };
    if bnorm == 0.0 {
        return Ok((x, stats(0, 0.0)));
    }
    let dinv = inverse_diagonal(a)?;
    if dinv.iter().any(|d| d.re <= 0.0 || d.im != 0.0) {
        return Err(Error::NotPositiveDefinite(dinv.iter().map(|d| d.re).fold(f64::INFINITY, f64::min)));
    }
    let mut r = b.to_vec();
    let mut z: Vec<Complex64> = r.iter().zip(&dinv).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut ap = vec![zero; n];
    let mut rz = cdot(&r, &z).re;
    let max_iter = 20 * n;
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.matvec(&p, &mut ap);
        let curv = cdot(&p, &ap);
        if !(curv.re > 0.0) || curv.im.abs() > 1e-8 * curv.re.abs() {
            return Err(Error::NotPositiveDefinite(curv.re));
        }
        let alpha = rz / curv.re;
        par::update_indexed(&mut x, |i, xi| *xi += p[i] * alpha);
        par::update_indexed(&mut r, |i, ri| *ri -= ap[i] * alpha);
        rel = norm2(&r) / bnorm;
        if rel <= tol {
            // Guard against drift between the recursive and the true residual.
            let true_rel = true_residual(a, b, &x, bnorm);
            if true_rel <= tol {
                return Ok((x, stats(it, true_rel)));
            }
            let ax = a.apply(&x);
            par::fill_indexed(&mut r, |i| b[i] - ax[i]);
        }
        par::fill_indexed(&mut z, |i| r[i] * dinv[i]);
        let rz_new = cdot(&r, &z).re;
        let beta = rz_new / rz;
        rz = rz_new;
        par::update_indexed(&mut p, |i, pi| *pi = z[i] + *pi * beta);
    }
    Err(Error::MaxIterations { iterations: max_iter, residual: rel })
}

/// Jacobi right-preconditioned BiCGStab for general nonsingular `a`.
pub fn bicgstab(a: &CsrMatrix, b: &[Complex64], tol: f64) -> Result<(Vec<Complex64>, SolveStats)> {
    check_tol(tol)?;
    let start = Instant::now();
    let n = a.dim();
    let zero = Complex64::new(0.0, 0.0);
    let mut x = vec![zero; n];
    let bnorm = norm2(b);
    let stats = |iterations, relative_residual| SolveStats {
        iterations,
        relative_residual,
        method: SolveMethod::Bicgstab,
        wall_time: start.elapsed().as_secs_f64(),
    };
    if bnorm == 0.0 {
        return Ok((x, stats(0, 0.0)));
    }
    let dinv = inverse_diagonal(a)?;
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let mut rho = Complex64::new(1.0, 0.0);
    let mut alpha = Complex64::new(1.0, 0.0);
    let mut omega = Complex64::new(1.0, 0.0);
    let mut v = vec![zero; n];
    let mut p = vec![zero; n];
    let mut s = vec![zero; n];
    let mut t = vec![zero; n];
    let max_iter = 20 * n;
    let mut rel = 1.0;
    for it in 1..=max_iter {
        let rho_new = cdot(&r_hat, &r);
        if rho_new.norm() == 0.0 {
            return Err(Error::NotPositiveDefinite(0.0));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        par::update_indexed(&mut p, |i, pi| *pi = r[i] + beta * (*pi - omega * v[i]));
        let phat: Vec<Complex64> = p.iter().zip(&dinv).map(|(pi, di)| pi * di).collect();
        a.matvec(&phat, &mut v);
        alpha = rho / cdot(&r_hat, &v);
        par::fill_indexed(&mut s, |i| r[i] - alpha * v[i]);
        if norm2(&s) / bnorm <= tol {
            par::update_indexed(&mut x, |i, xi| *xi += alpha * phat[i]);
            let true_rel = true_residual(a, b, &x, bnorm);
            if true_rel <= tol {
                return Ok((x, stats(it, true_rel)));
            }
            let ax = a.apply(&x);
            par::fill_indexed(&mut r, |i| b[i] - ax[i]);
            continue;
        }
        let shat: Vec<Complex64> = s.iter().zip(&dinv).map(|(si, di)| si * di).collect();
        a.matvec(&shat, &mut t);
        let tt = cdot(&t, &t).re;
        omega = if tt > 0.0 { cdot(&t, &s) / tt } else { Complex64::new(0.0, 0.0) };
        par::update_indexed(&mut x, |i, xi| *xi += alpha * phat[i] + omega * shat[i]);
        par::fill_indexed(&mut r, |i| s[i] - omega * t[i]);
        rel = norm2(&r) / bnorm;
        if rel <= tol {
            let true_rel = true_residual(a, b, &x, bnorm);
            if true_rel <= tol {
                return Ok((x, stats(it, true_rel)));
            }
            let ax = a.apply(&x);
            par::fill_indexed(&mut r, |i| b[i] - ax[i]);
        }
        if omega.norm() == 0.0 {
            return Err(Error::MaxIterations { iterations: it, residual: rel });
        }
    }
    Err(Error::MaxIterations { iterations: max_iter, residual: rel })
}
