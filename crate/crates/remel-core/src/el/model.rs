//! Prepared per-subject moment representation.
//!
//! For the linear mean model every subject's moment vector is affine in
//! the coefficients, `g_i(beta) = a_i - B_i beta`, so the outer search
//! only re-evaluates small matrix-vector products. `B_i` is also minus
//! the Jacobian.

use nalgebra::{DMatrix, DVector};

use crate::auxiliary::{reduced_subject_moments, AuxiliaryBasis};
use crate::covariance::{CovCache, WorkingCovariance};
use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LinearMomentModel {
    a: Vec<DVector<f64>>,
    b: Vec<DMatrix<f64>>,
    /// Row-stacked copies: rows `i*q..(i+1)*q` hold subject `i`, so the
    /// whole moment stack evaluates in one matrix-vector product.
    a_stack: DVector<f64>,
    b_stack: DMatrix<f64>,
    q: usize,
    p: usize,
}

fn stack(
    a: &[DVector<f64>],
    b: &[DMatrix<f64>],
    q: usize,
    p: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.len();
    let mut a_stack = DVector::zeros(n * q);
    let mut b_stack = DMatrix::zeros(n * q, p);
    for i in 0..n {
        a_stack.rows_mut(i * q, q).copy_from(&a[i]);
        b_stack.rows_mut(i * q, q).copy_from(&b[i]);
    }
    (a_stack, b_stack)
}

impl LinearMomentModel {
    /// Prepare the reduced cross-replicate moments for every subject.
    pub fn from_basis(
        ds: &LongitudinalDataset,
        basis: &AuxiliaryBasis,
        cov: &WorkingCovariance,
    ) -> Result<Self> {
        let cache = CovCache::new(cov, ds)?;
        let mut a = Vec::with_capacity(ds.n());
        let mut b = Vec::with_capacity(ds.n());
        for i in 0..ds.n() {
            let m = ds.subjects()[i].visits();
            let (ai, bi) = reduced_subject_moments(ds, i, basis, cache.inverse(m))?;
            a.push(ai);
            b.push(bi);
        }
        let (q, p) = (basis.q, ds.p());
        let (a_stack, b_stack) = stack(&a, &b, q, p);
        Ok(LinearMomentModel {
            a,
            b,
            a_stack,
            b_stack,
            q,
            p,
        })
    }

    /// Prepare the averaged-surrogate moments (one block, `q = p`).
    pub fn averaged(ds: &LongitudinalDataset, cov: &WorkingCovariance) -> Result<Self> {
        let cache = CovCache::new(cov, ds)?;
        let p = ds.p();
        let mut a = Vec::with_capacity(ds.n());
        let mut b = Vec::with_capacity(ds.n());
        for i in 0..ds.n() {
            let s = &ds.subjects()[i];
            let z = ds.averaged_design(i);
            let weighted = z.transpose() * cache.inverse(s.visits());
            a.push(&weighted * &s.y);
            b.push(weighted * z);
        }
        let (a_stack, b_stack) = stack(&a, &b, p, p);
        Ok(LinearMomentModel {
            a,
            b,
            a_stack,
            b_stack,
            q: p,
            p,
        })
    }

    /// Prepare the cross-replicate estimating function summed over all
    /// ordered replicate pairs (one `p`-dimensional block per subject).
    pub fn summed_pairs(ds: &LongitudinalDataset, cov: &WorkingCovariance) -> Result<Self> {
        let k = ds.replicate_count();
        if k < 2 {
            return Err(Error::Identifiability {
                message: "cross-replicate estimation needs at least 2 replicates".to_string(),
            });
        }
        let cache = CovCache::new(cov, ds)?;
        let p = ds.p();
        let pairs = crate::auxiliary::replicate_pairs(k);
        let mut a = Vec::with_capacity(ds.n());
        let mut b = Vec::with_capacity(ds.n());
        for i in 0..ds.n() {
            let s = &ds.subjects()[i];
            let sigma_inv = cache.inverse(s.visits());
            let designs: Vec<DMatrix<f64>> = (1..=k).map(|r| ds.design_matrix(i, r)).collect();
            let mut ai = DVector::zeros(p);
            let mut bi = DMatrix::zeros(p, p);
            for &(k1, k2) in &pairs {
                let weighted = designs[k1 - 1].transpose() * sigma_inv;
                ai += &weighted * &s.y;
                bi += weighted * &designs[k2 - 1];
            }
            a.push(ai);
            b.push(bi);
        }
        let (a_stack, b_stack) = stack(&a, &b, p, p);
        Ok(LinearMomentModel {
            a,
            b,
            a_stack,
            b_stack,
            q: p,
            p,
        })
    }

    /// Solve `sum_i g_i(beta) = 0` directly; only valid when `q = p`.
    pub fn solve_moment_equation(&self) -> Result<DVector<f64>> {
        if self.q != self.p {
            return Err(Error::dimension(format!(
                "moment equation solve needs q = p, got q = {}, p = {}",
                self.q, self.p
            )));
        }
        let mut lhs = DMatrix::zeros(self.p, self.p);
        let mut rhs = DVector::zeros(self.p);
        for i in 0..self.n() {
            lhs += &self.b[i];
            rhs += &self.a[i];
        }
        lhs.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::numerical("estimating-equation system is singular"))
    }

    /// Robust sandwich covariance of the `q = p` estimating-equation
    /// solution: `A^{-1} (sum_i U_i U_i') A^{-T}` with `A = sum_i B_i`.
    pub fn sandwich_covariance(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if self.q != self.p {
            return Err(Error::dimension(
                "sandwich covariance needs q = p".to_string(),
            ));
        }
        let mut bread = DMatrix::zeros(self.p, self.p);
        let mut meat = DMatrix::<f64>::zeros(self.p, self.p);
        for i in 0..self.n() {
            bread += &self.b[i];
            let u = self.subject_moment(i, beta);
            meat.ger(1.0, &u, &u, 1.0);
        }
        // A^{-1} meat A^{-T}: two solves against the same factorization.
        let lu = bread.lu();
        let left = lu
            .solve(&meat)
            .ok_or_else(|| Error::numerical("sandwich bread matrix is singular"))?;
        let right = lu
            .solve(&left.transpose())
            .ok_or_else(|| Error::numerical("sandwich bread matrix is singular"))?;
        Ok(right.transpose())
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn subject_moment(&self, i: usize, beta: &DVector<f64>) -> DVector<f64> {
        &self.a[i] - &self.b[i] * beta
    }

    /// Stack all subject moments into the `n x q` matrix used by the
    /// inner solve.
    pub fn moment_matrix(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        let mut flat = self.a_stack.clone();
        flat.gemv(-1.0, &self.b_stack, beta, 1.0);
        let mut g = DMatrix::zeros(n, self.q);
        for i in 0..n {
            for j in 0..self.q {
                g[(i, j)] = flat[i * self.q + j];
            }
        }
        g
    }

    /// Sum of per-subject Jacobians (constant in `beta`).
    pub fn l_n(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.q, self.p);
        for bi in &self.b {
            l -= bi;
        }
        l
    }

    /// Sample second-moment matrix at `beta`.
    pub fn m_n(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.q, self.q);
        for i in 0..self.n() {
            let gi = self.subject_moment(i, beta);
            m.ger(1.0, &gi, &gi, 1.0);
        }
        m
    }

    /// Sum of moment vectors at `beta`.
    pub fn moment_sum(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut s = DVector::zeros(self.q);
        for i in 0..self.n() {
            s += self.subject_moment(i, beta);
        }
        s
    }

    /// Envelope gradient of the profile objective at an interior inner
    /// solution: `-2 sum_i B_i' lambda / (1 + lambda' g_i)`.
    pub fn envelope_gradient(&self, beta: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        let mut flat = self.a_stack.clone();
        flat.gemv(-1.0, &self.b_stack, beta, 1.0);
        // v[i*q + j] = lambda_j / z_i folds the per-subject weights into
        // one stacked product.
        let mut v = DVector::zeros(flat.len());
        for i in 0..self.n() {
            let mut z = 1.0;
            for j in 0..self.q {
                z += lambda[j] * flat[i * self.q + j];
            }
            for j in 0..self.q {
                v[i * self.q + j] = lambda[j] / z;
            }
        }
        let mut grad = DVector::zeros(self.p);
        grad.gemv_tr(-2.0, &self.b_stack, &v, 0.0);
        grad
    }

    /// Plug-in coefficient covariance `(L_n' M_n^{-1} L_n)^{-1}` at `beta`.
    pub fn plugin_covariance(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let m_n = self.m_n(beta);
        let chol = m_n
            .cholesky()
            .ok_or_else(|| Error::numerical("second-moment matrix is singular"))?;
        let l_n = self.l_n();
        let m_inv_l = chol.solve(&l_n);
        let info = l_n.transpose() * m_inv_l;
        info.cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::numerical("information matrix is singular"))
    }
}
