//! Cross-replicate moment functions and their reduction to a
//! full-rank basis.
//!
//! For each ordered replicate pair `(k1, k2)` with `k1 != k2` the full
//! moment vector stacks the `p` rows of
//! `Z(k1)^T Sigma^{-1} (y - Z(k2) beta)`, where `Z(k)` is the subject
//! design built from replicate `k`. Independence between replicate
//! errors makes every element mean-zero at the true coefficients.
//!
//! Two kinds of redundancy are removed before the vector can be used:
//! error-free coordinates do not depend on `k1`, so all but one copy per
//! `k2` are structural duplicates; and cross-replicate symmetry induces
//! exact linear dependencies among the remaining elements. Duplicates
//! are eliminated by tag, dependencies by a rank-revealing pass over the
//! sample second-moment matrix that keeps the earliest elements in
//! enumeration order.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covariance::WorkingCovariance;
use crate::dataset::{CoordKind, LongitudinalDataset};
use crate::error::{Error, Result};

/// Default pivot threshold for dependence elimination, relative to the
/// largest diagonal of the sample second-moment matrix.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Identity of one scalar element of the full moment vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ElementTag {
    /// Replicate used in the weight row (1-based).
    pub k1: usize,
    /// Replicate inside the residual (1-based).
    pub k2: usize,
    /// Coefficient coordinate in canonical order (0-based).
    pub coord: usize,
    pub kind: CoordKind,
}

impl std::fmt::Display for ElementTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(k1={}, k2={}, coord={})",
            self.k1,
            self.k2,
            self.coord + 1
        )
    }
}

/// Ordered replicate pairs `(1,2),(2,1),(1,3),(3,1),...`: unordered
/// pairs in lexicographic order, each contributing both orientations.
pub fn replicate_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(k.saturating_sub(1) * k);
    for a in 1..=k {
        for b in (a + 1)..=k {
            pairs.push((a, b));
            pairs.push((b, a));
        }
    }
    pairs
}

/// Tags of the full moment vector, pair-major with coordinates inside.
pub fn full_tags(k: usize, kinds: &[CoordKind]) -> Vec<ElementTag> {
    let mut tags = Vec::with_capacity(k * (k - 1) * kinds.len());
    for (k1, k2) in replicate_pairs(k) {
        for (coord, &kind) in kinds.iter().enumerate() {
            tags.push(ElementTag {
                k1,
                k2,
                coord,
                kind,
            });
        }
    }
    tags
}

/// Smallest admissible weight replicate for residual replicate `k2`.
fn smallest_k1(k2: usize) -> usize {
    if k2 == 1 {
        2
    } else {
        1
    }
}

/// Evaluate the full moment vector for one subject, in tag order.
pub fn build_full_aux(
    ds: &LongitudinalDataset,
    subject: usize,
    beta: &DVector<f64>,
    sigma_inv: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let k = ds.replicate_count();
    if k < 2 {
        return Err(Error::Identifiability {
            message: "cross-replicate moments need at least 2 replicates".to_string(),
        });
    }
    let p = ds.p();
    if beta.len() != p {
        return Err(Error::dimension(format!(
            "beta has length {}, expected {p}",
            beta.len()
        )));
    }
    let m = ds.subjects()[subject].visits();
    if sigma_inv.nrows() != m || sigma_inv.ncols() != m {
        return Err(Error::dimension(format!(
            "sigma_inv is {}x{}, expected {m}x{m}",
            sigma_inv.nrows(),
            sigma_inv.ncols()
        )));
    }
    let y = &ds.subjects()[subject].y;
    let designs: Vec<DMatrix<f64>> = (1..=k).map(|r| ds.design_matrix(subject, r)).collect();
    let mut out = Vec::with_capacity(k * (k - 1) * p);
    for (k1, k2) in replicate_pairs(k) {
        let resid = y - &designs[k2 - 1] * beta;
        let weighted = sigma_inv * resid;
        let block = designs[k1 - 1].transpose() * weighted;
        out.extend(block.iter().copied());
    }
    Ok(out)
}

/// The retained element set defining the reduced moment vector.
#[derive(Debug, Clone, Serialize)]
pub struct AuxiliaryBasis {
    pub retained: Vec<ElementTag>,
    pub q: usize,
    pub dropped_duplicates: Vec<ElementTag>,
    pub dropped_dependent: Vec<ElementTag>,
    /// Condition number of the retained sample second-moment matrix.
    pub gram_condition: f64,
}

impl AuxiliaryBasis {
    pub fn same_tags(&self, other: &AuxiliaryBasis) -> bool {
        self.retained == other.retained
    }
}

/// Split the full tag list into structurally unique elements and
/// duplicates: an error-free coordinate is kept only at the smallest
/// admissible `k1` for each `k2`.
fn structural_split(k: usize, kinds: &[CoordKind]) -> (Vec<ElementTag>, Vec<ElementTag>) {
    let mut unique = Vec::new();
    let mut duplicates = Vec::new();
    for tag in full_tags(k, kinds) {
        let keep = match tag.kind {
            CoordKind::ErrorProne { .. } => true,
            CoordKind::Exact => tag.k1 == smallest_k1(tag.k2),
        };
        if keep {
            unique.push(tag);
        } else {
            duplicates.push(tag);
        }
    }
    (unique, duplicates)
}

/// Build the reduced basis at the given coefficients and working
/// covariance.
///
/// Structural duplicates are removed by tag. The surviving elements are
/// then screened with a sequential rank-revealing Cholesky pass over
/// their sample second-moment matrix: an element whose pivot
/// (conditional variance given earlier retained elements) falls below
/// `rank_tol` times the largest diagonal is dropped as linearly
/// dependent. Processing in enumeration order keeps the earliest
/// element of any dependent group.
pub fn reduce_basis(
    ds: &LongitudinalDataset,
    beta: &DVector<f64>,
    cov: &WorkingCovariance,
    rank_tol: f64,
) -> Result<AuxiliaryBasis> {
    let n = ds.n();
    if n < 2 {
        return Err(Error::InsufficientSample {
            message: "basis reduction needs at least 2 subjects".to_string(),
        });
    }
    let k = ds.replicate_count();
    if k < 2 {
        return Err(Error::Identifiability {
            message: "cross-replicate moments need at least 2 replicates".to_string(),
        });
    }
    let kinds = ds.coord_kinds();
    let (unique, dropped_duplicates) = structural_split(k, &kinds);
    let s = unique.len();
    let p = ds.p();

    // Sample second moment of the structurally unique elements.
    let full = full_tags(k, &kinds);
    let keep_idx: Vec<usize> = full
        .iter()
        .enumerate()
        .filter(|(_, t)| unique.contains(t))
        .map(|(i, _)| i)
        .collect();
    let cache = crate::covariance::CovCache::new(cov, ds)?;
    let mut gram = DMatrix::<f64>::zeros(s, s);
    for i in 0..n {
        let m = ds.subjects()[i].visits();
        let g_full = build_full_aux(ds, i, beta, cache.inverse(m))?;
        let g = DVector::from_iterator(s, keep_idx.iter().map(|&j| g_full[j]));
        gram.ger(1.0, &g, &g, 1.0);
    }

    // Sequential pivoted factorization in enumeration order.
    let max_diag = gram.diagonal().max();
    let tol = rank_tol * max_diag;
    let mut retained_pos: Vec<usize> = Vec::new();
    let mut dropped_dependent = Vec::new();
    let mut chol_rows: Vec<Vec<f64>> = Vec::new();
    for t in 0..s {
        let mut l = Vec::with_capacity(retained_pos.len());
        for (r, &idx) in retained_pos.iter().enumerate() {
            let mut v = gram[(idx, t)];
            for (j, lj) in l.iter().enumerate().take(r) {
                v -= chol_rows[r][j] * lj;
            }
            l.push(v / chol_rows[r][r]);
        }
        let pivot = gram[(t, t)] - l.iter().map(|v| v * v).sum::<f64>();
        if pivot < tol {
            dropped_dependent.push(unique[t]);
        } else {
            l.push(pivot.sqrt());
            chol_rows.push(l);
            retained_pos.push(t);
        }
    }

    let retained: Vec<ElementTag> = retained_pos.iter().map(|&t| unique[t]).collect();
    let q = retained.len();
    if q < p {
        return Err(Error::Identifiability {
            message: format!("reduced basis has {q} elements for {p} coefficients"),
        });
    }
    if n < q {
        return Err(Error::SampleSize {
            subjects: n,
            basis_dim: q,
        });
    }

    let retained_gram = DMatrix::from_fn(q, q, |a, b| gram[(retained_pos[a], retained_pos[b])]);
    let eig = retained_gram.symmetric_eigenvalues();
    let gram_condition = eig.max() / eig.min();

    Ok(AuxiliaryBasis {
        retained,
        q,
        dropped_duplicates,
        dropped_dependent,
        gram_condition,
    })
}

/// Per-subject linear representation of the reduced moment vector:
/// `g*(beta) = a - B beta`. `B` is also minus the Jacobian.
pub fn reduced_subject_moments(
    ds: &LongitudinalDataset,
    subject: usize,
    basis: &AuxiliaryBasis,
    sigma_inv: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = ds.replicate_count();
    let p = ds.p();
    let m = ds.subjects()[subject].visits();
    if sigma_inv.nrows() != m || sigma_inv.ncols() != m {
        return Err(Error::dimension(format!(
            "sigma_inv is {}x{}, expected {m}x{m}",
            sigma_inv.nrows(),
            sigma_inv.ncols()
        )));
    }
    let y = &ds.subjects()[subject].y;
    let designs: Vec<DMatrix<f64>> = (1..=k).map(|r| ds.design_matrix(subject, r)).collect();

    // Weighted cross-products per ordered pair, reused across tags.
    let pairs = replicate_pairs(k);
    let mut a_by_pair: Vec<Option<DVector<f64>>> = vec![None; pairs.len()];
    let mut b_by_pair: Vec<Option<DMatrix<f64>>> = vec![None; pairs.len()];

    let q = basis.q;
    let mut a = DVector::zeros(q);
    let mut b = DMatrix::zeros(q, p);
    for (row, tag) in basis.retained.iter().enumerate() {
        if tag.k1 > k || tag.k2 > k || tag.coord >= p {
            return Err(Error::dimension(format!("tag {tag} out of range")));
        }
        let pair_idx = pairs
            .iter()
            .position(|&(k1, k2)| k1 == tag.k1 && k2 == tag.k2)
            .expect("tag pair is admissible");
        if a_by_pair[pair_idx].is_none() {
            let weighted = designs[tag.k1 - 1].transpose() * sigma_inv;
            a_by_pair[pair_idx] = Some(&weighted * y);
            b_by_pair[pair_idx] = Some(weighted * &designs[tag.k2 - 1]);
        }
        a[row] = a_by_pair[pair_idx].as_ref().unwrap()[tag.coord];
        b.row_mut(row)
            .copy_from(&b_by_pair[pair_idx].as_ref().unwrap().row(tag.coord));
    }
    Ok((a, b))
}

/// Reduced moment vector for one subject.
pub fn eval_reduced(
    ds: &LongitudinalDataset,
    subject: usize,
    beta: &DVector<f64>,
    basis: &AuxiliaryBasis,
    sigma_inv: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let (a, b) = reduced_subject_moments(ds, subject, basis, sigma_inv)?;
    Ok(a - b * beta)
}

/// Jacobian of the reduced moment vector with respect to the
/// coefficients; constant because the mean model is linear.
pub fn jacobian_reduced(
    ds: &LongitudinalDataset,
    subject: usize,
    basis: &AuxiliaryBasis,
    sigma_inv: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (_, b) = reduced_subject_moments(ds, subject, basis, sigma_inv)?;
    Ok(-b)
}
