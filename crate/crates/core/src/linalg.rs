//! Dense linear-algebra helpers shared by the identification and control code.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Solution of a (possibly regularized) linear least-squares problem.
#[derive(Debug, Clone)]
pub struct Lstsq {
    pub solution: DMatrix<f64>,
    /// Number of singular values above the rank tolerance.
    pub rank: usize,
}

/// Minimizes `‖A X − B‖² + ridge ‖X‖²` over `X`.
///
/// Tall problems are first reduced with a thin QR factorization so the SVD only
/// ever sees an `n × n` triangle. With `ridge == 0` this is the minimum-norm
/// pseudoinverse solution; singular values below `eps · max(m, n) · σ_max` are
/// discarded.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> Lstsq {
    let (m, n) = a.shape();
    assert_eq!(b.nrows(), m, "lstsq: row mismatch");
    let (core, rhs) = if m > n {
        let qr = a.clone().qr();
        let r = qr.r();
        let mut qtb = b.clone();
        qr.q_tr_mul(&mut qtb);
        (r, qtb.rows(0, n).into_owned())
    } else {
        (a.clone(), b.clone())
    };
    let svd = core.svd(true, true);
    let u = svd.u.as_ref().expect("svd computed u");
    let v_t = svd.v_t.as_ref().expect("svd computed v_t");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = f64::EPSILON * (m.max(n) as f64) * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();

    let filtered = DVector::from_iterator(
        svd.singular_values.len(),
        svd.singular_values.iter().map(|&s| {
            if ridge > 0.0 {
                s / (s * s + ridge)
            } else if s > tol {
                1.0 / s
            } else {
                0.0
            }
        }),
    );
    let mut ut_b = u.transpose() * rhs;
    for (i, f) in filtered.iter().enumerate() {
        ut_b.row_mut(i).scale_mut(*f);
    }
    Lstsq {
        solution: v_t.transpose() * ut_b,
        rank,
    }
}

/// Eigenvalues and (right) eigenvectors of a real, generally nonsymmetric matrix.
///
/// Uses a complex Schur factorization `A = Q T Q^H` followed by back substitution
/// on the triangular factor. Eigenvectors are returned with unit 2-norm.
pub fn eig_general(a: &DMatrix<f64>) -> Result<Vec<(Complex64, DVector<Complex64>)>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eig_general: matrix must be square");
    if n == 0 {
        return Ok(Vec::new());
    }
    let ac: DMatrix<Complex64> = a.map(|v| Complex64::new(v, 0.0));
    let schur = Schur::try_new(ac, f64::EPSILON, 10_000).ok_or(Error::EigenFailure)?;
    let (q, t) = schur.unpack();

    let norm_t = t.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let small = (f64::EPSILON * norm_t).max(f64::MIN_POSITIVE);

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let lambda = t[(k, k)];
        let mut y = DVector::<Complex64>::zeros(n);
        y[k] = Complex64::new(1.0, 0.0);
        for j in (0..k).rev() {
            let mut acc = Complex64::new(0.0, 0.0);
            for l in (j + 1)..=k {
                acc += t[(j, l)] * y[l];
            }
            let mut denom = t[(j, j)] - lambda;
            if denom.norm() < small {
                denom = Complex64::new(small, 0.0);
            }
            y[j] = -acc / denom;
        }
        let mut v = &q * y;
        let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::EigenFailure);
        }
        v.unscale_mut(norm);
        out.push((lambda, v));
    }
    Ok(out)
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `z^T M z` without forming intermediates.
pub fn quad_form(m: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    let n = z.len();
    let mut acc = 0.0;
    for j in 0..n {
        let zj = z[j];
        if zj == 0.0 {
            continue;
        }
        let col = m.column(j);
        let mut s = 0.0;
        for i in 0..n {
            s += z[i] * col[i];
        }
        acc += s * zj;
    }
    acc
}

/// Serde adapters that store matrices as nested row-major arrays.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().cloned().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return None;
        }
        Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).ok_or_else(|| D::Error::custom("ragged matrix rows"))
    }

    pub mod list {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter()
                .map(|rows| from_rows(rows).ok_or_else(|| D::Error::custom("ragged matrix rows")))
                .collect()
        }
    }
}

pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
