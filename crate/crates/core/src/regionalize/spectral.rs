use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, NestError, Result};

/// `I − D^{-1/2} A D^{-1/2}`.
pub fn normalized_laplacian(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(invalid(format!("affinity must be square, got {}x{}", n, a.ncols())));
    }
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let deg: f64 = a.row(i).iter().sum();
        if !(deg > 0.0) {
            return Err(NestError::IsolatedNode(i));
        }
        inv_sqrt.push(1.0 / deg.sqrt());
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]
    }))
}

#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    /// `N × M`, rows scaled to unit norm (all-zero rows left at zero).
    pub u: DMatrix<f64>,
    /// The selected eigenvectors before row normalisation.
    pub eigenvectors: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub zero_rows: Vec<usize>,
    /// `max ‖Lu − λu‖` over the returned pairs.
    pub max_residual: f64,
}

/// Residual above which a returned eigenpair is treated as a solver failure.
pub const EIGEN_RESIDUAL_LIMIT: f64 = 1e-6;

/// Eigenvectors of the `m` smallest eigenvalues of a symmetric `l`, row-normalised.
pub fn spectral_embed(l: &DMatrix<f64>, m: usize) -> Result<SpectralEmbedding> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(invalid("laplacian must be square"));
    }
    if m == 0 || m > n {
        return Err(invalid(format!("region count {m} must be within 1..={n}")));
    }
    let eig = SymmetricEigen::try_new(l.clone(), 1e-15, 10_000 * n.max(1))
        .ok_or(NestError::EigenNonConvergence(f64::INFINITY))?;

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: ties keep solver order.
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut vecs = DMatrix::zeros(n, m);
    let mut values = Vec::with_capacity(m);
    let mut max_residual: f64 = 0.0;
    for (col, &k) in order.iter().take(m).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        // Fix the sign: largest-magnitude entry positive.
        let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            v.neg_mut();
        }
        let lambda = eig.eigenvalues[k];
        let resid = (l * &v - &v * lambda).norm();
        max_residual = max_residual.max(resid);
        vecs.set_column(col, &v);
        values.push(lambda);
    }
    if !(max_residual <= EIGEN_RESIDUAL_LIMIT) {
        return Err(NestError::EigenNonConvergence(max_residual));
    }

    let mut u = vecs.clone();
    let mut zero_rows = Vec::new();
    for i in 0..n {
        let norm = u.row(i).norm();
        if norm > 0.0 {
            u.row_mut(i).scale_mut(1.0 / norm);
        } else {
            zero_rows.push(i);
        }
    }
    Ok(SpectralEmbedding {
        u,
        eigenvectors: vecs,
        eigenvalues: values,
        zero_rows,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_laplacian() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let l = normalized_laplacian(&a).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let e = spectral_embed(&l, 2).unwrap();
        assert!(e.eigenvalues[0].abs() < 1e-12);
        assert!((e.eigenvalues[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_reported() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(normalized_laplacian(&a), Err(NestError::IsolatedNode(2))));
    }

    #[test]
    fn scale_invariance() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.3, 0.9, 0.3, 0.0, 0.5, 0.9, 0.5, 0.0]);
        let l1 = normalized_laplacian(&a).unwrap();
        let l2 = normalized_laplacian(&(a * 7.5)).unwrap();
        assert!((l1 - l2).abs().max() < 1e-12);
    }

    #[test]
    fn null_space_is_sqrt_degree() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.3, 0.9, 0.3, 0.0, 0.5, 0.9, 0.5, 0.0]);
        let l = normalized_laplacian(&a).unwrap();
        let e = spectral_embed(&l, 1).unwrap();
        assert!(e.eigenvalues[0].abs() < 1e-8);
        let deg: Vec<f64> = (0..3).map(|i| a.row(i).sum().sqrt()).collect();
        let norm = deg.iter().map(|d| d * d).sum::<f64>().sqrt();
        for i in 0..3 {
            assert!((e.eigenvectors[(i, 0)] - deg[i] / norm).abs() < 1e-8);
        }
    }

    #[test]
    fn two_cliques_collapse_to_two_points() {
        let n = 6;
        let a = DMatrix::from_fn(n, n, |i, j| if i != j && (i < 3) == (j < 3) { 1.0 } else { 0.0 });
        let l = normalized_laplacian(&a).unwrap();
        let e = spectral_embed(&l, 2).unwrap();
        let row = |i: usize| e.u.row(i).into_owned();
        for i in 1..3 {
            assert!((row(i) - row(0)).norm() < 1e-8);
            assert!((row(i + 3) - row(3)).norm() < 1e-8);
        }
        assert!((row(0) - row(3)).norm() > 0.5);
    }

    #[test]
    fn full_basis_is_orthonormal() {
        let a = DMatrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 / (1.0 + (i + j) as f64) });
        let l = normalized_laplacian(&a).unwrap();
        let e = spectral_embed(&l, 5).unwrap();
        let gram = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((gram - DMatrix::<f64>::identity(5, 5)).abs().max() < 1e-8);
        assert!(e.max_residual < 1e-8);
    }
}
