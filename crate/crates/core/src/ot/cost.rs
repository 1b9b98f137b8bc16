use crate::error::{Error, Result};
use crate::matrix::TokenMatrix;
use crate::scalar::{dot, norm, Real, Scalar};

/// Transport costs between reference rows (`i`) and target rows (`j`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    matrix: TokenMatrix<T>,
}

impl<T: Scalar> CostMatrix<T> {
    /// Wraps an arbitrary finite matrix. Cosine costs additionally lie in
    /// `[0, 2]`, but the solver accepts any finite costs.
    pub fn new(matrix: TokenMatrix<T>) -> Result<Self> {
        matrix.ensure_finite("cost matrix")?;
        Ok(Self { matrix })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(TokenMatrix::from_rows(rows)?)
    }

    pub fn matrix(&self) -> &TokenMatrix<T> {
        &self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.matrix.get(i, j)
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            matrix: self.matrix.map(|c| c * factor),
        }
    }
}

/// Cosine distance `1 − cos(s_id^i, s_n^j)` for every pair of rows.
pub fn cost_matrix<T: Real>(
    reference: &TokenMatrix<T>,
    target: &TokenMatrix<T>,
) -> Result<CostMatrix<T>> {
    if reference.cols() != target.cols() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            reference.cols(),
            target.cols()
        )));
    }
    let norms = |m: &TokenMatrix<T>| -> Result<Vec<T>> {
        m.iter_rows()
            .enumerate()
            .map(|(row, r)| {
                let n = norm(r);
                if n > T::zero() && n.is_finite() {
                    Ok(n)
                } else {
                    Err(Error::DegenerateFeature { row })
                }
            })
            .collect()
    };
    let ref_norms = norms(reference)?;
    let tgt_norms = norms(target)?;
    let two = T::one() + T::one();
    let mut c = TokenMatrix::zeros(reference.rows(), target.rows());
    for (i, (r, &nr)) in reference.iter_rows().zip(&ref_norms).enumerate() {
        for (j, (t, &nt)) in target.iter_rows().zip(&tgt_norms).enumerate() {
            let cos = dot(r, t) / (nr * nt);
            c.set(i, j, (T::one() - cos).max(T::zero()).min(two));
        }
    }
    CostMatrix::new(c)
}
