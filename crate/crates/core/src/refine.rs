//! Identity refinement: cross-image attention in which a target attends to
//! its own tokens plus only the most salient reference tokens.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::TokenMatrix;
use crate::scalar::{softmax, Real, Scalar};
use crate::tensor::read_tensor;

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Queries of one target plus its own and the reference's keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle<T> {
    pub q_target: TokenMatrix<T>,
    pub k_target: TokenMatrix<T>,
    pub v_target: TokenMatrix<T>,
    pub k_reference: TokenMatrix<T>,
    pub v_reference: TokenMatrix<T>,
}

/// File names of a bundle directory.
pub const BUNDLE_FILES: [&str; 5] = ["Qn.cft", "Kn.cft", "Vn.cft", "Kid.cft", "Vid.cft"];

impl<T: Scalar> AttentionBundle<T> {
    pub fn new(
        q_target: TokenMatrix<T>,
        k_target: TokenMatrix<T>,
        v_target: TokenMatrix<T>,
        k_reference: TokenMatrix<T>,
        v_reference: TokenMatrix<T>,
    ) -> Result<Self> {
        let d = q_target.cols();
        for (name, m) in [
            ("K_n", &k_target),
            ("V_n", &v_target),
            ("K_id", &k_reference),
            ("V_id", &v_reference),
        ] {
            if m.cols() != d {
                return Err(Error::Shape(format!(
                    "{name} has width {}, queries have {d}",
                    m.cols()
                )));
            }
        }
        if k_target.rows() != v_target.rows() {
            return Err(Error::Shape("K_n and V_n differ in token count".into()));
        }
        if k_reference.rows() != v_reference.rows() {
            return Err(Error::Shape("K_id and V_id differ in token count".into()));
        }
        Ok(Self {
            q_target,
            k_target,
            v_target,
            k_reference,
            v_reference,
        })
    }

    /// Loads `Qn.cft`, `Kn.cft`, `Vn.cft`, `Kid.cft` and `Vid.cft` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let [q, kn, vn, kid, vid] = BUNDLE_FILES.map(|f| read_tensor(dir.join(f)));
        Self::new(
            q?.to_tokens()?,
            kn?.to_tokens()?,
            vn?.to_tokens()?,
            kid?.to_tokens()?,
            vid?.to_tokens()?,
        )
    }

    pub fn target_keys(&self) -> usize {
        self.k_target.rows()
    }

    pub fn reference_keys(&self) -> usize {
        self.k_reference.rows()
    }

    pub fn dim(&self) -> usize {
        self.q_target.cols()
    }
}

/// Reference token indices kept during refinement (ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSet {
    indices: Vec<usize>,
    alpha: f64,
    universe: usize,
}

impl SelectionSet {
    pub fn all(universe: usize) -> Self {
        Self {
            indices: (0..universe).collect(),
            alpha: 1.0,
            universe,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

pub fn selection_count(alpha: f64, universe: usize) -> usize {
    // The small slack keeps decimal fractions like 0.7·10 from rounding up.
    let raw = (alpha * universe as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(universe)
}

/// The `max(1, ⌈α·k⌉)` highest-scoring indices; ties go to the lower index.
pub fn select_top_alpha<T: Scalar>(scores: &[T], alpha: f64) -> Result<SelectionSet> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::Empty("saliency scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite_scalar()) {
        return Err(Error::Validation("saliency scores must be finite".into()));
    }
    let keep = selection_count(alpha, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| {
        scores[y]
            .partial_cmp(&scores[x])
            .expect("finite scores")
            .then(x.cmp(&y))
    });
    let mut indices = order[..keep].to_vec();
    indices.sort_unstable();
    Ok(SelectionSet {
        indices,
        alpha,
        universe: scores.len(),
    })
}

/// Row-softmax of `Q_n [K_n ⊕ K_id]^⊤ / √d`.
pub fn cross_image_scores<T: Real>(b: &AttentionBundle<T>) -> TokenMatrix<T> {
    let keys = b
        .k_target
        .vstack(&b.k_reference)
        .expect("bundle widths validated");
    let scale = T::from_count(b.dim()).sqrt().recip();
    let mut out = TokenMatrix::zeros(b.q_target.rows(), keys.rows());
    for (r, q) in b.q_target.iter_rows().enumerate() {
        let logits: Vec<T> = keys
            .iter_rows()
            .map(|k| crate::scalar::dot(q, k) * scale)
            .collect();
        out.row_mut(r).copy_from_slice(&softmax(&logits));
    }
    out
}

/// Which entries divide a filtered row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Self columns plus the selected reference columns; rows stay stochastic.
    #[default]
    Retained,
    /// Only the selected reference columns, as in the bare filtering formula;
    /// rows then sum to more than one.
    SelectedReference,
}

/// Zeros unselected reference columns and renormalizes each row.
pub fn filter_and_renormalize<T: Real>(
    scores: &TokenMatrix<T>,
    selection: &SelectionSet,
    target_keys: usize,
    normalization: Normalization,
) -> Result<TokenMatrix<T>> {
    let reference_keys = scores
        .cols()
        .checked_sub(target_keys)
        .ok_or_else(|| Error::Shape("fewer score columns than target keys".into()))?;
    if selection.universe() != reference_keys {
        return Err(Error::Shape(format!(
            "selection covers {} reference tokens, scores have {reference_keys}",
            selection.universe()
        )));
    }
    let mut out = scores.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (j, v) in row[target_keys..].iter_mut().enumerate() {
            if !selection.contains(j) {
                *v = T::zero();
            }
        }
        let denom = match normalization {
            Normalization::Retained => row.iter().fold(T::zero(), |acc, &v| acc + v),
            Normalization::SelectedReference => row[target_keys..]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v),
        };
        if !(denom > T::zero()) {
            return Err(Error::Validation(format!(
                "row {r} keeps no attention mass"
            )));
        }
        for v in row.iter_mut() {
            *v = *v / denom;
        }
    }
    Ok(out)
}

pub fn refine_attention_with<T: Real>(
    b: &AttentionBundle<T>,
    selection: &SelectionSet,
    normalization: Normalization,
) -> Result<TokenMatrix<T>> {
    let scores = cross_image_scores(b);
    let filtered = filter_and_renormalize(&scores, selection, b.target_keys(), normalization)?;
    let values = b.v_target.vstack(&b.v_reference)?;
    filtered.matmul(&values)
}

/// `Â · [V_n ⊕ V_id]` with the default normalization.
pub fn refine_attention<T: Real>(
    b: &AttentionBundle<T>,
    selection: &SelectionSet,
) -> Result<TokenMatrix<T>> {
    refine_attention_with(b, selection, Normalization::Retained)
}

/// Plain softmax attention of `q` over `k`/`v`.
pub fn attention<T: Real>(
    q: &TokenMatrix<T>,
    k: &TokenMatrix<T>,
    v: &TokenMatrix<T>,
) -> Result<TokenMatrix<T>> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape("attention operands disagree".into()));
    }
    let scale = T::from_count(q.cols()).sqrt().recip();
    let mut weights = TokenMatrix::zeros(q.rows(), k.rows());
    for (r, qr) in q.iter_rows().enumerate() {
        let logits: Vec<T> = k
            .iter_rows()
            .map(|kr| crate::scalar::dot(qr, kr) * scale)
            .collect();
        weights.row_mut(r).copy_from_slice(&softmax(&logits));
    }
    weights.matmul(v)
}
