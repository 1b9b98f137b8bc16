//! Subject masks and token importance weights from image-text cross-attention.
//!
//! The attention maps recorded for the subject prompt tokens are averaged
//! over layers and subject tokens into a per-token saliency, binarized with
//! Otsu's method, and reused (through a softmax) as the probability mass of
//! each subject token in the transport problem.

use crate::error::{Error, Result};
use crate::matrix::TokenMatrix;
use crate::scalar::{softmax, Real, Scalar};
use crate::tensor::Tensor;

pub const OTSU_BINS: usize = 256;

/// `L` layers of `(tokens × subject_tokens)` unnormalized attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T> {
    layers: Vec<TokenMatrix<T>>,
}

impl<T: Scalar> AttentionStack<T> {
    pub fn new(layers: Vec<TokenMatrix<T>>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Empty("attention stack has no layers".into()))?;
        let shape = (first.rows(), first.cols());
        if let Some(l) = layers.iter().position(|m| (m.rows(), m.cols()) != shape) {
            return Err(Error::Shape(format!(
                "layer {l} is {}x{}, expected {}x{}",
                layers[l].rows(),
                layers[l].cols(),
                shape.0,
                shape.1
            )));
        }
        for m in &layers {
            m.ensure_finite("attention layer")?;
        }
        Ok(Self { layers })
    }

    /// Reads a rank-3 `(L, tokens, subject_tokens)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [l, tokens, subject] = t.shape()[..] else {
            return Err(Error::Shape(format!(
                "attention stack must be rank 3 (L, tokens, subject_tokens), got {:?}",
                t.shape()
            )));
        };
        let per_layer = tokens * subject;
        let layers = (0..l)
            .map(|i| {
                let chunk = &t.data()[i * per_layer..(i + 1) * per_layer];
                TokenMatrix::new(
                    tokens,
                    subject,
                    chunk.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn to_tensor(&self) -> Tensor {
        let first = &self.layers[0];
        let data = self
            .layers
            .iter()
            .flat_map(|m| m.data().iter().map(|v| v.to_f64_lossy() as f32))
            .collect();
        Tensor::new(vec![self.layers.len(), first.rows(), first.cols()], data)
            .expect("stack shape is consistent")
    }

    pub fn layers(&self) -> &[TokenMatrix<T>] {
        &self.layers
    }

    pub fn tokens(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn subject_tokens(&self) -> usize {
        self.layers[0].cols()
    }
}

/// Per-image-token relevance to the subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T> {
    pub values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectMask {
    bits: Vec<bool>,
    count: usize,
}

impl SubjectMask {
    pub fn new(bits: Vec<bool>) -> Self {
        let count = bits.iter().filter(|&&b| b).count();
        Self { bits, count }
    }

    pub fn all(len: usize) -> Self {
        Self::new(vec![true; len])
    }

    /// Replaces an empty mask by the full mask so downstream transport always
    /// sees at least one subject token.
    pub fn repaired(self) -> Self {
        if self.count == 0 {
            Self::all(self.bits.len())
        } else {
            self
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("mask is non-empty")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 1 {
            return Err(Error::Shape("mask must be rank 1".into()));
        }
        t.data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::Validation(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }
}

/// Nonnegative weights over the masked tokens summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector<T> {
    weights: Vec<T>,
}

impl<T: Scalar> ProbabilityVector<T> {
    /// Checks nonnegativity and that the total is one within `1e-9`.
    pub fn new(weights: Vec<T>) -> Result<Self> {
        let pv = Self::unchecked_sum(weights)?;
        let total = pv.total();
        let tol = T::from_f64_lossy(1e-9);
        if (total - T::one()).abs() > tol {
            return Err(Error::Validation(format!(
                "probability vector sums to {total:?}, expected 1"
            )));
        }
        Ok(pv)
    }

    /// Checks nonnegativity and finiteness only; the solver does its own
    /// balance check between the two marginals.
    pub fn unchecked_sum(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("probability vector".into()));
        }
        if let Some(i) = weights
            .iter()
            .position(|w| !w.is_finite_scalar() || *w < T::zero())
        {
            return Err(Error::Validation(format!(
                "mass {i} is negative or non-finite: {:?}",
                weights[i]
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0);
        Self {
            weights: vec![T::one() / T::from_count(n); n],
        }
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> T {
        self.weights.iter().fold(T::zero(), |acc, &w| acc + w)
    }
}

/// `out[t] = 1/(L·S) Σ_l Σ_s W_l[t, s]`.
pub fn average_attention<T: Scalar>(stack: &AttentionStack<T>) -> SaliencyMap<T> {
    let denom = T::from_count(stack.layers.len() * stack.subject_tokens());
    let mut values = vec![T::zero(); stack.tokens()];
    for layer in &stack.layers {
        for (v, row) in values.iter_mut().zip(layer.iter_rows()) {
            *v = row.iter().fold(*v, |acc, &w| acc + w);
        }
    }
    SaliencyMap {
        values: values.into_iter().map(|v| v / denom).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult<T> {
    /// Threshold in the saliency's own units; members satisfy `value > threshold`.
    pub threshold: T,
    /// Index of the last histogram bin assigned to the background.
    pub bin: Option<usize>,
    pub mask: SubjectMask,
    /// Set when the saliency was constant or the split left no foreground,
    /// in which case the mask covers every token.
    pub degenerate: bool,
}

/// Histogram bin of a min-max normalized value: the number of interior
/// edges `m/256` (`m = 1..=255`) it strictly exceeds.
pub(crate) fn otsu_bin<T: Real>(normalized: T) -> usize {
    let scaled = normalized * T::from_count(OTSU_BINS);
    // Scaling by a power of two is exact, so this matches edge comparisons.
    let c = scaled.ceil().to_f64_lossy();
    (c.max(1.0) as usize - 1).min(OTSU_BINS - 1)
}

pub(crate) fn normalize_min_max<T: Real>(values: &[T]) -> Option<(T, T, Vec<T>)> {
    let (lo, hi) = values
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > T::zero()) {
        return None;
    }
    Some((lo, range, values.iter().map(|&v| (v - lo) / range).collect()))
}

/// Otsu's threshold over a 256-bin histogram of min-max normalized saliency.
///
/// Bin indices are the gray levels. Among equally good splits the lowest
/// bin wins. Constant inputs, or splits with an empty foreground, yield the
/// full mask.
pub fn otsu_threshold<T: Real>(s: &SaliencyMap<T>) -> Result<OtsuResult<T>> {
    if s.values.is_empty() {
        return Err(Error::Empty("saliency map".into()));
    }
    if let Some(i) = s.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("saliency {i} is not finite")));
    }
    let Some((lo, range, normalized)) = normalize_min_max(&s.values) else {
        return Ok(OtsuResult {
            threshold: s.values[0],
            bin: None,
            mask: SubjectMask::all(s.values.len()),
            degenerate: true,
        });
    };

    let bins: Vec<usize> = normalized.iter().map(|&v| otsu_bin(v)).collect();
    let mut hist = [0u64; OTSU_BINS];
    for &b in &bins {
        hist[b] += 1;
    }

    let total_count = bins.len() as i128;
    let total_sum: i128 = hist.iter().enumerate().map(|(k, &h)| k as i128 * h as i128).sum();
    let mut below_count = 0i128;
    let mut below_sum = 0i128;
    let mut best: Option<(usize, f64)> = None;
    for k in 0..OTSU_BINS - 1 {
        below_count += hist[k] as i128;
        below_sum += k as i128 * hist[k] as i128;
        let above_count = total_count - below_count;
        if below_count == 0 || above_count == 0 {
            continue;
        }
        let above_sum = total_sum - below_sum;
        // σ_B² · N² = (S0·n1 − S1·n0)² / (n0·n1), with the difference exact.
        let diff = (below_sum * above_count - above_sum * below_count) as f64;
        let score = diff * diff / (below_count as f64 * above_count as f64);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((k, score));
        }
    }

    let Some((k, _)) = best else {
        return Ok(OtsuResult {
            threshold: lo,
            bin: None,
            mask: SubjectMask::all(s.values.len()),
            degenerate: true,
        });
    };
    let mask = SubjectMask::new(bins.iter().map(|&b| b > k).collect());
    let edge = T::from_count(k + 1) / T::from_count(OTSU_BINS);
    let threshold = lo + edge * range;
    if mask.count() == 0 {
        return Ok(OtsuResult {
            threshold,
            bin: Some(k),
            mask: SubjectMask::all(s.values.len()),
            degenerate: true,
        });
    }
    Ok(OtsuResult {
        threshold,
        bin: Some(k),
        mask,
        degenerate: false,
    })
}

/// Rows of `x` selected by `m`, in token order. An empty mask selects all rows.
pub fn extract_subject<T: Scalar>(x: &TokenMatrix<T>, m: &SubjectMask) -> Result<TokenMatrix<T>> {
    if m.len() != x.rows() {
        return Err(Error::Shape(format!(
            "mask covers {} tokens, features have {}",
            m.len(),
            x.rows()
        )));
    }
    let m = m.clone().repaired();
    let data: Vec<T> = m.indices().flat_map(|i| x.row(i).iter().copied()).collect();
    TokenMatrix::new(m.count(), x.cols(), data)
}

/// Writes `rows` back into the masked positions of `base`.
pub fn scatter_subject<T: Scalar>(
    base: &TokenMatrix<T>,
    m: &SubjectMask,
    rows: &TokenMatrix<T>,
) -> Result<TokenMatrix<T>> {
    if m.len() != base.rows() {
        return Err(Error::Shape(format!(
            "mask covers {} tokens, features have {}",
            m.len(),
            base.rows()
        )));
    }
    if m.count() != rows.rows() || rows.cols() != base.cols() {
        return Err(Error::Shape(format!(
            "mask selects {} tokens of width {}, got {}x{} replacement",
            m.count(),
            base.cols(),
            rows.rows(),
            rows.cols()
        )));
    }
    let mut out = base.clone();
    for (src, dst) in m.indices().enumerate() {
        out.row_mut(dst).copy_from_slice(rows.row(src));
    }
    Ok(out)
}

/// Softmax of the masked saliencies.
pub fn importance_weights<T: Real>(
    s: &SaliencyMap<T>,
    m: &SubjectMask,
) -> Result<ProbabilityVector<T>> {
    if s.values.len() != m.len() {
        return Err(Error::Shape(format!(
            "saliency covers {} tokens, mask {}",
            s.values.len(),
            m.len()
        )));
    }
    if m.count() == 0 {
        return Err(Error::Empty("subject mask selects no tokens".into()));
    }
    let masked: Vec<T> = m.indices().map(|i| s.values[i]).collect();
    ProbabilityVector::new(softmax(&masked))
}

/// Mask, threshold and masses for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRegion<T> {
    pub saliency: SaliencyMap<T>,
    pub otsu: OtsuResult<T>,
    pub masses: ProbabilityVector<T>,
}

impl<T: Real> SubjectRegion<T> {
    pub fn from_attention(stack: &AttentionStack<T>) -> Result<Self> {
        let saliency = average_attention(stack);
        let otsu = otsu_threshold(&saliency)?;
        let masses = importance_weights(&saliency, &otsu.mask)?;
        Ok(Self {
            saliency,
            otsu,
            masses,
        })
    }

    pub fn mask(&self) -> &SubjectMask {
        &self.otsu.mask
    }
}
