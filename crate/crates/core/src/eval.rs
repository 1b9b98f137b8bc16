//! Evaluation protocol: pairwise averaging within image sets, dataset
//! averaging across sets, Procrustes-aligned pose diversity and
//! embedding-based consistency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::TokenMatrix;
use crate::scalar::{dot, norm, Real, Scalar};

pub const DEFAULT_TAU: f64 = 0.7;
pub const MIN_COMMON_KEYPOINTS: usize = 3;

/// Normalized 2D joints of one image with their detector confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet<T> {
    points: Vec<[T; 2]>,
    confidences: Vec<T>,
}

impl<T: Scalar> KeypointSet<T> {
    pub fn new(points: Vec<[T; 2]>, confidences: Vec<T>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("keypoint set".into()));
        }
        if points.len() != confidences.len() {
            return Err(Error::Shape(format!(
                "{} keypoints but {} confidences",
                points.len(),
                confidences.len()
            )));
        }
        if points
            .iter()
            .flatten()
            .chain(&confidences)
            .any(|v| !v.is_finite_scalar())
        {
            return Err(Error::Validation("keypoints must be finite".into()));
        }
        Ok(Self {
            points,
            confidences,
        })
    }

    /// Every joint fully confident.
    pub fn confident(points: Vec<[T; 2]>) -> Result<Self> {
        let conf = vec![T::one(); points.len()];
        Self::new(points, conf)
    }

    pub fn points(&self) -> &[[T; 2]] {
        &self.points
    }

    pub fn confidences(&self) -> &[T] {
        &self.confidences
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Joints whose confidence is at least `tau` in both images, with no
/// minimum count.
pub fn valid_intersection<T: Scalar>(conf_i: &[T], conf_j: &[T], tau: T) -> Result<Vec<usize>> {
    if conf_i.len() != conf_j.len() {
        return Err(Error::Shape(format!(
            "joint counts differ: {} vs {}",
            conf_i.len(),
            conf_j.len()
        )));
    }
    Ok(conf_i
        .iter()
        .zip(conf_j)
        .enumerate()
        .filter(|(_, (&ci, &cj))| ci >= tau && cj >= tau)
        .map(|(k, _)| k)
        .collect())
}

/// Joints whose confidence is at least `tau` in both images.
pub fn filter_common<T: Scalar>(
    kp_i: &KeypointSet<T>,
    kp_j: &KeypointSet<T>,
    tau: T,
) -> Result<Vec<usize>> {
    let common = valid_intersection(&kp_i.confidences, &kp_j.confidences, tau)?;
    if common.len() < MIN_COMMON_KEYPOINTS {
        return Err(Error::InsufficientKeypoints {
            common: common.len(),
            required: MIN_COMMON_KEYPOINTS,
        });
    }
    Ok(common)
}

/// Whether the orthogonal factor may be a reflection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationConstraint {
    #[default]
    AllowReflection,
    Proper,
}

/// Frame in which aligned joints are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceFrame {
    /// `γ·p̄_i R` against `p̄_j`, both centered and unit-normalized.
    #[default]
    Normalized,
    /// `γ·p̄_i R + µ_j` against the raw target joints.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoseOptions {
    pub rotation: RotationConstraint,
    pub frame: DistanceFrame,
}

/// Singular value decomposition `M = U·diag(σ1, σ2)·Vᵀ` of a 2×2 matrix,
/// with `σ1 ≥ σ2 ≥ 0`, `Vᵀ` a rotation and `det U = ±1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd2<T> {
    pub u: [[T; 2]; 2],
    pub sigma: [T; 2],
    pub vt: [[T; 2]; 2],
}

fn rotation<T: Real>(angle: T) -> [[T; 2]; 2] {
    let (s, c) = angle.sin_cos();
    [[c, -s], [s, c]]
}

fn matmul2<T: Real>(a: [[T; 2]; 2], b: [[T; 2]; 2]) -> [[T; 2]; 2] {
    let mut out = [[T::zero(); 2]; 2];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
    }
    out
}

fn transpose2<T: Real>(a: [[T; 2]; 2]) -> [[T; 2]; 2] {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Closed-form 2×2 SVD: `M = Rot(φ)·diag(Q+R, Q−R)·Rot(θ)`.
pub fn svd2<T: Real>(m: [[T; 2]; 2]) -> Svd2<T> {
    let two = T::one() + T::one();
    let [[a, b], [c, d]] = m;
    let e = (a + d) / two;
    let f = (a - d) / two;
    let g = (c + b) / two;
    let h = (c - b) / two;
    let q = e.hypot(h);
    let r = f.hypot(g);
    let (s1, s2) = (q + r, q - r);
    let a1 = g.atan2(f);
    let a2 = h.atan2(e);
    let theta = (a2 - a1) / two;
    let phi = (a2 + a1) / two;
    let mut u = rotation(phi);
    if s2 < T::zero() {
        u[0][1] = -u[0][1];
        u[1][1] = -u[1][1];
    }
    Svd2 {
        u,
        sigma: [s1, s2.abs()],
        vt: rotation(theta),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult<T> {
    /// Orthogonal map acting on row vectors: aligned = `γ·p̄_i·rotation`.
    pub rotation: [[T; 2]; 2],
    pub scale: T,
    /// `γ·p̄_i·R` in the normalized frame.
    pub aligned: Vec<[T; 2]>,
    /// `p̄_j`, the centered and unit-normalized target.
    pub target: Vec<[T; 2]>,
    pub source_centroid: [T; 2],
    pub target_centroid: [T; 2],
    /// Indices of the joints that took part (all joints for raw alignment).
    pub common_indices: Vec<usize>,
}

impl<T: Real> AlignmentResult<T> {
    /// `γ·p̄_i·R + µ_j`.
    pub fn aligned_in_target_frame(&self) -> Vec<[T; 2]> {
        self.aligned
            .iter()
            .map(|p| [p[0] + self.target_centroid[0], p[1] + self.target_centroid[1]])
            .collect()
    }
}

fn centered_unit<T: Real>(p: &[[T; 2]]) -> Result<([T; 2], Vec<[T; 2]>)> {
    let n = T::from_count(p.len());
    let mu = p
        .iter()
        .fold([T::zero(); 2], |acc, q| [acc[0] + q[0], acc[1] + q[1]]);
    let mu = [mu[0] / n, mu[1] / n];
    let centered: Vec<[T; 2]> = p.iter().map(|q| [q[0] - mu[0], q[1] - mu[1]]).collect();
    let flat: Vec<T> = centered.iter().flatten().copied().collect();
    let scale = norm(&flat);
    if !(scale > T::from_f64_lossy(1e-12)) {
        return Err(Error::DegenerateShape);
    }
    Ok((
        mu,
        centered.iter().map(|q| [q[0] / scale, q[1] / scale]).collect(),
    ))
}

/// Similarity Procrustes alignment of `p_i` onto `p_j` (same joint order).
pub fn procrustes_align<T: Real>(
    p_i: &[[T; 2]],
    p_j: &[[T; 2]],
    constraint: RotationConstraint,
) -> Result<AlignmentResult<T>> {
    if p_i.len() != p_j.len() {
        return Err(Error::Shape(format!(
            "point counts differ: {} vs {}",
            p_i.len(),
            p_j.len()
        )));
    }
    if p_i.len() < MIN_COMMON_KEYPOINTS {
        return Err(Error::InsufficientKeypoints {
            common: p_i.len(),
            required: MIN_COMMON_KEYPOINTS,
        });
    }
    let (mu_i, bar_i) = centered_unit(p_i)?;
    let (mu_j, bar_j) = centered_unit(p_j)?;

    // p̄_iᵀ p̄_j
    let mut cross = [[T::zero(); 2]; 2];
    for (x, y) in bar_i.iter().zip(&bar_j) {
        for r in 0..2 {
            for c in 0..2 {
                cross[r][c] = cross[r][c] + x[r] * y[c];
            }
        }
    }
    let svd = svd2(cross);
    let reflection = {
        let u = svd.u;
        u[0][0] * u[1][1] - u[0][1] * u[1][0] < T::zero()
    };
    let (u, trace) = if constraint == RotationConstraint::Proper && reflection {
        // Flip the singular vector of the smaller singular value.
        let mut u = svd.u;
        u[0][1] = -u[0][1];
        u[1][1] = -u[1][1];
        (u, svd.sigma[0] - svd.sigma[1])
    } else {
        (svd.u, svd.sigma[0] + svd.sigma[1])
    };
    // Minimizes ‖p̄_i R − p̄_j‖ over orthogonal R for row-vector points.
    let rot = matmul2(u, svd.vt);
    // Both sets have unit norm, so the least-squares scale is the trace.
    let scale = trace;
    let aligned = bar_i
        .iter()
        .map(|p| {
            [
                scale * (p[0] * rot[0][0] + p[1] * rot[1][0]),
                scale * (p[0] * rot[0][1] + p[1] * rot[1][1]),
            ]
        })
        .collect();
    Ok(AlignmentResult {
        rotation: rot,
        scale,
        aligned,
        target: bar_j,
        source_centroid: mu_i,
        target_centroid: mu_j,
        common_indices: (0..p_i.len()).collect(),
    })
}

pub fn is_orthogonal<T: Real>(r: [[T; 2]; 2], tol: T) -> bool {
    let g = matmul2(transpose2(r), r);
    (g[0][0] - T::one()).abs() <= tol
        && (g[1][1] - T::one()).abs() <= tol
        && g[0][1].abs() <= tol
        && g[1][0].abs() <= tol
}

fn mean_distance<T: Real>(a: &[[T; 2]], b: &[[T; 2]]) -> T {
    let total = a.iter().zip(b).fold(T::zero(), |acc, (p, q)| {
        acc + (p[0] - q[0]).hypot(p[1] - q[1])
    });
    total / T::from_count(a.len())
}

/// Mean joint distance after Procrustes alignment over the common joints.
pub fn pose_distance<T: Real>(
    kp_i: &KeypointSet<T>,
    kp_j: &KeypointSet<T>,
    tau: T,
    opts: PoseOptions,
) -> Result<T> {
    let common = filter_common(kp_i, kp_j, tau)?;
    let p_i: Vec<[T; 2]> = common.iter().map(|&k| kp_i.points[k]).collect();
    let p_j: Vec<[T; 2]> = common.iter().map(|&k| kp_j.points[k]).collect();
    let mut alignment = procrustes_align(&p_i, &p_j, opts.rotation)?;
    alignment.common_indices = common;
    Ok(match opts.frame {
        DistanceFrame::Normalized => mean_distance(&alignment.aligned, &alignment.target),
        DistanceFrame::Literal => mean_distance(&alignment.aligned_in_target_frame(), &p_j),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseAverage<T> {
    pub score: T,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Mean of `f` over the `N(N−1)/2` unordered pairs `(n, j)`, `n < j`,
/// visited in lexicographic order. Pairs on which `f` fails are skipped and
/// counted.
pub fn pairwise_average<X, T: Scalar>(
    items: &[X],
    mut f: impl FnMut(&X, &X) -> Result<T>,
) -> Result<PairwiseAverage<T>> {
    if items.len() < 2 {
        return Err(Error::Empty(format!(
            "pairwise averaging needs at least two items, got {}",
            items.len()
        )));
    }
    let mut total = T::zero();
    let (mut evaluated, mut skipped) = (0, 0);
    for (n, x) in items.iter().enumerate() {
        for y in &items[n + 1..] {
            match f(x, y) {
                Ok(v) => {
                    total = total + v;
                    evaluated += 1;
                }
                Err(_) => skipped += 1,
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::NoValidPairs { skipped });
    }
    Ok(PairwiseAverage {
        score: total / T::from_count(evaluated),
        evaluated,
        skipped,
    })
}

pub fn dataset_average<T: Scalar>(set_scores: &[T]) -> Result<T> {
    if set_scores.is_empty() {
        return Err(Error::Empty("no set scores".into()));
    }
    let total = set_scores.iter().fold(T::zero(), |acc, &v| acc + v);
    Ok(total / T::from_count(set_scores.len()))
}

/// One embedding per generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    vectors: TokenMatrix<T>,
}

impl<T: Real> EmbeddingSet<T> {
    pub fn new(vectors: TokenMatrix<T>) -> Result<Self> {
        vectors.ensure_finite("embeddings")?;
        if let Some(row) = vectors.iter_rows().position(|r| !(norm(r) > T::zero())) {
            return Err(Error::Validation(format!("embedding {row} has zero norm")));
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &TokenMatrix<T> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyKind {
    Similarity,
    Distance,
}

impl std::str::FromStr for ConsistencyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "distance" => Ok(Self::Distance),
            other => Err(Error::Parameter(format!(
                "kind must be similarity or distance, got {other:?}"
            ))),
        }
    }
}

pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> T {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.max(-T::one()).min(T::one())
}

/// Average pairwise cosine similarity (or `1 − similarity`).
pub fn embedding_consistency<T: Real>(
    e: &EmbeddingSet<T>,
    kind: ConsistencyKind,
) -> Result<PairwiseAverage<T>> {
    let rows: Vec<&[T]> = e.vectors.iter_rows().collect();
    pairwise_average(&rows, |a, b| {
        let s = cosine_similarity(a, b);
        Ok(match kind {
            ConsistencyKind::Similarity => s,
            ConsistencyKind::Distance => T::one() - s,
        })
    })
}

/// Keypoints of every image in one generated set.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGroup<T> {
    pub id: String,
    pub images: Vec<KeypointSet<T>>,
}

pub fn pose_diversity<T: Real>(
    images: &[KeypointSet<T>],
    tau: T,
    opts: PoseOptions,
) -> Result<PairwiseAverage<T>> {
    pairwise_average(images, |a, b| pose_distance(a, b, tau, opts))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetScore {
    pub id: String,
    /// `None` when no pair in the set could be evaluated.
    pub score: Option<f64>,
    pub skipped_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseReport {
    pub per_set: Vec<SetScore>,
    pub overall: f64,
}

/// Pose diversity per set and averaged over sets that had a valid pair.
pub fn pose_report<T: Real>(
    groups: &[PoseGroup<T>],
    tau: T,
    opts: PoseOptions,
) -> Result<PoseReport> {
    let mut per_set = Vec::with_capacity(groups.len());
    let mut scores = Vec::new();
    for g in groups {
        let total_pairs = g.images.len() * g.images.len().saturating_sub(1) / 2;
        match pose_diversity(&g.images, tau, opts) {
            Ok(avg) => {
                scores.push(avg.score);
                per_set.push(SetScore {
                    id: g.id.clone(),
                    score: Some(avg.score.to_f64_lossy()),
                    skipped_pairs: avg.skipped,
                });
            }
            Err(Error::NoValidPairs { skipped }) => per_set.push(SetScore {
                id: g.id.clone(),
                score: None,
                skipped_pairs: skipped,
            }),
            Err(Error::Empty(_)) => per_set.push(SetScore {
                id: g.id.clone(),
                score: None,
                skipped_pairs: total_pairs,
            }),
            Err(e) => return Err(e),
        }
    }
    if scores.is_empty() {
        return Err(Error::NoValidPairs {
            skipped: per_set.iter().map(|s| s.skipped_pairs).sum(),
        });
    }
    let overall = dataset_average(&scores)?.to_f64_lossy();
    Ok(PoseReport { per_set, overall })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauPoint {
    pub tau: f64,
    pub score: f64,
}

/// Dataset pose diversity at each confidence threshold.
pub fn tau_sweep<T: Real>(
    groups: &[PoseGroup<T>],
    taus: &[T],
    opts: PoseOptions,
) -> Result<Vec<TauPoint>> {
    if taus.is_empty() || groups.is_empty() {
        return Err(Error::Empty("tau sweep needs thresholds and sets".into()));
    }
    taus.iter()
        .map(|&tau| {
            pose_report(groups, tau, opts).map(|r| TauPoint {
                tau: tau.to_f64_lossy(),
                score: r.overall,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageKeypoints {
    pub id: String,
    /// `[x, y, confidence]` per joint, coordinates normalized to `[0, 1]`.
    pub keypoints: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointGroupFile {
    pub id: String,
    pub images: Vec<ImageKeypoints>,
}

/// Either a single set (`images`) or several (`sets`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KeypointFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<ImageKeypoints>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sets: Option<Vec<KeypointGroupFile>>,
}

fn image_to_set(img: &ImageKeypoints) -> Result<KeypointSet<f64>> {
    for (k, &[x, y, c]) in img.keypoints.iter().enumerate() {
        for (name, v) in [("x", x), ("y", y), ("confidence", c)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "image {} joint {k}: {name} = {v} outside [0, 1]",
                    img.id
                )));
            }
        }
    }
    KeypointSet::new(
        img.keypoints.iter().map(|&[x, y, _]| [x, y]).collect(),
        img.keypoints.iter().map(|&[_, _, c]| c).collect(),
    )
}

impl KeypointFile {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Format(format!("keypoint JSON: {e}")))
    }

    pub fn groups(&self) -> Result<Vec<PoseGroup<f64>>> {
        let mut groups = Vec::new();
        if let Some(images) = &self.images {
            groups.push(PoseGroup {
                id: "0".into(),
                images: images.iter().map(image_to_set).collect::<Result<_>>()?,
            });
        }
        for g in self.sets.iter().flatten() {
            groups.push(PoseGroup {
                id: g.id.clone(),
                images: g.images.iter().map(image_to_set).collect::<Result<_>>()?,
            });
        }
        if groups.is_empty() {
            return Err(Error::Format(
                "keypoint JSON needs an \"images\" or \"sets\" field".into(),
            ));
        }
        Ok(groups)
    }
}
