//! Seeded desk-scale fixtures: token features, attention stacks with a
//! subject blob, keypoint sets and complete pipeline input sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{ImageKeypoints, KeypointFile, KeypointGroupFile};
use crate::mask::AttentionStack;
use crate::matrix::TokenMatrix;
use crate::pipeline::{PipelineInputs, SubjectInputs};
use crate::tensor::Tensor;

pub const GRID_SIDE: usize = 8;
pub const FEATURE_DIM: usize = 16;
pub const LAYERS: usize = 3;
pub const SUBJECT_TOKENS: usize = 2;
pub const JOINTS: usize = 17;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn centered(r: &mut impl Rng, scale: f64) -> f64 {
    (r.random::<f64>() * 2.0 - 1.0) * scale
}

/// `(GRID_SIDE², FEATURE_DIM)` token features.
pub fn features(seed: u64) -> TokenMatrix<f64> {
    let mut r = rng(seed);
    let n = GRID_SIDE * GRID_SIDE * FEATURE_DIM;
    TokenMatrix::new(
        GRID_SIDE * GRID_SIDE,
        FEATURE_DIM,
        (0..n).map(|_| centered(&mut r, 1.0)).collect(),
    )
    .expect("fixed shape")
}

/// Attention maps that are high inside a disc on the token grid.
pub fn attention_from(r: &mut impl Rng) -> AttentionStack<f64> {
    let cx = 2.0 + r.random::<f64>() * (GRID_SIDE as f64 - 4.0);
    let cy = 2.0 + r.random::<f64>() * (GRID_SIDE as f64 - 4.0);
    let radius = 1.5 + r.random::<f64>();
    let layers = (0..LAYERS)
        .map(|_| {
            let mut m = TokenMatrix::zeros(GRID_SIDE * GRID_SIDE, SUBJECT_TOKENS);
            for t in 0..GRID_SIDE * GRID_SIDE {
                let (y, x) = ((t / GRID_SIDE) as f64, (t % GRID_SIDE) as f64);
                let inside = (x - cx).hypot(y - cy) <= radius;
                for s in 0..SUBJECT_TOKENS {
                    let base = if inside { 2.0 } else { 0.2 };
                    m.set(t, s, base + centered(r, 0.3));
                }
            }
            m
        })
        .collect();
    AttentionStack::new(layers).expect("consistent layers")
}

pub fn attention(seed: u64) -> AttentionStack<f64> {
    attention_from(&mut rng(seed))
}

/// A COCO-sized skeleton placed with a random similarity transform, with
/// noisy joints and random confidences.
pub fn keypoint_file(seed: u64, sets: usize, images_per_set: usize) -> KeypointFile {
    let mut r = rng(seed);
    let skeleton: Vec<[f64; 2]> = (0..JOINTS)
        .map(|k| {
            let angle = k as f64 / JOINTS as f64 * std::f64::consts::TAU;
            [0.5 * angle.cos() + centered(&mut r, 0.2), angle.sin() + centered(&mut r, 0.2)]
        })
        .collect();
    let groups = (0..sets)
        .map(|g| KeypointGroupFile {
            id: format!("set-{g}"),
            images: (0..images_per_set)
                .map(|i| {
                    let theta = centered(&mut r, 0.5);
                    let scale = 0.15 + r.random::<f64>() * 0.1;
                    let (tx, ty) = (0.5 + centered(&mut r, 0.1), 0.5 + centered(&mut r, 0.1));
                    let (s, c) = theta.sin_cos();
                    let keypoints = skeleton
                        .iter()
                        .map(|p| {
                            let x = p[0] + centered(&mut r, 0.15);
                            let y = p[1] + centered(&mut r, 0.15);
                            let px = (scale * (c * x - s * y) + tx).clamp(0.0, 1.0);
                            let py = (scale * (s * x + c * y) + ty).clamp(0.0, 1.0);
                            let conf = 0.3 + 0.7 * r.random::<f64>();
                            [round6(px), round6(py), round6(conf)]
                        })
                        .collect();
                    ImageKeypoints {
                        id: format!("set-{g}/img-{i}"),
                        keypoints,
                    }
                })
                .collect(),
        })
        .collect();
    KeypointFile {
        images: None,
        sets: Some(groups),
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Reference plus `targets` images whose subject tokens share one prototype.
pub fn pipeline_inputs(seed: u64, targets: usize) -> PipelineInputs<f64> {
    let mut r = rng(seed);
    let prototype: Vec<f64> = (0..FEATURE_DIM).map(|_| centered(&mut r, 1.0)).collect();
    let subject = |r: &mut ChaCha8Rng| {
        let attention = attention_from(r);
        let saliency = crate::mask::average_attention(&attention);
        let mut init = TokenMatrix::zeros(GRID_SIDE * GRID_SIDE, FEATURE_DIM);
        for t in 0..GRID_SIDE * GRID_SIDE {
            let on_subject = saliency.values[t] > 1.0;
            for (k, v) in init.row_mut(t).iter_mut().enumerate() {
                let base = if on_subject { prototype[k] } else { 0.0 };
                *v = base + centered(r, 0.5);
            }
        }
        SubjectInputs {
            init,
            attention,
            features: None,
        }
    };
    let reference = subject(&mut r);
    let targets = (0..targets).map(|_| subject(&mut r)).collect();
    PipelineInputs { reference, targets }
}

pub fn features_tensor(seed: u64) -> Tensor {
    Tensor::from_matrix(&features(seed))
}
