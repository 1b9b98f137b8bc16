//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use codi::eval::valid_intersection;
use codi::mask::SaliencyMap;
use codi::ot::transport_weights;
use codi::pipeline::{vanilla_trajectory, PipelineInputs, SubjectInputs};
use codi::refine::{attention, cross_image_scores, Normalization};
use codi::{
    dataset_average, filter_common, otsu_threshold, pairwise_average, pose_distance,
    refine_attention, run_pipeline, select_top_alpha, solve_ot, synth, transport_features,
    AttentionStack, CostMatrix, DistanceFrame, Error, KeypointSet, PipelineConfig, PoseOptions,
    ProbabilityVector, Rational, RotationConstraint, SelectionSet, Stage, TokenMatrix,
};
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_costs(r: &mut impl Rng, m: usize, n: usize) -> Vec<Vec<f64>> {
    let quantized = r.random_bool(0.3);
    (0..m)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if quantized {
                        r.random_range(0..=8) as f64 * 0.25
                    } else {
                        r.random::<f64>() * 2.0
                    }
                })
                .collect()
        })
        .collect()
}

fn ot_optimality() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut solver_time = Duration::ZERO;
    let (mut worst_gap, mut worst_residual) = (0.0f64, 0.0f64);
    for case in 0..500 {
        let m = r.random_range(1..=4);
        let n = r.random_range(1..=4);
        let allow_zero = case % 5 == 0;
        let a_units = grid_masses(&mut r, m, allow_zero);
        let b_units = grid_masses(&mut r, n, allow_zero);
        let costs = random_costs(&mut r, m, n);
        let (a, b) = (to_probabilities(&a_units), to_probabilities(&b_units));
        let c = CostMatrix::from_rows(&costs).unwrap();

        let start = Instant::now();
        let plan = solve_ot(&a, &b, &c).map_err(|e| format!("case {case}: {e}"))?;
        solver_time += start.elapsed();

        let gap = (plan.objective() - ssp_objective(&a_units, &b_units, &costs)).abs();
        let (row, col) = plan.marginal_residuals(a.weights(), b.weights());
        worst_gap = worst_gap.max(gap);
        worst_residual = worst_residual.max(row).max(col);
        ensure(gap <= 1e-6, || format!("case {case}: objective gap {gap:e}"))?;
        ensure(row.max(col) <= 1e-8, || {
            format!("case {case}: marginal residual {:e}", row.max(col))
        })?;
        ensure(plan.matrix().data().iter().all(|&v| v >= 0.0), || {
            format!("case {case}: negative flow")
        })?;
    }
    ensure(solver_time < Duration::from_secs(5), || {
        format!("solver took {solver_time:?}")
    })?;
    Ok(format!(
        "500 instances, max gap {worst_gap:.1e}, max residual {worst_residual:.1e}, solver {:.1} ms",
        solver_time.as_secs_f64() * 1e3
    ))
}

fn assignment_reduction() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let n = r.random_range(1..=5);
        let costs: Vec<Vec<Rational>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| Rational::new(r.random_range(0..=40), r.random_range(1..=8)))
                    .collect()
            })
            .collect();
        let u = ProbabilityVector::<Rational>::uniform(n);
        let plan = solve_ot(&u, &u, &CostMatrix::from_rows(&costs).unwrap())
            .map_err(|e| format!("case {case}: {e}"))?;
        let scaled = plan.objective() * Rational::from_integer(n as i128);
        let best = min_over_permutations(&costs);
        ensure(scaled == best, || {
            format!("case {case}: n·objective {scaled} vs permutation minimum {best}")
        })?;
    }
    Ok("100 exact rational instances, n·objective equals the permutation minimum".into())
}

fn transport_convexity() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let n = r.random_range(1..=6);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let costs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if perm[i] == j { 0.0 } else { 0.5 + r.random::<f64>() })
                    .collect()
            })
            .collect();
        let u = ProbabilityVector::uniform(n);
        let plan = solve_ot(&u, &u, &CostMatrix::from_rows(&costs).unwrap()).unwrap();
        let reference = random_matrix(&mut r, n, 5, 3.0);
        let moved = transport_features(&plan, &reference, Default::default()).unwrap();
        for i in 0..n {
            ensure(moved.row(perm[i]) == reference.row(i), || {
                format!("permutation case {case}: row {i} not reproduced exactly")
            })?;
        }
    }
    let mut worst = 0.0f64;
    for case in 0..500 {
        let m = r.random_range(1..=6);
        let n = r.random_range(1..=6);
        let a = to_probabilities(&grid_masses(&mut r, m, false));
        let b = to_probabilities(&grid_masses(&mut r, n, false));
        let costs = random_costs(&mut r, m, n);
        let plan = solve_ot(&a, &b, &CostMatrix::from_rows(&costs).unwrap()).unwrap();
        let w = transport_weights(&plan, Default::default()).unwrap();
        for row in w.iter_rows() {
            let dev = (row.iter().sum::<f64>() - 1.0).abs();
            worst = worst.max(dev);
            ensure(dev <= 1e-9 && row.iter().all(|&v| v >= 0.0), || {
                format!("general case {case}: weight row {row:?}")
            })?;
        }
    }
    Ok(format!(
        "100 permutation plans reproduced exactly; 500 general plans, max weight-sum deviation {worst:.1e}"
    ))
}

fn random_saliency(r: &mut impl Rng) -> Vec<f64> {
    let len = r.random_range(2..=300);
    match r.random_range(0..4) {
        0 => (0..len).map(|_| r.random::<f64>()).collect(),
        1 => (0..len)
            .map(|_| {
                if r.random_bool(0.3) {
                    2.0 + r.random::<f64>() * 0.5
                } else {
                    r.random::<f64>() * 0.5
                }
            })
            .collect(),
        // Values landing exactly on histogram edges.
        2 => (0..len).map(|_| r.random_range(0..=256) as f64 / 256.0).collect(),
        _ => {
            let levels: Vec<f64> = (0..r.random_range(1..=4)).map(|_| r.random::<f64>() * 10.0 - 5.0).collect();
            (0..len).map(|_| levels[r.random_range(0..levels.len())]).collect()
        }
    }
}

fn otsu_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut degenerate = 0;
    for case in 0..1000 {
        let values = random_saliency(&mut r);
        let got = otsu_threshold(&SaliencyMap { values: values.clone() }).unwrap();
        match otsu_scan(&values) {
            Some((k, mask)) => {
                ensure(got.bin == Some(k), || {
                    format!("map {case}: bin {:?}, scan {k}", got.bin)
                })?;
                ensure(got.mask.bits() == mask.as_slice(), || format!("map {case}: masks differ"))?;
            }
            None => {
                degenerate += 1;
                ensure(got.degenerate && got.mask.count() == values.len(), || {
                    format!("map {case}: expected the full mask")
                })?;
            }
        }
    }
    Ok(format!(
        "1000 maps, bins agree exactly ({degenerate} constant maps give the full mask)"
    ))
}

fn attention_filtering() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_full, mut worst_sum) = (0.0f64, 0.0f64);
    for case in 0..200 {
        let b = random_bundle(&mut r);
        let nr = b.reference_keys();
        let full = refine_attention(&b, &SelectionSet::all(nr)).unwrap();
        let keys = b.k_target.vstack(&b.k_reference).unwrap();
        let values = b.v_target.vstack(&b.v_reference).unwrap();
        let plain = attention(&b.q_target, &keys, &values).unwrap();
        let diff = full.max_abs_diff(&plain);
        worst_full = worst_full.max(diff);
        ensure(diff <= 1e-6, || format!("bundle {case}: α = 1 differs by {diff:e}"))?;

        let scores: Vec<f64> = (0..nr).map(|_| r.random::<f64>()).collect();
        let alpha = r.random_range(1..=10) as f64 / 10.0;
        let sel = select_top_alpha(&scores, alpha).unwrap();
        let filtered = codi::filter_and_renormalize(
            &cross_image_scores(&b),
            &sel,
            b.target_keys(),
            Normalization::Retained,
        )
        .unwrap();
        for row in filtered.iter_rows() {
            let dev = (row.iter().sum::<f64>() - 1.0).abs();
            worst_sum = worst_sum.max(dev);
            ensure(dev <= 1e-6 && row.iter().all(|&v| v >= 0.0), || {
                format!("bundle {case}: filtered row sums to 1 + {dev:e}")
            })?;
        }
        let refined = refine_attention(&b, &sel).unwrap();
        let dense = dense_refine(&b, &|j| sel.contains(j));
        for (got, want) in refined.iter_rows().zip(&dense) {
            for (g, w) in got.iter().zip(want) {
                ensure((g - w).abs() <= 1e-9, || format!("bundle {case}: dense evaluator disagrees"))?;
            }
        }

        // Another target sharing the reference and selection.
        let mut other = bundle_for_reference(&mut r, &b.k_reference, &b.v_reference);
        let before = refine_attention(&b, &sel).unwrap();
        let _ = refine_attention(&other, &sel).unwrap();
        other.q_target = other.q_target.map(|v| v + 1.0);
        other.k_target = other.k_target.map(|v| v * 3.0);
        let _ = refine_attention(&other, &sel).unwrap();
        ensure(refine_attention(&b, &sel).unwrap() == before, || {
            format!("bundle {case}: output changed after touching another target")
        })?;
    }

    // Pipeline-level check: with every reference token selected, target 0's
    // trajectory ignores target 1 entirely.
    let base = synth::pipeline_inputs(11, 2);
    let mut perturbed = base.clone();
    perturbed.targets[1].init = perturbed.targets[1].init.map(|v| v * 1.5 + 0.25);
    let cfg = PipelineConfig {
        alpha: 1.0,
        total_steps: 20,
        t_switch: 5,
        ..Default::default()
    };
    let a = run_pipeline(&cfg, &base).unwrap();
    let b = run_pipeline(&cfg, &perturbed).unwrap();
    ensure(a.target_trajectories[0] == b.target_trajectories[0], || {
        "pipeline: target 0 changed when target 1 was perturbed".into()
    })?;
    ensure(a.target_trajectories[1] != b.target_trajectories[1], || {
        "pipeline: perturbation had no effect".into()
    })?;
    Ok(format!(
        "200 bundles, α = 1 max diff {worst_full:.1e}, max row-sum deviation {worst_sum:.1e}, no-entanglement bitwise"
    ))
}

fn procrustes_invariance() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let joints = r.random_range(3..=17);
        let p = random_points(&mut r, joints);
        let scale = 0.1 * 100f64.powf(r.random::<f64>());
        let angle = r.random::<f64>() * std::f64::consts::TAU;
        let shift = [r.random::<f64>() * 4.0 - 2.0, r.random::<f64>() * 4.0 - 2.0];
        let q = similarity_transform(&p, scale, angle, shift);
        let kp_p = KeypointSet::confident(p).unwrap();
        let kp_q = KeypointSet::confident(q).unwrap();
        for rotation in [RotationConstraint::AllowReflection, RotationConstraint::Proper] {
            let opts = PoseOptions { rotation, frame: DistanceFrame::Normalized };
            let d = pose_distance(&kp_p, &kp_q, 1.0, opts).unwrap();
            worst = worst.max(d);
            ensure(d <= 1e-9, || format!("draw {case}: distance {d:e}"))?;
        }
    }
    let mut worst_oracle = 0.0f64;
    for case in 0..100 {
        let joints = r.random_range(3..=17);
        let p = random_points(&mut r, joints);
        let q = random_points(&mut r, joints);
        let kp_p = KeypointSet::confident(p.clone()).unwrap();
        let kp_q = KeypointSet::confident(q.clone()).unwrap();
        for (rotation, reflect) in [
            (RotationConstraint::AllowReflection, true),
            (RotationConstraint::Proper, false),
        ] {
            let opts = PoseOptions { rotation, frame: DistanceFrame::Normalized };
            let d = pose_distance(&kp_p, &kp_q, 1.0, opts).unwrap();
            let oracle = rotation_scan_distance(&p, &q, reflect);
            let gap = (d - oracle).abs();
            worst_oracle = worst_oracle.max(gap);
            ensure(gap <= 1e-4, || {
                format!("pair {case}: {d} vs rotation scan {oracle} ({rotation:?})")
            })?;
        }
    }
    Ok(format!(
        "1000 similarity draws, max distance {worst:.1e}; 100 random pairs, max oracle gap {worst_oracle:.1e}"
    ))
}

fn protocol_arithmetic() -> Outcome {
    let tenth = |k: i128| Rational::new(k, 10);
    // Pair (n, j) with n < j gets value k/10, k counting pairs in order.
    let table = |n: usize, j: usize| -> Rational {
        let order = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)];
        let k = order.iter().position(|&p| p == (n, j)).unwrap();
        tenth(k as i128 + 1)
    };
    let items: Vec<usize> = (0..5).collect();
    let mut calls = 0;
    let avg = pairwise_average(&items, |&n, &j| {
        calls += 1;
        Ok(table(n, j))
    })
    .unwrap();
    // (0.1 + 0.2 + … + 1.0) / 10 = 5.5 / 10
    let hand = Rational::new(11, 20);
    ensure(calls == 10 && avg.evaluated == 10, || format!("{calls} pair evaluations"))?;
    ensure(avg.score == hand, || format!("u_k = {}, expected {hand}", avg.score))?;

    let sets = [hand, Rational::new(1, 4), Rational::new(3, 10)];
    let mean = dataset_average(&sets).unwrap();
    ensure(mean == Rational::new(11, 30), || format!("dataset mean {mean}"))?;

    let kept = valid_intersection(&[0.9, 0.5, 0.8], &[0.9, 0.9, 0.6], 0.7).unwrap();
    ensure(kept == vec![0], || format!("intersection {kept:?}"))?;
    let kp = |c: &[f64]| KeypointSet::new(vec![[0.1, 0.2], [0.5, 0.9], [0.7, 0.3]], c.to_vec()).unwrap();
    let err = filter_common(&kp(&[0.9, 0.5, 0.8]), &kp(&[0.9, 0.9, 0.6]), 0.7).unwrap_err();
    ensure(
        matches!(err, Error::InsufficientKeypoints { common: 1, .. }),
        || format!("expected insufficient keypoints, got {err}"),
    )?;
    Ok("u_k = 11/20 over exactly 10 pairs; dataset mean 11/30; τ = 0.7 keeps {0}".into())
}

fn self_transport_inputs(attention: AttentionStack<f64>) -> PipelineInputs<f64> {
    let base = synth::pipeline_inputs(21, 1);
    let subject = SubjectInputs {
        init: base.reference.init.clone(),
        attention,
        features: None,
    };
    PipelineInputs {
        reference: subject.clone(),
        targets: vec![subject],
    }
}

fn pipeline_determinism(suite_start: Instant) -> Outcome {
    let cfg = PipelineConfig::default();
    let stages: Vec<Stage> = (1..=50).map(|t| cfg.stage(t)).collect();
    let inputs = synth::pipeline_inputs(7, 2);
    let first = run_pipeline(&cfg, &inputs).unwrap();
    let second = run_pipeline(&cfg, &inputs).unwrap();
    ensure(first.stages == stages, || "recorded stages differ from the schedule".into())?;
    ensure(
        stages[..10].iter().all(|s| *s == Stage::IdentityTransport)
            && stages[10..].iter().all(|s| *s == Stage::IdentityRefinement),
        || "default schedule is not IT at 1–10 and IR at 11–50".into(),
    )?;
    let bits = |run: &codi::RunArtifacts<f64>| -> Vec<u64> {
        run.target_trajectories
            .iter()
            .flatten()
            .chain(&run.reference_trajectory)
            .flat_map(|m| m.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    ensure(bits(&first) == bits(&second), || "repeated runs differ".into())?;

    // IT only, with a real subject mask and the default α.
    let it_cfg = PipelineConfig {
        t_switch: cfg.total_steps,
        ..cfg.clone()
    };
    let inputs = self_transport_inputs(synth::attention(21));
    let run = run_pipeline(&it_cfg, &inputs).unwrap();
    let vanilla = vanilla_trajectory(&inputs.targets[0].init, &it_cfg).unwrap();
    let it_gap = trajectory_gap(&run.target_trajectories[0], &vanilla);
    ensure(it_gap <= 1e-6, || format!("IT-only sanity run differs by {it_gap:e}"))?;

    // Default schedule, every token in the mask and every reference token kept.
    let full_cfg = PipelineConfig { alpha: 1.0, ..cfg.clone() };
    let flat = AttentionStack::new(vec![TokenMatrix::from_rows(&vec![vec![1.0]; 64]).unwrap()]).unwrap();
    let inputs = self_transport_inputs(flat);
    let run = run_pipeline(&full_cfg, &inputs).unwrap();
    let vanilla = vanilla_trajectory(&inputs.targets[0].init, &full_cfg).unwrap();
    let full_gap = trajectory_gap(&run.target_trajectories[0], &vanilla);
    ensure(full_gap <= 1e-6, || format!("full-schedule sanity run differs by {full_gap:e}"))?;

    let elapsed = suite_start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("suite took {elapsed:?}"))?;
    Ok(format!(
        "IT 1–10 / IR 11–50, bit-identical reruns, sanity gaps {it_gap:.1e} (IT only) and {full_gap:.1e} (α = 1), suite {:.2} s",
        elapsed.as_secs_f64()
    ))
}

fn trajectory_gap(a: &[TokenMatrix<f64>], b: &[TokenMatrix<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

fn guarded(check: &dyn Fn() -> Outcome) -> Outcome {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let start = Instant::now();
    let criteria: [(&str, &dyn Fn() -> Outcome); 7] = [
        ("ot-optimality", &ot_optimality),
        ("assignment-reduction", &assignment_reduction),
        ("transport-convexity", &transport_convexity),
        ("otsu-oracle", &otsu_oracle),
        ("attention-filtering", &attention_filtering),
        ("procrustes-invariance", &procrustes_invariance),
        ("protocol-arithmetic", &protocol_arithmetic),
    ];
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(reason) => {
            failed += 1;
            println!("FAIL {name}: {reason}");
        }
    };
    for (name, check) in criteria {
        report(name, guarded(check));
    }
    report("pipeline-determinism", guarded(&|| pipeline_determinism(start)));
    if failed == 0 {
        println!("acceptance: all 8 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 8 criteria failed");
        ExitCode::FAILURE
    }
}
