use std::sync::{Arc, OnceLock};

use cpdiff_core::bench::{
    baselines, best_of, held_out_condition_eval, interpolate, interpolation_sweep, lambda_grid,
    model_soup, pca_project, similarity, similarity_summary, spearman, splice, GenerationReport,
};
use cpdiff_core::lora::{AdaptedMatrix, LayoutDescriptor, ParameterVector, Provenance};
use cpdiff_core::numerics::OptimizerState;
use cpdiff_core::tasks::{
    evaluate, finetune_collect, make_task, pretrain_base, BaseModel, CheckpointSet, Condition,
    Family, FinetuneConfig, PretrainConfig, Split, Task, TaskSpec,
};
use cpdiff_core::Error;
use proptest::prelude::*;

/// Rank-one layout over an `n × n` matrix: `2n` coordinates.
fn layout(n: usize) -> Arc<LayoutDescriptor> {
    Arc::new(
        LayoutDescriptor::new(
            1,
            1.0,
            &[AdaptedMatrix {
                layer_id: 0,
                d: n,
                k: n,
            }],
        )
        .unwrap(),
    )
}

fn vector(values: Vec<f32>, l: &Arc<LayoutDescriptor>) -> ParameterVector {
    ParameterVector::new(values, l.clone(), Provenance::Harvested).unwrap()
}

fn spec(phi: f64) -> TaskSpec {
    TaskSpec {
        name: format!("phi{phi:.2}"),
        condition: Condition::Blobs {
            phi,
            radius: 2.0,
            classes: 2,
        },
        seed: 3,
        train_size: 128,
        val_size: 128,
        blob_std: 0.3,
    }
}

fn set_of(rows: Vec<Vec<f32>>, l: &Arc<LayoutDescriptor>) -> CheckpointSet {
    let n = rows.len();
    CheckpointSet {
        task: spec(0.0),
        layout: l.clone(),
        vectors: rows.into_iter().map(|r| vector(r, l)).collect(),
        steps: (1..=n).collect(),
        stride: 1,
        optimizer: OptimizerState::adam(1e-3),
        train_metrics: vec![0.0; n],
    }
}

struct Fixture {
    base: BaseModel,
    task: Task,
    set: CheckpointSet,
}

/// A small blobs base fine-tuned to a quarter-turn rotation.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let base = pretrain_base(
            Family::Blobs,
            2,
            1,
            &PretrainConfig {
                steps: 400,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        let task = make_task(spec(std::f64::consts::FRAC_PI_2)).unwrap();
        let set = finetune_collect(
            &base,
            &task,
            &FinetuneConfig {
                total_steps: 600,
                n: 8,
                stride: 10,
                optimizer: OptimizerState::adam(1e-2),
                ..FinetuneConfig::default()
            },
            2,
        )
        .unwrap();
        Fixture { base, task, set }
    })
}

#[test]
fn soup_of_two_vectors_is_midpoint() {
    let l = layout(1);
    let s = model_soup(&set_of(vec![vec![1.0, 2.0], vec![3.0, 4.0]], &l)).unwrap();
    assert_eq!(s.values(), &[2.0, 3.0]);
    assert_eq!(s.provenance, Provenance::Soup);
    let one = model_soup(&set_of(vec![vec![-1.5, 0.25]], &l)).unwrap();
    assert_eq!(one.values(), &[-1.5, 0.25]);
    assert!(model_soup(&set_of(vec![], &l)).is_err());
}

#[test]
fn similarity_hand_distances() {
    let l = layout(1);
    let set = vec![vector(vec![0.0, 1.0], &l), vector(vec![5.0, 5.0], &l)];
    let s = similarity(&vector(vec![1.0, 0.0], &l), &set).unwrap();
    assert!((s.min_l2 - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.nn_index, 0);
    let same = similarity(&vector(vec![5.0, 5.0], &l), &set).unwrap();
    assert_eq!(same.min_l2, 0.0);
    assert_eq!(same.nn_index, 1);
    assert!(similarity(&set[0], &[]).is_err());
    let other = vector(vec![0.0; 8], &layout(4));
    assert!(matches!(similarity(&other, &set), Err(Error::Layout(_))));
}

#[test]
fn novelty_ratio_hand_example() {
    let l = layout(1);
    // Training points on a line at spacing 1: leave-one-out NN distance 1.
    let set: Vec<_> = (0..4).map(|i| vector(vec![i as f32, 0.0], &l)).collect();
    let gen = vec![vector(vec![0.0, 2.0], &l), vector(vec![3.0, -2.0], &l)];
    let s = similarity_summary(&gen, &set).unwrap();
    assert_eq!(s.min_l2, vec![2.0, 2.0]);
    assert_eq!(s.nn_index, vec![0, 3]);
    assert!((s.nn_ratio - 2.0).abs() < 1e-12);
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let l = layout(1);
    let a = vector(vec![1.0, -2.0], &l);
    let b = vector(vec![3.0, 6.0], &l);
    assert_eq!(interpolate(&a, &b, 0.0).unwrap().values(), a.values());
    assert_eq!(interpolate(&a, &b, 1.0).unwrap().values(), b.values());
    assert_eq!(interpolate(&a, &b, 0.5).unwrap().values(), &[2.0, 2.0]);
    assert_eq!(
        interpolate(&a, &b, 0.5).unwrap().provenance,
        Provenance::Interpolated
    );
    for bad in [-0.1, 1.1, f64::NAN] {
        assert!(matches!(
            interpolate(&a, &b, bad),
            Err(Error::InvalidArgument(_))
        ));
    }
}

#[test]
fn lambda_grid_spacing() {
    let g = lambda_grid(11).unwrap();
    assert_eq!(g.len(), 11);
    assert_eq!(g[0], 0.0);
    assert_eq!(g[10], 1.0);
    assert!((g[3] - 0.3).abs() < 1e-15);
    assert!(lambda_grid(0).is_err());
}

#[test]
fn spearman_known_values() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!((spearman(&x, &[2.0, 4.0, 9.0, 16.0, 100.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    // d = (0, 0, 1, -1, 0): 1 - 6·2 / (5·24) = 0.9
    assert!((spearman(&x, &[1.0, 2.0, 4.0, 3.0, 5.0]) - 0.9).abs() < 1e-12);
    assert!(spearman(&x, &[1.0; 5]).is_nan());
    // Ties take average ranks: y ranks (1.5, 1.5, 3), Pearson on ranks = √3/2.
    let r = spearman(&[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0]);
    assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-12, "{r}");
}

#[test]
fn pca_recovers_a_line() {
    let data: Vec<Vec<f64>> = (0..50)
        .map(|i| {
            let t = i as f64 / 10.0 - 2.5;
            let wobble = if i % 2 == 0 { 1e-3 } else { -1e-3 };
            vec![2.0 * t + 1.0, -t + wobble, 0.5 * t]
        })
        .collect();
    let p = pca_project(&data, 2).unwrap();
    assert!(p.explained_ratio[0] >= 0.999, "{:?}", p.explained_ratio);
    let c = &p.components[0];
    let norm = (4.0f64 + 1.0 + 0.25).sqrt();
    for (x, y) in c.iter().zip([2.0, -1.0, 0.5]) {
        assert!((x - y / norm).abs() < 1e-4, "{c:?}");
    }
}

#[test]
fn pca_components_orthonormal_and_error_is_discarded_variance() {
    let mut r = cpdiff_core::rng::rng(5);
    let data: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            cpdiff_core::numerics::init::standard_normal(&mut r, 5)
                .iter()
                .enumerate()
                .map(|(j, &v)| v as f64 * (j + 1) as f64)
                .collect()
        })
        .collect();
    let p = pca_project(&data, 3).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = p.components[i]
                .iter()
                .zip(&p.components[j])
                .map(|(a, b)| a * b)
                .sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-10);
        }
    }
    assert_eq!(p.eigenvalues.len(), 5);
    let discarded: f64 = p.eigenvalues[3..].iter().sum();
    assert!((p.reconstruction_error(&data) - discarded).abs() < 1e-9);
    assert!(pca_project(&data, 0).is_err());
    assert!(pca_project(&data, 6).is_err());
    assert!(pca_project(&data[..2], 2).is_err());
}

#[test]
fn splice_overwrites_ranges_in_order() {
    let l = layout(4);
    let full = vector((0..8).map(|i| i as f32).collect(), &l);
    let s = splice(&full, &[1..3, 5..6], &[10.0, 11.0, 12.0]).unwrap();
    assert_eq!(s.values(), &[0.0, 10.0, 11.0, 3.0, 4.0, 12.0, 6.0, 7.0]);
    assert!(splice(&full, &[1..3], &[1.0]).is_err());
    assert!(splice(&full, &[1..3], &[1.0, 2.0, 3.0]).is_err());
    assert!(splice(&full, &[7..9], &[1.0, 2.0]).is_err());
}

#[test]
fn best_of_single_candidate() {
    let f = fixture();
    let c = f.set.vectors.last().unwrap().clone();
    let r = best_of(std::slice::from_ref(&c), &[42], &f.base, &f.task).unwrap();
    assert_eq!(r.chosen, 0);
    assert_eq!(r.chosen_seed(), 42);
    assert_eq!(r.m(), 1);
    assert_eq!(
        r.chosen_val,
        evaluate(&f.base, &c, &f.task, Split::Val).unwrap()
    );
}

#[test]
fn best_of_finds_injected_checkpoint() {
    let f = fixture();
    let good = f.set.vectors.last().unwrap().clone();
    let zero = ParameterVector::zeros(f.set.layout.clone());
    let good_train = evaluate(&f.base, &good, &f.task, Split::Train).unwrap();
    let zero_train = evaluate(&f.base, &zero, &f.task, Split::Train).unwrap();
    assert!(
        good_train > zero_train + 0.2,
        "{good_train} vs {zero_train}"
    );
    let cands = vec![zero.clone(), zero.clone(), good, zero];
    let r = best_of(&cands, &[1, 2, 3, 4], &f.base, &f.task).unwrap();
    assert_eq!(r.chosen, 2);
    assert_eq!(r.train_metrics.len(), 4);
    assert_eq!(r.val_metrics.len(), 4);
}

#[test]
fn best_of_ties_go_to_lowest_seed() {
    let f = fixture();
    let v = f.set.vectors[0].clone();
    let r = best_of(&[v.clone(), v.clone(), v], &[9, 3, 5], &f.base, &f.task).unwrap();
    assert_eq!(r.chosen, 1);
    assert!(best_of(&[], &[], &f.base, &f.task).is_err());
    assert!(best_of(&[f.set.vectors[0].clone()], &[1, 2], &f.base, &f.task).is_err());
}

#[test]
fn baselines_bound_every_checkpoint() {
    let f = fixture();
    let b = baselines(&f.set, &f.base, &f.task).unwrap();
    for v in &f.set.vectors {
        assert!(evaluate(&f.base, v, &f.task, Split::Val).unwrap() <= b.original_best);
    }
    assert!(b.original_best >= 0.95, "{b:?}");
    assert!(b.soup >= 0.9, "{b:?}");
}

#[test]
fn sweep_rows_match_direct_evaluation() {
    let f = fixture();
    let a = ParameterVector::zeros(f.set.layout.clone());
    let b = f.set.vectors.last().unwrap().clone();
    let ca = Condition::Blobs {
        phi: 0.0,
        radius: 2.0,
        classes: 2,
    };
    let cb = f.task.spec.condition;
    let targets: Vec<Task> = lambda_grid(5)
        .unwrap()
        .iter()
        .map(|&l| {
            make_task(TaskSpec {
                condition: ca.blend(&cb, l).unwrap(),
                ..spec(0.0)
            })
            .unwrap()
        })
        .collect();
    let rows = interpolation_sweep(&a, &b, &f.base, &targets).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].lambda, 0.0);
    assert_eq!(rows[4].lambda, 1.0);
    assert_eq!(rows[0].metric_blend, rows[0].metric_a);
    assert_eq!(rows[4].metric_blend, rows[4].metric_b);
    let grid = lambda_grid(5).unwrap();
    for row in &rows {
        let mix = interpolate(&a, &b, row.lambda).unwrap();
        let scores: Vec<f64> = targets
            .iter()
            .map(|t| evaluate(&f.base, &mix, t, Split::Val).unwrap())
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = scores.iter().position(|&s| s == max).unwrap();
        assert_eq!(row.realized_lambda, grid[first]);
    }
}

fn report(name: &str, amplitude: f64, seen: bool, val: f64) -> GenerationReport {
    GenerationReport {
        task: name.into(),
        condition: Condition::Sine {
            amplitude,
            phase: 0.0,
        },
        seen,
        seeds: vec![1],
        train_metrics: vec![val],
        val_metrics: vec![val],
        chosen: 0,
        chosen_val: val,
        baselines: None,
        similarity: None,
        config_hash: String::new(),
        seed: 0,
    }
}

#[test]
fn held_out_rows_pair_with_nearest_trained() {
    let trained = vec![report("a", 1.0, true, -0.1), report("b", 2.0, true, -0.2)];
    let mut all = trained.clone();
    all.push(report("h", 1.8, false, -0.25));
    let rows = held_out_condition_eval(&trained, &all).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2].nearest_trained, "b");
    assert_eq!(rows[2].nearest_metric, -0.2);
    assert_eq!(rows[2].condition, "1.8;0");
    assert_eq!(rows[0].nearest_trained, "a");
    assert!(held_out_condition_eval(&[], &all).is_err());
}

proptest! {
    #[test]
    fn interpolation_is_convex(
        a in prop::collection::vec(-10.0f32..10.0, 4),
        b in prop::collection::vec(-10.0f32..10.0, 4),
        lambda in 0.0f64..=1.0,
    ) {
        let l = layout(2);
        let (va, vb) = (vector(a, &l), vector(b, &l));
        let m = interpolate(&va, &vb, lambda).unwrap();
        for ((x, y), z) in va.values().iter().zip(vb.values()).zip(m.values()) {
            let want = (1.0 - lambda) * *x as f64 + lambda * *y as f64;
            prop_assert!((*z as f64 - want).abs() <= 1e-5 * (1.0 + want.abs()));
            prop_assert!(*z >= x.min(*y) - 1e-5 && *z <= x.max(*y) + 1e-5);
        }
    }

    #[test]
    fn spearman_bounded_and_rank_invariant(
        x in prop::collection::vec(-100.0f64..100.0, 3..20),
        seed in 0u64..1000,
    ) {
        let mut r = cpdiff_core::rng::rng(seed);
        let y: Vec<f64> = cpdiff_core::numerics::init::standard_normal(&mut r, x.len())
            .into_iter().map(f64::from).collect();
        let s = spearman(&x, &y);
        if !s.is_nan() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
            let ex: Vec<f64> = x.iter().map(|v| v.exp().min(1e300)).collect();
            let cubed: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
            prop_assert!((spearman(&ex, &cubed) - s).abs() < 1e-9);
        }
    }

    #[test]
    fn soup_is_order_invariant_and_inside_the_box(
        rows in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 2), 1..12),
    ) {
        let l = layout(1);
        let s = model_soup(&set_of(rows.clone(), &l)).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        let t = model_soup(&set_of(rev, &l)).unwrap();
        for j in 0..2 {
            prop_assert!((s.values()[j] - t.values()[j]).abs() < 1e-5);
            let lo = rows.iter().map(|r| r[j]).fold(f32::INFINITY, f32::min);
            let hi = rows.iter().map(|r| r[j]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(s.values()[j] >= lo - 1e-5 && s.values()[j] <= hi + 1e-5);
        }
    }

    #[test]
    fn pca_eigenvalues_sorted_and_ratios_sum_below_one(
        flat in prop::collection::vec(-3.0f64..3.0, 24),
    ) {
        let data: Vec<Vec<f64>> = flat.chunks(3).map(|c| c.to_vec()).collect();
        let p = pca_project(&data, 2).unwrap();
        prop_assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(p.eigenvalues.iter().all(|&e| e >= 0.0));
        prop_assert!(p.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        let err = p.reconstruction_error(&data);
        prop_assert!((err - p.eigenvalues[2]).abs() < 1e-8 * (1.0 + err));
    }
}
