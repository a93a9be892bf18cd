use std::sync::Arc;

use cpdiff_core::lora::{AdaptedMatrix, LayoutDescriptor, ParameterVector, Provenance};
use cpdiff_core::numerics::OptimizerState;
use cpdiff_core::paramstore::{
    batch_normalize, denormalize, task_normalize, NormMode, ParamDataset, DEFAULT_EPS,
};
use cpdiff_core::tasks::{CheckpointSet, Condition, TaskSpec};
use cpdiff_core::Error;
use proptest::prelude::*;

fn layout(d: usize, k: usize) -> Arc<LayoutDescriptor> {
    Arc::new(LayoutDescriptor::new(1, 1.0, &[AdaptedMatrix { layer_id: 0, d, k }]).unwrap())
}

fn set(name: &str, rows: Vec<Vec<f32>>, layout: &Arc<LayoutDescriptor>) -> CheckpointSet {
    let n = rows.len();
    CheckpointSet {
        task: TaskSpec {
            name: name.into(),
            condition: Condition::Sine {
                amplitude: 1.0,
                phase: 0.0,
            },
            seed: 0,
            train_size: 8,
            val_size: 8,
            blob_std: 0.3,
        },
        layout: layout.clone(),
        vectors: rows
            .into_iter()
            .map(|r| ParameterVector::new(r, layout.clone(), Provenance::Harvested).unwrap())
            .collect(),
        steps: (1..=n).map(|i| i * 10).collect(),
        stride: 10,
        optimizer: OptimizerState::adam(1e-3),
        train_metrics: vec![0.5; n],
    }
}

#[test]
fn hand_zscore() {
    let l = layout(1, 1);
    let (v, st) = task_normalize(
        &set("a", vec![vec![1.0, 0.0], vec![3.0, 0.0]], &l),
        DEFAULT_EPS,
    )
    .unwrap();
    assert_eq!((st.mean[0], st.std[0]), (2.0, 1.0));
    assert_eq!((v[0][0], v[1][0]), (-1.0, 1.0));
}

#[test]
fn constant_coordinate_clamped_and_restored_to_mean() {
    let l = layout(1, 1);
    let s = set(
        "a",
        vec![vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]],
        &l,
    );
    let (v, st) = task_normalize(&s, DEFAULT_EPS).unwrap();
    assert_eq!(st.std[0], DEFAULT_EPS);
    assert!(v.iter().all(|r| r[0] == 0.0));
    assert_eq!(denormalize(&[0.7, 0.0], &st).unwrap()[0], 5.0);
}

#[test]
fn single_checkpoint_normalizes_to_zero() {
    let l = layout(2, 2);
    let (v, st) =
        task_normalize(&set("a", vec![vec![0.3, -1.0, 2.0, 9.0]], &l), DEFAULT_EPS).unwrap();
    assert!(v[0].iter().all(|&x| x == 0.0));
    assert_eq!(denormalize(&[0.0; 4], &st).unwrap(), st.mean);
}

#[test]
fn pooling_single_task_matches_task_mode() {
    let l = layout(1, 1);
    let s = set(
        "a",
        vec![vec![1.0, 4.0], vec![2.0, -4.0], vec![6.0, 0.5]],
        &l,
    );
    let (a, sa) = task_normalize(&s, DEFAULT_EPS).unwrap();
    let (b, sb) = batch_normalize(&[&s], DEFAULT_EPS).unwrap();
    assert_eq!(a, b[0]);
    assert_eq!((sa.mean, sa.std), (sb.mean, sb.std));
}

#[test]
fn pooled_mean_is_grand_mean() {
    let l = layout(1, 1);
    let a = set("a", vec![vec![0.0, 10.0], vec![2.0, 10.0]], &l);
    let b = set("b", vec![vec![10.0, -10.0], vec![12.0, -10.0]], &l);
    let (_, st) = batch_normalize(&[&a, &b], DEFAULT_EPS).unwrap();
    assert_eq!(st.mean, vec![6.0, 0.0]);
}

#[test]
fn denormalize_rejects_length_mismatch() {
    let l = layout(1, 1);
    let (_, st) = task_normalize(&set("a", vec![vec![1.0, 2.0]], &l), DEFAULT_EPS).unwrap();
    assert!(matches!(denormalize(&[0.0; 3], &st), Err(Error::Layout(_))));
}

#[test]
fn task_mode_keeps_one_stats_entry_per_task() {
    let l = layout(2, 2);
    let sets: Vec<_> = (0..3)
        .map(|t| {
            set(
                &format!("t{t}"),
                vec![vec![t as f32, 1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0, t as f32]],
                &l,
            )
        })
        .collect();
    let ds = ParamDataset::new(sets.clone(), NormMode::Task, DEFAULT_EPS).unwrap();
    assert_eq!(ds.stats.len(), 3);
    for t in 0..3 {
        let (own, _) = task_normalize(&sets[t], DEFAULT_EPS).unwrap();
        assert_eq!(ds.normalized(t).unwrap(), own.as_slice());
    }
    assert_eq!(
        ParamDataset::new(sets.clone(), NormMode::Batch, DEFAULT_EPS)
            .unwrap()
            .stats
            .len(),
        1
    );
    assert!(ParamDataset::new(sets, NormMode::None, DEFAULT_EPS)
        .unwrap()
        .stats
        .is_empty());
}

#[test]
fn save_load_identity_and_corruption() {
    let l = layout(5, 5);
    let mut a = set(
        "a",
        vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]; 2],
        &l,
    );
    a.vectors[1] = a.vectors[1].clone().with_provenance(Provenance::Generated);
    a.train_metrics = vec![0.25, 1.0 / 3.0];
    let b = set("b", vec![vec![-1.0; 10], vec![2.5; 10], vec![1e-3; 10]], &l);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pset");
    for mode in [NormMode::None, NormMode::Batch, NormMode::Task] {
        let ds = ParamDataset::new(vec![a.clone(), b.clone()], mode, DEFAULT_EPS).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(ParamDataset::load(&path).unwrap(), ds);
    }
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        ParamDataset::load(&path),
        Err(Error::Checksum { .. })
    ));
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f32>>> {
    (1usize..12).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 6), n))
}

proptest! {
    #[test]
    fn roundtrip_error_small(rows in rows_strategy()) {
        let l = layout(2, 2);
        let rows: Vec<Vec<f32>> = rows.into_iter().map(|mut r| { r.truncate(4); r }).collect();
        let s = set("p", rows.clone(), &l);
        let (v, st) = task_normalize(&s, DEFAULT_EPS).unwrap();
        for (orig, norm) in rows.iter().zip(&v) {
            let back = denormalize(norm, &st).unwrap();
            for (i, (&o, &b)) in orig.iter().zip(&back).enumerate() {
                let expect = if st.std[i] <= st.eps { st.mean[i] } else { o };
                prop_assert!((expect - b).abs() <= 1e-5, "{o} vs {b}");
            }
        }
    }

    #[test]
    fn normalized_moments(rows in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 4), 2..20)) {
        let l = layout(2, 2);
        let s = set("p", rows, &l);
        let (v, st) = task_normalize(&s, DEFAULT_EPS).unwrap();
        let n = v.len() as f64;
        for i in 0..4 {
            if st.std[i] < 1e-3 { continue; }
            let mean = v.iter().map(|r| r[i] as f64).sum::<f64>() / n;
            let var = v.iter().map(|r| (r[i] as f64 - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-5, "mean {mean}");
            prop_assert!((var.sqrt() - 1.0).abs() <= 1e-5, "std {}", var.sqrt());
        }
    }
}
