use cpdiff_core::conddiff::{
    make_schedule, p_sample_batch, p_sample_loop, q_sample, read_trajectory, record_trajectory,
    timestep_embedding, train_diffusion, ConditionKind, ConditionSpec, DenoiserArch, DenoiserModel,
    DiffConfig,
};
use cpdiff_core::numerics::gradcheck::{grad_audit, AuditOptions};
use cpdiff_core::numerics::{init, Array, ParamSet};
use cpdiff_core::rng::rng;
use cpdiff_core::tasks::{make_task, Condition, Task, TaskSpec};
use cpdiff_core::Error;

const DRAWS: usize = 10_000;

fn blobs_task(i: usize) -> Task {
    make_task(TaskSpec {
        name: format!("b{i}"),
        condition: Condition::Blobs {
            phi: i as f64 * std::f64::consts::FRAC_PI_2,
            radius: 2.0,
            classes: 2,
        },
        seed: 40 + i as u64,
        train_size: 32,
        val_size: 16,
        blob_std: 0.3,
    })
    .unwrap()
}

fn small_cfg(kind: ConditionKind, timesteps: usize, steps: usize) -> DiffConfig {
    DiffConfig {
        timesteps,
        channels: vec![4, 8],
        cond_dim: 8,
        time_dim: 8,
        cond_kind: kind,
        exemplars: 4,
        steps,
        batch: 8,
        ..DiffConfig::default()
    }
}

fn latents(tasks: usize, per: usize, l: usize) -> Vec<(usize, Vec<f32>)> {
    let mut r = rng(17);
    (0..tasks)
        .flat_map(|t| {
            let centre: Vec<f32> = (0..l).map(|j| (t * l + j) as f32 * 0.1).collect();
            init::standard_normal(&mut r, per * l)
                .chunks(l)
                .map(|e| (t, centre.iter().zip(e).map(|(c, x)| c + 0.05 * x).collect()))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn conditions(kind: ConditionKind, n: usize) -> Vec<ConditionSpec> {
    (0..n)
        .map(|i| ConditionSpec::for_task(kind, i, &blobs_task(i), 4))
        .collect()
}

fn tiny_model(kind: ConditionKind, timesteps: usize) -> DenoiserModel {
    train_diffusion(
        &latents(2, 8, 8),
        &conditions(kind, 2),
        &small_cfg(kind, timesteps, 20),
        5,
        &mut Vec::new(),
    )
    .unwrap()
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Checks sample mean and variance against `N(mean, var)` within three standard errors.
fn assert_gaussian_moments(x: &[f64], mean: f64, var: f64, what: &str) {
    let n = x.len() as f64;
    let (m, v) = moments(x);
    let se_m = (var / n).sqrt();
    let se_v = var * (2.0 / (n - 1.0)).sqrt();
    assert!(
        (m - mean).abs() <= 3.0 * se_m,
        "{what}: mean {m} vs {mean} (se {se_m})"
    );
    assert!(
        (v - var).abs() <= 3.0 * se_v,
        "{what}: var {v} vs {var} (se {se_v})"
    );
}

#[test]
fn default_schedule_endpoints() {
    let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
    assert_eq!(s.timesteps(), 1000);
    assert_eq!(s.beta(1), 1e-4);
    assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
    assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    assert!(s.alpha_bar(1000) < 1e-4, "{}", s.alpha_bar(1000));
    assert_eq!(s.alpha_bar(0), 1.0);
    for t in 1..1000 {
        assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
    }
}

#[test]
fn schedule_rejects_bad_ranges() {
    assert!(make_schedule(0, 1e-4, 2e-2).is_err());
    assert!(make_schedule(10, 0.0, 2e-2).is_err());
    assert!(make_schedule(10, 3e-2, 2e-2).is_err());
    assert!(make_schedule(10, 1e-4, 1.0).is_err());
}

#[test]
fn final_reverse_step_has_zero_variance() {
    let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
    assert_eq!(s.posterior_variance(1), 0.0);
    assert!(s.posterior_variance(2) > 0.0);
    for t in 2..=1000 {
        assert!(s.posterior_variance(t) <= s.beta(t));
    }
}

#[test]
fn q_sample_without_noise_scales_input() {
    let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let z0 = [1.0f32, -2.0, 0.5];
    for t in [1, 10, 500, 1000] {
        let zt = q_sample(&z0, t, &[0.0; 3], &s).unwrap();
        let a = s.alpha_bar(t).sqrt();
        for (z, x) in zt.iter().zip(z0) {
            assert!((*z as f64 - a * x as f64).abs() < 1e-6);
        }
    }
    assert!(q_sample(&z0, 0, &[0.0; 3], &s).is_err());
    assert!(q_sample(&z0, 1001, &[0.0; 3], &s).is_err());
    assert!(matches!(
        q_sample(&z0, 1, &[0.0; 2], &s),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn q_sample_monte_carlo_matches_closed_form() {
    let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let z0 = vec![1.5f32; DRAWS];
    for t in [1, 500, 1000] {
        let eps = init::standard_normal(&mut rng(t as u64), DRAWS);
        let zt: Vec<f64> = q_sample(&z0, t, &eps, &s)
            .unwrap()
            .into_iter()
            .map(f64::from)
            .collect();
        let ab = s.alpha_bar(t);
        assert_gaussian_moments(&zt, ab.sqrt() * 1.5, 1.0 - ab, &format!("t={t}"));
    }
}

fn normal_cdf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 on erf, absolute error below 1.5e-7.
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.327_591_1 * z);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736
                + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = 1.0 - poly * (-z * z).exp();
    0.5 * (1.0 + erf.copysign(x))
}

#[test]
fn terminal_marginal_is_standard_normal() {
    let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let z0: Vec<f32> = init::standard_normal(&mut rng(1), DRAWS)
        .iter()
        .map(|v| 3.0 * v + 2.0)
        .collect();
    let eps = init::standard_normal(&mut rng(2), DRAWS);
    let mut zt: Vec<f64> = q_sample(&z0, 1000, &eps, &s)
        .unwrap()
        .into_iter()
        .map(f64::from)
        .collect();
    zt.sort_by(f64::total_cmp);
    let n = zt.len() as f64;
    let d = zt
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // Kolmogorov-Smirnov critical value at the 1% level.
    assert!(d < 1.63 / n.sqrt(), "KS statistic {d}");
}

#[test]
fn stepwise_forward_process_matches_marginal() {
    let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let n = DRAWS;
    let mut r = rng(99);
    let mut z = vec![0.7f64; n];
    for t in 1..=100 {
        let e = init::standard_normal(&mut r, n);
        let (a, b) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
        for (zi, ei) in z.iter_mut().zip(e) {
            *zi = a * *zi + b * ei as f64;
        }
        if [1, 10, 100].contains(&t) {
            let ab = s.alpha_bar(t);
            assert_gaussian_moments(&z, ab.sqrt() * 0.7, 1.0 - ab, &format!("step {t}"));
        }
    }
}

#[test]
fn timestep_embedding_layout() {
    let e = timestep_embedding(0, 8);
    assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let e = timestep_embedding(7, 8);
    assert!((e[0] - 7f64.sin()).abs() < 1e-15);
    assert!((e[4] - 7f64.cos()).abs() < 1e-15);
    assert_ne!(timestep_embedding(3, 16), timestep_embedding(4, 16));
}

fn arch(kind: ConditionKind) -> DenoiserArch {
    DenoiserArch {
        latent_dim: 8,
        channels: vec![2, 3],
        kernel: 3,
        cond_dim: 4,
        time_dim: 4,
        cond_kind: kind,
        num_tasks: 3,
        descriptor_dim: 4,
        exemplar_dim: 10,
        exemplar_count: 4,
        projection_seed: 1,
    }
}

fn randomized(a: &DenoiserArch, seed: u64) -> ParamSet<f64> {
    let p = a.init_params::<f64>(seed);
    let mut r = rng(seed ^ 0xabc);
    let mut out = ParamSet::new();
    for (n, v) in p.names().iter().zip(p.values()) {
        out.add(n.clone(), init::normal(&mut r, v.shape(), 0.5));
    }
    out
}

#[test]
fn loss_gradient_audit_every_condition_kind() {
    for kind in ConditionKind::ALL {
        let a = arch(kind);
        let conds = conditions(kind, 3);
        for seed in 0..10u64 {
            let p = randomized(&a, seed);
            let zt = init::normal(&mut rng(seed + 1), &[3, 8], 1.0);
            let eps = init::normal(&mut rng(seed + 2), &[3, 8], 1.0);
            let refs: Vec<&ConditionSpec> = conds.iter().collect();
            let report = grad_audit(
                &p,
                |g, v| {
                    a.loss_graph(
                        g,
                        v,
                        p.names(),
                        zt.clone(),
                        &[1, 400, 1000],
                        eps.clone(),
                        &refs,
                    )
                },
                &AuditOptions {
                    epsilon: 1e-4,
                    max_coords_per_param: Some(4),
                    seed,
                    ..AuditOptions::default()
                },
            )
            .unwrap();
            assert!(
                report.max_relative_error <= 1e-4,
                "{} seed {seed}: {report:?}",
                kind.name()
            );
        }
    }
}

#[test]
fn initial_loss_is_latent_dimension() {
    // The output convolution starts at zero, so the first prediction is 0 and the loss
    // is E|ε|² = L.
    let a = DenoiserArch {
        latent_dim: 16,
        ..arch(ConditionKind::Descriptor)
    };
    let p = a.init_params::<f64>(3);
    let conds = conditions(ConditionKind::Descriptor, 3);
    let b = 64;
    let refs: Vec<&ConditionSpec> = (0..b).map(|i| &conds[i % 3]).collect();
    let steps: Vec<usize> = (0..b).map(|i| 1 + i * 15).collect();
    let mut g = cpdiff_core::numerics::Graph::new();
    let v = p.bind(&mut g);
    let l = a
        .loss_graph(
            &mut g,
            &v,
            p.names(),
            init::normal(&mut rng(4), &[b, 16], 1.0),
            &steps,
            init::normal(&mut rng(5), &[b, 16], 1.0),
            &refs,
        )
        .unwrap();
    let loss = g.value(l).item();
    assert!((loss - 16.0).abs() <= 0.2 * 16.0, "{loss}");
}

#[test]
fn mismatched_condition_kind_rejected() {
    let a = arch(ConditionKind::Descriptor);
    let p = a.init_params::<f64>(0);
    let one_hot = conditions(ConditionKind::OneHot, 1);
    let mut g = cpdiff_core::numerics::Graph::new();
    let v = p.bind(&mut g);
    let r = a.loss_graph(
        &mut g,
        &v,
        p.names(),
        Array::zeros(&[1, 8]),
        &[1],
        Array::zeros(&[1, 8]),
        &[&one_hot[0]],
    );
    assert!(r.is_err());
}

#[test]
fn one_hot_embeddings_differ_per_task() {
    let m = tiny_model(ConditionKind::OneHot, 10);
    let c = conditions(ConditionKind::OneHot, 2);
    let e0 = m.condition_project(&c[0]).unwrap();
    let e1 = m.condition_project(&c[1]).unwrap();
    assert_eq!(e0.values.len(), 8);
    assert_ne!(e0, e1);
    let bad = ConditionSpec {
        task_id: Some(5),
        ..c[0].clone()
    };
    assert!(matches!(
        m.condition_project(&bad),
        Err(Error::UnknownTask(5))
    ));
}

#[test]
fn exemplar_order_does_not_change_embedding() {
    let m = tiny_model(ConditionKind::DescriptorPlusExemplars, 10);
    let c = conditions(ConditionKind::DescriptorPlusExemplars, 1).remove(0);
    let mut shuffled = c.clone();
    shuffled.exemplars.as_mut().unwrap().reverse();
    let a = m.condition_project(&c).unwrap();
    let b = m.condition_project(&shuffled).unwrap();
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn training_is_deterministic_and_records_curve() {
    let run = |seed| {
        let mut curve = Vec::new();
        let m = train_diffusion(
            &latents(2, 8, 8),
            &conditions(ConditionKind::Descriptor, 2),
            &small_cfg(ConditionKind::Descriptor, 50, 20),
            seed,
            &mut curve,
        )
        .unwrap();
        (m, curve)
    };
    let (a, ca) = run(1);
    let (b, cb) = run(1);
    let (c, _) = run(2);
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert_eq!(ca.len(), 20 * 8 / 16);
    assert_ne!(a.params, c.params);
    assert!(a.latent_scale > 0.0);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let m = tiny_model(ConditionKind::Descriptor, 30);
    let c = &conditions(ConditionKind::Descriptor, 2)[1];
    let (z1, _) = p_sample_loop(&m, c, 77, false).unwrap();
    let (z2, _) = p_sample_loop(&m, c, 77, false).unwrap();
    let (z3, _) = p_sample_loop(&m, c, 78, false).unwrap();
    assert_eq!(z1, z2);
    assert_ne!(z1, z3);
    let (batch, _) = p_sample_batch(&m, c, &[78, 77], false).unwrap();
    assert_eq!(batch[1], z1);
    assert_eq!(batch[0], z3);
}

#[test]
fn trajectory_length_and_csv_roundtrip() {
    let m = tiny_model(ConditionKind::Descriptor, 30);
    let c = &conditions(ConditionKind::Descriptor, 2)[0];
    let (z, tr) = p_sample_loop(&m, c, 3, true).unwrap();
    let tr = tr.unwrap();
    assert_eq!(tr.states.len(), 31);
    assert_eq!(tr.states[0].0, 30);
    assert_eq!(tr.states[30].0, 0);
    assert_eq!(tr.states[30].1, z.values);

    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.csv");
    record_trajectory(&tr, 1, &full).unwrap();
    assert_eq!(read_trajectory(&full, 3).unwrap(), tr);

    let sparse = dir.path().join("sparse.csv");
    record_trajectory(&tr, 30, &sparse).unwrap();
    let back = read_trajectory(&sparse, 3).unwrap();
    assert_eq!(back.states.len(), 2);
    assert_eq!(back.states[0], tr.states[0]);
    assert_eq!(back.states[1], tr.states[30]);
    assert!(record_trajectory(&tr, 0, &sparse).is_err());
}

#[test]
fn denoiser_save_load_roundtrip() {
    let m = tiny_model(ConditionKind::LearnableEmbed, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.cpdm");
    m.save(&path, "key").unwrap();
    let (back, key) = DenoiserModel::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(key, "key");
    std::fs::write(&path, b"nope").unwrap();
    assert!(DenoiserModel::load(&path).is_err());
}

#[test]
fn config_validation() {
    let ok = small_cfg(ConditionKind::Descriptor, 10, 1);
    ok.validate(8).unwrap();
    assert!(matches!(ok.validate(7), Err(Error::Config(_))));
    let odd_time = DiffConfig {
        time_dim: 7,
        ..ok.clone()
    };
    assert!(odd_time.validate(8).is_err());
    let no_ex = DiffConfig {
        cond_kind: ConditionKind::DescriptorPlusExemplars,
        exemplars: 0,
        ..ok
    };
    assert!(no_ex.validate(8).is_err());
}
