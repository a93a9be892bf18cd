use cpdiff_core::numerics::gradcheck::{grad_audit, AuditOptions};
use cpdiff_core::numerics::{init, Array, ConvSpec, Graph, ParamSet, Var};
use cpdiff_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn params(seed: u64, shapes: &[&[usize]]) -> ParamSet<f64> {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    for (i, s) in shapes.iter().enumerate() {
        ps.add(format!("p{i}"), init::normal(&mut r, s, 1.0));
    }
    ps
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
/// every output coordinate contributes a distinct amount to the loss.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = init::normal(&mut rng(seed ^ 0x5eed), &shape, 1.0);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn audit(
    name: &str,
    shapes: &[&[usize]],
    opts: AuditOptions,
    f: impl Fn(&mut Graph<f64>, &[Var], u64) -> Result<Var>,
) {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let ps = params(seed * 7919 + 11, shapes);
        let report = grad_audit(&ps, |g, v| f(g, v, seed), &opts).unwrap();
        assert!(report.coords_checked > 0, "{name}: nothing audited");
        worst = worst.max(report.max_relative_error);
        assert!(
            report.max_relative_error <= TOL,
            "{name} seed {seed}: rel err {:.3e} at {:?} (analytic {}, numeric {})",
            report.max_relative_error,
            report.worst,
            report.analytic,
            report.numeric
        );
    }
    eprintln!("{name}: worst relative error over {INSTANCES} instances = {worst:.2e}");
}

#[test]
fn forward_conv1d_same_padding_length() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Array::zeros(&[1, 1, 9]));
    let w = g.input(Array::zeros(&[1, 1, 9]));
    let y = g
        .conv1d(
            x,
            w,
            ConvSpec {
                stride: 1,
                pad: 4,
                out_pad: 0,
            },
        )
        .unwrap();
    assert_eq!(g.shape(y), &[1, 1, 9]);
}

#[test]
fn forward_conv1d_sliding_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Array::full(&[1, 1, 5], 1.0));
    let w = g.input(Array::full(&[1, 1, 3], 1.0));
    let y = g.conv1d(x, w, ConvSpec::same(3)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
}

#[test]
fn forward_matmul_identity() {
    let mut g = Graph::<f64>::new();
    let b = init::normal(&mut rng(3), &[3, 4], 1.0);
    let i = g.input(Array::identity(3));
    let bv = g.input(b.clone());
    let y = g.matmul(i, bv).unwrap();
    assert_eq!(g.value(y), &b);
}

#[test]
fn forward_conv_transpose_doubles_length() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Array::zeros(&[2, 4, 8]));
    let w = g.input(Array::zeros(&[4, 3, 9]));
    let y = g.conv1d_transpose(x, w, ConvSpec::down2(9)).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 16]);
}

#[test]
fn shape_errors_name_the_operator() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Array::zeros(&[2, 3]));
    let b = g.input(Array::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let x = g.input(Array::zeros(&[1, 2, 5]));
    let w = g.input(Array::zeros(&[1, 3, 3]));
    assert!(matches!(
        g.conv1d(x, w, ConvSpec::same(3)),
        Err(Error::Shape { op: "conv1d", .. })
    ));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Array::vector(vec![1.0, 2.0]));
    let y = g.tanh(x);
    assert!(g.backward(y).is_err());
}

#[test]
fn backward_square_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Array::vector(vec![3.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_linear_unit_mse() {
    // loss = (w x - y)^2 -> dL/dw = 2 (w x - y) x
    let (w, x, y) = (0.7, 1.5, -2.0);
    let mut g = Graph::<f64>::new();
    let wv = g.leaf(Array::from_vec(&[1, 1], vec![w]).unwrap());
    let xv = g.input(Array::from_vec(&[1, 1], vec![x]).unwrap());
    let yv = g.input(Array::from_vec(&[1, 1], vec![y]).unwrap());
    let p = g.matmul(xv, wv).unwrap();
    let l = g.mse(p, yv).unwrap();
    let grads = g.backward(l).unwrap();
    let expected = 2.0 * (w * x - y) * x;
    assert!((grads.get(wv).unwrap().item() - expected).abs() < 1e-12);
}

#[test]
fn audit_rejects_out_of_range_epsilon() {
    let ps = params(0, &[&[2]]);
    let opts = AuditOptions {
        epsilon: 1e-3,
        ..Default::default()
    };
    let res = grad_audit(&ps, |g, v| Ok(g.sum(v[0])), &opts);
    assert!(matches!(res, Err(Error::InvalidArgument(_))));
}

#[test]
fn audit_cubic_scalar() {
    let mut ps = ParamSet::new();
    ps.add("x", Array::vector(vec![2.0]));
    let r = grad_audit(
        &ps,
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let cube = g.mul(sq, v[0])?;
            Ok(g.sum(cube))
        },
        &AuditOptions::default(),
    )
    .unwrap();
    assert!((r.analytic - 12.0).abs() < 1e-12);
    assert!(r.max_relative_error <= 1e-8, "{r:?}");
}

#[test]
fn audit_rejects_non_finite_perturbation() {
    let mut ps = ParamSet::new();
    ps.add("x", Array::vector(vec![1e-300]));
    // 1/x-style blow up is not expressible directly; overflow the square instead.
    ps.add("y", Array::vector(vec![1e200]));
    let res = grad_audit(
        &ps,
        |g, v| {
            let sq = g.mul(v[1], v[1])?;
            let s = g.sum(sq);
            let t = g.sum(v[0]);
            let l = g.add(s, t)?;
            Ok(l)
        },
        &AuditOptions::default(),
    );
    assert!(matches!(res, Err(Error::NonFinite(_))));
}

#[test]
fn audit_matmul() {
    audit(
        "matmul",
        &[&[3, 4], &[4, 5]],
        AuditOptions::default(),
        |g, v, s| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, s)
        },
    );
}

#[test]
fn audit_add_sub_mul() {
    audit(
        "add/sub/mul",
        &[&[2, 3], &[2, 3], &[2, 3]],
        AuditOptions::default(),
        |g, v, s| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[2])?;
            let c = g.mul(b, v[0])?;
            weighted_sum(g, c, s)
        },
    );
}

#[test]
fn audit_biases_and_scale() {
    audit(
        "bias/embed/scale",
        &[&[2, 3, 4], &[3], &[2, 3], &[5, 4], &[4]],
        AuditOptions::default(),
        |g, v, s| {
            let a = g.add_channel_bias(v[0], v[1])?;
            let b = g.add_channel_embed(a, v[2])?;
            let c = g.scale(b, -1.7);
            let r = g.add_row_bias(v[3], v[4])?;
            let l1 = weighted_sum(g, c, s)?;
            let l2 = weighted_sum(g, r, s + 1)?;
            g.add(l1, l2)
        },
    );
}

#[test]
fn audit_relu_away_from_kink() {
    let opts = AuditOptions {
        kink_margin: Some(1e-6),
        ..Default::default()
    };
    audit("relu", &[&[4, 6]], opts, |g, v, s| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, s)
    });
}

#[test]
fn audit_gelu_tanh() {
    audit(
        "gelu/tanh",
        &[&[3, 7]],
        AuditOptions::default(),
        |g, v, s| {
            let a = g.gelu(v[0]);
            let b = g.tanh(a);
            weighted_sum(g, b, s)
        },
    );
}

#[test]
fn audit_layer_norm() {
    audit(
        "layer_norm",
        &[&[3, 6], &[6], &[6]],
        AuditOptions::default(),
        |g, v, s| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, s)
        },
    );
}

#[test]
fn audit_mean_pool_reshape_narrow_concat() {
    audit(
        "pool/reshape/narrow/concat",
        &[&[2, 3, 4], &[2, 5]],
        AuditOptions::default(),
        |g, v, s| {
            let p = g.mean_pool(v[0])?;
            let c = g.concat(p, v[1])?;
            let n = g.narrow(c, 2, 5)?;
            let r = g.reshape(n, &[5, 2])?;
            let r = g.transpose(r)?;
            weighted_sum(g, r, s)
        },
    );
}

#[test]
fn audit_conv1d() {
    audit(
        "conv1d",
        &[&[2, 3, 11], &[4, 3, 5]],
        AuditOptions::default(),
        |g, v, s| {
            let y = g.conv1d(
                v[0],
                v[1],
                ConvSpec {
                    stride: 2,
                    pad: 2,
                    out_pad: 0,
                },
            )?;
            weighted_sum(g, y, s)
        },
    );
}

#[test]
fn audit_conv1d_transpose() {
    audit(
        "conv1d_transpose",
        &[&[2, 3, 5], &[3, 2, 3]],
        AuditOptions::default(),
        |g, v, s| {
            let y = g.conv1d_transpose(v[0], v[1], ConvSpec::down2(3))?;
            weighted_sum(g, y, s)
        },
    );
}

#[test]
fn audit_losses() {
    audit(
        "mse/softmax_ce",
        &[&[4, 3], &[4, 3]],
        AuditOptions::default(),
        |g, v, _| {
            let m = g.mse(v[0], v[1])?;
            let ce = g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])?;
            g.add(m, ce)
        },
    );
}

#[test]
fn audit_two_layer_mlp() {
    audit(
        "mlp",
        &[&[5, 4], &[4, 8], &[8], &[8, 3], &[3]],
        AuditOptions::default(),
        |g, v, s| {
            let x = g.input(init::normal(&mut rng(s + 100), &[5, 4], 1.0));
            let h = g.matmul(x, v[1])?;
            let h = g.add_row_bias(h, v[2])?;
            let h = g.tanh(h);
            let o = g.matmul(h, v[3])?;
            let o = g.add_row_bias(o, v[4])?;
            let t = g.input(init::normal(&mut rng(s + 200), &[5, 3], 1.0));
            let l = g.mse(o, t)?;
            // v[0] unused: exercises zero gradient for unreachable parameters.
            let _ = v[0];
            Ok(l)
        },
    );
}

#[test]
fn reshape_roundtrip_is_identity() {
    let a = init::normal::<f32, _>(&mut rng(9), &[2, 3, 4], 1.0);
    let b = a
        .clone()
        .reshape(&[6, 4])
        .unwrap()
        .reshape(&[2, 3, 4])
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let ps = params(42, &[&[2, 3, 16], &[5, 3, 3]]).cast::<f32>();
        let mut g = Graph::new();
        let v = ps.bind(&mut g);
        let y = g.conv1d(v[0], v[1], ConvSpec::same(3)).unwrap();
        let y = g.gelu(y);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        ps.collect_grads(&grads, &v)
    };
    assert_eq!(run(), run());
}
