use std::collections::BTreeMap;

use macb_core::numerics::gradcheck::max_rel_error;
use macb_core::numerics::rng::seeded;
use macb_core::numerics::{finite_diff_grad, forward_backward, ConvSpec, Graph, ParamStore, Tensor, Var};
use macb_core::{Error, Result};
use proptest::prelude::*;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Checks reverse-mode against central differences for `op` applied to
/// parameters of the given shapes. The loss is sum(op(..) ∘ R) for a fixed
/// random R so that every output coordinate matters.
fn check(shapes: &[&[usize]], seed: u64, op: &Build) -> f64 {
    check_with(shapes, seed, op, |t| t)
}

fn check_with(shapes: &[&[usize]], seed: u64, op: &Build, prep: impl Fn(Tensor) -> Tensor) -> f64 {
    let mut rng = seeded(seed);
    let mut params = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        params.insert(format!("p{i}"), prep(Tensor::randn(s, &mut rng)));
    }
    let names: Vec<String> = params.names().cloned().collect();
    let weight_seed = seed.wrapping_add(99);
    let loss = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
        let vars = names.iter().map(|n| g.param(store, n)).collect::<Result<Vec<_>>>()?;
        let y = op(g, &vars)?;
        let mut wr = seeded(weight_seed);
        let w = Tensor::randn(g.shape(y), &mut wr);
        let w = g.constant(w);
        let yw = g.mul(y, w)?;
        g.sum(yw)
    };
    let inputs = BTreeMap::new();
    let (_, analytic) = forward_backward(&params, &inputs, |g, b| loss(g, b.params)).unwrap();
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::new();
            let l = loss(&mut g, p)?;
            Ok(g.item(l))
        },
        &params,
        1e-6,
    )
    .unwrap();
    max_rel_error(&analytic, &numeric, |_, _| true).0
}

const TOL: f64 = 1e-4;

#[test]
fn spec_examples() {
    // sum(p∘p) at p = [1, 2] has gradient [2, 4].
    let mut params = ParamStore::new();
    params.insert("p", Tensor::from_vec(vec![1.0, 2.0]));
    let inputs = BTreeMap::new();
    let (loss, grads) = forward_backward(&params, &inputs, |g, b| {
        let p = b.param(g, "p")?;
        let sq = g.mul(p, p)?;
        g.sum(sq)
    })
    .unwrap();
    assert_eq!(loss, 5.0);
    assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0]);

    // A constant loss leaves every gradient at zero.
    let (loss, grads) = forward_backward(&params, &inputs, |g, _| Ok(g.scalar(5.0))).unwrap();
    assert_eq!(loss, 5.0);
    assert_eq!(grads.get("p").unwrap().data(), &[0.0, 0.0]);

    // Undeclared names are errors.
    assert!(forward_backward(&params, &inputs, |g, b| b.input(g, "x")).is_err());
    assert!(forward_backward(&params, &inputs, |g, b| b.param(g, "q")).is_err());
}

#[test]
fn bce_of_sigmoid_at_zero_weight() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::scalar(0.0));
    let mut inputs = BTreeMap::new();
    inputs.insert("x".to_string(), Tensor::scalar(1.0));
    // -log σ(w x) for y = 1
    let f = |g: &mut Graph, b: &mut macb_core::numerics::Bindings| {
        let w = b.param(g, "w")?;
        let x = b.input(g, "x")?;
        let z = g.mul(w, x)?;
        let p = g.sigmoid(z)?;
        let l = g.log(p)?;
        g.neg(l)
    };
    let (_, grads) = forward_backward(&params, &inputs, f).unwrap();
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::new();
            let mut b = macb_core::numerics::Bindings::new(p, &inputs);
            let l = f(&mut g, &mut b)?;
            Ok(g.item(l))
        },
        &params,
        1e-6,
    )
    .unwrap();
    let a = grads.get("w").unwrap().item();
    assert!((a + 0.5).abs() < 1e-12);
    assert!((numeric.get("w").unwrap().item() - a).abs() < 1e-8);
}

#[test]
fn finite_difference_examples() {
    let mut params = ParamStore::new();
    params.insert("x", Tensor::scalar(3.0));
    let g = finite_diff_grad(|p| Ok(p.get("x").unwrap().item().powi(2)), &params, 1e-5).unwrap();
    assert!((g.get("x").unwrap().item() - 6.0).abs() < 1e-8);
    params.insert("x", Tensor::scalar(0.0));
    let g = finite_diff_grad(|p| Ok(p.get("x").unwrap().item().sin()), &params, 1e-5).unwrap();
    assert!((g.get("x").unwrap().item() - 1.0).abs() < 1e-9);
    assert!(finite_diff_grad(|_| Ok(0.0), &params, 0.0).is_err());
    assert!(finite_diff_grad(|_| Ok(f64::NAN), &params, 1e-5).is_err());
}

#[test]
fn elementwise_ops_with_broadcasting() {
    let cases: Vec<(&[&[usize]], Box<Build>)> = vec![
        (&[&[2, 3], &[2, 3]], Box::new(|g, v| g.add(v[0], v[1]))),
        (&[&[2, 3], &[3]], Box::new(|g, v| g.sub(v[0], v[1]))),
        (&[&[2, 1, 3], &[4, 1]], Box::new(|g, v| g.mul(v[0], v[1]))),
        (&[&[3], &[]], Box::new(|g, v| g.mul(v[0], v[1]))),
        (&[&[2, 3]], Box::new(|g, v| g.scale(v[0], -1.7))),
        (&[&[2, 3]], Box::new(|g, v| g.offset(v[0], 0.3))),
        (&[&[2, 3]], Box::new(|g, v| g.sigmoid(v[0]))),
        (&[&[2, 3]], Box::new(|g, v| g.tanh(v[0]))),
        (&[&[2, 3]], Box::new(|g, v| g.exp(v[0]))),
    ];
    for (i, (shapes, op)) in cases.iter().enumerate() {
        let e = check(shapes, i as u64, op.as_ref());
        assert!(e < TOL, "case {i}: rel err {e}");
    }
}

#[test]
fn ops_needing_positive_or_nonzero_inputs() {
    let away = |t: Tensor| t.map(|x| if x.abs() < 0.2 { x.signum() * 0.2 + x } else { x });
    let e = check_with(&[&[2, 3]], 1, &|g, v| g.relu(v[0]), away);
    assert!(e < TOL, "relu {e}");
    let pos = |t: Tensor| t.map(|x| x.abs() + 0.5);
    let e = check_with(&[&[2, 3]], 2, &|g, v| g.log(v[0]), pos);
    assert!(e < TOL, "log {e}");
    let e = check_with(&[&[2, 3], &[3]], 3, &|g, v| g.div(v[0], v[1]), pos);
    assert!(e < TOL, "div {e}");
}

#[test]
fn row_ops_and_reductions() {
    let cases: Vec<(&[&[usize]], Box<Build>)> = vec![
        (&[&[3, 5]], Box::new(|g, v| g.softmax(v[0]))),
        (&[&[2, 3, 6]], Box::new(|g, v| g.layer_norm(v[0], 1e-9))),
        (&[&[3, 4]], Box::new(|g, v| g.sum(v[0]))),
        (&[&[3, 4]], Box::new(|g, v| g.mean(v[0]))),
        (&[&[3, 4]], Box::new(|g, v| g.variance(v[0]))),
        (&[&[2, 3, 4]], Box::new(|g, v| g.sum_axis(v[0], 1))),
        (&[&[2, 3, 4]], Box::new(|g, v| g.mean_axis(v[0], 0))),
        (&[&[2, 3, 4]], Box::new(|g, v| g.var_axis(v[0], 2))),
    ];
    for (i, (shapes, op)) in cases.iter().enumerate() {
        let e = check(shapes, 10 + i as u64, op.as_ref());
        assert!(e < TOL, "case {i}: rel err {e}");
    }
}

#[test]
fn matmul_and_structure() {
    let cases: Vec<(&[&[usize]], Box<Build>)> = vec![
        (&[&[3, 4], &[4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        (&[&[2, 3, 4], &[4, 5]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        (&[&[2, 3, 4], &[2, 4, 5]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        (&[&[2, 3], &[2, 1]], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        (&[&[2, 3], &[1, 3]], Box::new(|g, v| g.concat(&[v[0], v[1], v[0]], 0))),
        (&[&[3, 5]], Box::new(|g, v| g.slice(v[0], 1, 1, 4))),
        (&[&[2, 3, 4]], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        (&[&[2, 3, 4]], Box::new(|g, v| g.transpose(v[0], 1, 2))),
        (&[&[2, 3, 4]], Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
    ];
    for (i, (shapes, op)) in cases.iter().enumerate() {
        let e = check(shapes, 30 + i as u64, op.as_ref());
        assert!(e < TOL, "case {i}: rel err {e}");
    }
}

#[test]
fn convolutions() {
    let cases: Vec<(&[&[usize]], Box<Build>)> = vec![
        (&[&[2, 2, 7], &[3, 2, 3]], Box::new(|g, v| g.conv(v[0], v[1], &ConvSpec::valid(1, 1)))),
        (
            &[&[1, 4, 5, 6], &[4, 2, 3, 3]],
            Box::new(|g, v| g.conv(v[0], v[1], &ConvSpec::same(&[3, 3], &[2, 1], 2)?)),
        ),
        (
            &[&[2, 2, 4, 3, 5], &[2, 1, 3, 3, 3]],
            Box::new(|g, v| g.conv(v[0], v[1], &ConvSpec::same(&[3, 3, 3], &[2, 2, 2], 2)?)),
        ),
        (
            &[&[1, 3, 3, 2, 2], &[6, 1, 1, 1, 1]],
            Box::new(|g, v| g.conv(v[0], v[1], &ConvSpec::valid(3, 3))),
        ),
    ];
    for (i, (shapes, op)) in cases.iter().enumerate() {
        let e = check(shapes, 50 + i as u64, op.as_ref());
        assert!(e < TOL, "case {i}: rel err {e}");
    }
}

/// Direct nested-loop 2-D convolution used as a value oracle.
fn naive_conv2d(x: &Tensor, w: &Tensor, dil: [usize; 2], pad: [usize; 2], groups: usize) -> Tensor {
    let (b, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = h + 2 * pad[0] - dil[0] * (kh - 1);
    let ow = wd + 2 * pad[1] - dil[1] * (kw - 1);
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    let per_group_out = cout / groups;
    for n in 0..b {
        for co in 0..cout {
            let grp = co / per_group_out;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cg {
                        for p in 0..kh {
                            for q in 0..kw {
                                let y = i as isize + (p * dil[0]) as isize - pad[0] as isize;
                                let z = j as isize + (q * dil[1]) as isize - pad[1] as isize;
                                if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[co, c, p, q]) * x.at(&[n, grp * cg + c, y as usize, z as usize]);
                            }
                        }
                    }
                    out.set(&[n, co, i, j], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_values_match_nested_loops() {
    let mut rng = seeded(7);
    let x = Tensor::randn(&[2, 4, 6, 5], &mut rng);
    let w = Tensor::randn(&[4, 2, 3, 3], &mut rng);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let spec = ConvSpec::same(&[3, 3], &[2, 1], 2).unwrap();
    let y = g.conv(xv, wv, &spec).unwrap();
    let expect = naive_conv2d(&x, &w, [2, 1], [2, 1], 2);
    assert_eq!(g.shape(y), expect.shape());
    assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn shape_errors_are_structured() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, node, .. }) => {
            assert_eq!(op, "matmul");
            assert_eq!(node, 2);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(g.add(a, b), Err(Error::Shape { op: "add", .. })));
    let nonscalar = g.add(a, a).unwrap();
    assert!(g.backward(nonscalar).is_err());
}

#[test]
fn non_finite_results_are_rejected() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.log(z), Err(Error::NonFinite { op: "log", .. })));
    let big = g.constant(Tensor::full(&[2], 1e4));
    assert!(matches!(g.exp(big), Err(Error::NonFinite { .. })));
    // softmax survives huge logits thanks to max-subtraction
    let s = g.softmax(big).unwrap();
    assert!((g.value(s).data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn intermediate_gradients_are_exposed() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(2.0));
    let y = g.mul(x, x).unwrap();
    let z = g.scale(y, 3.0).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.get(y).unwrap().item(), 3.0);
    assert_eq!(grads.get(x).unwrap().item(), 12.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flatten_unflatten_roundtrip(v in prop::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..40) {
        let split = split.min(v.len());
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_vec(vec![0.0; split]));
        if v.len() > split {
            s.insert("b", Tensor::from_vec(vec![0.0; v.len() - split]));
        }
        s.unflatten(&v).unwrap();
        prop_assert_eq!(s.flatten(), v);
    }

    #[test]
    fn random_composite_gradients_match(seed in 0u64..1000) {
        let e = check(&[&[3, 4], &[4, 3]], seed, &|g, v| {
            let m = g.matmul(v[0], v[1])?;
            let t = g.tanh(m)?;
            let s = g.softmax(t)?;
            let n = g.layer_norm(s, 1e-9)?;
            g.mul(n, t)
        });
        prop_assert!(e < TOL, "rel err {}", e);
    }

    #[test]
    fn layer_norm_rows_are_standardized(seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 16], &mut rng).map(|v| 3.0 * v + 1.0));
        let y = g.layer_norm(x, 1e-9).unwrap();
        for row in g.value(y).data().chunks(16) {
            let m = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 16.0;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
