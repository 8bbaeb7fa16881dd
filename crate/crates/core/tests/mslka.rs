use macb_core::harness::gradcheck;
use macb_core::mslka::{self, block, deep_stack, group_attention, kernel_sizes, mstlka, stlka, MslkaConfig};
use macb_core::numerics::rng::seeded;
use macb_core::numerics::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for (a, &n) in shape.iter().enumerate().rev() {
        out[a] = i % n;
        i /= n;
    }
    out
}

/// Zero-padded "same" depthwise convolution written as a plain loop.
fn depthwise_oracle(x: &Tensor, w: &Tensor, dil: usize) -> Tensor {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let sp = &x.shape()[2..];
    let ks = &w.shape()[2..];
    let n_sp: usize = sp.iter().product();
    let n_k: usize = ks.iter().product();
    let (xs, ws) = (strides(x.shape()), strides(w.shape()));
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ci in 0..c {
            for o in 0..n_sp {
                let pos = unravel(o, sp);
                let mut acc = 0.0;
                'taps: for t in 0..n_k {
                    let tap = unravel(t, ks);
                    let mut xi = bi * xs[0] + ci * xs[1];
                    let mut wi = ci * ws[0];
                    for a in 0..sp.len() {
                        let q = pos[a] as isize + (tap[a] as isize - (ks[a] / 2) as isize) * dil as isize;
                        if q < 0 || q >= sp[a] as isize {
                            continue 'taps;
                        }
                        xi += q as usize * xs[a + 2];
                        wi += tap[a] * ws[a + 2];
                    }
                    acc += x.data()[xi] * w.data()[wi];
                }
                out.data_mut()[bi * xs[0] + ci * xs[1] + o] = acc;
            }
        }
    }
    out
}

/// 1×…×1 convolution: `out[b, o, s] = Σ_i w[o, i] x[b, i, s]`.
fn pointwise_oracle(x: &Tensor, w: &Tensor) -> Tensor {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let n_sp: usize = x.shape()[2..].iter().product();
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        for o in 0..c {
            for s in 0..n_sp {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += w.data()[o * c + i] * x.data()[(bi * c + i) * n_sp + s];
                }
                out.data_mut()[(bi * c + o) * n_sp + s] = acc;
            }
        }
    }
    out
}

fn kernel(c: usize, k: usize, rank: usize, rng: &mut impl Rng) -> Tensor {
    let mut shape = vec![c, 1];
    shape.extend(std::iter::repeat_n(k, rank));
    Tensor::randn(&shape, rng)
}

fn run_stlka(x: &Tensor, dw: &Tensor, dwd: &Tensor, pw: &Tensor, dil: usize) -> Tensor {
    let mut g = Graph::new();
    let (xv, a, b, c) = (g.constant(x.clone()), g.constant(dw.clone()), g.constant(dwd.clone()), g.constant(pw.clone()));
    let y = stlka(&mut g, xv, a, b, c, dil).unwrap();
    g.value(y).clone()
}

#[test]
fn stlka_matches_naive_convolution() {
    let mut rng = seeded(0);
    for trial in 0..50 {
        let rank = rng.random_range(2..=3);
        let c = rng.random_range(1..=4);
        let b = rng.random_range(1..=2);
        let mut shape = vec![b, c];
        shape.extend((0..rank).map(|_| rng.random_range(1..=9)));
        let big_k = [3, 5, 7, 9][rng.random_range(0..4)];
        let dil = rng.random_range(1..=3);
        let (kdw, kdwd) = kernel_sizes(big_k, dil);
        let x = Tensor::randn(&shape, &mut rng);
        let dw = kernel(c, kdw, rank, &mut rng);
        let dwd = kernel(c, kdwd, rank, &mut rng);
        let mut pw_shape = vec![c, c];
        pw_shape.extend(std::iter::repeat_n(1, rank));
        let pw = Tensor::randn(&pw_shape, &mut rng);
        let want = pointwise_oracle(&depthwise_oracle(&depthwise_oracle(&x, &dw, 1), &dwd, dil), &pw);
        let got = run_stlka(&x, &dw, &dwd, &pw, dil);
        assert!(got.max_abs_diff(&want) < 1e-10, "trial {trial}: shape {shape:?} K {big_k} d {dil}");
    }
}

#[test]
fn kernel_sizes_examples() {
    assert_eq!(kernel_sizes(7, 2), (3, 5));
    assert_eq!(kernel_sizes(9, 3), (5, 3));
    assert_eq!(kernel_sizes(5, 1), (1, 5));
    // an even quotient is rounded up to odd
    assert_eq!(kernel_sizes(8, 2), (3, 5));
}

#[test]
fn impulse_response_spans_the_effective_kernel() {
    let mut rng = seeded(1);
    for (big_k, dil) in [(5, 2), (7, 2), (9, 3)] {
        let (kdw, kdwd) = kernel_sizes(big_k, dil);
        let reach = (kdw / 2) + (kdwd / 2) * dil;
        let n = 2 * reach + 5;
        let mut x = Tensor::zeros(&[1, 1, n, n]);
        x.set(&[0, 0, n / 2, n / 2], 1.0);
        let dw = kernel(1, kdw, 2, &mut rng);
        let dwd = kernel(1, kdwd, 2, &mut rng);
        let pw = Tensor::ones(&[1, 1, 1, 1]);
        let y = run_stlka(&x, &dw, &dwd, &pw, dil);
        let mut lo = n;
        let mut hi = 0;
        for i in 0..n {
            for j in 0..n {
                if y.at(&[0, 0, i, j]) != 0.0 {
                    lo = lo.min(i);
                    hi = hi.max(i);
                }
            }
        }
        assert_eq!(lo, n / 2 - reach);
        assert_eq!(hi, n / 2 + reach);
        assert!(hi - lo + 1 >= big_k, "receptive field {} below K = {big_k}", hi - lo + 1);
    }
}

fn block_params(cfg: &MslkaConfig, rank: usize, seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    for name in mslka::block_names("s", cfg.depth) {
        mslka::init_block(&mut p, &name, cfg, rank, &mut seeded(seed));
    }
    p
}

fn set_lambdas(p: &mut ParamStore, cfg: &MslkaConfig, rng: &mut impl Rng) {
    for name in mslka::block_names("s", cfg.depth) {
        for l in ["lambda1", "lambda2"] {
            p.insert(format!("{name}.{l}"), Tensor::scalar(rng.random_range(-1.0..1.0)));
        }
    }
}

#[test]
fn zero_lambda_block_is_bit_exact_identity() {
    let cfg = MslkaConfig::default();
    for (rank, shape) in [(3, vec![2, 16, 3, 4, 4]), (2, vec![2, 16, 8, 4])] {
        let p = block_params(&cfg, rank, 2);
        let x = Tensor::randn(&shape, &mut seeded(3));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block(&mut g, &p, "s.block0", &cfg, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }
}

#[test]
fn mstlka_is_the_concatenation_of_its_groups() {
    let cfg = MslkaConfig { n_groups: 4, channels: 8, ..MslkaConfig::default() };
    let p = block_params(&cfg, 2, 4);
    let x = Tensor::randn(&[2, 8, 6, 5], &mut seeded(5));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let whole = mstlka(&mut g, &p, "s.block0", &cfg, xv).unwrap();
    let whole = g.value(whole).clone();
    for i in 0..4 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let xi = g.slice(xv, 1, 2 * i, 2 * i + 2).unwrap();
        let gi = group_attention(&mut g, &p, "s.block0", &cfg, i, xi).unwrap();
        let gi = g.value(gi).clone();
        for b in 0..2 {
            for c in 0..2 {
                for t in 0..6 {
                    for f in 0..5 {
                        assert_eq!(whole.at(&[b, 2 * i + c, t, f]), gi.at(&[b, c, t, f]));
                    }
                }
            }
        }
    }
}

#[test]
fn closed_gate_silences_a_group() {
    let cfg = MslkaConfig::default();
    let mut p = block_params(&cfg, 3, 6);
    p.insert("s.block0.group1.gate.w", Tensor::zeros(&[8, 1, 3, 3, 3]));
    p.insert("s.block0.group1.gate.b", Tensor::zeros(&[8]));
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[1, 8, 3, 4, 4], &mut seeded(7)));
    let y = group_attention(&mut g, &p, "s.block0", &cfg, 1, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn depth_zero_is_identity_and_depth_two_composes() {
    let x = Tensor::randn(&[1, 16, 6, 4], &mut seeded(8));
    let zero = MslkaConfig { depth: 0, ..MslkaConfig::default() };
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = deep_stack(&mut g, &ParamStore::new(), "s", &zero, xv, |_, _, o| Ok(o)).unwrap();
    assert_eq!(g.value(y), &x);

    let cfg = MslkaConfig::default();
    let mut p = block_params(&cfg, 2, 9);
    set_lambdas(&mut p, &cfg, &mut seeded(10));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let stacked = deep_stack(&mut g, &p, "s", &cfg, xv, |_, _, o| Ok(o)).unwrap();
    let h1 = block(&mut g, &p, "s.block0", &cfg, xv).unwrap();
    let h2 = block(&mut g, &p, "s.block1", &cfg, h1).unwrap();
    assert_eq!(g.value(stacked), g.value(h2));
    assert_ne!(g.value(h2), &x);
}

#[test]
fn odd_depth_needs_an_explicit_override() {
    let odd = MslkaConfig { depth: 3, ..MslkaConfig::default() };
    assert!(odd.validate().is_err());
    assert!(MslkaConfig { allow_odd_depth: true, ..odd }.validate().is_ok());
    assert!(MslkaConfig { channels: 15, ..MslkaConfig::default() }.validate().is_err());
    assert!(MslkaConfig { gate_kernel: 4, ..MslkaConfig::default() }.validate().is_err());
}

#[test]
fn wrong_channel_count_is_rejected() {
    let cfg = MslkaConfig::default();
    let p = block_params(&cfg, 2, 11);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
    assert!(block(&mut g, &p, "s.block0", &cfg, x).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    for r in gradcheck::run(Some("mslka"), 3).unwrap() {
        assert!(r.max_err <= 1e-4, "{}: {:e} at {}", r.name, r.max_err, r.worst);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn block_preserves_shape(seed in 0u64..1000, t in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let cfg = MslkaConfig { channels: 4, ..MslkaConfig::default() };
        let mut p = block_params(&cfg, 3, seed);
        set_lambdas(&mut p, &cfg, &mut seeded(seed));
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 4, t, h, w], &mut seeded(seed + 1)));
        let y = deep_stack(&mut g, &p, "s", &cfg, x, |_, _, o| Ok(o)).unwrap();
        prop_assert_eq!(g.shape(y), &[2, 4, t, h, w]);
        prop_assert!(g.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stlka_is_linear(seed in 0u64..1000, a in -2.0f64..2.0) {
        let mut rng = seeded(seed);
        let x = Tensor::randn(&[1, 2, 5, 6], &mut rng);
        let y = Tensor::randn(&[1, 2, 5, 6], &mut rng);
        let (dw, dwd) = (kernel(2, 3, 2, &mut rng), kernel(2, 5, 2, &mut rng));
        let pw = Tensor::randn(&[2, 2, 1, 1], &mut rng);
        let combo = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let fx = run_stlka(&x, &dw, &dwd, &pw, 2);
        let fy = run_stlka(&y, &dw, &dwd, &pw, 2);
        let want = fx.zip_map(&fy, |p, q| a * p + q).unwrap();
        prop_assert!(run_stlka(&combo, &dw, &dwd, &pw, 2).max_abs_diff(&want) < 1e-10);
    }
}
