use macb_core::harness::gradcheck;
use macb_core::macl::{
    self, attention_weights, compute_tau, contrastive_loss, gate_and_smooth, similarity_matrix, smooth, Components,
    MaclConfig, Modality, NegativeQueue, Negatives, StepInputs, Tag, TemperatureState,
};
use macb_core::numerics::rng::{seeded, Rng};
use macb_core::numerics::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn unit_rows(b: usize, d: usize, rng: &mut Rng) -> Tensor {
    let t = Tensor::randn(&[b, d], rng);
    let rows: Vec<Tensor> = (0..b)
        .map(|i| {
            let r = t.row(i);
            let n = r.norm();
            r.map(|x| x / n)
        })
        .collect();
    Tensor::stack(&rows).unwrap()
}

fn tags(b: usize, offset: usize) -> Vec<Tag> {
    (0..b).map(|i| Tag { identity: offset + i, class: i % 4 }).collect()
}

fn params(cfg: &MaclConfig, seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    macl::init(&mut p, cfg, 8, &mut seeded(seed));
    p
}

#[test]
fn similarity_examples() {
    let mut g = Graph::new();
    let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let x = g.constant(eye.clone());
    let s = similarity_matrix(&mut g, x, x).unwrap();
    assert_eq!(g.value(s), &eye);

    let mut rng = seeded(1);
    let a = unit_rows(4, 5, &mut rng);
    let xa = g.constant(a.clone());
    let na = g.constant(a.map(|v| -v));
    let s = similarity_matrix(&mut g, xa, na).unwrap();
    for i in 0..4 {
        assert!((g.value(s).at(&[i, i]) + 1.0).abs() < 1e-12);
    }

    let b = unit_rows(4, 5, &mut rng);
    let xb = g.constant(b.clone());
    let s = similarity_matrix(&mut g, xa, xb).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let dot: f64 = (0..5).map(|k| a.at(&[i, k]) * b.at(&[j, k])).sum();
            assert!((g.value(s).at(&[i, j]) - dot).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_weight_examples() {
    let cfg = MaclConfig::default();
    let mut p = params(&cfg, 0);
    let sv = Tensor::uniform(&[5, 5], -1.0, 1.0, &mut seeded(2));
    let mut g = Graph::new();
    let s = g.constant(sv.clone());
    let w = attention_weights(&mut g, &p, s).unwrap();
    assert!((g.value(w).sum() - 1.0).abs() < 1e-12);
    assert!(g.value(w).data().iter().all(|&v| v > 0.0));

    // constant scorer gives uniform weights (params are bound once per graph)
    p.insert("macl.score2.w", Tensor::zeros(&[8, 1]));
    let mut g = Graph::new();
    let s = g.constant(sv);
    let w = attention_weights(&mut g, &p, s).unwrap();
    assert!(g.value(w).data().iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-15));

    let one = g.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
    let w = attention_weights(&mut g, &p, one).unwrap();
    assert_eq!(g.value(w).data(), &[1.0]);
}

/// Scalar recomputation of the temperature statistics.
fn tau_oracle(s: &Tensor, w: &Tensor, beta: [f64; 3], cfg: &MaclConfig) -> ([f64; 3], f64) {
    let n = s.len() as f64;
    let mean = s.data().iter().sum::<f64>() / n;
    let var = s.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let skew: f64 = s.data().iter().zip(w.data()).map(|(x, wi)| wi * (x - mean).abs().powi(3)).sum();
    let ent: f64 = -w.data().iter().map(|wi| wi * wi.ln()).sum::<f64>();
    let z = beta[0] * var + beta[1] * skew + beta[2] * ent;
    ([var, skew, ent], (cfg.tau0 * z.exp()).clamp(cfg.tau_min, cfg.tau_max))
}

fn tau_for(p: &ParamStore, cfg: &MaclConfig, s: &Tensor) -> (Tensor, Tensor, Tensor, f64) {
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let w = attention_weights(&mut g, p, sv).unwrap();
    let t = compute_tau(&mut g, p, cfg, sv, w).unwrap();
    (s.clone(), g.value(w).clone(), g.value(t.phi).clone(), g.item(t.tau_new))
}

#[test]
fn compute_tau_examples() {
    let cfg = MaclConfig::default();
    let mut p = params(&cfg, 0);
    let s = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut seeded(3));
    assert_eq!(tau_for(&p, &cfg, &s).3, cfg.tau0);

    let beta = [0.1, 0.05, 0.02];
    p.insert("macl.beta", Tensor::from_vec(beta.to_vec()));
    let (s, w, phi, tau) = tau_for(&p, &cfg, &s);
    let (want_phi, want_tau) = tau_oracle(&s, &w, beta, &cfg);
    assert!((tau - want_tau).abs() < 1e-14);
    for k in 0..3 {
        assert!((phi.data()[k] - want_phi[k]).abs() < 1e-14);
    }

    // constant S: no spread, uniform weights, entropy log B²
    let (_, _, phi, tau) = tau_for(&p, &cfg, &Tensor::full(&[4, 4], 0.4));
    assert!(phi.data()[0].abs() < 1e-15 && phi.data()[1].abs() < 1e-15);
    assert!((phi.data()[2] - 16f64.ln()).abs() < 1e-12);
    let expect = cfg.tau0 * (beta[2] * 16f64.ln()).exp();
    assert!((tau - expect).abs() < 1e-14);
}

#[test]
fn temperature_is_clamped() {
    let cfg = MaclConfig::default();
    let mut p = params(&cfg, 0);
    let s = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut seeded(4));
    p.insert("macl.beta", Tensor::from_vec(vec![0.0, 0.0, 100.0]));
    assert_eq!(tau_for(&p, &cfg, &s).3, cfg.tau_max);
    p.insert("macl.beta", Tensor::from_vec(vec![0.0, 0.0, -100.0]));
    assert_eq!(tau_for(&p, &cfg, &s).3, cfg.tau_min);
}

#[test]
fn smoothing_examples() {
    let mut g = Graph::new();
    let gamma = g.scalar(0.3);
    let new = g.scalar(2.0);
    let t = smooth(&mut g, gamma, 1.0, new).unwrap();
    assert!((g.item(t) - 1.7).abs() < 1e-15);
    let same = g.scalar(0.5);
    for gm in [0.0, 0.2, 0.9, 1.0] {
        let gamma = g.scalar(gm);
        let t = smooth(&mut g, gamma, 0.5, same).unwrap();
        assert!((g.item(t) - 0.5).abs() < 1e-15);
    }
    // a saturated gate keeps the previous temperature
    let cfg = MaclConfig::default();
    let mut p = params(&cfg, 1);
    p.insert("macl.gate2.b", Tensor::from_vec(vec![60.0]));
    let state = TemperatureState { tau: 0.3, ..TemperatureState::new(&cfg) };
    let new = g.scalar(4.0);
    let out = gate_and_smooth(&mut g, &p, &state, new).unwrap();
    assert!((g.item(out.tau) - 0.3).abs() < 1e-12);
}

/// `−(1/B) Σ_i log(e^{p_i/τ} / (e^{p_i/τ} + Σ_k m_ik e^{(n_ik − m)/τ}))` by loops.
fn loss_oracle(a: &Tensor, pos: &Tensor, neg: &Tensor, mask: &Tensor, tau: f64, margin: f64) -> f64 {
    let (b, d) = (a.shape()[0], a.shape()[1]);
    let k = neg.shape()[0];
    let dot = |x: &Tensor, i: usize, y: &Tensor, j: usize| (0..d).map(|c| x.at(&[i, c]) * y.at(&[j, c])).sum::<f64>();
    let mut total = 0.0;
    for i in 0..b {
        let p = (dot(a, i, pos, i) / tau).exp();
        let mut den = p;
        for j in 0..k {
            den += mask.at(&[i, j]) * ((dot(a, i, neg, j) - margin) / tau).exp();
        }
        total -= (p / den).ln();
    }
    total / b as f64
}

#[test]
fn contrastive_closed_form() {
    // positive similarity 1, one negative at −1, τ = 1, m = 0
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let neg = Negatives {
        emb: Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap(),
        mask: Tensor::ones(&[1, 1]),
    };
    let tau = g.scalar(1.0);
    let l = contrastive_loss(&mut g, a, a, Some(&neg), tau, 0.0).unwrap();
    assert!((g.item(l) - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
    // huge margin drives the negative term to zero
    let l = contrastive_loss(&mut g, a, a, Some(&neg), tau, 500.0).unwrap();
    assert!(g.item(l).abs() < 1e-15);
    // empty queue, maximal positive similarity
    let l = contrastive_loss(&mut g, a, a, None, tau, 0.2).unwrap();
    assert_eq!(g.item(l), 0.0);
}

#[test]
fn contrastive_matches_scalar_loop() {
    let mut rng = seeded(7);
    for trial in 0..20 {
        let (b, d, k) = (5, 6, 4);
        let a = unit_rows(b, d, &mut rng);
        let pos = unit_rows(b, d, &mut rng);
        let emb = unit_rows(k, d, &mut rng);
        let mask = Tensor::new(vec![b, k], (0..b * k).map(|i| ((i + trial) % 3 != 0) as u8 as f64).collect()).unwrap();
        let tau_v = rng.random_range(0.05..2.0);
        let margin = rng.random_range(0.0..0.5);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let pv = g.constant(pos.clone());
        let tau = g.scalar(tau_v);
        let neg = Negatives { emb: emb.clone(), mask: mask.clone() };
        let l = contrastive_loss(&mut g, av, pv, Some(&neg), tau, margin).unwrap();
        let want = loss_oracle(&a, &pos, &emb, &mask, tau_v, margin);
        assert!((g.item(l) - want).abs() < 1e-10, "trial {trial}");
        assert!(g.item(l) >= 0.0);
    }
}

#[test]
fn queue_is_fifo_with_eligibility() {
    let mut q = NegativeQueue::new(3, 2);
    let e = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    q.push(&e, &tags(2, 0)).unwrap();
    q.push(&e.map(|v| -v), &tags(2, 10)).unwrap();
    assert_eq!(q.len(), 3);
    let first: Vec<Vec<f64>> = q.entries().map(|(x, _)| x.to_vec()).collect();
    assert_eq!(first, vec![vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]);
    // anchor (identity 1, class 1) matches the first entry only
    let m = q.eligibility(&[Tag { identity: 1, class: 1 }]);
    assert_eq!(m.data(), &[0.0, 1.0, 1.0]);
    assert!(q.push(&Tensor::zeros(&[1, 3]), &tags(1, 0)).is_err());
    assert!(NegativeQueue::new(4, 2).embeddings().is_none());
}

#[test]
fn nearest_selection_keeps_most_similar_entries() {
    let mut q = NegativeQueue::new(4, 2);
    let e = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
    q.push(&e, &tags(3, 100)).unwrap();
    let anchor = Tensor::new(vec![1, 2], vec![0.8, 0.6]).unwrap();
    let n = Negatives::from_queue(&q, &tags(1, 0), &anchor, Some(2)).unwrap();
    assert_eq!(n.mask.data(), &[1.0, 1.0, 0.0]);
    assert_eq!(n.count(), 2);
}

struct Setup {
    cfg: MaclConfig,
    p: ParamStore,
    v: Tensor,
    a: Tensor,
    v2: Tensor,
    a2: Tensor,
    tags: Vec<Tag>,
    qv: NegativeQueue,
    qa: NegativeQueue,
}

fn setup(seed: u64, b: usize) -> Setup {
    let cfg = MaclConfig { d_proj: 6, queue_size: 8, ..MaclConfig::default() };
    let mut rng = seeded(seed);
    let mut p = params(&cfg, seed);
    p.insert("macl.beta", Tensor::uniform(&[3], -0.5, 0.5, &mut rng));
    let mut qv = NegativeQueue::new(cfg.queue_size, cfg.d_proj);
    let mut qa = NegativeQueue::new(cfg.queue_size, cfg.d_proj);
    qv.push(&unit_rows(6, cfg.d_proj, &mut rng), &tags(6, 50)).unwrap();
    qa.push(&unit_rows(6, cfg.d_proj, &mut rng), &tags(6, 50)).unwrap();
    Setup {
        v: Tensor::randn(&[b, 8], &mut rng),
        a: Tensor::randn(&[b, 8], &mut rng),
        v2: Tensor::randn(&[b, 8], &mut rng),
        a2: Tensor::randn(&[b, 8], &mut rng),
        tags: tags(b, 0),
        cfg,
        p,
        qv,
        qa,
    }
}

fn run(g: &mut Graph, s: &Setup, state: &TemperatureState, comps: Components) -> macl::MaclOutput {
    let proj = |g: &mut Graph, m: Modality, t: &Tensor| {
        let x = g.constant(t.clone());
        macl::project(g, &s.p, m, x).unwrap()
    };
    let x_v = proj(g, Modality::Video, &s.v);
    let x_a = proj(g, Modality::Audio, &s.a);
    let x_v2 = proj(g, Modality::Video, &s.v2);
    let x_a2 = proj(g, Modality::Audio, &s.a2);
    let inp = StepInputs {
        x_v,
        x_a,
        x_v2: Some(x_v2),
        x_a2: Some(x_a2),
        tags: &s.tags,
        queue_v: &s.qv,
        queue_a: &s.qa,
    };
    macl::forward(g, &s.p, &s.cfg, state, &inp, comps).unwrap()
}

#[test]
fn projections_are_unit_norm() {
    let s = setup(0, 4);
    let mut g = Graph::new();
    let x = g.constant(s.v.clone());
    let z = macl::project(&mut g, &s.p, Modality::Video, x).unwrap();
    for i in 0..4 {
        assert!((g.value(z).row(i).norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn total_is_mean_of_components() {
    let s = setup(1, 4);
    let state = TemperatureState::new(&s.cfg);
    let mut g = Graph::new();
    let all = Components { cross: true, intra: true };
    let o = run(&mut g, &s, &state, all);
    let parts: Vec<f64> = [o.l_av, o.l_va, o.l_vv, o.l_aa].iter().map(|v| g.item(v.unwrap())).collect();
    assert!((g.item(o.l_c) - parts.iter().sum::<f64>() / 4.0).abs() < 1e-14);

    let cross = run(&mut g, &s, &state, Components { cross: true, intra: false });
    assert!(cross.l_vv.is_none() && cross.l_aa.is_none());
    let want = (g.item(cross.l_av.unwrap()) + g.item(cross.l_va.unwrap())) / 2.0;
    assert!((g.item(cross.l_c) - want).abs() < 1e-14);
    let none = run(&mut g, &s, &state, Components { cross: false, intra: false });
    assert_eq!(g.item(none.l_c), 0.0);
}

#[test]
fn fixed_temperature_when_adaptation_is_off() {
    let mut s = setup(2, 4);
    s.cfg.adaptive_tau = false;
    let state = TemperatureState::new(&s.cfg);
    let mut g = Graph::new();
    let o = run(&mut g, &s, &state, Components { cross: true, intra: true });
    assert_eq!(g.item(o.smoothed.tau), s.cfg.tau0);
}

#[test]
fn positive_similarity_gradient_is_negative() {
    // positives enter only through s_ii = a_i·p_i, so the derivative along a_i is ∂L/∂s_ii
    let mut rng = seeded(9);
    for _ in 0..20 {
        let mut store = ParamStore::new();
        store.insert("p", unit_rows(3, 4, &mut rng));
        let anchors = unit_rows(3, 4, &mut rng);
        let neg = Negatives { emb: unit_rows(5, 4, &mut rng), mask: Tensor::ones(&[3, 5]) };
        let mut g = Graph::new();
        let a = g.constant(anchors.clone());
        let p = g.param(&store, "p").unwrap();
        let tau = g.scalar(0.2);
        let l = contrastive_loss(&mut g, a, p, Some(&neg), tau, 0.2).unwrap();
        let grads = g.backward(l).unwrap();
        let gp = grads.get(p).unwrap();
        for i in 0..3 {
            assert!(gp.row(i).dot(&anchors.row(i)) < 0.0);
        }
    }
}

#[test]
fn one_step_improves_alignment_on_toy_batch() {
    // free unit embeddings for two samples; one negative per direction is the other sample
    let mut rng = seeded(10);
    let mut store = ParamStore::new();
    store.insert("v", Tensor::randn(&[2, 3], &mut rng));
    store.insert("a", Tensor::randn(&[2, 3], &mut rng));
    let stats = |store: &ParamStore| {
        let mut g = Graph::new();
        let v = g.param(store, "v").unwrap();
        let a = g.param(store, "a").unwrap();
        let v = macb_core::nn::l2_normalize(&mut g, v).unwrap();
        let a = macb_core::nn::l2_normalize(&mut g, a).unwrap();
        let s = similarity_matrix(&mut g, a, v).unwrap();
        let sv = g.value(s).clone();
        let pos = (sv.at(&[0, 0]) + sv.at(&[1, 1])) / 2.0;
        let neg = (sv.at(&[0, 1]) + sv.at(&[1, 0])) / 2.0;
        let negs = Negatives { emb: g.value(v).clone(), mask: Tensor::new(vec![2, 2], vec![0., 1., 1., 0.]).unwrap() };
        let tau = g.scalar(0.5);
        // negatives are detached values, as with the queue
        let l = contrastive_loss(&mut g, a, v, Some(&negs), tau, 0.1).unwrap();
        let grads = g.backward(l).unwrap();
        (pos, neg, g.param_grads(&grads, store))
    };
    let (pos0, neg0, grad) = stats(&store);
    store.axpy(-0.1, &grad).unwrap();
    let (pos1, neg1, _) = stats(&store);
    assert!(pos1 > pos0, "{pos0} -> {pos1}");
    assert!(neg1 < neg0, "{neg0} -> {neg1}");
}

#[test]
fn zero_beta_keeps_base_temperature_over_a_stream() {
    let s0 = setup(3, 4);
    let mut state = TemperatureState::new(&s0.cfg);
    for step in 0..100 {
        let s = setup(100 + step, 4);
        let mut s = Setup { p: s0.p.clone(), ..s };
        s.p.insert("macl.beta", Tensor::zeros(&[3]));
        let mut g = Graph::new();
        let o = run(&mut g, &s, &state, Components { cross: true, intra: true });
        let tau = g.item(o.smoothed.tau);
        assert!((tau - s.cfg.tau0).abs() <= 1e-15, "step {step}: {tau}");
        let grads = g.backward(o.l_c).unwrap();
        state.advance(&g, &grads, &o.smoothed);
    }
}

#[test]
fn gradients_match_finite_differences() {
    for r in gradcheck::run(Some("macl"), 4).unwrap() {
        assert!(r.max_err <= 1e-4, "{} {}: {:e} at {}", r.module, r.name, r.max_err, r.worst);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn temperature_stays_bounded_and_convex(seed in 0u64..10_000, scale in 0.1f64..30.0) {
        let base = setup(seed, 4);
        let mut rng = seeded(seed ^ 0x5eed);
        let mut state = TemperatureState::new(&base.cfg);
        for step in 0..25 {
            let s = setup(seed * 31 + step, 4);
            let mut s = Setup { p: base.p.clone(), ..s };
            s.p.insert("macl.beta", Tensor::uniform(&[3], -scale, scale, &mut rng));
            let mut g = Graph::new();
            let o = run(&mut g, &s, &state, Components { cross: true, intra: true });
            let (tau, new) = (g.item(o.smoothed.tau), g.item(o.tau_new.tau_new));
            prop_assert!(tau >= s.cfg.tau_min && tau <= s.cfg.tau_max);
            prop_assert!(tau >= state.tau.min(new) - 1e-15 && tau <= state.tau.max(new) + 1e-15);
            let grads = g.backward(o.l_c).unwrap();
            state.advance(&g, &grads, &o.smoothed);
        }
    }

    #[test]
    fn loss_is_nonnegative(seed in 0u64..10_000, tau in 0.02f64..3.0, margin in 0.0f64..1.0) {
        let mut rng = seeded(seed);
        let mut g = Graph::new();
        let a = g.constant(unit_rows(4, 5, &mut rng));
        let p = g.constant(unit_rows(4, 5, &mut rng));
        let neg = Negatives { emb: unit_rows(3, 5, &mut rng), mask: Tensor::ones(&[4, 3]) };
        let t = g.scalar(tau);
        let l = contrastive_loss(&mut g, a, p, Some(&neg), t, margin).unwrap();
        prop_assert!(g.item(l) >= 0.0);
    }
}
