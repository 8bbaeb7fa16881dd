use std::collections::BTreeSet;

use macb_core::audio::fft_magnitudes;
use macb_core::harness::ablation::{self, Recipe};
use macb_core::harness::config::{GenConfig, KeyValues, TrainConfig};
use macb_core::harness::data::{generate, AvClass, AvSample, Dataset};
use macb_core::harness::metrics::{accuracy, auc, Metrics};
use macb_core::harness::model::{Model, Prepared};
use macb_core::harness::train::{evaluate, train};
use macb_core::numerics::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

fn small_gen(delta: f64, n: usize) -> GenConfig {
    GenConfig {
        n_samples: n,
        n_identities: 10,
        delta,
        ..GenConfig::default()
    }
}

/// A model small enough to train in a few seconds on default-shaped data.
fn small_train(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig {
        epochs,
        batch_size: 8,
        ..TrainConfig::default()
    };
    c.encoder.d_model = 8;
    c.encoder.n_heads = 2;
    c.encoder.d_ff = 16;
    c.encoder.n_layers = 1;
    c.macl.d_proj = 6;
    c.macl.queue_size = 16;
    c.mslka.channels = 4;
    c.classify.heads = 2;
    c
}

#[test]
fn generated_samples_satisfy_label_invariants() {
    let data = generate(&small_gen(0.6, 100)).unwrap();
    assert_eq!(data.samples.len(), 100);
    let count = |c: AvClass| data.samples.iter().filter(|s| s.class == c).count();
    assert_eq!(count(AvClass::RealReal), 40);
    for c in [AvClass::FakeVideo, AvClass::FakeAudio, AvClass::FakeBoth] {
        assert_eq!(count(c), 20);
    }
    for s in &data.samples {
        assert_eq!(s.label == 0, s.class == AvClass::RealReal);
        assert_eq!(s.frame_labels.iter().all(|&f| f == 0.0), s.label == 0);
        assert_eq!(s.frame_labels.iter().filter(|&&f| f == 1.0).count(), if s.label == 0 { 0 } else { 4 });
        assert_eq!(s.video.shape(), &[8, 3, 16, 16]);
        assert_eq!(s.audio.len(), 5360);
        assert!(s.video.all_finite() && s.audio.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn split_is_identity_disjoint_and_covers_every_class() {
    let data = generate(&GenConfig::default()).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (512, 128));
    let ids = |idx: &[usize]| idx.iter().map(|&i| data.samples[i].identity).collect::<BTreeSet<_>>();
    assert!(ids(&data.train).is_disjoint(&ids(&data.test)));
    let mut all: Vec<usize> = data.train.iter().chain(&data.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..640).collect::<Vec<_>>());
    for c in AvClass::ALL {
        let n = data.test.iter().filter(|&&i| data.samples[i].class == c).count();
        // identities carry slightly uneven class mixes, so the split is close
        let want = if c == AvClass::RealReal { 0.4 } else { 0.2 };
        assert!((n as f64 / 128.0 - want).abs() < 0.03, "{c:?}: {n}");
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let data = generate(&small_gen(0.6, 24)).unwrap();
    let mut buf = Vec::new();
    data.write(&mut buf).unwrap();
    let back = Dataset::read(&mut buf.as_slice()).unwrap();
    assert_eq!(back, data);
    assert!(Dataset::read(&mut &buf[..buf.len() / 2]).is_err());
    assert!(Dataset::read(&mut &b"garbage"[..]).is_err());
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&small_gen(0.6, 12)).unwrap();
    let b = generate(&small_gen(0.6, 12)).unwrap();
    assert_eq!(a, b);
    let c = generate(&GenConfig { seed: 1, ..small_gen(0.6, 12) }).unwrap();
    assert_ne!(a.samples[0].audio, c.samples[0].audio);
}

#[test]
fn artifacts_stay_inside_forged_segments() {
    let plain = generate(&GenConfig { artifact: 0.0, ..small_gen(0.6, 40) }).unwrap();
    let marked = generate(&small_gen(0.6, 40)).unwrap();
    let frame_len = 3 * 16 * 16;
    let audio_frame = |k: usize| k * 8 / 5360;
    for (p, m) in plain.samples.iter().zip(&marked.samples) {
        for f in 0..8 {
            let range = f * frame_len..(f + 1) * frame_len;
            let same = p.video.data()[range.clone()] == m.video.data()[range];
            assert_eq!(same, !(m.class.video_fake() && m.frame_labels[f] == 1.0), "{:?} frame {f}", m.class);
        }
        for (k, (x, y)) in p.audio.iter().zip(&m.audio).enumerate() {
            if !(m.class.audio_fake() && m.frame_labels[audio_frame(k)] == 1.0) {
                assert_eq!(x, y);
            }
        }
        if m.class.audio_fake() {
            assert_ne!(p.audio, m.audio);
        }
    }
}

/// Per-frame blob row from the intensity-weighted centroid above background.
fn blob_rows(s: &AvSample) -> Vec<f64> {
    let [t, _, h, w] = [8, 3, 16, 16];
    (0..t)
        .map(|f| {
            let lum = |i: usize, j: usize| (0..3).map(|c| s.video.at(&[f, c, i, j])).sum::<f64>();
            let floor = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| lum(i, j)).fold(f64::INFINITY, f64::min);
            let (mut m, mut y) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let v = (lum(i, j) - floor).max(0.0).powi(4);
                    m += v;
                    y += v * i as f64;
                }
            }
            y / m
        })
        .collect()
}

/// Per-frame log2 of the dominant audio frequency.
fn pitches(s: &AvSample, sr: f64) -> Vec<f64> {
    let per = s.audio.len() / 8;
    (0..8)
        .map(|f| {
            let mut buf = vec![0.0; 8192];
            buf[..per].copy_from_slice(&s.audio[f * per..(f + 1) * per]);
            let mags = fft_magnitudes(&buf).unwrap();
            let lo = (100.0 * 8192.0 / sr) as usize;
            let peak = (lo..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
            (peak as f64 * sr / 8192.0).log2()
        })
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt().max(1e-12)
}

/// Higher means the modalities move together (pitch rises as the blob rises).
fn correlation_statistic(s: &AvSample) -> f64 {
    -pearson(&blob_rows(s), &pitches(s, 16000.0))
}

fn real_over_fake(data: &Dataset) -> f64 {
    let stat: Vec<(f64, bool)> = data.samples.iter().map(|s| (correlation_statistic(s), s.label == 1)).collect();
    let real: Vec<f64> = stat.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let fake: Vec<f64> = stat.iter().filter(|s| s.1).map(|s| s.0).collect();
    let wins = real.iter().flat_map(|r| fake.iter().map(move |f| r > f)).filter(|&w| w).count();
    wins as f64 / (real.len() * fake.len()) as f64
}

#[test]
fn full_strength_forgeries_break_the_audio_visual_correlation() {
    let data = generate(&small_gen(1.0, 200)).unwrap();
    let frac = real_over_fake(&data);
    assert!(frac >= 0.95, "real pairs beat fakes on {frac:.3} of pairs");
}

#[test]
fn zero_strength_forgeries_are_indistinguishable() {
    let data = generate(&small_gen(0.0, 200)).unwrap();
    let frac = real_over_fake(&data);
    assert!((frac - 0.5).abs() < 0.1, "{frac}");
}

#[test]
fn strength_orders_detectability() {
    let fracs: Vec<f64> = [0.2, 0.6, 1.0].iter().map(|&d| real_over_fake(&generate(&small_gen(d, 200)).unwrap())).collect();
    // the statistic saturates near full strength
    assert!(fracs[0] < fracs[1] && fracs[1] <= fracs[2] + 0.01, "{fracs:?}");
}

/// Counts every (positive, negative) pair, ties worth one half.
fn pairwise_auc(s: &[f64], y: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1.0 && y[j] == 0.0 {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    (den > 0.0).then_some(num / den)
}

#[test]
fn auc_matches_pairwise_oracle_with_ties() {
    let mut rng = seeded(0);
    for trial in 0..100 {
        let n = rng.random_range(2..40);
        // a coarse grid forces ties
        let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6)) / 5.0).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        assert_eq!(auc(&s, &y), pairwise_auc(&s, &y), "trial {trial}");
    }
}

#[test]
fn metric_examples() {
    let y = [0.0, 1.0, 1.0, 0.0, 1.0];
    assert_eq!(accuracy(&y, &y, 0.5), 1.0);
    assert_eq!(auc(&y, &y), Some(1.0));
    let flat = [0.3; 5];
    assert_eq!(accuracy(&flat, &y, 0.5), 0.4);
    assert_eq!(auc(&flat, &y), Some(0.5));
    assert_eq!(auc(&[0.1, 0.9], &[1.0, 1.0]), None);
    let m = Metrics {
        acc: 0.5,
        auc: None,
        frame_acc: 0.25,
        frame_auc: Some(0.75),
    };
    assert_eq!(m.csv_row(), "0.500000,undefined,0.250000,0.750000");
}

#[test]
fn config_files_parse_and_reject_mistakes() {
    let kv = KeyValues::parse("# comment\nepochs = 3  # trailing\n\nlr=0.01\nuse_pareto = off\nscales = 5:1,7:2\n").unwrap();
    let c = TrainConfig::from_kv(&kv).unwrap();
    assert_eq!((c.epochs, c.lr, c.flags.use_pareto), (3, 0.01, false));
    assert_eq!(c.mslka.scales, vec![(5, 1), (7, 2)]);
    let back = TrainConfig::from_kv(&KeyValues::parse(&c.to_kv()).unwrap()).unwrap();
    assert_eq!(back, c);
    for bad in ["epochs", "epochs = x", "nonsense = 1", "lr = 1\nlr = 2", "depth = 3", "use_macl = maybe"] {
        let r = KeyValues::parse(bad).and_then(|kv| TrainConfig::from_kv(&kv));
        assert!(r.is_err(), "{bad}");
    }
    let g = GenConfig::from_kv(&KeyValues::parse("delta = 0.3\nn_samples = 50").unwrap()).unwrap();
    assert_eq!((g.delta, g.n_samples), (0.3, 50));
    assert_eq!(GenConfig::from_kv(&KeyValues::parse(&g.to_kv()).unwrap()).unwrap(), g);
    assert!(GenConfig::from_kv(&KeyValues::parse("delta = 1.5").unwrap()).is_err());
}

#[test]
fn ablation_recipes_have_the_expected_rows() {
    let base = TrainConfig::default();
    let names = |r: Recipe| ablation::variants(r, &base).into_iter().map(|(n, _)| n).collect::<Vec<_>>();
    assert_eq!(names(Recipe::Contrastive).len(), 5);
    assert_eq!(names(Recipe::Depth), vec!["D=0", "D=2", "D=4", "D=6", "D=8"]);
    assert_eq!(names(Recipe::Pareto).len(), 2);
    assert!("contrastive".parse::<Recipe>().is_ok());
    assert!("bogus".parse::<Recipe>().is_err());
}

#[test]
fn identical_runs_write_identical_logs() {
    let data = generate(&small_gen(0.6, 48)).unwrap();
    let prep = Prepared::new(&data).unwrap();
    let run = || {
        let mut model = Model::new(small_train(2)).unwrap();
        let mut log = Vec::new();
        train(&mut model, &data, &prep, Some(&mut log), None).unwrap();
        let m = evaluate(&mut model, &data, &prep).unwrap();
        (log, m.csv_row(), model.params)
    };
    let (a, b) = (run(), run());
    assert!(!a.0.is_empty());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn plain_classifier_loss_decreases_over_two_hundred_steps() {
    let data = generate(&GenConfig { delta: 1.0, ..GenConfig::default() }).unwrap();
    let prep = Prepared::new(&data).unwrap();
    let mut cfg = small_train(4);
    cfg.batch_size = 10;
    cfg.lr = 3e-3;
    cfg.flags.use_macl = false;
    cfg.flags.use_weights = false;
    cfg.flags.use_pareto = false;
    cfg.mslka.depth = 0;
    let mut model = Model::new(cfg).unwrap();
    let report = train(&mut model, &data, &prep, None, None).unwrap();
    assert!(report.rows.len() >= 200);
    let mean = |r: &[macb_core::harness::train::LogRow]| r.iter().map(|x| x.l_m + x.l_u).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&report.rows[..30]), mean(&report.rows[170..200]));
    assert!(last < first, "first {first}, last {last}");
}

#[test]
fn mismatched_data_is_rejected() {
    let data = generate(&GenConfig { frames: 4, ..small_gen(0.6, 40) }).unwrap();
    let prep = Prepared::new(&data).unwrap();
    let mut model = Model::new(small_train(1)).unwrap();
    assert!(train(&mut model, &data, &prep, None, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_is_invariant_under_monotone_maps(seed in 0u64..10_000) {
        let mut rng = seeded(seed);
        let n = rng.random_range(2..30);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let t: Vec<f64> = s.iter().map(|v: &f64| v.exp() * 2.0 + 1.0).collect();
        prop_assert_eq!(auc(&s, &y), auc(&t, &y));
        if let Some(a) = auc(&s, &y) {
            let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc(&flipped, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }
}
