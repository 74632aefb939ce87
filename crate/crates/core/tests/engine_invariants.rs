mod common;

use proptest::prelude::*;
use semevo::detector::{initial_scores, select_high_confidence, Candidate, Snapshot};
use semevo::engine::{baseline_detections, perturb, refine, Candidates, RewardReport};
use semevo::synthetic::{generate_world, stream, WorldConfig};
use semevo::vecmath::{cosine, normalized};
use semevo::{BBox, Engine, Hyperparams, Purpose, SeedTree};

fn world(images: usize, seed: u64) -> (semevo::synthetic::World, WorldConfig) {
    let cfg = WorldConfig { images, seed, ..Default::default() };
    (generate_world(&cfg).unwrap(), cfg)
}

fn run(hp: &Hyperparams, images: usize, parallel: bool) -> (Engine, Vec<semevo::ImageOutcome>) {
    let (w, cfg) = world(images, hp.seed);
    let mut engine = Engine::new(hp.clone(), cfg.num_categories, cfg.dim).unwrap().with_parallel(parallel);
    let outs = stream(&w, &cfg).map(|s| engine.process_image(&s.unwrap()).unwrap()).collect();
    (engine, outs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fusion_weights_form_a_simplex(
        base in -1.5f64..1.5,
        rewards in prop::collection::vec(-1.5f64..1.5, 0..300),
        filter in any::<bool>(),
    ) {
        let report = RewardReport::new(base, rewards.clone(), filter);
        let total = report.base_weight + report.survivor_weights.iter().sum::<f64>();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(report.base_weight > 0.0);
        prop_assert!(report.survivor_weights.iter().all(|&w| w > 0.0));
        if filter {
            prop_assert!(report.survivors.iter().all(|&i| rewards[i] > base));
            let expected: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i] > base).collect();
            prop_assert_eq!(&report.survivors, &expected);
        } else {
            prop_assert_eq!(report.survivors.len(), rewards.len());
        }
    }

    #[test]
    fn refined_is_the_explicit_weighted_sum(
        t in prop::collection::vec(-2.0f64..2.0, 1..16),
        n in 0usize..40,
        sigma in 0.0f64..0.5,
        base in -1.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut sub = SeedTree::new(seed).substream(0, 0, Purpose::Harness);
        let cands = perturb(&t, n, sigma, &mut sub).unwrap();
        let rewards: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37 + base).sin()).collect();
        let report = RewardReport::new(base, rewards, true);
        let out = refine(&t, &cands, &report);
        if report.survivors.is_empty() {
            // Bit-level identity with the parent.
            prop_assert!(out.iter().zip(&t).all(|(a, b)| a.to_bits() == b.to_bits()));
        } else {
            for j in 0..t.len() {
                let mut x = report.base_weight * t[j];
                for (&i, &w) in report.survivors.iter().zip(&report.survivor_weights) {
                    x += w * cands.row(i)[j];
                }
                prop_assert!((out[j] - x).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }
}

#[test]
fn unrefined_categories_predict_like_the_unadapted_detector() {
    let hp = Hyperparams { n: 200, ..Default::default() };
    let (w, cfg) = world(60, 3);
    let mut engine = Engine::new(hp.clone(), cfg.num_categories, cfg.dim).unwrap();
    let mut checked = 0;
    for s in stream(&w, &cfg) {
        let s = s.unwrap();
        let out = engine.process_image(&s).unwrap();
        for k in 0..cfg.num_categories {
            if engine.bank().counter(k) == 0 {
                assert_eq!(out.prediction_text[k], s.text_embeddings[k]);
                checked += 1;
            }
        }
        // With nothing refined yet, every score matches the zero-shot chain.
        if engine.bank().counters().iter().all(|&c| c == 0) {
            for d in &out.detections {
                let (_, p) = initial_scores(&s.proposals[d.proposal].visual, &s.text_embeddings).unwrap();
                assert!(d.probs.iter().zip(&p).all(|(a, b)| (a - b).abs() <= 1e-12));
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn counters_count_refined_images() {
    let hp = Hyperparams { n: 100, ..Default::default() };
    let (engine, outs) = run(&hp, 80, false);
    let mut expected = vec![0u64; 10];
    for o in &outs {
        for c in &o.trace.categories {
            assert!(o.trace.active.contains(&c.category));
            if !c.skipped {
                expected[c.category] += 1;
            }
        }
        assert_eq!(o.trace.categories.len(), o.trace.active.len());
    }
    assert_eq!(engine.bank().counters(), &expected[..]);
    assert!(expected.iter().sum::<u64>() > 0);
}

#[test]
fn runs_are_deterministic_and_parallelism_invariant() {
    let hp = Hyperparams { n: 300, seed: 11, ..Default::default() };
    let (a, oa) = run(&hp, 40, false);
    let (b, ob) = run(&hp, 40, false);
    let (c, oc) = run(&hp, 40, true);
    assert_eq!(a.state(), b.state());
    assert_eq!(a.state(), c.state());
    assert_eq!(oa, ob);
    assert_eq!(oa, oc);
}

#[test]
fn zero_candidates_still_update_the_bank_with_the_parent() {
    let hp = Hyperparams { n: 0, ..Default::default() };
    let (w, cfg) = world(30, 0);
    let mut engine = Engine::new(hp, cfg.num_categories, cfg.dim).unwrap();
    let mut touched = false;
    for s in stream(&w, &cfg) {
        let s = s.unwrap();
        let out = engine.process_image(&s).unwrap();
        for (k, r) in &out.refined {
            assert_eq!(r, &s.text_embeddings[*k]);
            touched = true;
        }
        assert!(out.trace.categories.iter().all(|c| c.survivors == 0));
    }
    assert!(touched);
    assert!(engine.bank().counters().iter().any(|&c| c > 0));
}

#[test]
fn no_active_categories_equals_baseline() {
    // Activation needs a sigmoid score above 0.999, which a cosine cannot reach.
    let hp = Hyperparams { n: 50, tau_base: 0.999, ..Default::default() };
    let (w, cfg) = world(30, 5);
    let mut engine = Engine::new(hp.clone(), cfg.num_categories, cfg.dim).unwrap();
    for s in stream(&w, &cfg) {
        let s = s.unwrap();
        let out = engine.process_image(&s).unwrap();
        assert!(out.trace.active.is_empty());
        assert_eq!(out.detections, baseline_detections(&s, hp.conf_threshold).unwrap());
    }
    assert!(engine.bank().counters().iter().all(|&c| c == 0));
}

#[test]
fn filter_keeps_exactly_the_confident_candidates_in_order() {
    let mut sub = SeedTree::new(42).substream(0, 0, Purpose::Harness);
    let text: Vec<Vec<f64>> = (0..4).map(|_| semevo::vecmath::sample_gaussian(16, 1.0, &mut sub).unwrap()).collect();
    let proposals: Vec<Candidate> = (0..900)
        .map(|_| Candidate {
            visual: normalized(&semevo::vecmath::sample_gaussian(16, 1.0, &mut sub).unwrap()).unwrap(),
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            source: None,
        })
        .collect();
    // Threshold halfway between the 30th and 31st largest max-score.
    let max_score = |v: &[f64]| {
        text.iter()
            .map(|t| semevo::vecmath::sigmoid(cosine(v, t).unwrap()))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut scores: Vec<f64> = proposals.iter().map(|c| max_score(&c.visual)).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let thr = 0.5 * (scores[29] + scores[30]);
    let snap = Snapshot {
        image_id: "filter".into(),
        image_size: (10.0, 10.0),
        text_embeddings: text.clone(),
        proposals: proposals.clone(),
        ground_truth: None,
    };
    let kept = select_high_confidence(&snap, thr).unwrap();
    let brute: Vec<usize> = (0..900).filter(|&i| max_score(&proposals[i].visual) > thr).collect();
    assert_eq!(brute.len(), 30);
    assert_eq!(kept.iter().map(|p| p.index).collect::<Vec<_>>(), brute);
}

#[test]
fn memory_sizes_never_exceed_capacity_during_a_run() {
    for m_max in 0..4 {
        let hp = Hyperparams { n: 50, m_max, ..Default::default() };
        let (engine, _) = run(&hp, 50, false);
        assert!(engine.memories().iter().all(|m| m.len() <= m_max));
    }
}

#[test]
fn candidates_are_not_renormalized() {
    let t = vec![3.0, 4.0];
    let mut sub = SeedTree::new(1).substream(0, 0, Purpose::Perturb);
    let c: Candidates = perturb(&t, 1000, 0.1, &mut sub).unwrap();
    let mean_norm = c.rows().map(semevo::vecmath::norm).sum::<f64>() / 1000.0;
    assert!((mean_norm - 5.0).abs() < 0.05);
}
