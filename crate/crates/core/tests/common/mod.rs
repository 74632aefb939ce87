//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semevo::detector::select_high_confidence;
use semevo::engine::{perturb, RewardContext};
use semevo::oracle::{differential_check, reference_process_image};
use semevo::synthetic::{generate_world, stream, ShiftConfig, WorldConfig};
use semevo::{ActivationSpace, AdaptState, AnchorMode, Engine, Hyperparams, Purpose, SeedTree};

pub const REWARD_TOL: f64 = 1e-9;
pub const EMBED_TOL: f64 = 1e-9;

/// A small random world and hyperparameter set within the differential-test envelope.
pub fn random_case(seed: u64) -> (WorldConfig, Hyperparams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=10);
    let d = rng.random_range(4..=64);
    let world = WorldConfig {
        num_categories: k,
        dim: d,
        images: rng.random_range(4..=8),
        proposals_per_image: [2, rng.random_range(2..=10)],
        categories_per_image: [1, rng.random_range(1..=k.min(3))],
        shift: ShiftConfig {
            rotations: rng.random_range(0..=2 * d),
            angle: rng.random_range(0.0..0.4),
            translation: rng.random_range(0.0..0.2),
            proposal_noise: 0.0,
        },
        text_jitter_std: rng.random_range(0.0..0.01),
        intra_class_std: rng.random_range(0.01..0.08),
        background_rate: rng.random_range(0.0..0.5),
        duplicate_rate: rng.random_range(0.0..0.5),
        separation_cap: 0.999,
        prototype_coherence: rng.random_range(0.0..4.0),
        text_offset: rng.random_range(0.0..0.2),
        text_scale: if rng.random::<bool>() { 1.0 } else { 3.0 },
        seed,
    };
    let hp = Hyperparams {
        n: rng.random_range(0..=200),
        tau_base: rng.random_range(0.55..0.9),
        alpha: if rng.random::<bool>() { 0.2 } else { rng.random_range(0.0..1.0) },
        sigma: rng.random_range(0.0..0.3),
        m_max: rng.random_range(0..=4),
        conf_threshold: rng.random_range(0.3..0.6),
        activation_space: if rng.random_range(0..4) == 0 {
            ActivationSpace::Softmax
        } else {
            ActivationSpace::Sigmoid
        },
        seed,
        use_history: rng.random_range(0..10) < 7,
        use_filtering: rng.random_range(0..10) < 7,
        use_global_bank: rng.random_range(0..10) < 7,
        anchor: if rng.random::<bool>() {
            AnchorMode::Prediction
        } else {
            AnchorMode::BankStrict
        },
    };
    (world, hp)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct DiffStats {
    pub images: usize,
    pub refined: usize,
    pub rewards_checked: usize,
    pub memory_events: usize,
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Runs the engine and an independently evolving reference over the same
/// stream, comparing every image and the final state.
pub fn differential(world_cfg: &WorldConfig, hp: &Hyperparams) -> Result<DiffStats, String> {
    let e = |x: semevo::Error| x.to_string();
    let world = generate_world(world_cfg).map_err(e)?;
    let (k_total, dim) = (world_cfg.num_categories, world_cfg.dim);
    let mut engine = Engine::new(hp.clone(), k_total, dim).map_err(e)?;
    let mut ref_state = AdaptState::new(k_total, dim, hp.m_max);
    let seeds = SeedTree::new(hp.seed);
    let mut stats = DiffStats::default();

    for (i, snap) in stream(&world, world_cfg).enumerate() {
        let snap = snap.map_err(e)?;
        let memory_before: Vec<Vec<Vec<f64>>> =
            engine.memories().iter().map(|m| m.entries().to_vec()).collect();
        let ref_out = reference_process_image(&snap, &mut ref_state, hp, &seeds, i as u64).map_err(e)?;
        let out = engine.process_image(&snap).map_err(e)?;
        differential_check(&out, engine.state(), &ref_out, &ref_state, EMBED_TOL)
            .map_err(|m| format!("image {i}: {m}"))?;

        // Batched rewards against the scalar-loop rewards, per refined category.
        let kept = select_high_confidence(&snap, hp.conf_threshold).map_err(e)?;
        for (k, expected) in &ref_out.rewards {
            let current: Vec<Vec<f64>> =
                kept.iter().filter(|p| p.pseudo_label == *k).map(|p| p.visual.clone()).collect();
            let memory = if hp.use_history && hp.alpha > 0.0 { memory_before[*k].clone() } else { Vec::new() };
            let ctx = RewardContext::new(&current, &memory, hp.alpha)
                .map_err(e)?
                .ok_or_else(|| format!("image {i}: category {k} refined without context"))?;
            let mut sub = seeds.substream(i as u64, *k as u64, Purpose::Perturb);
            let cands = perturb(&snap.text_embeddings[*k], hp.n, hp.sigma, &mut sub).map_err(e)?;
            let got = ctx.rewards(&cands).map_err(e)?;
            if got.len() != expected.len() {
                return Err(format!("image {i}: category {k}: reward count differs"));
            }
            for (n, (a, b)) in got.iter().zip(expected).enumerate() {
                if !rel_close(*a, *b, REWARD_TOL) {
                    return Err(format!("image {i}: category {k}: reward {n}: {a} vs {b}"));
                }
            }
            stats.rewards_checked += got.len();
        }
        stats.images += 1;
        stats.refined += out.refined.len();
        stats.memory_events += out.trace.memory_events.len();
    }

    // Final banks.
    let bank = engine.bank();
    if bank.counters() != ref_state.bank.counters() {
        return Err("final counters differ".into());
    }
    for k in 0..k_total {
        for (a, b) in bank.mean(k).iter().zip(ref_state.bank.mean(k)) {
            if !rel_close(*a, *b, EMBED_TOL) {
                return Err(format!("final bank mean for category {k} differs"));
            }
        }
    }
    Ok(stats)
}
