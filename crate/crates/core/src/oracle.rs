//! Straight-line reference implementations.
//!
//! Nothing here is batched or pooled: rewards are an explicit double loop
//! over cosines, fusion weights are explicit exponentials, and
//! [`reference_process_image`] walks the per-image procedure step by step.
//! The engine is checked against these; they share only the scalar
//! primitives in `vecmath` and the substream derivation, so noise draws
//! line up.

use crate::detector::{Hyperparams, Snapshot};
use crate::engine::{AdaptState, Detection, ImageOutcome};
use crate::error::{Error, Result};
use crate::memory::{AnchorMode, MemoryAction};
use crate::rng::{Purpose, SeedTree};
use crate::vecmath::{cosine, sample_gaussian, sigmoid, Embedding};

/// Scalar-loop rewards, summed left to right.
pub fn brute_force_rewards(
    candidates: &[Embedding],
    current: &[Embedding],
    memory: &[Embedding],
    alpha: f64,
) -> Result<Vec<f64>> {
    if current.is_empty() && memory.is_empty() {
        return Err(Error::Degenerate("reward with no current or historical visuals".into()));
    }
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut r = 0.0;
        if !current.is_empty() {
            let mut s = 0.0;
            for v in current {
                s += cosine(c, v)?;
            }
            r += s / current.len() as f64;
        }
        if !memory.is_empty() {
            let mut s = 0.0;
            for h in memory {
                s += cosine(c, h)?;
            }
            r += alpha / memory.len() as f64 * s;
        }
        out.push(r);
    }
    Ok(out)
}

/// Explicit softmax-weighted fusion of `parent` with candidates whose reward
/// beats `base` (all of them when `filter` is off).
pub fn brute_force_fusion(
    parent: &[f64],
    candidates: &[Embedding],
    base: f64,
    rewards: &[f64],
    filter: bool,
) -> Embedding {
    if !rewards.iter().any(|&r| !filter || r > base) {
        return parent.to_vec();
    }
    let mut denom = base.exp();
    for &r in rewards {
        if !filter || r > base {
            denom += r.exp();
        }
    }
    let mut out = vec![0.0; parent.len()];
    let wb = base.exp() / denom;
    for j in 0..parent.len() {
        out[j] = wb * parent[j];
    }
    for (c, &r) in candidates.iter().zip(rewards) {
        if !filter || r > base {
            let w = r.exp() / denom;
            for j in 0..parent.len() {
                out[j] += w * c[j];
            }
        }
    }
    out
}

fn probs_loop(v: &[f64], text: &[Embedding]) -> Result<Vec<f64>> {
    let mut s = Vec::with_capacity(text.len());
    for t in text {
        s.push(sigmoid(cosine(v, t)?));
    }
    let mut m = f64::NEG_INFINITY;
    for &x in &s {
        if x > m {
            m = x;
        }
    }
    let mut total = 0.0;
    let mut e = Vec::with_capacity(s.len());
    for &x in &s {
        let y = (x - m).exp();
        total += y;
        e.push(y);
    }
    for y in e.iter_mut() {
        *y /= total;
    }
    Ok(e)
}

fn argmax_loop(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

/// Everything the reference produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOutcome {
    pub detections: Vec<Detection>,
    pub refined: Vec<(usize, Embedding)>,
    /// Per refined category, its candidate rewards.
    pub rewards: Vec<(usize, Vec<f64>)>,
    pub memory_actions: Vec<(usize, usize, MemoryAction)>,
}

/// Step-by-step single-image adaptation mutating `state`.
pub fn reference_process_image(
    snapshot: &Snapshot,
    state: &mut AdaptState,
    hp: &Hyperparams,
    seeds: &SeedTree,
    image_index: u64,
) -> Result<ReferenceOutcome> {
    let text = &snapshot.text_embeddings;
    let k_total = text.len();
    snapshot.validate(k_total, state.bank.dim())?;

    // Scores, confidence filter and pseudo-labels.
    let mut kept = Vec::new();
    for (m, cand) in snapshot.proposals.iter().enumerate() {
        let mut sig = Vec::with_capacity(k_total);
        for t in text {
            sig.push(sigmoid(cosine(&cand.visual, t)?));
        }
        let mut best = f64::NEG_INFINITY;
        for &s in &sig {
            if s > best {
                best = s;
            }
        }
        if best > hp.conf_threshold {
            let probs = probs_loop(&cand.visual, text)?;
            let label = argmax_loop(&probs);
            kept.push((m, cand, sig, probs, label));
        }
    }
    let mut out = ReferenceOutcome {
        detections: Vec::new(),
        refined: Vec::new(),
        rewards: Vec::new(),
        memory_actions: Vec::new(),
    };
    if kept.is_empty() {
        return Ok(out);
    }

    // Activation.
    let mut active = Vec::new();
    for k in 0..k_total {
        let mut s = f64::NEG_INFINITY;
        for (_, _, sig, probs, _) in &kept {
            let v = match hp.activation_space {
                crate::detector::ActivationSpace::Sigmoid => sig[k],
                crate::detector::ActivationSpace::Softmax => probs[k],
            };
            if v > s {
                s = v;
            }
        }
        if s > hp.tau_base {
            active.push(k);
        }
    }

    // Perturb, reward, fuse.
    for &k in &active {
        let mut current = Vec::new();
        for (_, cand, _, _, label) in &kept {
            if *label == k {
                current.push(cand.visual.clone());
            }
        }
        let history: Vec<Embedding> = if hp.use_history && hp.alpha > 0.0 {
            state.memories[k].entries().to_vec()
        } else {
            Vec::new()
        };
        if current.is_empty() && history.is_empty() {
            continue;
        }
        let mut stream = seeds.substream(image_index, k as u64, Purpose::Perturb);
        let mut candidates = Vec::with_capacity(hp.n);
        for _ in 0..hp.n {
            let eps = sample_gaussian(text[k].len(), hp.sigma, &mut stream)?;
            let mut c = text[k].clone();
            for j in 0..c.len() {
                c[j] += eps[j];
            }
            candidates.push(c);
        }
        let base = brute_force_rewards(std::slice::from_ref(&text[k]), &current, &history, hp.alpha)?[0];
        let rewards = brute_force_rewards(&candidates, &current, &history, hp.alpha)?;
        let refined = brute_force_fusion(&text[k], &candidates, base, &rewards, hp.use_filtering);
        out.rewards.push((k, rewards));
        out.refined.push((k, refined));
    }

    // Bank update and prediction embeddings.
    let mut t_hat = text.clone();
    if hp.use_global_bank {
        for (k, r) in &out.refined {
            state.bank.update(*k, r)?;
        }
        for k in 0..k_total {
            if state.bank.counter(k) > 0 {
                t_hat[k] = state.bank.mean(k).to_vec();
            }
        }
    } else {
        for (k, r) in &out.refined {
            t_hat[*k] = r.clone();
        }
    }

    // Refined predictions.
    for (m, cand, _, _, _) in &kept {
        let probs = probs_loop(&cand.visual, &t_hat)?;
        let label = argmax_loop(&probs);
        out.detections.push(Detection {
            proposal: *m,
            bbox: cand.bbox,
            probs,
            label,
            source: cand.source,
        });
    }

    // Memory.
    if hp.use_history {
        for i in 0..kept.len() {
            let visual = &kept[i].1.visual;
            let k = out.detections[i].label;
            let mem = &mut state.memories[k];
            let action = if mem.len() < mem.capacity() {
                mem.try_append(visual)
            } else if mem.capacity() == 0 {
                MemoryAction::Rejected
            } else {
                let anchor = match hp.anchor {
                    AnchorMode::Prediction => Some(t_hat[k].clone()),
                    AnchorMode::BankStrict if hp.use_global_bank && state.bank.counter(k) > 0 => {
                        Some(state.bank.mean(k).to_vec())
                    }
                    AnchorMode::BankStrict => None,
                };
                match anchor {
                    None => MemoryAction::Rejected,
                    Some(a) => mem.insert_or_replace(visual, &a)?,
                }
            };
            out.memory_actions.push((kept[i].0, k, action));
        }
    }
    Ok(out)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}

/// Compares an engine step with the reference step taken from the same
/// starting state. Returns a description of the first mismatch.
pub fn differential_check(
    engine: &ImageOutcome,
    engine_state: &AdaptState,
    reference: &ReferenceOutcome,
    reference_state: &AdaptState,
    tol: f64,
) -> std::result::Result<(), String> {
    if engine.detections.len() != reference.detections.len() {
        return Err(format!(
            "{} detections vs {} in reference",
            engine.detections.len(),
            reference.detections.len()
        ));
    }
    for (e, r) in engine.detections.iter().zip(&reference.detections) {
        if e.proposal != r.proposal || e.label != r.label || !close(&e.probs, &r.probs, tol) {
            return Err(format!("detection for proposal {} differs", r.proposal));
        }
    }
    let ek: Vec<usize> = engine.refined.iter().map(|(k, _)| *k).collect();
    let rk: Vec<usize> = reference.refined.iter().map(|(k, _)| *k).collect();
    if ek != rk {
        return Err(format!("refined categories {ek:?} vs {rk:?}"));
    }
    for ((k, e), (_, r)) in engine.refined.iter().zip(&reference.refined) {
        if !close(e, r, tol) {
            return Err(format!("refined embedding for category {k} differs"));
        }
    }
    let events: Vec<(usize, usize, MemoryAction)> = engine
        .trace
        .memory_events
        .iter()
        .map(|m| (m.proposal, m.category, m.action))
        .collect();
    if events != reference.memory_actions {
        return Err("memory actions differ".into());
    }
    if engine_state.bank.counters() != reference_state.bank.counters() {
        return Err("bank counters differ".into());
    }
    for k in 0..engine_state.bank.num_categories() {
        if !close(engine_state.bank.mean(k), reference_state.bank.mean(k), tol) {
            return Err(format!("bank mean for category {k} differs"));
        }
        let (em, rm) = (&engine_state.memories[k], &reference_state.memories[k]);
        if em.len() != rm.len() || em.entries().iter().zip(rm.entries()).any(|(a, b)| !close(a, b, tol)) {
            return Err(format!("memory for category {k} differs"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_candidate_single_visual_is_cosine() {
        let r = brute_force_rewards(&[vec![1.0, 1.0]], &[vec![1.0, 0.0]], &[], 0.2).unwrap();
        assert!((r[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(brute_force_rewards(&[], &[vec![1.0]], &[], 0.2).unwrap().is_empty());
        assert!(brute_force_rewards(&[vec![1.0]], &[], &[], 0.2).is_err());
    }

    #[test]
    fn fusion_without_survivors_returns_parent() {
        let p = vec![0.25, -1.5];
        assert_eq!(brute_force_fusion(&p, &[vec![9.0, 9.0]], 1.0, &[0.5], true), p);
    }
}
