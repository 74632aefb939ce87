//! One-step evolutionary refinement of category text embeddings.
//!
//! For every image, each active category's text embedding is treated as a
//! parent: `N` Gaussian offspring are drawn around it, scored by cosine
//! alignment with the category's current pseudo-labeled proposals and its
//! memory, and the offspring that beat the parent are fused with it by
//! softmax-of-reward weights. The fused embedding feeds a running average
//! (the global bank), which replaces the original text embedding for
//! prediction once it exists.

use rayon::prelude::*;
use serde::Serialize;

use crate::detector::{
    activation_set, initial_scores, select_high_confidence, BBox, Hyperparams, Proposal, Snapshot,
};
use crate::error::{Error, Result};
use crate::memory::{AnchorMode, CategoryMemoryBank, MemoryAction};
use crate::rng::{Purpose, SeedTree, Substream};
use crate::vecmath::{argmax, dot, fill_gaussian, norm, softmax, Embedding};

/// Running average of refined embeddings per category.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTextBank {
    means: Vec<Embedding>,
    counters: Vec<u64>,
}

impl GlobalTextBank {
    pub fn new(num_categories: usize, dim: usize) -> Self {
        Self {
            means: vec![vec![0.0; dim]; num_categories],
            counters: vec![0; num_categories],
        }
    }

    pub fn num_categories(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k]
    }

    pub fn means(&self) -> &[Embedding] {
        &self.means
    }

    pub fn counter(&self, k: usize) -> u64 {
        self.counters[k]
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    /// `mean_k <- (n_k * mean_k + refined) / (n_k + 1)`, `n_k <- n_k + 1`.
    pub fn update(&mut self, k: usize, refined: &[f64]) -> Result<()> {
        let mean = &mut self.means[k];
        if refined.len() != mean.len() {
            return Err(Error::dims("bank update", mean.len(), refined.len()));
        }
        let n = self.counters[k] as f64;
        for (m, r) in mean.iter_mut().zip(refined) {
            *m = (n * *m + r) / (n + 1.0);
        }
        self.counters[k] += 1;
        Ok(())
    }

    /// Bank value where the category has been refined at least once, `text` otherwise.
    pub fn prediction_embeddings(&self, text: &[Embedding]) -> Vec<Embedding> {
        text.iter()
            .enumerate()
            .map(|(k, t)| {
                if self.counters.get(k).copied().unwrap_or(0) > 0 {
                    self.means[k].clone()
                } else {
                    t.clone()
                }
            })
            .collect()
    }
}

/// `N x d` row-major block of perturbed embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    dim: usize,
    data: Vec<f64>,
}

impl Candidates {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn to_vecs(&self) -> Vec<Embedding> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}

/// Draws `n` candidates `t + eps`, `eps ~ N(0, sigma^2 I)`, row by row from `stream`.
pub fn perturb(t: &[f64], n: usize, sigma: f64, stream: &mut Substream) -> Result<Candidates> {
    let dim = t.len();
    let mut data = vec![0.0; n * dim];
    for row in data.chunks_exact_mut(dim.max(1)) {
        fill_gaussian(row, sigma, stream)?;
        for (x, base) in row.iter_mut().zip(t) {
            *x += base;
        }
    }
    Ok(Candidates { dim, data })
}

/// The visual context of one category folded into a single direction.
///
/// Because `cos(c, v) = c . v_hat / |c|`, the mean cosine against a set is
/// one dot product with the mean of the unit vectors. The memory term is
/// folded in with its `alpha` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardContext {
    pooled: Embedding,
}

impl RewardContext {
    /// `None` when both sets are empty.
    pub fn new(current: &[Embedding], memory: &[Embedding], alpha: f64) -> Result<Option<Self>> {
        if current.is_empty() && memory.is_empty() {
            return Ok(None);
        }
        let dim = current.first().or(memory.first()).map_or(0, Vec::len);
        let mut pooled = vec![0.0; dim];
        accumulate_unit_mean(&mut pooled, current, 1.0)?;
        accumulate_unit_mean(&mut pooled, memory, alpha)?;
        Ok(Some(Self { pooled }))
    }

    pub fn reward(&self, candidate: &[f64]) -> Result<f64> {
        if candidate.len() != self.pooled.len() {
            return Err(Error::dims("reward", self.pooled.len(), candidate.len()));
        }
        let n = norm(candidate);
        if n == 0.0 {
            return Err(Error::Degenerate("reward of a zero-norm candidate".into()));
        }
        Ok(dot(candidate, &self.pooled) / n)
    }

    pub fn rewards(&self, candidates: &Candidates) -> Result<Vec<f64>> {
        candidates.rows().map(|c| self.reward(c)).collect()
    }
}

fn accumulate_unit_mean(acc: &mut [f64], set: &[Embedding], weight: f64) -> Result<()> {
    if set.is_empty() {
        return Ok(());
    }
    let scale = weight / set.len() as f64;
    for v in set {
        if v.len() != acc.len() {
            return Err(Error::dims("reward context", acc.len(), v.len()));
        }
        let n = norm(v);
        if n == 0.0 {
            return Err(Error::Degenerate("zero-norm visual embedding".into()));
        }
        let f = scale / n;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += f * x;
        }
    }
    Ok(())
}

/// Mean cosine to `current` plus `alpha` times mean cosine to `memory`.
/// An empty set contributes nothing; both empty is an error.
pub fn reward(candidate: &[f64], current: &[Embedding], memory: &[Embedding], alpha: f64) -> Result<f64> {
    RewardContext::new(current, memory, alpha)?
        .ok_or_else(|| Error::Degenerate("reward with no current or historical visuals".into()))?
        .reward(candidate)
}

/// Rewards for one category and the resulting fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardReport {
    pub base_reward: f64,
    pub candidate_rewards: Vec<f64>,
    /// Candidates admitted to the fusion, ascending.
    pub survivors: Vec<usize>,
    pub base_weight: f64,
    /// Parallel to `survivors`.
    pub survivor_weights: Vec<f64>,
}

impl RewardReport {
    /// With `filter` the survivors are the candidates whose reward strictly
    /// exceeds the base reward; without it every candidate is fused.
    pub fn new(base_reward: f64, candidate_rewards: Vec<f64>, filter: bool) -> Self {
        let survivors: Vec<usize> = candidate_rewards
            .iter()
            .enumerate()
            .filter(|(_, &r)| !filter || r > base_reward)
            .map(|(i, _)| i)
            .collect();
        let mut logits = Vec::with_capacity(survivors.len() + 1);
        logits.push(base_reward);
        logits.extend(survivors.iter().map(|&i| candidate_rewards[i]));
        let mut weights = softmax(&logits).expect("non-empty finite logits");
        let base_weight = weights.remove(0);
        Self {
            base_reward,
            candidate_rewards,
            survivors,
            base_weight,
            survivor_weights: weights,
        }
    }

    pub fn best_reward(&self) -> f64 {
        self.candidate_rewards
            .iter()
            .copied()
            .fold(self.base_reward, f64::max)
    }
}

/// Weighted fusion of the parent with the surviving candidates.
pub fn refine(t: &[f64], candidates: &Candidates, report: &RewardReport) -> Embedding {
    if report.survivors.is_empty() {
        return t.to_vec();
    }
    let mut out: Embedding = t.iter().map(|x| report.base_weight * x).collect();
    for (&i, &w) in report.survivors.iter().zip(&report.survivor_weights) {
        for (o, c) in out.iter_mut().zip(candidates.row(i)) {
            *o += w * c;
        }
    }
    out
}

/// Softmax over `sigmoid(cos(v, t_hat_k))`.
pub fn refined_predictions(visual: &[f64], prediction_text: &[Embedding]) -> Result<Vec<f64>> {
    Ok(initial_scores(visual, prediction_text)?.1)
}

/// Mutable adaptation state carried across a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    pub bank: GlobalTextBank,
    pub memories: Vec<CategoryMemoryBank>,
}

impl AdaptState {
    pub fn new(num_categories: usize, dim: usize, memory_capacity: usize) -> Self {
        Self {
            bank: GlobalTextBank::new(num_categories, dim),
            memories: (0..num_categories)
                .map(|_| CategoryMemoryBank::new(memory_capacity))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    /// Position in the snapshot's candidate list.
    pub proposal: usize,
    pub bbox: BBox,
    pub probs: Vec<f64>,
    pub label: usize,
    pub source: Option<usize>,
}

impl Detection {
    pub fn score(&self) -> f64 {
        self.probs[self.label]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryTrace {
    pub category: usize,
    /// Kept proposals pseudo-labeled with this category.
    pub current: usize,
    /// Memory entries consulted by the reward.
    pub memory: usize,
    /// No visual context at all; nothing was refined and both rewards are zero.
    pub skipped: bool,
    pub base_reward: f64,
    pub best_reward: f64,
    pub survivors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryEvent {
    pub proposal: usize,
    pub category: usize,
    pub action: MemoryAction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageTrace {
    pub image_index: u64,
    pub kept: usize,
    pub active: Vec<usize>,
    pub categories: Vec<CategoryTrace>,
    pub memory_events: Vec<MemoryEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    pub detections: Vec<Detection>,
    /// Refined embedding per processed active category, in `active` order.
    pub refined: Vec<(usize, Embedding)>,
    /// Embeddings used for prediction on this image.
    pub prediction_text: Vec<Embedding>,
    pub trace: ImageTrace,
}

/// Zero-shot detections: kept proposals labeled by their initial scores.
pub fn baseline_detections(snapshot: &Snapshot, conf_threshold: f64) -> Result<Vec<Detection>> {
    Ok(select_high_confidence(snapshot, conf_threshold)?
        .into_iter()
        .map(|p| Detection {
            proposal: p.index,
            bbox: p.bbox,
            label: p.pseudo_label,
            probs: p.probs,
            source: p.source,
        })
        .collect())
}

struct CategoryStep {
    trace: CategoryTrace,
    refined: Option<Embedding>,
}

/// Streaming adaptation engine. Images must be fed in stream order.
#[derive(Debug, Clone)]
pub struct Engine {
    hp: Hyperparams,
    seeds: SeedTree,
    state: AdaptState,
    next_image: u64,
    parallel: bool,
}

impl Engine {
    pub fn new(hp: Hyperparams, num_categories: usize, dim: usize) -> Result<Self> {
        hp.validate()?;
        if num_categories == 0 || dim == 0 {
            return Err(Error::invalid("stream shape", "K and d must be positive"));
        }
        Ok(Self {
            seeds: SeedTree::new(hp.seed),
            state: AdaptState::new(num_categories, dim, hp.m_max),
            hp,
            next_image: 0,
            parallel: false,
        })
    }

    /// Evaluate active categories on the rayon pool. Results are identical
    /// to the sequential path.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn state(&self) -> &AdaptState {
        &self.state
    }

    pub fn bank(&self) -> &GlobalTextBank {
        &self.state.bank
    }

    pub fn memories(&self) -> &[CategoryMemoryBank] {
        &self.state.memories
    }

    pub fn images_processed(&self) -> u64 {
        self.next_image
    }

    pub fn prediction_embeddings(&self, text: &[Embedding]) -> Vec<Embedding> {
        if self.hp.use_global_bank {
            self.state.bank.prediction_embeddings(text)
        } else {
            text.to_vec()
        }
    }

    pub fn process_image(&mut self, snapshot: &Snapshot) -> Result<ImageOutcome> {
        let image_index = self.next_image;
        let outcome = self.process_at(snapshot, image_index)?;
        self.next_image += 1;
        Ok(outcome)
    }

    fn process_at(&mut self, snapshot: &Snapshot, image_index: u64) -> Result<ImageOutcome> {
        let hp = &self.hp;
        let num_categories = self.state.bank.num_categories();
        snapshot.validate(num_categories, self.state.bank.dim())?;
        let text = &snapshot.text_embeddings;

        let kept = select_high_confidence(snapshot, hp.conf_threshold)?;
        if kept.is_empty() {
            return Ok(ImageOutcome {
                detections: Vec::new(),
                refined: Vec::new(),
                prediction_text: self.prediction_embeddings(text),
                trace: ImageTrace {
                    image_index,
                    kept: 0,
                    active: Vec::new(),
                    categories: Vec::new(),
                    memory_events: Vec::new(),
                },
            });
        }
        let activation = activation_set(&kept, num_categories, hp.tau_base, hp.activation_space);

        let step = |&k: &usize| -> Result<CategoryStep> {
            let mut stream = self.seeds.substream(image_index, k as u64, Purpose::Perturb);
            refine_category(k, &text[k], &kept, &self.state.memories[k], hp, &mut stream)
        };
        let steps: Vec<CategoryStep> = if self.parallel {
            activation.active.par_iter().map(step).collect::<Result<_>>()?
        } else {
            activation.active.iter().map(step).collect::<Result<_>>()?
        };

        let mut refined = Vec::new();
        let mut categories = Vec::with_capacity(steps.len());
        for s in steps {
            if let Some(r) = s.refined {
                refined.push((s.trace.category, r));
            }
            categories.push(s.trace);
        }

        let prediction_text = if hp.use_global_bank {
            for (k, r) in &refined {
                self.state.bank.update(*k, r)?;
            }
            self.state.bank.prediction_embeddings(text)
        } else {
            let mut t_hat = text.clone();
            for (k, r) in &refined {
                t_hat[*k] = r.clone();
            }
            t_hat
        };

        let mut detections = Vec::with_capacity(kept.len());
        for p in &kept {
            let probs = refined_predictions(&p.visual, &prediction_text)?;
            let label = argmax(&probs).expect("K >= 1");
            detections.push(Detection {
                proposal: p.index,
                bbox: p.bbox,
                probs,
                label,
                source: p.source,
            });
        }

        let mut memory_events = Vec::new();
        if hp.use_history {
            for (p, det) in kept.iter().zip(&detections) {
                let k = det.label;
                let action = update_memory(
                    &mut self.state.memories[k],
                    &p.visual,
                    &prediction_text[k],
                    &self.state.bank,
                    k,
                    hp,
                )?;
                memory_events.push(MemoryEvent {
                    proposal: p.index,
                    category: k,
                    action,
                });
            }
        }

        Ok(ImageOutcome {
            detections,
            refined,
            prediction_text,
            trace: ImageTrace {
                image_index,
                kept: kept.len(),
                active: activation.active,
                categories,
                memory_events,
            },
        })
    }
}

fn refine_category(
    k: usize,
    parent: &[f64],
    kept: &[Proposal],
    memory: &CategoryMemoryBank,
    hp: &Hyperparams,
    stream: &mut Substream,
) -> Result<CategoryStep> {
    let current: Vec<Embedding> = kept
        .iter()
        .filter(|p| p.pseudo_label == k)
        .map(|p| p.visual.clone())
        .collect();
    // Memory with zero weight is no context: the reward would be constant.
    let history: &[Embedding] = if hp.use_history && hp.alpha > 0.0 {
        memory.entries()
    } else {
        &[]
    };
    let mut trace = CategoryTrace {
        category: k,
        current: current.len(),
        memory: history.len(),
        skipped: true,
        base_reward: 0.0,
        best_reward: 0.0,
        survivors: 0,
    };
    let Some(ctx) = RewardContext::new(&current, history, hp.alpha)? else {
        return Ok(CategoryStep { trace, refined: None });
    };
    let candidates = perturb(parent, hp.n, hp.sigma, stream)?;
    let base = ctx.reward(parent)?;
    let report = RewardReport::new(base, ctx.rewards(&candidates)?, hp.use_filtering);
    let out = refine(parent, &candidates, &report);
    trace.skipped = false;
    trace.base_reward = report.base_reward;
    trace.best_reward = report.best_reward();
    trace.survivors = report.survivors.len();
    Ok(CategoryStep { trace, refined: Some(out) })
}

fn update_memory(
    memory: &mut CategoryMemoryBank,
    visual: &[f64],
    prediction_anchor: &[f64],
    bank: &GlobalTextBank,
    k: usize,
    hp: &Hyperparams,
) -> Result<MemoryAction> {
    match hp.anchor {
        AnchorMode::Prediction => memory.insert_or_replace(visual, prediction_anchor),
        AnchorMode::BankStrict if hp.use_global_bank && bank.counter(k) > 0 => {
            memory.insert_or_replace(visual, bank.mean(k))
        }
        AnchorMode::BankStrict => Ok(memory.try_append(visual)),
    }
}
