//! Detector-side data model and the zero-shot scoring chain.
//!
//! A [`Snapshot`] is what an open-vocabulary detector emits for one image:
//! per-image category text embeddings plus raw region candidates. Scores are
//! always recomputed from embeddings here; any score a file carries is
//! ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::AnchorMode;
use crate::vecmath::{argmax, cosine_many, sigmoid, softmax, Embedding};

/// Axis-aligned box in absolute pixel coordinates, serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Orders corners and clamps into `[0, width] x [0, height]`.
    pub fn clamped(&self, width: f64, height: f64) -> Self {
        let (x1, x2) = (self.x1.min(self.x2), self.x1.max(self.x2));
        let (y1, y2) = (self.y1.min(self.y2), self.y1.max(self.y2));
        Self {
            x1: x1.clamp(0.0, width),
            y1: y1.clamp(0.0, height),
            x2: x2.clamp(0.0, width),
            y2: y2.clamp(0.0, height),
        }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// A raw region candidate as stored in a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub visual: Embedding,
    pub bbox: BBox,
    /// Index into the snapshot's ground truth of the object this candidate
    /// was produced from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub category: usize,
    pub bbox: BBox,
}

/// One image's detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub image_id: String,
    pub image_size: (f64, f64),
    pub text_embeddings: Vec<Embedding>,
    pub proposals: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruth>>,
}

impl Snapshot {
    pub fn num_categories(&self) -> usize {
        self.text_embeddings.len()
    }

    /// Checks array shapes against a stream's `(K, d)` and that values are finite.
    pub fn validate(&self, num_categories: usize, dim: usize) -> Result<()> {
        if self.text_embeddings.len() != num_categories {
            return Err(Error::dims(
                "text_embeddings count",
                num_categories,
                self.text_embeddings.len(),
            ));
        }
        for t in &self.text_embeddings {
            if t.len() != dim {
                return Err(Error::dims("text embedding", dim, t.len()));
            }
            if !crate::vecmath::is_finite(t) {
                return Err(Error::Degenerate("non-finite text embedding".into()));
            }
        }
        for p in &self.proposals {
            if p.visual.len() != dim {
                return Err(Error::dims("proposal visual embedding", dim, p.visual.len()));
            }
            if !crate::vecmath::is_finite(&p.visual) {
                return Err(Error::Degenerate("non-finite visual embedding".into()));
            }
        }
        if let Some(gts) = &self.ground_truth {
            for g in gts {
                if g.category >= num_categories {
                    return Err(Error::invalid(
                        "ground_truth.category",
                        format!("{} out of range for K={num_categories}", g.category),
                    ));
                }
            }
            for p in &self.proposals {
                if let Some(s) = p.source {
                    if s >= gts.len() {
                        return Err(Error::invalid(
                            "proposal.source",
                            format!("{s} out of range for {} ground-truth boxes", gts.len()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A scored candidate that survived the confidence filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    /// Position in the snapshot's candidate list.
    pub index: usize,
    pub visual: Embedding,
    pub bbox: BBox,
    pub source: Option<usize>,
    pub sigmoid_scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub pseudo_label: usize,
}

impl Proposal {
    pub fn max_sigmoid(&self) -> f64 {
        self.sigmoid_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-category sigmoid of cosine, then softmax over categories.
pub fn initial_scores(visual: &[f64], text: &[Embedding]) -> Result<(Vec<f64>, Vec<f64>)> {
    if text.is_empty() {
        return Err(Error::Degenerate("no categories".into()));
    }
    let sig: Vec<f64> = cosine_many(visual, text)?.into_iter().map(sigmoid).collect();
    let probs = softmax(&sig)?;
    Ok((sig, probs))
}

/// Scores every candidate and keeps those whose best sigmoid score is
/// strictly above `conf_threshold`, in input order.
pub fn select_high_confidence(snapshot: &Snapshot, conf_threshold: f64) -> Result<Vec<Proposal>> {
    let mut kept = Vec::new();
    for (index, cand) in snapshot.proposals.iter().enumerate() {
        let (sig, probs) = initial_scores(&cand.visual, &snapshot.text_embeddings)?;
        let best = sig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best > conf_threshold {
            let pseudo_label = argmax(&probs).expect("K >= 1");
            kept.push(Proposal {
                index,
                visual: cand.visual.clone(),
                bbox: cand.bbox,
                source: cand.source,
                sigmoid_scores: sig,
                probs,
                pseudo_label,
            });
        }
    }
    Ok(kept)
}

/// Which per-category confidence the activation threshold is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSpace {
    /// `sigmoid(cos(v, t_k))`.
    #[default]
    Sigmoid,
    /// The softmax probability over categories.
    Softmax,
}

impl std::fmt::Display for ActivationSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActivationSpace::Sigmoid => "sigmoid",
            ActivationSpace::Softmax => "softmax",
        })
    }
}

impl std::str::FromStr for ActivationSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(ActivationSpace::Sigmoid),
            "softmax" => Ok(ActivationSpace::Softmax),
            other => Err(Error::invalid(
                "activation_space",
                format!("expected `sigmoid` or `softmax`, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    /// Per-category maximum confidence over kept proposals; `-inf` when none were kept.
    pub scores: Vec<f64>,
    /// Categories with score strictly above the threshold, ascending.
    pub active: Vec<usize>,
}

pub fn activation_set(
    kept: &[Proposal],
    num_categories: usize,
    tau_base: f64,
    space: ActivationSpace,
) -> ActivationSet {
    let mut scores = vec![f64::NEG_INFINITY; num_categories];
    for p in kept {
        let row = match space {
            ActivationSpace::Sigmoid => &p.sigmoid_scores,
            ActivationSpace::Softmax => &p.probs,
        };
        for (s, &v) in scores.iter_mut().zip(row) {
            *s = s.max(v);
        }
    }
    let active = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau_base)
        .map(|(k, _)| k)
        .collect();
    ActivationSet { scores, active }
}

/// Adaptation hyperparameters. Every field has a default, so an empty
/// table deserializes to the reference setting (N=1000, tau=0.7, alpha=0.2,
/// sigma=0.1, M_max=2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Perturbations per active category.
    pub n: usize,
    pub tau_base: f64,
    /// Weight of the memory term in the reward.
    pub alpha: f64,
    /// Std of the perturbation noise.
    pub sigma: f64,
    /// Memory capacity per category.
    pub m_max: usize,
    /// Proposals need max sigmoid score strictly above this to be kept.
    pub conf_threshold: f64,
    pub activation_space: ActivationSpace,
    pub seed: u64,
    pub use_history: bool,
    pub use_filtering: bool,
    pub use_global_bank: bool,
    pub anchor: AnchorMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            n: 1000,
            tau_base: 0.7,
            alpha: 0.2,
            sigma: 0.1,
            m_max: 2,
            conf_threshold: 0.5,
            activation_space: ActivationSpace::Sigmoid,
            seed: 0,
            use_history: true,
            use_filtering: true,
            use_global_bank: true,
            anchor: AnchorMode::Prediction,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must lie in (0, 1), got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")))
            }
        };
        open_unit("tau_base", self.tau_base)?;
        open_unit("conf_threshold", self.conf_threshold)?;
        non_negative("alpha", self.alpha)?;
        non_negative("sigma", self.sigma)?;
        Ok(())
    }
}
