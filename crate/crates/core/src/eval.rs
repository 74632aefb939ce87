//! Detection and alignment metrics.
//!
//! AP@50 uses greedy matching at IoU >= 0.5 and all-point interpolation of
//! the precision envelope. Categories with no ground truth are left out of
//! the mean rather than scored 0.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::detector::{BBox, GroundTruth};
use crate::engine::Detection;
use crate::error::{Error, Result};
use crate::vecmath::{cosine, Embedding};

pub const IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// A scored box tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// AP@50 over one category. `None` when there is no ground truth.
pub fn average_precision_50(detections: &[ScoredBox], gts: &[(usize, BBox)]) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    // Stable sort keeps input order among equal scores.
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));

    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, (img, _)) in gts.iter().enumerate() {
        by_image.entry(*img).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &d) in order.iter().enumerate() {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        if let Some(candidates) = by_image.get(&det.image) {
            for &g in candidates {
                if matched[g] {
                    continue;
                }
                let o = iou(&det.bbox, &gts[g].1);
                if o >= IOU_THRESHOLD && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }

    // Monotone envelope from the right, then sum precision over recall steps.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    /// `None` for categories without ground truth.
    pub per_category: Vec<Option<f64>>,
    /// Unweighted mean of the defined per-category values.
    pub map50: Option<f64>,
}

/// Collects detections and ground truth across a stream for AP@50.
#[derive(Debug, Clone, Default)]
pub struct ApAccumulator {
    detections: Vec<Vec<ScoredBox>>,
    gts: Vec<Vec<(usize, BBox)>>,
}

impl ApAccumulator {
    pub fn new(num_categories: usize) -> Self {
        Self {
            detections: vec![Vec::new(); num_categories],
            gts: vec![Vec::new(); num_categories],
        }
    }

    /// Each detection counts for its label, scored by that label's probability.
    pub fn add_image(&mut self, image: usize, detections: &[Detection], gts: &[GroundTruth]) {
        for d in detections {
            self.detections[d.label].push(ScoredBox {
                image,
                score: d.score(),
                bbox: d.bbox,
            });
        }
        for g in gts {
            self.gts[g.category].push((image, g.bbox));
        }
    }

    pub fn report(&self) -> MapReport {
        let per_category: Vec<Option<f64>> = self
            .detections
            .iter()
            .zip(&self.gts)
            .map(|(d, g)| average_precision_50(d, g))
            .collect();
        let defined: Vec<f64> = per_category.iter().flatten().copied().collect();
        let map50 = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        MapReport { per_category, map50 }
    }
}

/// Correct/total over detections that came from a ground-truth object.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AccuracyCounter {
    pub correct: usize,
    pub total: usize,
}

impl AccuracyCounter {
    pub fn add_image(&mut self, detections: &[Detection], gts: &[GroundTruth]) -> AccuracyCounter {
        let mut here = AccuracyCounter::default();
        for d in detections {
            if let Some(g) = d.source.and_then(|s| gts.get(s)) {
                here.total += 1;
                if d.label == g.category {
                    here.correct += 1;
                }
            }
        }
        self.correct += here.correct;
        self.total += here.total;
        here
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::MetricUnavailable(
                "classification accuracy needs at least one ground-truth proposal".into(),
            ));
        }
        Ok(self.correct as f64 / self.total as f64)
    }
}

/// Fraction of provenance-tagged detections whose label matches the ground truth.
pub fn classification_accuracy(detections: &[Detection], gts: &[GroundTruth]) -> Result<f64> {
    let mut c = AccuracyCounter::default();
    c.add_image(detections, gts);
    c.accuracy()
}

/// `cos(t_hat_k, reference_k)` per category.
pub fn alignment(prediction_text: &[Embedding], reference: &[Embedding]) -> Result<Vec<f64>> {
    prediction_text
        .iter()
        .zip(reference)
        .map(|(t, r)| cosine(t, r))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    /// Number of images processed when the row was taken.
    pub checkpoint: usize,
    pub category: usize,
    pub alignment: Option<f64>,
    pub values: Embedding,
}

/// Records prediction embeddings at chosen checkpoints.
#[derive(Debug, Clone)]
pub struct TrajectoryRecorder {
    checkpoints: BTreeSet<usize>,
    rows: Vec<TrajectoryRow>,
}

impl TrajectoryRecorder {
    pub fn new(checkpoints: impl IntoIterator<Item = usize>) -> Self {
        Self {
            checkpoints: checkpoints.into_iter().collect(),
            rows: Vec::new(),
        }
    }

    pub fn wants(&self, checkpoint: usize) -> bool {
        self.checkpoints.contains(&checkpoint)
    }

    /// Records one row per category if `checkpoint` was requested.
    pub fn observe(
        &mut self,
        checkpoint: usize,
        prediction_text: &[Embedding],
        reference: Option<&[Embedding]>,
    ) -> Result<()> {
        if !self.wants(checkpoint) {
            return Ok(());
        }
        self.rows.extend(export_trajectory(checkpoint, prediction_text, reference)?);
        Ok(())
    }

    /// Records a checkpoint whether or not it was requested.
    pub fn record(
        &mut self,
        checkpoint: usize,
        prediction_text: &[Embedding],
        reference: Option<&[Embedding]>,
    ) -> Result<()> {
        self.rows.extend(export_trajectory(checkpoint, prediction_text, reference)?);
        Ok(())
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<TrajectoryRow> {
        self.rows
    }
}

/// One row per category for a single checkpoint.
pub fn export_trajectory(
    checkpoint: usize,
    prediction_text: &[Embedding],
    reference: Option<&[Embedding]>,
) -> Result<Vec<TrajectoryRow>> {
    prediction_text
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let alignment = match reference {
                Some(r) => Some(cosine(t, &r[k])?),
                None => None,
            };
            Ok(TrajectoryRow {
                checkpoint,
                category: k,
                alignment,
                values: t.clone(),
            })
        })
        .collect()
}
