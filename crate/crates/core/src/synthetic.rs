//! Seeded generator of domain-shifted snapshot streams.
//!
//! A world holds K source prototypes on the unit sphere, the text embeddings
//! a detector would have learned for them (prototype plus a small fixed
//! offset), and the test-domain prototypes obtained by rotating and
//! translating the source ones. Proposals are drawn around the test-domain
//! prototypes, so text and visuals are misaligned by a known amount.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detector::{BBox, Candidate, GroundTruth, Snapshot};
use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedTree, NO_CATEGORY};
use crate::vecmath::{cosine, normalized, Embedding};

const CANVAS: f64 = 1000.0;
const MAX_PROTOTYPE_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Number of Givens rotations, each in a randomly chosen coordinate plane.
    pub rotations: usize,
    /// Rotation angle in radians.
    pub angle: f64,
    /// Norm of the translation shared by all categories.
    pub translation: f64,
    /// Extra per-coordinate noise std on test-domain proposals.
    pub proposal_noise: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            rotations: 48,
            angle: 0.35,
            translation: 0.0,
            proposal_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_categories: usize,
    pub dim: usize,
    pub images: usize,
    /// Inclusive range of proposals per image.
    pub proposals_per_image: [usize; 2],
    /// Inclusive range of distinct categories present per image.
    pub categories_per_image: [usize; 2],
    pub shift: ShiftConfig,
    /// Per-coordinate std of the per-image text jitter, relative to `text_scale`.
    pub text_jitter_std: f64,
    /// Per-coordinate std of visual noise around a prototype.
    pub intra_class_std: f64,
    /// Fraction of proposals drawn from random directions.
    pub background_rate: f64,
    /// Fraction of object proposals that are poorly localized duplicates.
    pub duplicate_rate: f64,
    /// Pairwise prototype cosines must stay below this.
    pub separation_cap: f64,
    /// Pull of every prototype toward one shared direction (0 = uniform on the sphere).
    pub prototype_coherence: f64,
    /// Norm of the fixed per-category offset between prototype and text embedding.
    pub text_offset: f64,
    /// Overall text embedding norm. Scores are cosines, so this only sets
    /// how large a fixed perturbation std is relative to the text vector.
    pub text_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_categories: 10,
            dim: 64,
            images: 1000,
            proposals_per_image: [4, 8],
            categories_per_image: [1, 3],
            shift: ShiftConfig::default(),
            text_jitter_std: 0.005,
            intra_class_std: 0.06,
            background_rate: 0.1,
            duplicate_rate: 0.2,
            separation_cap: 0.995,
            prototype_coherence: 4.0,
            text_offset: 0.1,
            text_scale: 4.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 || self.dim == 0 || self.images == 0 {
            return Err(Error::invalid("world", "num_categories, dim and images must be positive"));
        }
        let [pmin, pmax] = self.proposals_per_image;
        if pmin == 0 || pmin > pmax {
            return Err(Error::invalid("proposals_per_image", "need 0 < min <= max"));
        }
        let [cmin, cmax] = self.categories_per_image;
        if cmin == 0 || cmin > cmax || cmax > self.num_categories {
            return Err(Error::invalid(
                "categories_per_image",
                "need 0 < min <= max <= num_categories",
            ));
        }
        for (name, v) in [
            ("shift.angle", self.shift.angle),
            ("shift.translation", self.shift.translation),
            ("shift.proposal_noise", self.shift.proposal_noise),
            ("text_jitter_std", self.text_jitter_std),
            ("intra_class_std", self.intra_class_std),
            ("prototype_coherence", self.prototype_coherence),
            ("text_offset", self.text_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("background_rate", self.background_rate),
            ("duplicate_rate", self.duplicate_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.text_scale > 0.0 && self.text_scale.is_finite()) {
            return Err(Error::invalid("text_scale", "must be finite and > 0"));
        }
        if !(self.separation_cap > -1.0 && self.separation_cap <= 1.0) {
            return Err(Error::invalid("separation_cap", "must lie in (-1, 1]"));
        }
        if self.shift.rotations > 0 && self.dim < 2 {
            return Err(Error::invalid("shift.rotations", "rotations need dim >= 2"));
        }
        Ok(())
    }

    fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// Unit-norm source-domain prototypes.
    pub prototypes: Vec<Embedding>,
    /// Unit-norm test-domain prototypes.
    pub shifted_prototypes: Vec<Embedding>,
    /// Text embeddings before per-image jitter.
    pub base_text: Vec<Embedding>,
}

fn gaussian_vec(dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Embedding {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn unit_vec(dim: usize, rng: &mut ChaCha8Rng) -> Embedding {
    loop {
        let v = gaussian_vec(dim, 1.0, rng);
        if let Ok(u) = normalized(&v) {
            return u;
        }
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut stream = cfg.seeds().substream(0, NO_CATEGORY, Purpose::World);
    let rng = stream.rng();
    let dim = cfg.dim;

    let center = unit_vec(dim, rng);
    let mut prototypes: Vec<Embedding> = Vec::with_capacity(cfg.num_categories);
    while prototypes.len() < cfg.num_categories {
        let mut accepted = false;
        for _ in 0..MAX_PROTOTYPE_TRIES {
            let dir = unit_vec(dim, rng);
            let raw: Embedding = dir
                .iter()
                .zip(&center)
                .map(|(d, c)| d + cfg.prototype_coherence * c)
                .collect();
            let p = normalized(&raw)?;
            let separated = prototypes
                .iter()
                .all(|q| cosine(&p, q).map(|c| c < cfg.separation_cap).unwrap_or(false));
            if separated {
                prototypes.push(p);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::World(format!(
                "could not place {} prototypes with pairwise cosine < {} in d={} after {} tries; \
                 increase dim or relax separation_cap",
                cfg.num_categories, cfg.separation_cap, dim, MAX_PROTOTYPE_TRIES
            )));
        }
    }

    let base_text = prototypes
        .iter()
        .map(|p| {
            let o = unit_vec(dim, rng);
            p.iter()
                .zip(&o)
                .map(|(x, y)| cfg.text_scale * (x + cfg.text_offset * y))
                .collect()
        })
        .collect();

    let shift = &cfg.shift;
    let shifted_prototypes = if (shift.rotations == 0 || shift.angle == 0.0) && shift.translation == 0.0 {
        prototypes.clone()
    } else {
        let planes: Vec<(usize, usize)> = (0..shift.rotations)
            .map(|_| {
                let i = rng.random_range(0..dim);
                let mut j = rng.random_range(0..dim - 1);
                if j >= i {
                    j += 1;
                }
                (i, j)
            })
            .collect();
        let translation: Embedding = unit_vec(dim, rng).into_iter().map(|x| x * shift.translation).collect();
        let (sin, cos) = shift.angle.sin_cos();
        prototypes
            .iter()
            .map(|p| {
                let mut v = p.clone();
                for &(i, j) in &planes {
                    let (a, b) = (v[i], v[j]);
                    v[i] = cos * a - sin * b;
                    v[j] = sin * a + cos * b;
                }
                for (x, t) in v.iter_mut().zip(&translation) {
                    *x += t;
                }
                normalized(&v)
            })
            .collect::<Result<_>>()?
    };

    Ok(World {
        prototypes,
        shifted_prototypes,
        base_text,
    })
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(40.0..300.0);
    let h = rng.random_range(40.0..300.0);
    let x1 = rng.random_range(0.0..CANVAS - w);
    let y1 = rng.random_range(0.0..CANVAS - h);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// Small jitter: IoU with the source box stays well above 0.5.
fn tight_box(gt: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let (w, h) = (gt.width(), gt.height());
    let dx = rng.random_range(-0.05..0.05) * w;
    let dy = rng.random_range(-0.05..0.05) * h;
    let sw = rng.random_range(-0.05..0.05) * w;
    let sh = rng.random_range(-0.05..0.05) * h;
    BBox::new(gt.x1 + dx, gt.y1 + dy, gt.x2 + dx + sw, gt.y2 + dy + sh).clamped(CANVAS, CANVAS)
}

/// Displaced by more than half the box size along one axis: IoU below 0.5.
fn loose_box(gt: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let (w, h) = (gt.width(), gt.height());
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let frac = rng.random_range(0.55..0.9);
    let (dx, dy) = if rng.random::<bool>() {
        (sign * frac * w, 0.0)
    } else {
        (0.0, sign * frac * h)
    };
    BBox::new(gt.x1 + dx, gt.y1 + dy, gt.x2 + dx, gt.y2 + dy).clamped(CANVAS, CANVAS)
}

/// Snapshot for one image. A pure function of `(cfg, image_index)`.
pub fn next_snapshot(world: &World, cfg: &WorldConfig, image_index: usize) -> Result<Snapshot> {
    if image_index >= cfg.images {
        return Err(Error::invalid(
            "image_index",
            format!("{image_index} >= stream length {}", cfg.images),
        ));
    }
    let mut stream = cfg
        .seeds()
        .substream(image_index as u64, NO_CATEGORY, Purpose::Snapshot);
    let rng = stream.rng();
    let dim = cfg.dim;
    let k_total = cfg.num_categories;

    let text_embeddings: Vec<Embedding> = world
        .base_text
        .iter()
        .map(|t| {
            t.iter()
                .zip(gaussian_vec(dim, cfg.text_scale * cfg.text_jitter_std, rng))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();

    let total = rng.random_range(cfg.proposals_per_image[0]..=cfg.proposals_per_image[1]);
    let background = (0..total).filter(|_| rng.random::<f64>() < cfg.background_rate).count();
    let objects = total - background;
    let wanted = rng.random_range(cfg.categories_per_image[0]..=cfg.categories_per_image[1]);
    let all: Vec<usize> = (0..k_total).collect();
    let present: Vec<usize> = all.choose_multiple(rng, wanted.min(objects)).copied().collect();

    let visual_std = (cfg.intra_class_std.powi(2) + cfg.shift.proposal_noise.powi(2)).sqrt();
    let draw_visual = |k: usize, rng: &mut ChaCha8Rng| -> Result<Embedding> {
        let noisy: Embedding = world.shifted_prototypes[k]
            .iter()
            .zip(gaussian_vec(dim, visual_std, rng))
            .map(|(a, b)| a + b)
            .collect();
        normalized(&noisy)
    };

    let mut ground_truth: Vec<GroundTruth> = Vec::new();
    let mut proposals: Vec<Candidate> = Vec::with_capacity(total);
    for slot in 0..objects {
        let duplicate = slot >= present.len() && !ground_truth.is_empty() && rng.random::<f64>() < cfg.duplicate_rate;
        if duplicate {
            let gi = rng.random_range(0..ground_truth.len());
            let gt = ground_truth[gi].clone();
            proposals.push(Candidate {
                visual: draw_visual(gt.category, rng)?,
                bbox: loose_box(&gt.bbox, rng),
                source: None,
            });
        } else {
            let k = if slot < present.len() {
                present[slot]
            } else {
                *present.choose(rng).expect("objects > 0 implies a present category")
            };
            let gt_box = random_box(rng);
            ground_truth.push(GroundTruth { category: k, bbox: gt_box });
            proposals.push(Candidate {
                visual: draw_visual(k, rng)?,
                bbox: tight_box(&gt_box, rng),
                source: Some(ground_truth.len() - 1),
            });
        }
    }
    for _ in 0..background {
        proposals.push(Candidate {
            visual: unit_vec(dim, rng),
            bbox: random_box(rng),
            source: None,
        });
    }
    proposals.shuffle(rng);

    Ok(Snapshot {
        image_id: format!("synthetic-{image_index:06}"),
        image_size: (CANVAS, CANVAS),
        text_embeddings,
        proposals,
        ground_truth: Some(ground_truth),
    })
}

/// Lazily generated stream of `cfg.images` snapshots.
pub fn stream<'a>(world: &'a World, cfg: &'a WorldConfig) -> impl Iterator<Item = Result<Snapshot>> + 'a {
    (0..cfg.images).map(move |i| next_snapshot(world, cfg, i))
}
