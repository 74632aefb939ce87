//! End-to-end runs: stream snapshots through the engine (or the zero-shot
//! baseline), collect metrics, and write result files.
//!
//! Metric files carry only values that are a pure function of the config, so
//! two identical runs produce byte-identical files. Wall-clock latency goes to
//! a separate timing file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::detector::{ActivationSpace, Hyperparams, Snapshot};
use crate::engine::{baseline_detections, CategoryTrace, Engine, MemoryEvent};
use crate::error::{Error, Result};
use crate::eval::{alignment, AccuracyCounter, ApAccumulator, TrajectoryRecorder, TrajectoryRow};
use crate::io::{self, Mode, RunConfig, SnapshotWriter, StreamHeader, ValueWidth, SEED_ENV};
use crate::oracle;
use crate::rng::SeedTree;
use crate::synthetic::{self, generate_world, WorldConfig};
use crate::vecmath::Embedding;

/// Tolerance for engine-vs-reference comparisons.
pub const VERIFY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub run_id: String,
    /// Zero-shot scoring only; the engine is not run.
    pub baseline: bool,
    /// Check the engine against the reference implementation every this many images.
    pub verify_every: Option<usize>,
    pub checkpoints: Vec<usize>,
    pub require_accuracy: bool,
    pub require_map50: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            baseline: false,
            verify_every: None,
            checkpoints: Vec::new(),
            require_accuracy: false,
            require_map50: false,
        }
    }
}

impl RunOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            run_id: cfg.run_id(),
            baseline: false,
            verify_every: None,
            checkpoints: cfg.output.checkpoints.clone(),
            require_accuracy: cfg.metrics.accuracy,
            require_map50: cfg.metrics.map50,
        }
    }
}

/// Per-image metrics line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRecord {
    pub image_index: usize,
    pub image_id: String,
    pub kept: usize,
    pub active: Vec<usize>,
    pub correct: Option<usize>,
    pub total: Option<usize>,
    pub mean_alignment: Option<f64>,
    pub categories: Vec<CategoryTrace>,
    pub memory_events: Vec<MemoryEvent>,
}

/// One aggregate row; the shape shared by single runs and sweep cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub n: usize,
    pub tau_base: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub m_max: usize,
    pub conf_threshold: f64,
    pub activation_space: ActivationSpace,
    pub use_history: bool,
    pub use_filtering: bool,
    pub use_global_bank: bool,
    pub images: usize,
    pub kept: usize,
    pub gt_proposals: usize,
    pub accuracy: Option<f64>,
    pub map50: Option<f64>,
    /// Semicolon-separated per-category AP@50; empty where undefined.
    pub ap50_per_category: String,
    pub initial_alignment: Option<f64>,
    pub final_alignment: Option<f64>,
    pub refined_categories: usize,
    pub mean_active: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub run_id: String,
    pub seed: u64,
    pub n: usize,
    pub m_max: usize,
    pub tau_base: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub images: usize,
    pub mean_latency_us: f64,
    pub max_latency_us: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub images: Vec<ImageRecord>,
    pub trajectory: Vec<TrajectoryRow>,
    /// Engine-only latency per image, microseconds.
    pub latency_us: Vec<f64>,
    pub initial_alignment: Option<Vec<f64>>,
    pub final_alignment: Option<Vec<f64>>,
    /// Images in which each category was refined.
    pub refined_counts: Vec<usize>,
    pub final_prediction_text: Vec<Embedding>,
    pub verified_images: usize,
}

impl RunResult {
    pub fn timing(&self) -> TimingRow {
        let s = &self.summary;
        let n = self.latency_us.len().max(1) as f64;
        TimingRow {
            run_id: s.run_id.clone(),
            seed: s.seed,
            n: s.n,
            m_max: s.m_max,
            tau_base: s.tau_base,
            alpha: s.alpha,
            sigma: s.sigma,
            images: s.images,
            mean_latency_us: self.latency_us.iter().sum::<f64>() / n,
            max_latency_us: self.latency_us.iter().copied().fold(0.0, f64::max),
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs one stream. `reference` enables alignment metrics.
pub fn run_stream(
    snapshots: impl IntoIterator<Item = Result<Snapshot>>,
    num_categories: usize,
    dim: usize,
    hp: &Hyperparams,
    reference: Option<&[Embedding]>,
    opts: &RunOptions,
) -> Result<RunResult> {
    let mut engine = Engine::new(hp.clone(), num_categories, dim)?;
    let seeds = SeedTree::new(hp.seed);
    let mut recorder = TrajectoryRecorder::new(opts.checkpoints.iter().copied());
    let mut acc = AccuracyCounter::default();
    let mut ap = ApAccumulator::new(num_categories);
    let mut images = Vec::new();
    let mut latency_us = Vec::new();
    let mut refined_counts = vec![0usize; num_categories];
    let mut initial_alignment = None;
    let mut last_text: Option<Vec<Embedding>> = None;
    let mut kept_total = 0;
    let mut active_total = 0;
    let mut verified_images = 0;

    for (i, snapshot) in snapshots.into_iter().enumerate() {
        let snapshot = snapshot?;
        snapshot.validate(num_categories, dim)?;
        if i == 0 {
            let fresh = engine.prediction_embeddings(&snapshot.text_embeddings);
            recorder.observe(0, &fresh, reference)?;
            if let Some(r) = reference {
                initial_alignment = Some(alignment(&fresh, r)?);
            }
        }

        let (detections, prediction_text, trace) = if opts.baseline {
            let start = Instant::now();
            let d = baseline_detections(&snapshot, hp.conf_threshold)?;
            latency_us.push(start.elapsed().as_secs_f64() * 1e6);
            (d, snapshot.text_embeddings.clone(), None)
        } else {
            let check = opts.verify_every.is_some_and(|e| e > 0 && i % e == 0);
            let reference_run = if check {
                let mut state = engine.state().clone();
                let out = oracle::reference_process_image(&snapshot, &mut state, hp, &seeds, i as u64)?;
                Some((out, state))
            } else {
                None
            };
            let start = Instant::now();
            let outcome = engine.process_image(&snapshot)?;
            latency_us.push(start.elapsed().as_secs_f64() * 1e6);
            if let Some((ref_out, ref_state)) = reference_run {
                oracle::differential_check(&outcome, engine.state(), &ref_out, &ref_state, VERIFY_TOLERANCE)
                    .map_err(|m| Error::Verification(format!("image {i}: {m}")))?;
                verified_images += 1;
            }
            for (k, _) in &outcome.refined {
                refined_counts[*k] += 1;
            }
            (outcome.detections, outcome.prediction_text, Some(outcome.trace))
        };

        let (correct, total) = match &snapshot.ground_truth {
            Some(gts) => {
                let here = acc.add_image(&detections, gts);
                ap.add_image(i, &detections, gts);
                (Some(here.correct), Some(here.total))
            }
            None if opts.require_accuracy || opts.require_map50 => {
                return Err(Error::MetricUnavailable(format!(
                    "image {} ({}) has no ground truth but accuracy/mAP was requested",
                    i, snapshot.image_id
                )));
            }
            None => (None, None),
        };
        let mean_alignment = match reference {
            Some(r) => Some(mean(&alignment(&prediction_text, r)?)),
            None => None,
        };
        recorder.observe(i + 1, &prediction_text, reference)?;
        kept_total += detections.len();
        let (active, categories, memory_events) = match trace {
            Some(t) => (t.active, t.categories, t.memory_events),
            None => Default::default(),
        };
        active_total += active.len();
        images.push(ImageRecord {
            image_index: i,
            image_id: snapshot.image_id.clone(),
            kept: detections.len(),
            active,
            correct,
            total,
            mean_alignment,
            categories,
            memory_events,
        });
        last_text = Some(prediction_text);
    }

    let n_images = images.len();
    let final_prediction_text = last_text.unwrap_or_default();
    if n_images > 0 && !recorder.wants(n_images) {
        recorder.record(n_images, &final_prediction_text, reference)?;
    }
    let final_alignment = match reference {
        Some(r) if n_images > 0 => Some(alignment(&final_prediction_text, r)?),
        _ => None,
    };

    let accuracy = if acc.total > 0 { Some(acc.accuracy()?) } else { None };
    if opts.require_accuracy && accuracy.is_none() && n_images > 0 {
        return Err(Error::MetricUnavailable(
            "no ground-truth-tagged proposals were kept; accuracy is undefined".into(),
        ));
    }
    let map = ap.report();
    let ap50_per_category = map
        .per_category
        .iter()
        .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
        .collect::<Vec<_>>()
        .join(";");

    let summary = RunSummary {
        run_id: opts.run_id.clone(),
        method: if opts.baseline { "baseline" } else { "adapted" }.into(),
        seed: hp.seed,
        n: hp.n,
        tau_base: hp.tau_base,
        alpha: hp.alpha,
        sigma: hp.sigma,
        m_max: hp.m_max,
        conf_threshold: hp.conf_threshold,
        activation_space: hp.activation_space,
        use_history: hp.use_history,
        use_filtering: hp.use_filtering,
        use_global_bank: hp.use_global_bank,
        images: n_images,
        kept: kept_total,
        gt_proposals: acc.total,
        accuracy,
        map50: map.map50,
        ap50_per_category,
        initial_alignment: initial_alignment.as_deref().map(mean),
        final_alignment: final_alignment.as_deref().map(mean),
        refined_categories: refined_counts.iter().filter(|&&c| c > 0).count(),
        mean_active: if n_images > 0 { active_total as f64 / n_images as f64 } else { 0.0 },
    };

    Ok(RunResult {
        summary,
        images,
        trajectory: recorder.into_rows(),
        latency_us,
        initial_alignment,
        final_alignment,
        refined_counts,
        final_prediction_text,
        verified_images,
    })
}

/// Writes the stream a world config generates, one snapshot at a time.
/// The header carries the test-domain prototypes as reference embeddings.
pub fn write_world_stream(wc: &WorldConfig, path: &Path, width: ValueWidth) -> Result<usize> {
    let world = generate_world(wc)?;
    let names = (0..wc.num_categories).map(|k| format!("category_{k}")).collect();
    let header = StreamHeader::new(names, wc.dim, width).with_reference(world.shifted_prototypes.clone());
    let mut writer = SnapshotWriter::create(path, header)?;
    for s in synthetic::stream(&world, wc) {
        writer.write(&s?)?;
    }
    writer.finish()
}

/// Generates the configured world and runs its stream.
pub fn simulate(cfg: &RunConfig, opts: &RunOptions) -> Result<RunResult> {
    let wc = cfg.world_config();
    if let Some(path) = &cfg.output.snapshots {
        write_world_stream(&wc, path, cfg.output.snapshot_width)?;
    }
    let world = generate_world(&wc)?;
    run_stream(
        synthetic::stream(&world, &wc),
        wc.num_categories,
        wc.dim,
        &cfg.hyperparams,
        Some(&world.shifted_prototypes),
        opts,
    )
}

/// Runs a snapshot stream file, read on a producer thread through a bounded queue.
pub fn replay(cfg: &RunConfig, opts: &RunOptions) -> Result<RunResult> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("replay requires `input`".into()))?;
    let (header, rx, handle) = io::spawn_reader(input, 64)?;
    let result = run_stream(
        rx.into_iter(),
        header.num_categories,
        header.dim,
        &cfg.hyperparams,
        header.reference_embeddings.as_deref(),
        opts,
    );
    // Dropping the receiver first lets a blocked producer exit.
    let _ = handle.join();
    result
}

pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunResult> {
    match cfg.mode {
        Mode::Simulate => simulate(cfg, opts),
        Mode::Replay => replay(cfg, opts),
    }
}

/// One fresh run per grid cell. Every cell is validated before any runs.
pub fn ablate(cfg: &RunConfig, opts: &RunOptions) -> Result<Vec<RunResult>> {
    let grid = cfg.grid.clone().unwrap_or_default();
    let cells = grid.cells(&cfg.hyperparams)?;
    let reseed = !grid.seed.is_empty();
    cells
        .par_iter()
        .map(|hp| {
            let mut cell = cfg.clone();
            cell.hyperparams = hp.clone();
            cell.output.snapshots = None;
            if reseed {
                cell.apply_seed(hp.seed);
            }
            run(&cell, opts)
        })
        .collect()
}

fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut head = vec!["checkpoint".to_string(), "category".into(), "alignment".into()];
    head.extend((0..dim).map(|j| format!("v{j}")));
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![
            r.checkpoint.to_string(),
            r.category.to_string(),
            r.alignment.map(|a| a.to_string()).unwrap_or_default(),
        ];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Files written by [`write_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub images: PathBuf,
    pub timing: PathBuf,
    pub trajectory: Option<PathBuf>,
}

pub fn write_run(dir: &Path, result: &RunResult, trajectory: bool) -> Result<RunFiles> {
    fs::create_dir_all(dir)?;
    let files = RunFiles {
        metrics: dir.join("metrics.csv"),
        images: dir.join("images.jsonl"),
        timing: dir.join("timing.csv"),
        trajectory: trajectory.then(|| dir.join("trajectory.csv")),
    };
    io::write_csv(&files.metrics, std::slice::from_ref(&result.summary))?;
    io::write_jsonl(&files.images, &result.images)?;
    io::write_csv(&files.timing, &[result.timing()])?;
    if let Some(p) = &files.trajectory {
        write_trajectory(p, &result.trajectory)?;
    }
    Ok(files)
}

pub fn write_ablation(dir: &Path, results: &[RunResult]) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let rows = dir.join("ablation.csv");
    let timing = dir.join("ablation_timing.csv");
    let summaries: Vec<RunSummary> = results.iter().map(|r| r.summary.clone()).collect();
    let timings: Vec<TimingRow> = results.iter().map(RunResult::timing).collect();
    io::write_csv(&rows, &summaries)?;
    io::write_csv(&timing, &timings)?;
    Ok((rows, timing))
}

pub fn write_trajectory_file(dir: &Path, result: &RunResult) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("trajectory.csv");
    write_trajectory(&path, &result.trajectory)?;
    Ok(path)
}

/// Command-line overrides. `None` leaves the config value alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub n: Option<usize>,
    pub tau_base: Option<f64>,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    pub m_max: Option<usize>,
    pub conf_threshold: Option<f64>,
    pub activation_space: Option<ActivationSpace>,
}

/// Loads a config (or defaults) and applies, lowest to highest precedence:
/// file, `SEMEVO_SEED` from `env_seed`, then flag overrides.
pub fn resolve_config(path: Option<&Path>, env_seed: Option<&str>, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => io::parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = env_seed {
        let seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        cfg.apply_seed(seed);
    }
    if let Some(s) = o.seed {
        cfg.apply_seed(s);
    }
    if let Some(d) = &o.out {
        cfg.output.dir = d.clone();
    }
    let hp = &mut cfg.hyperparams;
    if let Some(v) = o.n {
        hp.n = v;
    }
    if let Some(v) = o.tau_base {
        hp.tau_base = v;
    }
    if let Some(v) = o.alpha {
        hp.alpha = v;
    }
    if let Some(v) = o.sigma {
        hp.sigma = v;
    }
    if let Some(v) = o.m_max {
        hp.m_max = v;
    }
    if let Some(v) = o.conf_threshold {
        hp.conf_threshold = v;
    }
    if let Some(v) = o.activation_space {
        hp.activation_space = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
