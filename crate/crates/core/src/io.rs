//! Snapshot stream files, run configuration and metric outputs.
//!
//! A snapshot stream is JSON Lines: one header object, then one object per
//! image. Embedding values are written at the declared width (32 or 64 bit)
//! with shortest round-trip formatting and always widened to `f64` on read.
//!
//! ```text
//! {"format":"semevo-snapshots","version":"1","num_categories":2,"dim":3,"categories":["car","person"],"value_width":32}
//! {"image_id":"0001","image_size":[640.0,480.0],"text_embeddings":[[...],[...]],"proposals":[{"visual":[...],"bbox":[x1,y1,x2,y2],"source":0}],"ground_truth":[{"category":0,"bbox":[...]}]}
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::detector::{ActivationSpace, BBox, GroundTruth, Hyperparams, Snapshot};
use crate::error::{Error, Result};
use crate::synthetic::WorldConfig;
use crate::vecmath::Embedding;

pub const FORMAT_NAME: &str = "semevo-snapshots";
pub const FORMAT_VERSION: &str = "1";

/// Environment variable that overrides the master seed.
pub const SEED_ENV: &str = "SEMEVO_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ValueWidth {
    F32,
    #[default]
    F64,
}

impl TryFrom<u8> for ValueWidth {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            32 => Ok(ValueWidth::F32),
            64 => Ok(ValueWidth::F64),
            other => Err(format!("value_width must be 32 or 64, got {other}")),
        }
    }
}

impl From<ValueWidth> for u8 {
    fn from(w: ValueWidth) -> u8 {
        match w {
            ValueWidth::F32 => 32,
            ValueWidth::F64 => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamHeader {
    pub format: String,
    pub version: String,
    pub num_categories: usize,
    pub dim: usize,
    pub categories: Vec<String>,
    pub value_width: ValueWidth,
    /// Per-category target embeddings for alignment metrics, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_embeddings: Option<Vec<Embedding>>,
}

impl StreamHeader {
    pub fn new(categories: Vec<String>, dim: usize, value_width: ValueWidth) -> Self {
        Self {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION.to_string(),
            num_categories: categories.len(),
            dim,
            categories,
            value_width,
            reference_embeddings: None,
        }
    }

    pub fn with_reference(mut self, reference: Vec<Embedding>) -> Self {
        self.reference_embeddings = Some(reference);
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.format != FORMAT_NAME {
            return Err(format!("unknown format `{}`", self.format));
        }
        if self.version != FORMAT_VERSION {
            return Err(format!("unsupported version `{}`", self.version));
        }
        if self.num_categories == 0 || self.dim == 0 {
            return Err("num_categories and dim must be positive".into());
        }
        if self.categories.len() != self.num_categories {
            return Err(format!(
                "expected {} category names, got {}",
                self.num_categories,
                self.categories.len()
            ));
        }
        if let Some(r) = &self.reference_embeddings {
            if r.len() != self.num_categories || r.iter().any(|e| e.len() != self.dim) {
                return Err(format!(
                    "reference_embeddings must be {} x {}",
                    self.num_categories, self.dim
                ));
            }
        }
        Ok(())
    }

    fn narrow(&self, v: &[f64]) -> Embedding {
        match self.value_width {
            ValueWidth::F64 => v.to_vec(),
            ValueWidth::F32 => v.iter().map(|&x| x as f32 as f64).collect(),
        }
    }
}

#[derive(Serialize)]
struct CandidateOut<F> {
    visual: Vec<F>,
    bbox: BBox,
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<usize>,
}

#[derive(Serialize)]
struct SnapshotOut<'a, F> {
    image_id: &'a str,
    image_size: (f64, f64),
    text_embeddings: Vec<Vec<F>>,
    proposals: Vec<CandidateOut<F>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ground_truth: Option<&'a Vec<GroundTruth>>,
}

fn snapshot_out<F>(s: &Snapshot, cast: impl Fn(f64) -> F + Copy) -> SnapshotOut<'_, F> {
    SnapshotOut {
        image_id: &s.image_id,
        image_size: s.image_size,
        text_embeddings: s
            .text_embeddings
            .iter()
            .map(|t| t.iter().copied().map(cast).collect())
            .collect(),
        proposals: s
            .proposals
            .iter()
            .map(|p| CandidateOut {
                visual: p.visual.iter().copied().map(cast).collect(),
                bbox: p.bbox,
                source: p.source,
            })
            .collect(),
        ground_truth: s.ground_truth.as_ref(),
    }
}

/// Writes a stream to `<path>.partial` and renames it into place on
/// [`finish`](Self::finish). Dropping an unfinished writer removes the
/// partial file.
pub struct SnapshotWriter {
    header: StreamHeader,
    out: Option<BufWriter<File>>,
    partial: PathBuf,
    path: PathBuf,
    written: usize,
}

impl SnapshotWriter {
    pub fn create(path: impl AsRef<Path>, header: StreamHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        header.validate().map_err(|m| Error::Format {
            path: path.clone(),
            line: 1,
            message: m,
        })?;
        let mut partial = path.clone().into_os_string();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(File::create(&partial)?);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        Ok(Self {
            header,
            out: Some(out),
            partial,
            path,
            written: 0,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn write(&mut self, snapshot: &Snapshot) -> Result<()> {
        snapshot
            .validate(self.header.num_categories, self.header.dim)
            .map_err(|e| Error::Format {
                path: self.path.clone(),
                line: self.written + 2,
                message: e.to_string(),
            })?;
        let out = self.out.as_mut().expect("writer open until finish");
        match self.header.value_width {
            ValueWidth::F64 => serde_json::to_writer(&mut *out, &snapshot_out(snapshot, |x| x))?,
            ValueWidth::F32 => serde_json::to_writer(&mut *out, &snapshot_out(snapshot, |x| x as f32))?,
        }
        out.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    /// Flushes and moves the file into place. Returns the record count.
    pub fn finish(mut self) -> Result<usize> {
        let mut out = self.out.take().expect("writer open until finish");
        out.flush()?;
        drop(out);
        fs::rename(&self.partial, &self.path)?;
        Ok(self.written)
    }
}

impl Drop for SnapshotWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.partial);
        }
    }
}

pub fn write_snapshot_stream<'a>(
    path: impl AsRef<Path>,
    header: StreamHeader,
    snapshots: impl IntoIterator<Item = &'a Snapshot>,
) -> Result<usize> {
    let mut w = SnapshotWriter::create(path, header)?;
    for s in snapshots {
        w.write(s)?;
    }
    w.finish()
}

/// Lazy, line-at-a-time reader. Memory use does not grow with stream length.
pub struct SnapshotReader<R> {
    header: StreamHeader,
    lines: std::io::Lines<R>,
    path: PathBuf,
    line: usize,
}

impl SnapshotReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_reader(BufReader::new(File::open(path)?), path)
    }
}

impl<R: BufRead> SnapshotReader<R> {
    pub fn from_reader(reader: R, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut lines = reader.lines();
        let fail = |line: usize, message: String| Error::Format {
            path: path.clone(),
            line,
            message,
        };
        let first = lines
            .next()
            .ok_or_else(|| fail(1, "missing header".into()))??;
        let header: StreamHeader =
            serde_json::from_str(&first).map_err(|e| fail(1, format!("bad header: {e}")))?;
        header.validate().map_err(|m| fail(1, m))?;
        Ok(Self {
            header,
            lines,
            path,
            line: 1,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    fn parse(&self, text: &str) -> Result<Snapshot> {
        let fail = |message: String| Error::Format {
            path: self.path.clone(),
            line: self.line,
            message,
        };
        let mut s: Snapshot = serde_json::from_str(text).map_err(|e| fail(e.to_string()))?;
        s.validate(self.header.num_categories, self.header.dim)
            .map_err(|e| fail(e.to_string()))?;
        if self.header.value_width == ValueWidth::F32 {
            for t in s.text_embeddings.iter_mut() {
                *t = self.header.narrow(t);
            }
            for p in s.proposals.iter_mut() {
                p.visual = self.header.narrow(&p.visual);
            }
        }
        let (w, h) = s.image_size;
        for p in s.proposals.iter_mut() {
            p.bbox = p.bbox.clamped(w, h);
        }
        if let Some(gts) = s.ground_truth.as_mut() {
            for g in gts.iter_mut() {
                g.bbox = g.bbox.clamped(w, h);
            }
        }
        Ok(s)
    }
}

impl<R: BufRead> Iterator for SnapshotReader<R> {
    type Item = Result<Snapshot>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&text));
        }
    }
}

pub fn read_snapshot_stream(path: impl AsRef<Path>) -> Result<SnapshotReader<BufReader<File>>> {
    SnapshotReader::open(path)
}

/// Reads on a background thread into a bounded queue. The reader blocks
/// while the queue is full.
pub fn spawn_reader(
    path: impl AsRef<Path>,
    capacity: usize,
) -> Result<(StreamHeader, Receiver<Result<Snapshot>>, JoinHandle<()>)> {
    let reader = SnapshotReader::open(path)?;
    let header = reader.header().clone();
    let (tx, rx) = sync_channel(capacity.max(1));
    let handle = std::thread::spawn(move || {
        for item in reader {
            let stop = item.is_err();
            if tx.send(item).is_err() || stop {
                break;
            }
        }
    });
    Ok((header, rx, handle))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Simulate,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Image counts at which prediction embeddings are exported; the final
    /// state is always exported as well.
    pub checkpoints: Vec<usize>,
    /// Also write the trajectory file on `simulate`/`replay`.
    pub trajectory: bool,
    /// `simulate` also writes its snapshot stream here, for later replay.
    pub snapshots: Option<PathBuf>,
    pub snapshot_width: ValueWidth,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            checkpoints: vec![0, 1000],
            trajectory: false,
            snapshots: None,
            snapshot_width: ValueWidth::F64,
        }
    }
}

/// Metrics the run must produce; requesting one the stream cannot support is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsRequest {
    pub accuracy: bool,
    pub map50: bool,
}

impl Default for MetricsRequest {
    fn default() -> Self {
        Self {
            accuracy: true,
            map50: true,
        }
    }
}

/// Sweep axes. An empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub n: Vec<usize>,
    pub tau_base: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    pub m_max: Vec<usize>,
    pub conf_threshold: Vec<f64>,
    pub activation_space: Vec<ActivationSpace>,
    pub use_history: Vec<bool>,
    pub use_filtering: Vec<bool>,
    pub use_global_bank: Vec<bool>,
    /// Master seeds; each sets both the engine and world seed.
    pub seed: Vec<u64>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl Grid {
    /// Cartesian product over all axes, validated before returning.
    pub fn cells(&self, base: &Hyperparams) -> Result<Vec<Hyperparams>> {
        let mut cells = vec![base.clone()];
        macro_rules! expand {
            ($field:ident) => {
                let values = axis(&self.$field, base.$field.clone());
                cells = cells
                    .iter()
                    .flat_map(|c| {
                        values.iter().map(move |v| Hyperparams {
                            $field: v.clone(),
                            ..c.clone()
                        })
                    })
                    .collect();
            };
        }
        expand!(n);
        expand!(tau_base);
        expand!(alpha);
        expand!(sigma);
        expand!(m_max);
        expand!(conf_threshold);
        expand!(activation_space);
        expand!(use_history);
        expand!(use_filtering);
        expand!(use_global_bank);
        expand!(seed);
        for c in &cells {
            c.validate()
                .map_err(|e| Error::Config(format!("grid point rejected: {e}")))?;
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub run_id: Option<String>,
    /// Master seed; overrides `hyperparams.seed` and `world.seed` when set.
    pub seed: Option<u64>,
    pub hyperparams: Hyperparams,
    /// Simulate mode only. Missing means the default world.
    pub world: Option<WorldConfig>,
    /// Replay mode only: snapshot stream path.
    pub input: Option<PathBuf>,
    pub output: OutputConfig,
    pub metrics: MetricsRequest,
    pub grid: Option<Grid>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::Simulate if self.input.is_some() => {
                return Err(Error::Config("`input` is only valid with mode = \"replay\"".into()))
            }
            Mode::Replay if self.input.is_none() => {
                return Err(Error::Config("mode = \"replay\" requires `input`".into()))
            }
            Mode::Replay if self.world.is_some() => {
                return Err(Error::Config("[world] is only valid with mode = \"simulate\"".into()))
            }
            _ => {}
        }
        self.hyperparams
            .validate()
            .map_err(|e| Error::Config(format!("hyperparams: {e}")))?;
        if let Some(w) = &self.world {
            w.validate().map_err(|e| Error::Config(format!("world: {e}")))?;
        }
        if let Some(g) = &self.grid {
            g.cells(&self.hyperparams)?;
        }
        Ok(())
    }

    /// Sets the master seed on both the engine and the world.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.hyperparams.seed = seed;
        if let Some(w) = self.world.as_mut() {
            w.seed = seed;
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        let mut w = self.world.clone().unwrap_or_default();
        if let Some(s) = self.seed {
            w.seed = s;
        }
        w
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| "run".to_string())
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = cfg.seed {
        cfg.apply_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
