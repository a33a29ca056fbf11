//! Procedural two-domain pedestrian sprites, the on-disk dataset format and
//! the four-image pair sampler.

mod ppm;
mod render;
mod style;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::Rng as _;
use thiserror::Error;

use crate::classifier::PairLabel;
use crate::diff::{Scalar, Tensor};
use crate::rng::{substream, Rng};

pub use ppm::{read_ppm, write_ppm, PpmError};
pub use render::{render_sprite, Appearance, Pattern, ViewJitter};
pub use style::{DomainStyle, Render, PRESETS};

pub const DEFAULT_HEIGHT: usize = 64;
pub const DEFAULT_WIDTH: usize = 32;
pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: [&str; 4] = ["file", "identity", "domain", "view"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: manifest header must be `file,identity,domain,view`")]
    ManifestHeader { path: PathBuf },
    #[error("manifest row {row}: {msg}")]
    MalformedRow { row: usize, msg: String },
    #[error("manifest row {row}: image file {path} not found")]
    MissingImage { row: usize, path: PathBuf },
    #[error("manifest row {row}: image is {got_h}x{got_w}, dataset is {want_h}x{want_w}")]
    DimensionMismatch { row: usize, got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error("manifest row {row}: {source}")]
    Ppm { row: usize, source: PpmError },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

/// One crop: 8-bit RGB pixels in HWC order plus its labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSample {
    pub file: String,
    pub pixels: Vec<u8>,
    pub identity: usize,
    pub domain: Domain,
    pub view: usize,
}

/// A set of equally sized samples. Identity reads are counted while the
/// dataset is sealed, which is how unsupervised code proves it never looked.
#[derive(Debug)]
pub struct Dataset {
    height: usize,
    width: usize,
    samples: Vec<ImageSample>,
    sealed: AtomicBool,
    label_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset::new(self.height, self.width, self.samples.clone()).expect("already validated")
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.samples == other.samples
    }
}

/// Maps an 8-bit value into the open interval (−1, 1).
pub fn pixel_to_model(v: u8) -> f64 {
    (2.0 * v as f64 + 1.0) / 256.0 - 1.0
}

pub fn model_to_pixel(v: f64) -> u8 {
    (((v + 1.0) * 256.0 - 1.0) / 2.0).round().clamp(0.0, 255.0) as u8
}

impl Dataset {
    pub fn new(height: usize, width: usize, samples: Vec<ImageSample>) -> Result<Self, DatasetError> {
        if samples.is_empty() {
            return Err(DatasetError::Empty);
        }
        for (i, s) in samples.iter().enumerate() {
            if s.pixels.len() != height * width * 3 {
                return Err(DatasetError::Invalid(format!(
                    "sample {i} has {} bytes, expected {}",
                    s.pixels.len(),
                    height * width * 3
                )));
            }
        }
        Ok(Dataset { height, width, samples, sealed: AtomicBool::new(false), label_reads: AtomicUsize::new(0) })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        &self.samples[i].pixels
    }

    pub fn domain(&self, i: usize) -> Domain {
        self.samples[i].domain
    }

    pub fn view(&self, i: usize) -> usize {
        self.samples[i].view
    }

    pub fn file(&self, i: usize) -> &str {
        &self.samples[i].file
    }

    fn note_label_read(&self, n: usize) {
        if self.sealed.load(Ordering::SeqCst) {
            self.label_reads.fetch_add(n, Ordering::SeqCst);
        }
    }

    pub fn identity(&self, i: usize) -> usize {
        self.note_label_read(1);
        self.samples[i].identity
    }

    /// Full sample records, labels included (a label read for every sample).
    pub fn samples(&self) -> &[ImageSample] {
        self.note_label_read(self.samples.len());
        &self.samples
    }

    pub fn num_identities(&self) -> usize {
        self.note_label_read(self.samples.len());
        self.samples.iter().map(|s| s.identity + 1).max().unwrap_or(0)
    }

    /// Starts counting identity reads from zero.
    pub fn seal(&self) {
        self.label_reads.store(0, Ordering::SeqCst);
        self.sealed.store(true, Ordering::SeqCst);
    }

    pub fn unseal(&self) {
        self.sealed.store(false, Ordering::SeqCst);
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::SeqCst)
    }

    /// `[N, 3, H, W]` model-range tensor of the given samples.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Tensor<S> {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for &i in indices {
            let px = &self.samples[i].pixels;
            for c in 0..3 {
                data.extend((0..h * w).map(|p| S::of(pixel_to_model(px[p * 3 + c]))));
            }
        }
        Tensor::new(vec![indices.len(), 3, h, w], data).expect("non-empty batch")
    }

    /// Mean pixel value in `[0, 1]` over all samples and channels.
    pub fn mean_intensity(&self) -> f64 {
        let (sum, n) = self
            .samples
            .iter()
            .flat_map(|s| s.pixels.iter())
            .fold((0u64, 0u64), |(s, n), &v| (s + v as u64, n + 1));
        sum as f64 / n as f64 / 255.0
    }
}

fn appearance_rng(seed: u64, identity: usize) -> Rng {
    substream(seed, "appearance", identity as u64)
}

/// Pre-style render of one identity's view, as used by [`generate_dataset`].
pub fn render_view(seed: u64, identity: usize, view: usize, views: usize, height: usize, width: usize) -> Render {
    let appearance = Appearance::sample(&mut appearance_rng(seed, identity));
    let jitter = ViewJitter::sample(&mut substream(seed, "view", (identity * views + view) as u64));
    render_sprite(&appearance, &jitter, height, width)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_identities: usize,
    pub views: usize,
    pub style: DomainStyle,
    pub domain: Domain,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl GenConfig {
    pub fn new(num_identities: usize, views: usize, style: DomainStyle, domain: Domain, seed: u64) -> Self {
        GenConfig { num_identities, views, style, domain, seed, height: DEFAULT_HEIGHT, width: DEFAULT_WIDTH }
    }
}

/// Renders `num_identities × views` styled sprites. Appearance depends only
/// on `(seed, identity)`, so two domains share people iff they share a seed.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset, DatasetError> {
    if cfg.num_identities < 2 || cfg.views < 2 {
        return Err(DatasetError::Invalid(format!(
            "need at least 2 identities and 2 views, got {} and {}",
            cfg.num_identities, cfg.views
        )));
    }
    cfg.style.validate().map_err(DatasetError::Invalid)?;
    let mut samples = Vec::with_capacity(cfg.num_identities * cfg.views);
    for identity in 0..cfg.num_identities {
        for view in 0..cfg.views {
            let index = identity * cfg.views + view;
            let render = render_view(cfg.seed, identity, view, cfg.views, cfg.height, cfg.width);
            let pixels = cfg.style.apply(&render, &mut substream(cfg.seed, "style", index as u64));
            samples.push(ImageSample { file: format!("img_{index:05}.ppm"), pixels, identity, domain: cfg.domain, view });
        }
    }
    Dataset::new(cfg.height, cfg.width, samples)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_io(&manifest, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_io(&manifest, e))?;
    for s in &dataset.samples {
        let path = dir.join(&s.file);
        write_ppm(&path, dataset.width, dataset.height, &s.pixels).map_err(io_err(&path))?;
        w.write_record([s.file.clone(), s.identity.to_string(), s.domain.to_string(), s.view.to_string()])
            .map_err(|e| csv_io(&manifest, e))?;
    }
    w.flush().map_err(io_err(&manifest))
}

fn csv_io(path: &Path, e: csv::Error) -> DatasetError {
    DatasetError::Io { path: path.to_path_buf(), source: e.into() }
}

/// Loads a dataset directory. Rows are numbered from 1 (the header is row 0).
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest = dir.join(MANIFEST);
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(&manifest)
        .map_err(|e| csv_io(&manifest, e))?;
    let mut records = r.records();
    let header = records
        .next()
        .transpose()
        .map_err(|_| DatasetError::ManifestHeader { path: manifest.clone() })?;
    if header.as_ref().map(|h| h.iter().collect::<Vec<_>>()) != Some(MANIFEST_HEADER.to_vec()) {
        return Err(DatasetError::ManifestHeader { path: manifest });
    }
    let mut samples = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let malformed = |msg: String| DatasetError::MalformedRow { row, msg };
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        if rec.len() != 4 {
            return Err(malformed(format!("expected 4 fields, found {}", rec.len())));
        }
        let file = rec[0].to_string();
        if file.is_empty() || file.contains(['/', '\\']) {
            return Err(malformed(format!("bad file name `{file}`")));
        }
        let identity = rec[1].parse().map_err(|_| malformed(format!("identity `{}` is not an integer", &rec[1])))?;
        let domain = rec[2].parse().map_err(malformed)?;
        let view = rec[3].parse().map_err(|_| malformed(format!("view `{}` is not an integer", &rec[3])))?;
        let path = dir.join(&file);
        if !path.is_file() {
            return Err(DatasetError::MissingImage { row, path });
        }
        let img = read_ppm(&path).map_err(|source| DatasetError::Ppm { row, source })?;
        let (want_h, want_w) = *dims.get_or_insert((img.height, img.width));
        if (img.height, img.width) != (want_h, want_w) {
            return Err(DatasetError::DimensionMismatch { row, got_h: img.height, got_w: img.width, want_h, want_w });
        }
        samples.push(ImageSample { file, pixels: img.pixels, identity, domain, view });
    }
    let (h, w) = dims.ok_or(DatasetError::Empty)?;
    Dataset::new(h, w, samples)
}

/// Four sample indices for one iteration: a labeled source pair and an
/// unlabeled target pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub source: [usize; 2],
    pub label: PairLabel,
    pub target: [usize; 2],
}

/// Draws pair batches. Source identities are indexed once up front; the
/// target is only ever addressed by position.
#[derive(Clone, Debug)]
pub struct PairSampler {
    /// `(identity, sample indices)` for every identity present.
    by_identity: Vec<(usize, Vec<usize>)>,
    target_len: usize,
    positive_ratio: f64,
}

impl PairSampler {
    pub fn new(source: &Dataset, target_len: usize, positive_ratio: f64) -> Result<Self, DatasetError> {
        if !(0.0..=1.0).contains(&positive_ratio) {
            return Err(DatasetError::Invalid(format!("positive ratio {positive_ratio} outside [0, 1]")));
        }
        let mut index: Vec<Vec<usize>> = vec![Vec::new(); source.num_identities()];
        for (i, s) in source.samples().iter().enumerate() {
            index[s.identity].push(i);
        }
        let by_identity: Vec<(usize, Vec<usize>)> = index.into_iter().enumerate().filter(|(_, v)| !v.is_empty()).collect();
        if by_identity.len() < 2 && positive_ratio < 1.0 {
            return Err(DatasetError::Invalid("a negative pair needs at least 2 source identities".into()));
        }
        if positive_ratio > 0.0 && by_identity.iter().all(|(_, v)| v.len() < 2) {
            return Err(DatasetError::Invalid("a positive pair needs an identity with 2 views".into()));
        }
        if target_len < 2 {
            return Err(DatasetError::Invalid("target pair needs at least 2 images".into()));
        }
        Ok(PairSampler { by_identity, target_len, positive_ratio })
    }

    pub fn source_pair(&self, rng: &mut Rng) -> ([usize; 2], PairLabel) {
        let k = self.by_identity.len();
        if rng.gen_bool(self.positive_ratio) {
            let (id, views) = loop {
                let (id, views) = &self.by_identity[rng.gen_range(0..k)];
                if views.len() >= 2 {
                    break (*id, views);
                }
            };
            let a = rng.gen_range(0..views.len());
            let b = (a + rng.gen_range(1..views.len())) % views.len();
            ([views[a], views[b]], PairLabel::new(id, id))
        } else {
            let i1 = rng.gen_range(0..k);
            let i2 = (i1 + rng.gen_range(1..k)) % k;
            let (id1, v1) = &self.by_identity[i1];
            let (id2, v2) = &self.by_identity[i2];
            let a = v1[rng.gen_range(0..v1.len())];
            let b = v2[rng.gen_range(0..v2.len())];
            ([a, b], PairLabel::new(*id1, *id2))
        }
    }

    pub fn target_pair(&self, rng: &mut Rng) -> [usize; 2] {
        let a = rng.gen_range(0..self.target_len);
        let b = (a + rng.gen_range(1..self.target_len)) % self.target_len;
        [a, b]
    }

    pub fn draw(&self, rng: &mut Rng) -> PairBatch {
        let (source, label) = self.source_pair(rng);
        let target = self.target_pair(rng);
        PairBatch { source, label, target }
    }
}

pub fn sample_pair_batch(source: &Dataset, target: &Dataset, positive_ratio: f64, rng: &mut Rng) -> Result<PairBatch, DatasetError> {
    Ok(PairSampler::new(source, target.len(), positive_ratio)?.draw(rng))
}
