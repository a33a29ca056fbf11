//! Retrieval evaluation (CMC), feature-distribution shift and 2-D export.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::classifier::SiameseModel;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::synth::Dataset;
use crate::train::csv_err;
use crate::transgan::GanBundle;

pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 10];
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformMode {
    /// Raw images (Direct Transfer).
    None,
    /// Target images translated to the source style by `F` first.
    ViaF,
}

impl TransformMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformMode::None => "none",
            TransformMode::ViaF => "via_F",
        }
    }
}

/// Embeds `[N, C, H, W]` images, optionally through `F`, one row per image.
pub fn extract_features(classifier: &SiameseModel<f32>, images: &Tensor<f32>, gan: Option<&GanBundle<f32>>) -> Result<Tensor<f32>> {
    classifier.check_image(images.shape())?;
    let n = images.shape()[0];
    let per = images.len() / n;
    let d = classifier.config.embedding_dim();
    let mut out = Vec::with_capacity(n * d);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let mut chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        if let Some(b) = gan {
            chunk = b.translate_tensor(&b.f, &chunk)?;
        }
        out.extend_from_slice(classifier.embed_tensor(&chunk)?.data());
    }
    Ok(Tensor::new(vec![n, d], out)?)
}

pub fn dataset_features(
    classifier: &SiameseModel<f32>,
    dataset: &Dataset,
    indices: &[usize],
    gan: Option<&GanBundle<f32>>,
) -> Result<Tensor<f32>> {
    extract_features(classifier, &dataset.batch(indices), gan)
}

/// Rows of a `[N, D]` matrix in wide precision.
pub fn rows(features: &Tensor<f32>) -> Vec<Vec<f64>> {
    let d = features.shape()[1];
    features.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Gallery positions ordered by descending score, ties by ascending index.
pub fn rank_gallery(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Rank-k accuracies from a probe × gallery score matrix.
pub fn cmc_from_scores(scores: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize], ranks: &[usize]) -> Result<Vec<f64>> {
    if scores.len() != probe_ids.len() || scores.is_empty() {
        return Err(Error::Eval(format!("{} score rows for {} probes", scores.len(), probe_ids.len())));
    }
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Error::Eval("ranks must be positive".into()));
    }
    let mut hits = vec![0usize; ranks.len()];
    for (row, &pid) in scores.iter().zip(probe_ids) {
        if row.len() != gallery_ids.len() {
            return Err(Error::Eval(format!("score row has {} entries, gallery has {}", row.len(), gallery_ids.len())));
        }
        let order = rank_gallery(row);
        let pos = order
            .iter()
            .position(|&gi| gallery_ids[gi] == pid)
            .ok_or_else(|| Error::Eval(format!("probe identity {pid} is absent from the gallery")))?;
        for (h, &k) in hits.iter_mut().zip(ranks) {
            if pos < k {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / probe_ids.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmcReport {
    pub ranks: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub probes: usize,
    pub gallery: usize,
    pub mode: TransformMode,
}

impl CmcReport {
    pub fn rank1(&self) -> Option<f64> {
        self.ranks.iter().position(|&r| r == 1).map(|i| self.accuracy[i])
    }

    pub fn is_monotone(&self) -> bool {
        self.accuracy.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["rank", "accuracy"]).map_err(csv_err)?;
        for (r, a) in self.ranks.iter().zip(&self.accuracy) {
            w.write_record([r.to_string(), a.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `rank,accuracy` file. Probe and gallery counts are not part of
    /// the format and come back as 0; the mode comes back as `None`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != ["rank", "accuracy"] {
            return Err(Error::Eval(format!("{}: header must be `rank,accuracy`", path.display())));
        }
        let (mut ranks, mut accuracy) = (Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = || Error::Eval(format!("{}: row {} is malformed", path.display(), i + 1));
            if rec.len() != 2 {
                return Err(bad());
            }
            ranks.push(rec[0].parse().map_err(|_| bad())?);
            let a: f64 = rec[1].parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&a) {
                return Err(bad());
            }
            accuracy.push(a);
        }
        Ok(CmcReport { ranks, accuracy, probes: 0, gallery: 0, mode: TransformMode::None })
    }
}

/// Ranks the gallery for every probe by the classifier's similarity score.
pub fn cmc(
    classifier: &SiameseModel<f32>,
    probe_features: &Tensor<f32>,
    probe_ids: &[usize],
    gallery_features: &Tensor<f32>,
    gallery_ids: &[usize],
    ranks: &[usize],
    mode: TransformMode,
) -> Result<CmcReport> {
    let d = classifier.config.embedding_dim();
    if probe_features.shape() != [probe_ids.len(), d] || gallery_features.shape() != [gallery_ids.len(), d] {
        return Err(Error::Eval("feature matrices do not match their id lists".into()));
    }
    let mut scores = Vec::with_capacity(probe_ids.len());
    for q in probe_features.data().chunks(d) {
        let s = classifier.score_against(q, gallery_features)?;
        scores.push(s.into_iter().map(f64::from).collect());
    }
    let accuracy = cmc_from_scores(&scores, probe_ids, gallery_ids, ranks)?;
    Ok(CmcReport { ranks: ranks.to_vec(), accuracy, probes: probe_ids.len(), gallery: gallery_ids.len(), mode })
}

/// Single-shot probe/gallery split: per identity one view goes to the probe
/// set and a different one to the gallery. The last `distractors` identities
/// (in shuffled order) contribute a gallery image only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub probe: Vec<usize>,
    pub gallery: Vec<usize>,
}

pub fn single_shot_split(dataset: &Dataset, split_seed: u64, distractors: usize) -> Result<Split> {
    let mut by_id: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_identities()];
    for (i, s) in dataset.samples().iter().enumerate() {
        by_id[s.identity].push(i);
    }
    let (mut paired, mut single): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
        by_id.into_iter().filter(|v| !v.is_empty()).partition(|v| v.len() >= 2);
    let mut rng = stream(split_seed, "split");
    paired.shuffle(&mut rng);
    if distractors >= paired.len() + single.len() {
        return Err(Error::Eval(format!("{distractors} distractors leave no probe identity")));
    }
    let mut split = Split { probe: Vec::new(), gallery: Vec::new() };
    let keep = paired.len().saturating_sub(distractors.saturating_sub(single.len()));
    single.extend(paired.drain(keep..));
    if paired.is_empty() {
        return Err(Error::Eval("no identity has two views for a probe/gallery pair".into()));
    }
    for mut views in paired {
        views.shuffle(&mut rng);
        split.probe.push(views[0]);
        split.gallery.push(views[1]);
    }
    for mut views in single.into_iter().take(distractors) {
        views.shuffle(&mut rng);
        split.gallery.push(views[0]);
    }
    Ok(split)
}

/// Distances between the source centroid and the two target centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    pub before: f64,
    pub after: f64,
    pub dispersion_source: f64,
    pub dispersion_target_raw: f64,
    pub dispersion_target_via_f: f64,
}

impl ShiftReport {
    pub fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("centroid_distance_before", self.before),
            ("centroid_distance_after", self.after),
            ("dispersion_source", self.dispersion_source),
            ("dispersion_target_raw", self.dispersion_target_raw),
            ("dispersion_target_via_F", self.dispersion_target_via_f),
        ]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["metric", "value"]).map_err(csv_err)?;
        for (k, v) in self.entries() {
            w.write_record([k.to_string(), v.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn centroid(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features.first().ok_or_else(|| Error::Eval("empty feature set".into()))?;
    let d = first.len();
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::Eval("feature rows differ in length".into()));
    }
    let mut c = vec![0.0; d];
    for r in features {
        c.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|a| *a /= features.len() as f64);
    Ok(c)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance of each row to its own centroid.
pub fn dispersion(features: &[Vec<f64>]) -> Result<f64> {
    let c = centroid(features)?;
    Ok(features.iter().map(|r| distance(r, &c)).sum::<f64>() / features.len() as f64)
}

pub fn centroid_shift(source: &[Vec<f64>], target_raw: &[Vec<f64>], target_via_f: &[Vec<f64>]) -> Result<ShiftReport> {
    let cs = centroid(source)?;
    let cr = centroid(target_raw)?;
    let cf = centroid(target_via_f)?;
    if cs.len() != cr.len() || cs.len() != cf.len() {
        return Err(Error::Eval("feature sets differ in dimension".into()));
    }
    Ok(ShiftReport {
        before: distance(&cs, &cr),
        after: distance(&cs, &cf),
        dispersion_source: dispersion(source)?,
        dispersion_target_raw: dispersion(target_raw)?,
        dispersion_target_via_f: dispersion(target_via_f)?,
    })
}

/// Projects mean-centred rows onto the top two principal components. Each
/// component's largest-magnitude loading is made positive.
pub fn pca_project_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if features.len() < 3 {
        return Err(Error::Eval(format!("PCA needs at least 3 rows, got {}", features.len())));
    }
    let c = centroid(features)?;
    let d = c.len();
    if d < 2 {
        return Err(Error::Eval("PCA to 2-D needs at least 2 feature dimensions".into()));
    }
    let distinct = features.iter().any(|r| r != &features[0]);
    if !distinct {
        return Err(Error::Eval("PCA input has fewer than 2 distinct rows".into()));
    }
    let x = DMatrix::from_fn(features.len(), d, |i, j| features[i][j] - c[j]);
    let cov = x.transpose() * &x / (features.len() as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::with_capacity(2);
    for &k in &order[..2] {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(v);
    }
    Ok((0..features.len())
        .map(|i| {
            let row = x.row(i);
            let p = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [p(&comps[0]), p(&comps[1])]
        })
        .collect())
}

/// One labelled row of the embedding export.
pub struct EmbeddingRow<'a> {
    pub sample_id: &'a str,
    pub domain: &'a str,
    pub transformed: bool,
    pub values: &'a [f64],
}

pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow<'_>]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["sample_id".to_string(), "domain".into(), "transformed".into()];
    header.extend((0..d).map(|i| format!("dim_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.values.len() != d {
            return Err(Error::Eval("embedding rows differ in length".into()));
        }
        let mut rec = vec![r.sample_id.to_string(), r.domain.to_string(), r.transformed.to_string()];
        rec.extend(r.values.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pca(path: &Path, labels: &[(&str, &str, bool)], points: &[[f64; 2]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["sample_id", "domain", "transformed", "pc_1", "pc_2"]).map_err(csv_err)?;
    for ((id, dom, t), p) in labels.iter().zip(points) {
        w.write_record([id.to_string(), dom.to_string(), t.to_string(), p[0].to_string(), p[1].to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
