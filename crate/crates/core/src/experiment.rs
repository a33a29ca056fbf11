//! The scaled ordering experiment: one seed trains a classifier on a source
//! domain, then `gan_only` and `simpgan` translators, and scores every
//! method by rank-1 retrieval on a disjoint target domain.

use std::time::Instant;

use crate::classifier::{ClassifierConfig, SiameseModel};
use crate::error::Result;
use crate::eval::{centroid_shift, cmc, dataset_features, rows, single_shot_split, ShiftReport, TransformMode};
use crate::synth::{generate_dataset, Dataset, Domain, DomainStyle, GenConfig};
use crate::train::{derive_seed, pretrain_classifier, train_simpgan, TrainConfig, Variant};
use crate::transgan::{GanBundle, GanConfig};

/// Offset between a run seed and its target-domain seed. Appearance depends
/// only on `(seed, identity)`, so distinct seeds give disjoint identities.
pub const TARGET_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub identities: usize,
    pub views: usize,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    pub classifier: ClassifierConfig,
    pub gan: GanConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            identities: 20,
            views: 8,
            source_style: DomainStyle::source(),
            target_style: DomainStyle::target(),
            classifier: ClassifierConfig::new(20),
            gan: GanConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub direct_transfer: f64,
    pub gan_only: f64,
    pub simpgan: f64,
    /// Source vs target centroid distances under the `simpgan` F.
    pub shift: ShiftReport,
    /// Mean q̂ over all matched and all mismatched source pairs after pretraining.
    pub q_hat_matched: f64,
    pub q_hat_mismatched: f64,
    /// Medians of `L_all` over the first and last 10% of pretraining.
    pub classifier_loss: (f64, f64),
    /// Medians of `L_cycle` over the first and last 10% of `simpgan` training.
    pub cycle_loss: (f64, f64),
    pub seconds: f64,
}

/// Medians of the first and last tenth of a series.
pub fn head_tail_medians(values: &[f64]) -> (f64, f64) {
    let k = (values.len() / 10).max(1);
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    (median(&values[..k]), median(&values[values.len() - k..]))
}

/// Mean similarity score over matched and mismatched pairs of distinct images.
pub fn pair_score_means(classifier: &SiameseModel<f32>, dataset: &Dataset) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let features = dataset_features(classifier, dataset, &all, None)?;
    let d = classifier.config.embedding_dim();
    let (mut matched, mut mismatched) = ((0.0, 0usize), (0.0, 0usize));
    for (i, q) in features.data().chunks(d).enumerate() {
        let scores = classifier.score_against(q, &features)?;
        for (j, s) in scores.into_iter().enumerate().filter(|&(j, _)| j != i) {
            let bucket = if dataset.identity(i) == dataset.identity(j) { &mut matched } else { &mut mismatched };
            bucket.0 += f64::from(s);
            bucket.1 += 1;
        }
    }
    Ok((matched.0 / matched.1.max(1) as f64, mismatched.0 / mismatched.1.max(1) as f64))
}

pub fn datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (h, w) = (cfg.classifier.height, cfg.classifier.width);
    let gen = |style: &DomainStyle, domain, seed| GenConfig {
        height: h,
        width: w,
        ..GenConfig::new(cfg.identities, cfg.views, style.clone(), domain, seed)
    };
    let source = generate_dataset(&gen(&cfg.source_style, Domain::Source, seed))?;
    let target = generate_dataset(&gen(&cfg.target_style, Domain::Target, seed + TARGET_SEED_OFFSET))?;
    Ok((source, target))
}

fn rank1(classifier: &SiameseModel<f32>, target: &Dataset, probe: &[usize], gallery: &[usize], gan: Option<&GanBundle<f32>>) -> Result<f64> {
    let pf = dataset_features(classifier, target, probe, gan)?;
    let gf = dataset_features(classifier, target, gallery, gan)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| target.identity(i)).collect::<Vec<_>>();
    let mode = if gan.is_some() { TransformMode::ViaF } else { TransformMode::None };
    let report = cmc(classifier, &pf, &ids(probe), &gf, &ids(gallery), &[1], mode)?;
    Ok(report.accuracy[0])
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let start = Instant::now();
    let (source, target) = datasets(cfg, seed)?;
    let train = TrainConfig { seed, ..cfg.train.clone() };
    let (classifier, ctrace) = pretrain_classifier(&source, cfg.classifier.clone(), &train, &mut |_, _| Ok(()))?;
    let (q_hat_matched, q_hat_mismatched) = pair_score_means(&classifier, &source)?;

    let mut gans = Vec::new();
    let mut cycle = Vec::new();
    for variant in [Variant::GanOnly, Variant::SimPgan] {
        let tc = TrainConfig { variant, ..train.clone() };
        let (bundle, trace) = train_simpgan(&source, &target, &classifier, cfg.gan.clone(), &tc, &mut |_, _| Ok(()))?;
        gans.push(bundle);
        cycle = trace.iter().map(|r| r.l_cycle).collect();
    }

    let split = single_shot_split(&target, derive_seed(seed, "split"), 0)?;
    let score = |gan| rank1(&classifier, &target, &split.probe, &split.gallery, gan);
    let all_source: Vec<usize> = (0..source.len()).collect();
    let all_target: Vec<usize> = (0..target.len()).collect();
    let shift = centroid_shift(
        &rows(&dataset_features(&classifier, &source, &all_source, None)?),
        &rows(&dataset_features(&classifier, &target, &all_target, None)?),
        &rows(&dataset_features(&classifier, &target, &all_target, Some(&gans[1]))?),
    )?;
    Ok(SeedOutcome {
        seed,
        direct_transfer: score(None)?,
        gan_only: score(Some(&gans[0]))?,
        simpgan: score(Some(&gans[1]))?,
        shift,
        q_hat_matched,
        q_hat_mismatched,
        classifier_loss: head_tail_medians(&ctrace.iter().map(|r| r.l_all).collect::<Vec<_>>()),
        cycle_loss: head_tail_medians(&cycle),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every seed, in parallel when cores allow. Results keep seed order.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<SeedOutcome>> {
    crate::par::parallel_map(seeds, |&s| run_seed(cfg, s)).into_iter().collect()
}
