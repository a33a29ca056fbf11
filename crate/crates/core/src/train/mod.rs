//! Classifier pretraining, SimPGAN training, checkpoints and loss traces.

mod checkpoint;
mod sgd;

use std::path::Path;

use rand::RngCore;

use crate::classifier::{identification_loss, variation_loss, ClassifierConfig, PairLabel, SiameseModel};
use crate::diff::{DiffError, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rng::stream;
use crate::synth::{Dataset, PairSampler};
use crate::transgan::{discriminator_pass, generator_pass, select_row, GanBundle, GanConfig, LossWeights, RealTermReading};

pub use checkpoint::{Checkpoint, CheckpointError, MAGIC, META_TENSOR, VERSION};
pub use sgd::SgdMomentum;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Classifier only; target images are evaluated untranslated.
    DirectTransfer,
    /// Adversarial terms only (`λ1 = λ2 = 0`).
    GanOnly,
    SimPgan,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::DirectTransfer => "direct_transfer",
            Variant::GanOnly => "gan_only",
            Variant::SimPgan => "simpgan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct_transfer" => Ok(Variant::DirectTransfer),
            "gan_only" => Ok(Variant::GanOnly),
            "simpgan" => Ok(Variant::SimPgan),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub classifier_iters: usize,
    pub gan_iters: usize,
    pub lr_classifier: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub momentum_classifier: f64,
    pub momentum_gan: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub positive_ratio: f64,
    pub seed: u64,
    /// Calls the checkpoint hook every this many iterations; 0 disables it.
    pub checkpoint_interval: usize,
    pub variant: Variant,
    /// Pair batches averaged per iteration.
    pub pairs_per_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            classifier_iters: 3000,
            gan_iters: 3000,
            lr_classifier: 0.001,
            lr_generator: 0.002,
            lr_discriminator: 0.002,
            momentum_classifier: 0.9,
            momentum_gan: 0.0,
            lambda1: 10.0,
            lambda2: 1.0,
            positive_ratio: 0.5,
            seed: 0,
            checkpoint_interval: 0,
            variant: Variant::SimPgan,
            pairs_per_iter: 1,
        }
    }
}

impl TrainConfig {
    /// Loss weights actually applied: `gan_only` zeroes both.
    pub fn weights(&self) -> LossWeights {
        match self.variant {
            Variant::GanOnly => LossWeights { lambda1: 0.0, lambda2: 0.0 },
            _ => LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.positive_ratio) {
            return Err(Error::Config(format!("positive ratio {} outside [0, 1]", self.positive_ratio)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::Config("lambda weights must be finite and non-negative".into()));
        }
        let rates = [self.lr_classifier, self.lr_generator, self.lr_discriminator, self.momentum_classifier, self.momentum_gan];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("learning rates and momenta must be finite and non-negative".into()));
        }
        if self.pairs_per_iter == 0 {
            return Err(Error::Config("pairs per iteration must be positive".into()));
        }
        Ok(())
    }

    /// `key=value` pairs describing every field, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = self.weights();
        vec![
            ("classifier_iters", self.classifier_iters.to_string()),
            ("gan_iters", self.gan_iters.to_string()),
            ("lr_classifier", self.lr_classifier.to_string()),
            ("lr_generator", self.lr_generator.to_string()),
            ("lr_discriminator", self.lr_discriminator.to_string()),
            ("momentum_classifier", self.momentum_classifier.to_string()),
            ("momentum_gan", self.momentum_gan.to_string()),
            ("lambda1", w.lambda1.to_string()),
            ("lambda2", w.lambda2.to_string()),
            ("positive_ratio", self.positive_ratio.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("variant", self.variant.as_str().to_string()),
            ("pairs_per_iter", self.pairs_per_iter.to_string()),
        ]
    }
}

/// A 64-bit seed for one purpose, derived from the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    stream(seed, label).next_u64()
}

fn divergence(phase: &'static str, iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Diff(DiffError::NonFinite { .. }) | Error::Layer { source: DiffError::NonFinite { .. }, .. } => {
            Error::Diverged { phase, iteration }
        }
        other => other,
    }
}

fn finite_item(g: &Graph<f32>, v: Var, phase: &'static str, iteration: usize) -> Result<f64> {
    let x = g.item(v)? as f64;
    if !x.is_finite() {
        return Err(Error::Diverged { phase, iteration });
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierTraceRow {
    pub iter: usize,
    pub l_all: f64,
    pub l_v: f64,
    pub l_id: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanTraceRow {
    pub iter: usize,
    pub l_g: f64,
    pub l_f: f64,
    pub l_cycle: f64,
    pub l_sim: f64,
    pub l_gen: f64,
    pub l_ds: f64,
    pub l_dt: f64,
    pub l_dis: f64,
}

pub const CLASSIFIER_TRACE_HEADER: [&str; 4] = ["iter", "L_all", "L_v", "L_id"];
pub const GAN_TRACE_HEADER: [&str; 9] = ["iter", "L_G", "L_F", "L_cycle", "L_sim", "L_gen", "L_DS", "L_DT", "L_dis"];

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

pub fn write_classifier_trace(path: &Path, rows: &[ClassifierTraceRow]) -> Result<()> {
    write_rows(
        path,
        CLASSIFIER_TRACE_HEADER,
        rows.iter().map(|r| [r.iter.to_string(), r.l_all.to_string(), r.l_v.to_string(), r.l_id.to_string()]),
    )
}

pub fn write_gan_trace(path: &Path, rows: &[GanTraceRow]) -> Result<()> {
    write_rows(
        path,
        GAN_TRACE_HEADER,
        rows.iter().map(|r| {
            [
                r.iter.to_string(),
                r.l_g.to_string(),
                r.l_f.to_string(),
                r.l_cycle.to_string(),
                r.l_sim.to_string(),
                r.l_gen.to_string(),
                r.l_ds.to_string(),
                r.l_dt.to_string(),
                r.l_dis.to_string(),
            ]
        }),
    )
}

/// Called with the number of completed iterations and the current model.
pub type Hook<'a, M> = &'a mut dyn FnMut(usize, &M) -> Result<()>;

/// Supervised phase: minimizes `L_v + L_id` over source pairs.
pub fn pretrain_classifier(
    source: &Dataset,
    model_config: ClassifierConfig,
    cfg: &TrainConfig,
    hook: Hook<'_, SiameseModel<f32>>,
) -> Result<(SiameseModel<f32>, Vec<ClassifierTraceRow>)> {
    cfg.validate()?;
    let mut model = SiameseModel::<f32>::init(model_config, derive_seed(cfg.seed, "classifier-init"))?;
    model.check_image(&[1, 3, source.height(), source.width()])?;
    let sampler = PairSampler::new(source, source.len(), cfg.positive_ratio)?;
    let mut rng = stream(cfg.seed, "classifier-pairs");
    let mut opts = [(); 3].map(|_| SgdMomentum::<f32>::new(cfg.lr_classifier, cfg.momentum_classifier));
    let mut trace = Vec::with_capacity(cfg.classifier_iters);
    const PHASE: &str = "classifier pretraining";

    for it in 0..cfg.classifier_iters {
        let mut indices = Vec::with_capacity(2 * cfg.pairs_per_iter);
        let mut labels: Vec<PairLabel> = Vec::with_capacity(cfg.pairs_per_iter);
        for _ in 0..cfg.pairs_per_iter {
            let (pair, label) = sampler.source_pair(&mut rng);
            indices.extend(pair);
            labels.push(label);
        }
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let x = g.constant(source.batch(&indices));
        let step = (|| -> Result<(Var, Var, Var)> {
            let emb = model.embed(&mut g, &vars, x)?;
            let probs = model.identity_probs(&mut g, &vars, emb)?;
            let (mut lv, mut lid) = (g.scalar(0.0), g.scalar(0.0));
            for (j, label) in labels.iter().enumerate() {
                let v1 = select_row(&mut g, emb, 2 * j)?;
                let v2 = select_row(&mut g, emb, 2 * j + 1)?;
                let q_hat = model.similarity_score(&mut g, &vars, v1, v2)?;
                let l = variation_loss(&mut g, q_hat, label.q_value())?;
                lv = g.add(lv, l)?;
                let p1 = select_row(&mut g, probs, 2 * j)?;
                let p2 = select_row(&mut g, probs, 2 * j + 1)?;
                let (id1, id2) = label.ids();
                let l = identification_loss(&mut g, p1, id1, p2, id2)?;
                lid = g.add(lid, l)?;
            }
            let inv = 1.0 / labels.len() as f64;
            let lv = g.scale(lv, inv)?;
            let lid = g.scale(lid, inv)?;
            let all = g.add(lv, lid)?;
            Ok((all, lv, lid))
        })();
        let (all, lv, lid) = step.map_err(divergence(PHASE, it))?;
        trace.push(ClassifierTraceRow {
            iter: it,
            l_all: finite_item(&g, all, PHASE, it)?,
            l_v: finite_item(&g, lv, PHASE, it)?,
            l_id: finite_item(&g, lid, PHASE, it)?,
        });
        let grads = g.backward(all).map_err(|e| divergence(PHASE, it)(e.into()))?;
        let [ob, os, oi] = &mut opts;
        ob.step(&mut model.backbone, &vars.backbone.grads(&grads))?;
        os.step(&mut model.similarity_head, &vars.similarity.grads(&grads))?;
        oi.step(&mut model.identity_head, &vars.identity.grads(&grads))?;
        if !model.backbone.all_finite() || !model.similarity_head.all_finite() || !model.identity_head.all_finite() {
            return Err(Error::Diverged { phase: PHASE, iteration: it });
        }
        if cfg.checkpoint_interval > 0 && (it + 1) % cfg.checkpoint_interval == 0 {
            hook(it + 1, &model)?;
        }
    }
    Ok((model, trace))
}

/// Optimizer state for the four GAN parts, kept apart so no step can reach
/// another part's velocity.
pub struct GanOptimizers {
    pub g: SgdMomentum<f32>,
    pub f: SgdMomentum<f32>,
    pub d_s: SgdMomentum<f32>,
    pub d_t: SgdMomentum<f32>,
}

impl GanOptimizers {
    pub fn new(cfg: &TrainConfig) -> Self {
        GanOptimizers {
            g: SgdMomentum::new(cfg.lr_generator, cfg.momentum_gan),
            f: SgdMomentum::new(cfg.lr_generator, cfg.momentum_gan),
            d_s: SgdMomentum::new(cfg.lr_discriminator, cfg.momentum_gan),
            d_t: SgdMomentum::new(cfg.lr_discriminator, cfg.momentum_gan),
        }
    }
}

/// Stacked images of one SimPGAN iteration.
pub struct IterationBatch {
    pub source: crate::diff::Tensor<f32>,
    pub target: crate::diff::Tensor<f32>,
    pub q: Vec<f64>,
}

impl IterationBatch {
    pub fn draw(sampler: &PairSampler, source: &Dataset, target: &Dataset, pairs: usize, rng: &mut crate::rng::Rng) -> Self {
        let (mut s, mut t, mut q) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..pairs {
            let b = sampler.draw(rng);
            s.extend(b.source);
            t.extend(b.target);
            q.push(b.label.q_value());
        }
        IterationBatch { source: source.batch(&s), target: target.batch(&t), q }
    }
}

/// Loss values of one generator step, plus the fakes it produced.
pub struct GeneratorStep {
    pub l_g: f64,
    pub l_f: f64,
    pub l_cycle: f64,
    pub l_sim: f64,
    pub l_gen: f64,
    pub fake_target: crate::diff::Tensor<f32>,
    pub fake_source: crate::diff::Tensor<f32>,
    /// Gradients applied to `G` and `F`.
    pub grads_g: ParamSet<f32>,
    pub grads_f: ParamSet<f32>,
}

const GAN_PHASE: &str = "SimPGAN training";

/// Minimizes `L_gen` for one batch, updating only `G` and `F`.
pub fn generator_step(
    bundle: &mut GanBundle<f32>,
    opts: &mut GanOptimizers,
    classifier: &SiameseModel<f32>,
    batch: &IterationBatch,
    weights: LossWeights,
    iteration: usize,
) -> Result<GeneratorStep> {
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g, true, false);
    let cvars = classifier.bind(&mut g, false);
    let s = g.constant(batch.source.clone());
    let t = g.constant(batch.target.clone());
    let pass = generator_pass(&mut g, &bundle.config, &vars, classifier, &cvars, s, t, &batch.q, weights)
        .map_err(divergence(GAN_PHASE, iteration))?;
    let item = |v| finite_item(&g, v, GAN_PHASE, iteration);
    let (l_g, l_f, l_cycle, l_sim, l_gen) =
        (item(pass.terms.adv_g)?, item(pass.terms.adv_f)?, item(pass.terms.cycle)?, item(pass.terms.sim)?, item(pass.total)?);
    let grads = g.backward(pass.total).map_err(|e| divergence(GAN_PHASE, iteration)(e.into()))?;
    let grads_g = vars.g.grads(&grads);
    let grads_f = vars.f.grads(&grads);
    opts.g.step(&mut bundle.g, &grads_g)?;
    opts.f.step(&mut bundle.f, &grads_f)?;
    Ok(GeneratorStep {
        l_g,
        l_f,
        l_cycle,
        l_sim,
        l_gen,
        fake_target: g.value(pass.fake_target).clone(),
        fake_source: g.value(pass.fake_source).clone(),
        grads_g,
        grads_f,
    })
}

/// Minimizes `L_dis` on detached fakes, updating only `D_S` and `D_T`.
/// Returns `(L_DS, L_DT, L_dis)`.
pub fn discriminator_step(
    bundle: &mut GanBundle<f32>,
    opts: &mut GanOptimizers,
    batch: &IterationBatch,
    fake_target: &crate::diff::Tensor<f32>,
    fake_source: &crate::diff::Tensor<f32>,
    iteration: usize,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g, false, true);
    let s = g.constant(batch.source.clone());
    let t = g.constant(batch.target.clone());
    let ft = g.constant(fake_target.clone());
    let fs = g.constant(fake_source.clone());
    let pass = discriminator_pass(&mut g, &bundle.config, &vars, s, t, ft, fs).map_err(divergence(GAN_PHASE, iteration))?;
    let item = |v| finite_item(&g, v, GAN_PHASE, iteration);
    let out = (item(pass.d_s)?, item(pass.d_t)?, item(pass.total)?);
    let grads = g.backward(pass.total).map_err(|e| divergence(GAN_PHASE, iteration)(e.into()))?;
    opts.d_s.step(&mut bundle.d_s, &vars.d_s.grads(&grads))?;
    opts.d_t.step(&mut bundle.d_t, &vars.d_t.grads(&grads))?;
    Ok(out)
}

/// Unsupervised phase: alternates `L_gen` and `L_dis` steps with the
/// classifier frozen. The target dataset is sealed for the duration, and any
/// identity read from it fails the run.
pub fn train_simpgan(
    source: &Dataset,
    target: &Dataset,
    classifier: &SiameseModel<f32>,
    gan_config: GanConfig,
    cfg: &TrainConfig,
    hook: Hook<'_, GanBundle<f32>>,
) -> Result<(GanBundle<f32>, Vec<GanTraceRow>)> {
    cfg.validate()?;
    if cfg.variant == Variant::DirectTransfer {
        return Err(Error::Config("direct_transfer has no adversarial phase".into()));
    }
    target.seal();
    let result = run_simpgan(source, target, classifier, gan_config, cfg, hook);
    let reads = target.label_reads();
    target.unseal();
    if reads > 0 {
        return Err(Error::TargetLabelAccess { count: reads });
    }
    result
}

fn run_simpgan(
    source: &Dataset,
    target: &Dataset,
    classifier: &SiameseModel<f32>,
    gan_config: GanConfig,
    cfg: &TrainConfig,
    hook: Hook<'_, GanBundle<f32>>,
) -> Result<(GanBundle<f32>, Vec<GanTraceRow>)> {
    let mut bundle = GanBundle::<f32>::init(gan_config, derive_seed(cfg.seed, "gan-init"))?;
    for d in [source, target] {
        bundle.config.check_image_dims(d.height(), d.width())?;
    }
    let sampler = PairSampler::new(source, target.len(), cfg.positive_ratio)?;
    let mut rng = stream(cfg.seed, "simpgan-pairs");
    let mut opts = GanOptimizers::new(cfg);
    let weights = cfg.weights();
    let mut trace = Vec::with_capacity(cfg.gan_iters);
    for it in 0..cfg.gan_iters {
        let batch = IterationBatch::draw(&sampler, source, target, cfg.pairs_per_iter, &mut rng);
        let gen = generator_step(&mut bundle, &mut opts, classifier, &batch, weights, it)?;
        let (l_ds, l_dt, l_dis) = discriminator_step(&mut bundle, &mut opts, &batch, &gen.fake_target, &gen.fake_source, it)?;
        trace.push(GanTraceRow {
            iter: it,
            l_g: gen.l_g,
            l_f: gen.l_f,
            l_cycle: gen.l_cycle,
            l_sim: gen.l_sim,
            l_gen: gen.l_gen,
            l_ds,
            l_dt,
            l_dis,
        });
        if !bundle.params().all_finite() {
            return Err(Error::Diverged { phase: GAN_PHASE, iteration: it });
        }
        if cfg.checkpoint_interval > 0 && (it + 1) % cfg.checkpoint_interval == 0 {
            hook(it + 1, &bundle)?;
        }
    }
    Ok((bundle, trace))
}

const KIND: &str = "kind";

pub fn classifier_checkpoint(model: &SiameseModel<f32>) -> Checkpoint {
    let c = &model.config;
    let stages: Vec<String> = c.stage_channels.iter().map(usize::to_string).collect();
    Checkpoint::new(model.params())
        .with_meta(KIND, "classifier")
        .with_meta("channels", c.channels)
        .with_meta("height", c.height)
        .with_meta("width", c.width)
        .with_meta("stage_channels", stages.join(":"))
        .with_meta("num_identities", c.num_identities)
        .with_meta("leaky_slope", c.leaky_slope)
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    let got = ckpt.meta(KIND)?;
    if got != kind {
        return Err(CheckpointError::Meta(format!("expected a {kind} checkpoint, found `{got}`")).into());
    }
    Ok(())
}

pub fn classifier_from_checkpoint(ckpt: &Checkpoint) -> Result<SiameseModel<f32>> {
    expect_kind(ckpt, "classifier")?;
    let stages = ckpt
        .meta("stage_channels")?
        .split(':')
        .map(|s| s.parse().map_err(|_| CheckpointError::Meta(format!("bad stage width `{s}`"))))
        .collect::<Result<Vec<usize>, _>>()?;
    let config = ClassifierConfig {
        channels: ckpt.meta_parse("channels")?,
        height: ckpt.meta_parse("height")?,
        width: ckpt.meta_parse("width")?,
        stage_channels: stages,
        num_identities: ckpt.meta_parse("num_identities")?,
        leaky_slope: ckpt.meta_parse("leaky_slope")?,
    };
    SiameseModel::from_params(config, &ckpt.tensors)
}

pub fn gan_checkpoint(bundle: &GanBundle<f32>) -> Checkpoint {
    let c = &bundle.config;
    Checkpoint::new(bundle.params())
        .with_meta(KIND, "gan")
        .with_meta("channels", c.channels)
        .with_meta("height", c.height)
        .with_meta("width", c.width)
        .with_meta("gen_base", c.gen_base)
        .with_meta("residual_blocks", c.residual_blocks)
        .with_meta("disc_base", c.disc_base)
        .with_meta("leaky_slope", c.leaky_slope)
        .with_meta("real_term", c.real_term.as_str())
}

pub fn gan_from_checkpoint(ckpt: &Checkpoint) -> Result<GanBundle<f32>> {
    expect_kind(ckpt, "gan")?;
    let config = GanConfig {
        channels: ckpt.meta_parse("channels")?,
        height: ckpt.meta_parse("height")?,
        width: ckpt.meta_parse("width")?,
        gen_base: ckpt.meta_parse("gen_base")?,
        residual_blocks: ckpt.meta_parse("residual_blocks")?,
        disc_base: ckpt.meta_parse("disc_base")?,
        leaky_slope: ckpt.meta_parse("leaky_slope")?,
        real_term: RealTermReading::parse(ckpt.meta("real_term")?)?,
    };
    GanBundle::from_params(config, &ckpt.tensors)
}
