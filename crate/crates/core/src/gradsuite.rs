//! Gradient verification suite: every tape op and every composed training
//! loss, checked against finite differences at seeded random points.
//!
//! Composed losses use tiny network configurations so a full sweep over
//! every coordinate stays fast.

use rand::Rng as _;

use crate::classifier::{ClassifierConfig, ClassifierVars, PairLabel, SiameseModel};
use crate::diff::{grad_check_with, DiffError, GradCheckReport, Graph, Scalar, Stencil, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamSet};
use crate::par::parallel_map;
use crate::rng::substream;
use crate::transgan::{
    adversarial_discriminator_loss, adversarial_generator_loss, cycle_loss, discriminator_pass, generator_pass,
    similarity_consistency_loss, translate, GanBundle, GanConfig, GanVars, LossWeights,
};

/// Central-difference step for 64-bit op checks.
pub const WIDE_STEP: f64 = 1e-6;
/// Five-point step for 64-bit composed-loss checks. Small gradient
/// coordinates of the GAN losses sit near the rounding floor of a central
/// difference at any step, so these use the fourth-order stencil.
pub const LOSS_WIDE_STEP: f64 = 3e-5;
pub const WIDE_TOLERANCE: f64 = 1e-5;
pub const STANDARD_TOLERANCE: f64 = 1e-3;
/// Seeded points per case.
pub const POINTS: u64 = 10;

/// Builds the scalar for point `p` from the graph handles of its inputs.
type Build<S> = Box<dyn Fn(&mut Graph<S>, &[Var], u64) -> std::result::Result<Var, DiffError> + Send + Sync>;
type DrawFn<S> = Box<dyn Fn(u64) -> Vec<Tensor<S>> + Send + Sync>;

/// One scalar function and a generator of random evaluation points.
pub struct GradCase<S: Scalar> {
    pub name: &'static str,
    /// Step for 32-bit checks, chosen per function (see [`op_cases`]).
    /// These always use the central stencil.
    pub standard_step: f64,
    pub wide_step: f64,
    pub wide_stencil: Stencil,
    draw: DrawFn<S>,
    build: Build<S>,
}

impl<S: Scalar> GradCase<S> {
    pub fn point(&self, index: u64) -> Vec<Tensor<S>> {
        (self.draw)(index)
    }

    pub fn report(&self, p: u64, epsilon: f64, stencil: Stencil) -> std::result::Result<GradCheckReport, DiffError> {
        grad_check_with(|g, v| (self.build)(g, v, p), &self.point(p), epsilon, stencil)
    }

    /// Largest relative error over `points` seeded points.
    pub fn worst_error(&self, epsilon: f64, stencil: Stencil, points: u64) -> std::result::Result<f64, DiffError> {
        let mut worst = 0.0f64;
        for p in 0..points {
            let r = self.report(p, epsilon, stencil)?;
            worst = worst.max(r.max_rel_error);
        }
        Ok(worst)
    }
}

/// How the coordinates of one op input are drawn.
#[derive(Clone, Copy, Debug)]
pub enum Draw {
    Uniform(f64, f64),
    /// Uniform in `[-1.5, 1.5]`, at least 0.05 away from every listed kink.
    AvoidKinks(&'static [f64]),
}

const ANY: Draw = Draw::Uniform(-1.5, 1.5);
const KINK_MARGIN: f64 = 0.05;

fn draw_tensor<S: Scalar>(rng: &mut crate::rng::Rng, shape: &[usize], draw: Draw) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| match draw {
            Draw::Uniform(lo, hi) => rng.gen_range(lo..hi),
            Draw::AvoidKinks(kinks) => loop {
                let x = rng.gen_range(-1.5..1.5);
                if kinks.iter().all(|k| (x - k).abs() >= KINK_MARGIN) {
                    break x;
                }
            },
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches data")
}

/// Ops that are affine (or quadratic) in each coordinate have exact central
/// differences, so a unit step keeps rounding noise low. Kinked ops stay
/// below the kink margin; curved ops balance truncation against rounding.
fn op_step(name: &str) -> f64 {
    match name {
        "relu" | "leaky_relu" | "abs" | "clamp" | "sigmoid" | "tanh" => 1e-2,
        "atanh" | "log" => 3e-3,
        "softmax" => 1e-1,
        "instance_norm" => 3e-2,
        _ => 1.0,
    }
}

fn op<S: Scalar>(
    name: &'static str,
    inputs: Vec<(Vec<usize>, Draw)>,
    f: impl Fn(&mut Graph<S>, &[Var]) -> std::result::Result<Var, DiffError> + Send + Sync + 'static,
) -> GradCase<S> {
    GradCase {
        name,
        standard_step: op_step(name),
        wide_step: WIDE_STEP,
        wide_stencil: Stencil::Central,
        draw: Box::new(move |p| {
            let mut rng = substream(p, name, 0);
            inputs.iter().map(|(shape, d)| draw_tensor(&mut rng, shape, *d)).collect()
        }),
        // Reduce with positive weights that vary per point so every output
        // coordinate matters.
        build: Box::new(move |g, v, p| {
            let y = f(g, v)?;
            let n = g.value(y).len();
            let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 37 + p as usize) % 11) as f64 / 10.0).collect();
            let w = g.constant(Tensor::from_f64(g.shape(y).to_vec(), &w)?);
            let yw = g.mul(y, w)?;
            g.sum(yw)
        }),
    }
}

/// One case per tape op.
pub fn op_cases<S: Scalar>() -> Vec<GradCase<S>> {
    vec![
        op("add", vec![(vec![2, 3], ANY), (vec![3], ANY)], |g, v| g.add(v[0], v[1])),
        op("sub", vec![(vec![2, 3], ANY), (vec![2, 1], ANY)], |g, v| g.sub(v[0], v[1])),
        op("mul", vec![(vec![2, 3], ANY), (vec![2, 3], ANY)], |g, v| g.mul(v[0], v[1])),
        op("scale", vec![(vec![4], ANY)], |g, v| g.scale(v[0], -1.7)),
        op("add_scalar", vec![(vec![4], ANY)], |g, v| g.add_scalar(v[0], 0.3)),
        op("matmul", vec![(vec![3, 4], ANY), (vec![4, 2], ANY)], |g, v| g.matmul(v[0], v[1])),
        op("transpose", vec![(vec![3, 2], ANY)], |g, v| g.transpose(v[0])),
        op("conv2d", vec![(vec![2, 2, 5, 5], ANY), (vec![3, 2, 3, 3], ANY), (vec![3], ANY)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        op("conv2d_valid", vec![(vec![1, 3, 4, 4], ANY), (vec![2, 3, 2, 2], ANY)], |g, v| g.conv2d(v[0], v[1], None, 1, 0)),
        op("relu", vec![(vec![6], Draw::AvoidKinks(&[0.0]))], |g, v| g.relu(v[0])),
        op("leaky_relu", vec![(vec![6], Draw::AvoidKinks(&[0.0]))], |g, v| g.leaky_relu(v[0], 0.2)),
        op("sigmoid", vec![(vec![5], ANY)], |g, v| g.sigmoid(v[0])),
        op("tanh", vec![(vec![5], ANY)], |g, v| g.tanh(v[0])),
        op("atanh", vec![(vec![5], Draw::Uniform(-0.8, 0.8))], |g, v| g.atanh(v[0])),
        op("softmax", vec![(vec![2, 4], ANY)], |g, v| g.softmax(v[0])),
        op("square", vec![(vec![5], ANY)], |g, v| g.square(v[0])),
        op("abs", vec![(vec![6], Draw::AvoidKinks(&[0.0]))], |g, v| g.abs(v[0])),
        op("log", vec![(vec![5], Draw::Uniform(0.2, 2.0))], |g, v| g.log(v[0])),
        op("clamp", vec![(vec![6], Draw::AvoidKinks(&[-0.5, 0.5]))], |g, v| g.clamp(v[0], -0.5, 0.5)),
        op("sum", vec![(vec![2, 3], ANY)], |g, v| g.sum(v[0])),
        op("mean", vec![(vec![2, 3], ANY)], |g, v| g.mean(v[0])),
        op("concat", vec![(vec![2, 3], ANY), (vec![2, 2], ANY)], |g, v| g.concat(&[v[0], v[1]], 1)),
        op("pad", vec![(vec![1, 2, 3, 3], ANY)], |g, v| g.pad(v[0], 1)),
        op("upsample_nearest", vec![(vec![1, 2, 2, 3], ANY)], |g, v| g.upsample_nearest(v[0], 2)),
        op("instance_norm", vec![(vec![2, 2, 3, 3], ANY)], |g, v| g.instance_norm(v[0])),
        op("reshape", vec![(vec![2, 6], ANY)], |g, v| g.reshape(v[0], vec![3, 4])),
        op("global_avg_pool", vec![(vec![2, 3, 2, 2], ANY)], |g, v| g.global_avg_pool(v[0])),
    ]
}

/// Classifier used by the composed-loss cases.
pub fn tiny_classifier_config() -> ClassifierConfig {
    ClassifierConfig { height: 16, width: 16, stage_channels: vec![2, 4], ..ClassifierConfig::new(3) }
}

/// Translators and discriminators used by the composed-loss cases.
pub fn tiny_gan_config() -> GanConfig {
    GanConfig { height: 16, width: 16, gen_base: 1, residual_blocks: 1, disc_base: 1, ..GanConfig::default() }
}

/// Adds uniform noise in ±0.1 so zero-initialized tensors carry gradient signal.
fn jitter<S: Scalar>(set: &ParamSet<S>, rng: &mut crate::rng::Rng) -> ParamSet<S> {
    let mut out = set.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v = S::of(v.f64() + rng.gen_range(-0.1..0.1));
        }
    }
    out
}

fn random_classifier<S: Scalar>(seed: u64) -> SiameseModel<S> {
    let model = SiameseModel::<S>::init(tiny_classifier_config(), seed).expect("valid tiny config");
    let mut rng = substream(seed, "suite-classifier", 0);
    SiameseModel {
        backbone: jitter(&model.backbone, &mut rng),
        similarity_head: jitter(&model.similarity_head, &mut rng),
        identity_head: jitter(&model.identity_head, &mut rng),
        ..model
    }
}

fn random_gan<S: Scalar>(seed: u64) -> GanBundle<S> {
    let b = GanBundle::<S>::init(tiny_gan_config(), seed).expect("valid tiny config");
    let mut rng = substream(seed, "suite-gan", 0);
    GanBundle {
        g: jitter(&b.g, &mut rng),
        f: jitter(&b.f, &mut rng),
        d_s: jitter(&b.d_s, &mut rng),
        d_t: jitter(&b.d_t, &mut rng),
        config: b.config,
    }
}

/// `count` constant images with values in ±0.9, fixed by the point index.
fn images<S: Scalar>(g: &mut Graph<S>, shape: [usize; 3], point: u64, label: &str, count: usize) -> Result<Vec<Var>> {
    let mut rng = substream(point, label, 0);
    let dims = [1, shape[0], shape[1], shape[2]];
    Ok((0..count).map(|_| g.constant(draw_tensor(&mut rng, &dims, Draw::Uniform(-0.9, 0.9)))).collect())
}

fn values<S: Scalar>(sets: &[&ParamSet<S>]) -> Vec<Tensor<S>> {
    sets.iter().flat_map(|s| s.iter().map(|(_, t)| t.clone())).collect()
}

/// Rebinds consecutive slices of `vars` to `sets`.
fn rebind_all<S: Scalar>(vars: &[Var], sets: &[&ParamSet<S>]) -> Result<Vec<Bound>> {
    let mut out = Vec::new();
    let mut at = 0;
    for s in sets {
        out.push(s.rebind(&vars[at..at + s.len()])?);
        at += s.len();
    }
    Ok(out)
}

fn to_diff(e: Error) -> DiffError {
    match e {
        Error::Diff(d) => d,
        other => DiffError::InvalidArgument { op: "composed loss", msg: other.to_string() },
    }
}

/// Step for 32-bit checks of composed losses.
const LOSS_STEP: f64 = 1e-2;

fn loss_case<S: Scalar>(
    name: &'static str,
    draw: impl Fn(u64) -> Vec<Tensor<S>> + Send + Sync + 'static,
    f: impl Fn(&mut Graph<S>, &[Var], u64) -> Result<Var> + Send + Sync + 'static,
) -> GradCase<S> {
    GradCase {
        name,
        standard_step: LOSS_STEP,
        wide_step: LOSS_WIDE_STEP,
        wide_stencil: Stencil::FivePoint,
        draw: Box::new(draw),
        build: Box::new(move |g, v, p| f(g, v, p).map_err(to_diff)),
    }
}

/// Pair labels alternate between matched and unmatched across points.
fn pair_label(p: u64) -> PairLabel {
    if p % 2 == 0 {
        PairLabel::new(1, 1)
    } else {
        PairLabel::new(0, 2)
    }
}

/// Classifier losses with respect to every classifier parameter.
fn classifier_cases<S: Scalar>() -> Vec<GradCase<S>> {
    let template = random_classifier::<S>(0);
    let draw = |p: u64| {
        let m = random_classifier::<S>(p);
        values(&[&m.backbone, &m.similarity_head, &m.identity_head])
    };
    let losses = |pick: fn(Var, Var, Var) -> Var| {
        let m = template.clone();
        move |g: &mut Graph<S>, v: &[Var], p: u64| -> Result<Var> {
            let mut b = rebind_all(v, &[&m.backbone, &m.similarity_head, &m.identity_head])?.into_iter();
            let cv = ClassifierVars { backbone: b.next().unwrap(), similarity: b.next().unwrap(), identity: b.next().unwrap() };
            let img = images(g, m.config.image_shape(), p, "suite-pair", 2)?;
            let l = m.classifier_loss(g, &cv, img[0], img[1], pair_label(p))?;
            Ok(pick(l.variation, l.identification, l.all))
        }
    };
    vec![
        loss_case("variation_loss", draw, losses(|v, _, _| v)),
        loss_case("identification_loss", draw, losses(|_, i, _| i)),
        loss_case("classifier_loss", draw, losses(|_, _, a| a)),
    ]
}

/// Which bundle members a case differentiates; the rest are bound as constants.
#[derive(Clone, Copy)]
struct Members {
    g: bool,
    f: bool,
    d_s: bool,
    d_t: bool,
}

impl Members {
    fn sets<'a, S: Scalar>(&self, b: &'a GanBundle<S>) -> Vec<&'a ParamSet<S>> {
        [(self.g, &b.g), (self.f, &b.f), (self.d_s, &b.d_s), (self.d_t, &b.d_t)]
            .into_iter()
            .filter_map(|(on, s)| on.then_some(s))
            .collect()
    }

    fn bind<S: Scalar>(&self, g: &mut Graph<S>, b: &GanBundle<S>, vars: &[Var]) -> Result<GanVars> {
        let mut checked = rebind_all(vars, &self.sets(b))?.into_iter();
        let mut pick = |on: bool, set: &ParamSet<S>, g: &mut Graph<S>| if on { checked.next().unwrap() } else { set.bind(g, false) };
        Ok(GanVars {
            g: pick(self.g, &b.g, g),
            f: pick(self.f, &b.f, g),
            d_s: pick(self.d_s, &b.d_s, g),
            d_t: pick(self.d_t, &b.d_t, g),
        })
    }
}

type GanLoss<S> = fn(&mut Graph<S>, &GanConfig, &GanVars, &SiameseModel<S>, &[Var], u64) -> Result<Var>;

fn gan_case<S: Scalar>(name: &'static str, members: Members, images_needed: usize, loss: GanLoss<S>) -> GradCase<S> {
    let template = random_gan::<S>(0);
    let frozen = random_classifier::<S>(100);
    loss_case(
        name,
        move |p| values(&members.sets(&random_gan::<S>(p))),
        move |g, v, p| {
            let vars = members.bind(g, &template, v)?;
            let img = images(g, template.config.image_shape(), p, name, images_needed)?;
            loss(g, &template.config, &vars, &frozen, &img, p)
        },
    )
}

fn stack<S: Scalar>(g: &mut Graph<S>, img: &[Var], i: usize) -> Result<Var> {
    Ok(g.concat(&[img[i], img[i + 1]], 0)?)
}

/// Adversarial, cycle, similarity and total losses with respect to the
/// parameters each one trains.
fn gan_cases<S: Scalar>() -> Vec<GradCase<S>> {
    let (no, yes) = (false, true);
    let gen_side = Members { g: yes, f: yes, d_s: no, d_t: no };
    vec![
        gan_case("adversarial_g", Members { g: yes, f: no, d_s: no, d_t: yes }, 2, |g, c, v, _, img, _| {
            let f0 = translate(g, c, &v.g, img[0])?;
            let f1 = translate(g, c, &v.g, img[1])?;
            adversarial_generator_loss(g, c, &v.d_t, [f0, f1])
        }),
        gan_case("adversarial_f", Members { g: no, f: yes, d_s: yes, d_t: no }, 2, |g, c, v, _, img, _| {
            let f0 = translate(g, c, &v.f, img[0])?;
            let f1 = translate(g, c, &v.f, img[1])?;
            adversarial_generator_loss(g, c, &v.d_s, [f0, f1])
        }),
        gan_case("discriminator_t", Members { g: no, f: no, d_s: no, d_t: yes }, 4, |g, c, v, _, img, _| {
            adversarial_discriminator_loss(g, c, &v.d_t, [img[0], img[1]], [img[2], img[3]])
        }),
        gan_case("discriminator_s", Members { g: no, f: no, d_s: yes, d_t: no }, 4, |g, c, v, _, img, _| {
            adversarial_discriminator_loss(g, c, &v.d_s, [img[0], img[1]], [img[2], img[3]])
        }),
        gan_case("cycle_loss", gen_side, 4, |g, c, v, _, img, _| cycle_loss(g, c, v, [img[0], img[1]], [img[2], img[3]])),
        gan_case("similarity_loss", gen_side, 2, |g, c, v, m, img, p| {
            let cv = m.bind(g, false);
            similarity_consistency_loss(g, c, v, m, &cv, [img[0], img[1]], pair_label(p).q_value())
        }),
        gan_case("generator_total", gen_side, 4, |g, c, v, m, img, p| {
            let cv = m.bind(g, false);
            let (s, t) = (stack(g, img, 0)?, stack(g, img, 2)?);
            Ok(generator_pass(g, c, v, m, &cv, s, t, &[pair_label(p).q_value()], LossWeights::default())?.total)
        }),
        gan_case("discriminator_total", Members { g: no, f: no, d_s: yes, d_t: yes }, 8, |g, c, v, _, img, _| {
            let (s, t, ft, fs) = (stack(g, img, 0)?, stack(g, img, 2)?, stack(g, img, 4)?, stack(g, img, 6)?);
            Ok(discriminator_pass(g, c, v, s, t, ft, fs)?.total)
        }),
    ]
}

/// Every composed training loss.
pub fn loss_cases<S: Scalar>() -> Vec<GradCase<S>> {
    let mut v = classifier_cases();
    v.extend(gan_cases());
    v
}

/// Worst errors of one case in both precisions.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    pub wide: f64,
    pub standard: f64,
}

impl SuiteRow {
    pub fn passes(&self) -> bool {
        self.wide < WIDE_TOLERANCE && self.standard < STANDARD_TOLERANCE
    }
}

fn rows(wide: Vec<GradCase<f64>>, standard: Vec<GradCase<f32>>) -> std::result::Result<Vec<SuiteRow>, DiffError> {
    // Slow loss cases first so the queue drains evenly across workers.
    let jobs: Vec<(usize, bool)> = (0..wide.len()).rev().flat_map(|i| [(i, true), (i, false)]).collect();
    let errors = parallel_map(&jobs, |&(i, is_wide)| {
        if is_wide {
            wide[i].worst_error(wide[i].wide_step, wide[i].wide_stencil, POINTS)
        } else {
            standard[i].worst_error(standard[i].standard_step, Stencil::Central, POINTS)
        }
    });
    let mut out: Vec<SuiteRow> = wide.iter().map(|w| SuiteRow { name: w.name, wide: 0.0, standard: 0.0 }).collect();
    for (&(i, is_wide), e) in jobs.iter().zip(errors) {
        *(if is_wide { &mut out[i].wide } else { &mut out[i].standard }) = e?;
    }
    Ok(out)
}

/// Runs every op and composed-loss case in both precisions.
pub fn run_suite() -> std::result::Result<Vec<SuiteRow>, DiffError> {
    let mut wide = op_cases();
    wide.extend(loss_cases());
    let mut standard = op_cases();
    standard.extend(loss_cases());
    rows(wide, standard)
}
