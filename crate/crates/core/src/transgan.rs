//! Two image translators (`G`: source → target style, `F`: target → source
//! style), their least-squares discriminators and every generator and
//! discriminator objective.

use crate::classifier::{variation_loss, ClassifierVars, SiameseModel};
use crate::diff::{Graph, Scalar, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::nn::{init_params, stack_forward, Activation, Bound, LayerKind, LayerSpec, ParamSet};

/// Inputs to the skip path are clamped to this magnitude before `atanh`.
pub const SKIP_CLAMP: f64 = 0.999;

/// Which images act as "real" in the discriminator objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RealTermReading {
    /// `D_T` sees real target images, `D_S` real source images.
    #[default]
    ByRole,
    /// `D_T` sees real source images, `D_S` real target images, exactly as the
    /// equations are subscripted.
    Literal,
}

impl RealTermReading {
    pub fn as_str(&self) -> &'static str {
        match self {
            RealTermReading::ByRole => "by_role",
            RealTermReading::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "by_role" => Ok(RealTermReading::ByRole),
            "literal" => Ok(RealTermReading::Literal),
            other => Err(Error::Config(format!("unknown real-term reading `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Width of the generator stem; downsampling stages use 2× this.
    pub gen_base: usize,
    pub residual_blocks: usize,
    /// Width of the first discriminator stage; later stages double it.
    pub disc_base: usize,
    pub leaky_slope: f64,
    pub real_term: RealTermReading,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            channels: 3,
            height: 64,
            width: 32,
            gen_base: 8,
            residual_blocks: 2,
            disc_base: 8,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            real_term: RealTermReading::ByRole,
        }
    }
}

fn norm_act(specs: &mut Vec<LayerSpec>, name: &str, slope: f64) -> Result<()> {
    specs.push(LayerSpec::instance_norm(&format!("{name}.norm"))?);
    specs.push(LayerSpec::activation(&format!("{name}.act"), Activation::LeakyRelu(slope))?);
    Ok(())
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "generator needs height and width divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.gen_base == 0 || self.disc_base == 0 || self.channels == 0 {
            return Err(Error::Config("GAN widths must be positive".into()));
        }
        Ok(())
    }

    /// Residual branch of a generator. Its final `out` convolution starts at
    /// zero so a fresh generator is the identity map.
    pub fn generator_specs(&self) -> Result<Vec<LayerSpec>> {
        let (c, b, s) = (self.channels, self.gen_base, self.leaky_slope);
        let mut specs = vec![LayerSpec::conv("stem", c, b, 3, 1, 1)?.without_bias()];
        norm_act(&mut specs, "stem", s)?;
        specs.push(LayerSpec::new("down1", LayerKind::Downsample { in_channels: b, out_channels: 2 * b })?.without_bias());
        norm_act(&mut specs, "down1", s)?;
        specs.push(LayerSpec::new("down2", LayerKind::Downsample { in_channels: 2 * b, out_channels: 2 * b })?.without_bias());
        norm_act(&mut specs, "down2", s)?;
        for i in 0..self.residual_blocks {
            specs.push(LayerSpec::new(format!("res{}", i + 1), LayerKind::ResidualBlock { channels: 2 * b, slope: s })?);
        }
        specs.push(LayerSpec::new("up1", LayerKind::Upsample { in_channels: 2 * b, out_channels: 2 * b, factor: 2 })?.without_bias());
        norm_act(&mut specs, "up1", s)?;
        specs.push(LayerSpec::new("up2", LayerKind::Upsample { in_channels: 2 * b, out_channels: b, factor: 2 })?.without_bias());
        norm_act(&mut specs, "up2", s)?;
        specs.push(LayerSpec::conv("out", b, c, 3, 1, 1)?);
        Ok(specs)
    }

    /// Patch discriminator: three stride-2 stages and a one-channel score map.
    pub fn discriminator_specs(&self) -> Result<Vec<LayerSpec>> {
        let (c, b, s) = (self.channels, self.disc_base, self.leaky_slope);
        let act = |n: &str| LayerSpec::activation(n, Activation::LeakyRelu(s));
        Ok(vec![
            LayerSpec::new("d1", LayerKind::Downsample { in_channels: c, out_channels: b })?,
            act("d1.act")?,
            LayerSpec::new("d2", LayerKind::Downsample { in_channels: b, out_channels: 2 * b })?.without_bias(),
            LayerSpec::instance_norm("d2.norm")?,
            act("d2.act")?,
            LayerSpec::new("d3", LayerKind::Downsample { in_channels: 2 * b, out_channels: 4 * b })?.without_bias(),
            LayerSpec::instance_norm("d3.norm")?,
            act("d3.act")?,
            LayerSpec::conv("score", 4 * b, 1, 3, 1, 1)?,
        ])
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn check_image_dims(&self, height: usize, width: usize) -> Result<()> {
        self.check_image(&[1, self.channels, height, width])
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.image_shape() {
            return Err(Error::Config(format!(
                "image shape {shape:?} does not match GAN input [N, {}, {}, {}]",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

pub fn init_generator<S: Scalar>(config: &GanConfig, seed: u64) -> Result<ParamSet<S>> {
    let mut p = init_params(&config.generator_specs()?, seed)?;
    for name in ["out.weight", "out.bias"] {
        p.get_mut(name).expect("generator has an output conv").data_mut().fill(S::zero());
    }
    Ok(p)
}

pub fn init_discriminator<S: Scalar>(config: &GanConfig, seed: u64) -> Result<ParamSet<S>> {
    init_params(&config.discriminator_specs()?, seed)
}

/// Parameters of both translators and both discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct GanBundle<S = f32> {
    pub config: GanConfig,
    pub g: ParamSet<S>,
    pub f: ParamSet<S>,
    pub d_s: ParamSet<S>,
    pub d_t: ParamSet<S>,
}

pub struct GanVars {
    pub g: Bound,
    pub f: Bound,
    pub d_s: Bound,
    pub d_t: Bound,
}

const PARTS: [&str; 4] = ["G", "F", "D_S", "D_T"];

impl<S: Scalar> GanBundle<S> {
    pub fn init(config: GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(GanBundle {
            g: init_generator(&config, seed)?,
            f: init_generator(&config, seed.wrapping_add(1))?,
            d_s: init_discriminator(&config, seed.wrapping_add(2))?,
            d_t: init_discriminator(&config, seed.wrapping_add(3))?,
            config,
        })
    }

    pub fn params(&self) -> ParamSet<S> {
        let mut all = ParamSet::new();
        for (prefix, p) in PARTS.iter().zip([&self.g, &self.f, &self.d_s, &self.d_t]) {
            all.extend(p.prefixed(prefix)).expect("prefixes are disjoint");
        }
        all
    }

    pub fn from_params(config: GanConfig, params: &ParamSet<S>) -> Result<Self> {
        config.validate()?;
        let bundle = GanBundle {
            g: params.strip_prefix("G"),
            f: params.strip_prefix("F"),
            d_s: params.strip_prefix("D_S"),
            d_t: params.strip_prefix("D_T"),
            config,
        };
        let fresh: GanBundle<S> = GanBundle::init(bundle.config.clone(), 0)?;
        let fresh = fresh.params();
        for (name, t) in fresh.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, architecture expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != fresh.len() {
            return Err(Error::Config("unexpected extra GAN parameters".into()));
        }
        Ok(bundle)
    }

    /// Binds all four networks; generator and discriminator trainability are
    /// chosen separately.
    pub fn bind(&self, g: &mut Graph<S>, train_generators: bool, train_discriminators: bool) -> GanVars {
        GanVars {
            g: self.g.bind(g, train_generators),
            f: self.f.bind(g, train_generators),
            d_s: self.d_s.bind(g, train_discriminators),
            d_t: self.d_t.bind(g, train_discriminators),
        }
    }

    /// Translates a `[N, C, H, W]` batch with the given generator, no tracking.
    pub fn translate_tensor(&self, generator: &ParamSet<S>, images: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let vars = generator.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = translate(&mut g, &self.config, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

/// `tanh(atanh(x) + residual(x))`: output shape equals input shape and every
/// value lies in (−1, 1).
pub fn translate<S: Scalar>(g: &mut Graph<S>, config: &GanConfig, generator: &Bound, image: Var) -> Result<Var> {
    config.check_image(g.shape(image))?;
    let residual = stack_forward(g, &config.generator_specs()?, generator, image)?;
    let clamped = g.clamp(image, -SKIP_CLAMP, SKIP_CLAMP)?;
    let skip = g.atanh(clamped)?;
    let pre = g.add(skip, residual)?;
    Ok(g.tanh(pre)?)
}

/// Mean of the patch score map, one value per image: shape `[N]`.
pub fn discriminate<S: Scalar>(g: &mut Graph<S>, config: &GanConfig, disc: &Bound, image: Var) -> Result<Var> {
    config.check_image(g.shape(image))?;
    let map = stack_forward(g, &config.discriminator_specs()?, disc, image)?;
    let pooled = g.global_avg_pool(map)?;
    let n = g.shape(pooled)[0];
    Ok(g.reshape(pooled, vec![n])?)
}

/// `Σ (s − 1)²` over the given discriminator scores.
pub fn lsgan_generator_loss<S: Scalar>(g: &mut Graph<S>, fake_scores: &[Var]) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for &s in fake_scores {
        let d = g.add_scalar(s, -1.0)?;
        let sq = g.square(d)?;
        let t = g.sum(sq)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// `Σ s_fake² + Σ (s_real − 1)²`.
pub fn lsgan_discriminator_loss<S: Scalar>(g: &mut Graph<S>, fake_scores: &[Var], real_scores: &[Var]) -> Result<Var> {
    let mut total = lsgan_generator_loss(g, real_scores)?;
    for &s in fake_scores {
        let sq = g.square(s)?;
        let t = g.sum(sq)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

pub fn adversarial_generator_loss<S: Scalar>(g: &mut Graph<S>, config: &GanConfig, disc: &Bound, fakes: [Var; 2]) -> Result<Var> {
    let s0 = discriminate(g, config, disc, fakes[0])?;
    let s1 = discriminate(g, config, disc, fakes[1])?;
    lsgan_generator_loss(g, &[s0, s1])
}

pub fn adversarial_discriminator_loss<S: Scalar>(
    g: &mut Graph<S>,
    config: &GanConfig,
    disc: &Bound,
    fakes: [Var; 2],
    reals: [Var; 2],
) -> Result<Var> {
    let mut fs = Vec::with_capacity(2);
    let mut rs = Vec::with_capacity(2);
    for i in 0..2 {
        fs.push(discriminate(g, config, disc, fakes[i])?);
        rs.push(discriminate(g, config, disc, reals[i])?);
    }
    lsgan_discriminator_loss(g, &fs, &rs)
}

/// Mean absolute difference over all elements.
pub fn mean_abs_error<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d)?;
    Ok(g.mean(ad)?)
}

/// `Σ_x [ |G(F(t_x)) − t_x|₁ + |F(G(s_x)) − s_x|₁ ]`, each norm a per-pixel mean.
pub fn cycle_loss<S: Scalar>(
    g: &mut Graph<S>,
    config: &GanConfig,
    vars: &GanVars,
    source: [Var; 2],
    target: [Var; 2],
) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for x in 0..2 {
        let ft = translate(g, config, &vars.f, target[x])?;
        let gft = translate(g, config, &vars.g, ft)?;
        let a = mean_abs_error(g, gft, target[x])?;
        let gs = translate(g, config, &vars.g, source[x])?;
        let fgs = translate(g, config, &vars.f, gs)?;
        let b = mean_abs_error(g, fgs, source[x])?;
        let ab = g.add(a, b)?;
        total = g.add(total, ab)?;
    }
    Ok(total)
}

fn ensure_frozen<S: Scalar>(g: &Graph<S>, classifier: &ClassifierVars) -> Result<()> {
    if let Some((name, _)) = classifier.all().find(|(_, v)| g.requires_grad(*v)) {
        return Err(Error::Config(format!("classifier parameter `{name}` must be frozen")));
    }
    Ok(())
}

/// Variation loss of the frozen classifier on a pair of round-trip images.
pub fn variation_on_pair<S: Scalar>(
    g: &mut Graph<S>,
    classifier: &SiameseModel<S>,
    cvars: &ClassifierVars,
    images: [Var; 2],
    q: f64,
) -> Result<Var> {
    ensure_frozen(g, cvars)?;
    let v1 = classifier.embed(g, cvars, images[0])?;
    let v2 = classifier.embed(g, cvars, images[1])?;
    let q_hat = classifier.similarity_score(g, cvars, v1, v2)?;
    variation_loss(g, q_hat, q)
}

/// `L_v(F(G(s_1)), F(G(s_2)))` under the frozen classifier.
pub fn similarity_consistency_loss<S: Scalar>(
    g: &mut Graph<S>,
    config: &GanConfig,
    vars: &GanVars,
    classifier: &SiameseModel<S>,
    cvars: &ClassifierVars,
    source: [Var; 2],
    q: f64,
) -> Result<Var> {
    ensure_frozen(g, cvars)?;
    let mut round = [source[0]; 2];
    for x in 0..2 {
        let gs = translate(g, config, &vars.g, source[x])?;
        round[x] = translate(g, config, &vars.f, gs)?;
    }
    variation_on_pair(g, classifier, cvars, round, q)
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub adv_g: Var,
    pub adv_f: Var,
    pub cycle: Var,
    pub sim: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 10.0, lambda2: 1.0 }
    }
}

/// `L_G + L_F + λ1·L_cycle + λ2·L_sim`.
pub fn generator_total_loss<S: Scalar>(g: &mut Graph<S>, terms: GeneratorTerms, weights: LossWeights) -> Result<Var> {
    if !(weights.lambda1 >= 0.0 && weights.lambda2 >= 0.0) {
        return Err(Error::Config(format!("loss weights must be non-negative, got {weights:?}")));
    }
    let adv = g.add(terms.adv_g, terms.adv_f)?;
    let c = g.scale(terms.cycle, weights.lambda1)?;
    let s = g.scale(terms.sim, weights.lambda2)?;
    let total = g.add(adv, c)?;
    Ok(g.add(total, s)?)
}

/// `L_DS + L_DT`.
pub fn discriminator_total_loss<S: Scalar>(g: &mut Graph<S>, d_s: Var, d_t: Var) -> Result<Var> {
    Ok(g.add(d_s, d_t)?)
}

/// Row `i` of a `[N, D]` matrix as `[1, D]`.
pub fn select_row<S: Scalar>(g: &mut Graph<S>, m: Var, i: usize) -> Result<Var> {
    let n = g.shape(m)[0];
    let mut sel = vec![S::zero(); n];
    sel[i] = S::one();
    let sel = g.constant(Tensor::new(vec![1, n], sel)?);
    Ok(g.matmul(sel, m)?)
}

/// Every node of one generator-side evaluation.
pub struct GeneratorPass {
    pub terms: GeneratorTerms,
    pub total: Var,
    /// `G(s)` for the whole source stack.
    pub fake_target: Var,
    /// `F(t)` for the whole target stack.
    pub fake_source: Var,
}

fn pair_count(n: usize, q: &[f64]) -> Result<usize> {
    if n == 0 || n % 2 != 0 || n / 2 != q.len() {
        return Err(Error::Config(format!("expected {} stacked pairs, batch holds {n} images", q.len())));
    }
    Ok(n / 2)
}

/// Generator objective over `m` stacked pair batches, averaged over `m`.
///
/// `source` and `target` are `[2m, C, H, W]` with pair `j` in rows `2j` and
/// `2j + 1`; `q[j]` is the match label of source pair `j`. With `m = 1` every
/// term equals its per-image definition (see [`cycle_loss`] and
/// [`similarity_consistency_loss`]).
#[allow(clippy::too_many_arguments)]
pub fn generator_pass<S: Scalar>(
    g: &mut Graph<S>,
    config: &GanConfig,
    vars: &GanVars,
    classifier: &SiameseModel<S>,
    cvars: &ClassifierVars,
    source: Var,
    target: Var,
    q: &[f64],
    weights: LossWeights,
) -> Result<GeneratorPass> {
    let m = pair_count(g.shape(source)[0], q)?;
    if g.shape(target)[0] != 2 * m {
        return Err(Error::Config("source and target stacks differ in size".into()));
    }
    let inv_m = 1.0 / m as f64;
    let fake_target = translate(g, config, &vars.g, source)?;
    let fake_source = translate(g, config, &vars.f, target)?;
    let rec_source = translate(g, config, &vars.f, fake_target)?;
    let rec_target = translate(g, config, &vars.g, fake_source)?;

    // Per-image means summed over the two images of a pair: 2 × stack mean.
    let a = mean_abs_error(g, rec_target, target)?;
    let b = mean_abs_error(g, rec_source, source)?;
    let ab = g.add(a, b)?;
    let cycle = g.scale(ab, 2.0)?;

    let st = discriminate(g, config, &vars.d_t, fake_target)?;
    let adv_g = lsgan_generator_loss(g, &[st])?;
    let adv_g = g.scale(adv_g, inv_m)?;
    let ss = discriminate(g, config, &vars.d_s, fake_source)?;
    let adv_f = lsgan_generator_loss(g, &[ss])?;
    let adv_f = g.scale(adv_f, inv_m)?;

    ensure_frozen(g, cvars)?;
    let emb = classifier.embed(g, cvars, rec_source)?;
    let mut sim = g.scalar(0.0);
    for (j, &qj) in q.iter().enumerate() {
        let v1 = select_row(g, emb, 2 * j)?;
        let v2 = select_row(g, emb, 2 * j + 1)?;
        let q_hat = classifier.similarity_score(g, cvars, v1, v2)?;
        let l = variation_loss(g, q_hat, qj)?;
        sim = g.add(sim, l)?;
    }
    let sim = g.scale(sim, inv_m)?;

    let terms = GeneratorTerms { adv_g, adv_f, cycle, sim };
    let total = generator_total_loss(g, terms, weights)?;
    Ok(GeneratorPass { terms, total, fake_target, fake_source })
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorPass {
    pub d_s: Var,
    pub d_t: Var,
    pub total: Var,
}

/// Discriminator objective over stacked batches, averaged over pair count.
/// Pass detached fakes: this function does not detach them itself.
pub fn discriminator_pass<S: Scalar>(
    g: &mut Graph<S>,
    config: &GanConfig,
    vars: &GanVars,
    source: Var,
    target: Var,
    fake_target: Var,
    fake_source: Var,
) -> Result<DiscriminatorPass> {
    let n = g.shape(source)[0];
    if n % 2 != 0 || [target, fake_target, fake_source].iter().any(|&v| g.shape(v)[0] != n) {
        return Err(Error::Config("discriminator stacks must hold the same even number of images".into()));
    }
    let inv_m = 2.0 / n as f64;
    let (real_for_t, real_for_s) = match config.real_term {
        RealTermReading::ByRole => (target, source),
        RealTermReading::Literal => (source, target),
    };
    let mut side = |disc: &Bound, fake: Var, real: Var| -> Result<Var> {
        let f = discriminate(g, config, disc, fake)?;
        let r = discriminate(g, config, disc, real)?;
        let l = lsgan_discriminator_loss(g, &[f], &[r])?;
        Ok(g.scale(l, inv_m)?)
    };
    let d_t = side(&vars.d_t, fake_target, real_for_t)?;
    let d_s = side(&vars.d_s, fake_source, real_for_s)?;
    let total = discriminator_total_loss(g, d_s, d_t)?;
    Ok(DiscriminatorPass { d_s, d_t, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GanConfig {
        GanConfig { height: 8, width: 8, gen_base: 2, disc_base: 2, ..GanConfig::default() }
    }

    fn scores(g: &mut Graph<f64>, v: &[f64]) -> Vec<Var> {
        v.iter().map(|&x| g.constant(Tensor::from_f64(vec![1], &[x]).unwrap())).collect()
    }

    #[test]
    fn lsgan_closed_forms() {
        let mut g = Graph::<f64>::new();
        for (d, want) in [([1.0, 1.0], 0.0), ([0.0, 0.0], 2.0), ([0.5, 0.25], 0.8125)] {
            let s = scores(&mut g, &d);
            let l = lsgan_generator_loss(&mut g, &s).unwrap();
            assert!((g.item(l).unwrap() - want).abs() < 1e-12);
        }
        let cases = [([0.0, 0.0], [1.0, 1.0], 0.0), ([0.5, 0.5], [0.5, 0.5], 1.0), ([0.2, 0.4], [0.9, 0.7], 0.30)];
        for (f, r, want) in cases {
            let fs = scores(&mut g, &f);
            let rs = scores(&mut g, &r);
            let l = lsgan_discriminator_loss(&mut g, &fs, &rs).unwrap();
            assert!((g.item(l).unwrap() - want).abs() < 1e-12, "{f:?} {r:?}");
        }
    }

    #[test]
    fn fresh_generator_is_identity() {
        let cfg = tiny();
        let bundle: GanBundle<f64> = GanBundle::init(cfg.clone(), 9).unwrap();
        let data: Vec<f64> = (0..3 * 64).map(|i| ((i * 31 % 255) as f64 * 2.0 + 1.0) / 256.0 - 1.0).collect();
        let x = Tensor::new(vec![1, 3, 8, 8], data).unwrap();
        let y = bundle.translate_tensor(&bundle.g, &x).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn translate_is_bounded() {
        let cfg = tiny();
        let mut bundle: GanBundle<f64> = GanBundle::init(cfg.clone(), 2).unwrap();
        for (_, t) in bundle.g.iter_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += ((i % 5) as f64 - 2.0) * 0.7);
        }
        let x = Tensor::full(vec![1, 3, 8, 8], 0.9);
        let y = bundle.translate_tensor(&bundle.g, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
        assert!(bundle.translate_tensor(&bundle.g, &Tensor::zeros(vec![1, 3, 8, 4])).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let c = scores(&mut g, &[1.0, 1.0, 1.0, 1.0]);
        let t = GeneratorTerms { adv_g: c[0], adv_f: c[1], cycle: c[2], sim: c[3] };
        let l = generator_total_loss(&mut g, t, LossWeights::default()).unwrap();
        assert!((g.item(l).unwrap() - 13.0).abs() < 1e-12);
        let c = scores(&mut g, &[0.5, 0.3, 0.02, 0.7]);
        let t = GeneratorTerms { adv_g: c[0], adv_f: c[1], cycle: c[2], sim: c[3] };
        let l = generator_total_loss(&mut g, t, LossWeights::default()).unwrap();
        assert!((g.item(l).unwrap() - 1.7).abs() < 1e-12);
        let l = generator_total_loss(&mut g, t, LossWeights { lambda1: 0.0, lambda2: 0.0 }).unwrap();
        assert!((g.item(l).unwrap() - 0.8).abs() < 1e-12);
        assert!(generator_total_loss(&mut g, t, LossWeights { lambda1: -1.0, lambda2: 0.0 }).is_err());
        let d = scores(&mut g, &[1.0, 2.0]);
        let l = discriminator_total_loss(&mut g, d[0], d[1]).unwrap();
        assert_eq!(g.item(l).unwrap(), 3.0);
    }
}
