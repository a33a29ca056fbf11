use rand::Rng;
use simpgan::classifier::{ClassifierConfig, SiameseModel};
use simpgan::diff::{Graph, Tensor, Var};
use simpgan::nn::ParamSet;
use simpgan::rng::substream;
use simpgan::transgan::{
    adversarial_discriminator_loss, adversarial_generator_loss, cycle_loss, discriminator_pass, generator_pass, mean_abs_error,
    similarity_consistency_loss, variation_on_pair, GanBundle, GanConfig, LossWeights,
};
use simpgan::Error;

fn gan_config() -> GanConfig {
    GanConfig { height: 8, width: 8, gen_base: 2, residual_blocks: 1, disc_base: 2, ..GanConfig::default() }
}

fn classifier() -> SiameseModel<f64> {
    let cfg = ClassifierConfig { height: 8, width: 8, stage_channels: vec![3, 4], ..ClassifierConfig::new(3) };
    let mut m = SiameseModel::init(cfg, 5).unwrap();
    jitter(&mut m.similarity_head, 50, 0.5);
    m
}

fn jitter(p: &mut ParamSet<f64>, seed: u64, amount: f64) {
    let mut rng = substream(seed, "jitter", 0);
    p.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-amount..amount)));
}

/// A bundle whose generators are no longer the identity map.
fn bundle(seed: u64) -> GanBundle<f64> {
    let mut b = GanBundle::init(gan_config(), seed).unwrap();
    for (i, p) in [&mut b.g, &mut b.f, &mut b.d_s, &mut b.d_t].into_iter().enumerate() {
        jitter(p, seed * 10 + i as u64, 0.3);
    }
    b
}

fn images(seed: u64, n: usize) -> Tensor<f64> {
    let mut rng = substream(seed, "images", 0);
    let data: Vec<f64> = (0..n * 3 * 64).map(|_| rng.gen_range(-0.9..0.9)).collect();
    Tensor::new(vec![n, 3, 8, 8], data).unwrap()
}

fn split(t: &Tensor<f64>) -> [Tensor<f64>; 2] {
    let half = t.len() / 2;
    let s = t.shape();
    let shape = vec![1, s[1], s[2], s[3]];
    [Tensor::new(shape.clone(), t.data()[..half].to_vec()).unwrap(), Tensor::new(shape, t.data()[half..].to_vec()).unwrap()]
}

fn constants(g: &mut Graph<f64>, [a, b]: [Tensor<f64>; 2]) -> [Var; 2] {
    [g.constant(a), g.constant(b)]
}

#[test]
fn batched_pass_matches_per_image_losses() {
    let (b, c) = (bundle(1), classifier());
    let (s, t) = (images(2, 2), images(3, 2));
    for q in [0.0, 1.0] {
        let mut g = Graph::new();
        let vars = b.bind(&mut g, true, false);
        let cvars = c.bind(&mut g, false);
        let (sv, tv) = (g.constant(s.clone()), g.constant(t.clone()));
        let pass = generator_pass(&mut g, &b.config, &vars, &c, &cvars, sv, tv, &[q], LossWeights::default()).unwrap();

        let s1 = constants(&mut g, split(&s));
        let t1 = constants(&mut g, split(&t));
        let cyc = cycle_loss(&mut g, &b.config, &vars, s1, t1).unwrap();
        let sim = similarity_consistency_loss(&mut g, &b.config, &vars, &c, &cvars, s1, q).unwrap();
        let fakes_t = [0, 1].map(|i| simpgan::transgan::translate(&mut g, &b.config, &vars.g, s1[i]).unwrap());
        let fakes_s = [0, 1].map(|i| simpgan::transgan::translate(&mut g, &b.config, &vars.f, t1[i]).unwrap());
        let adv_g = adversarial_generator_loss(&mut g, &b.config, &vars.d_t, fakes_t).unwrap();
        let adv_f = adversarial_generator_loss(&mut g, &b.config, &vars.d_s, fakes_s).unwrap();

        for (batched, single) in [(pass.terms.cycle, cyc), (pass.terms.sim, sim), (pass.terms.adv_g, adv_g), (pass.terms.adv_f, adv_f)] {
            let (x, y) = (g.item(batched).unwrap(), g.item(single).unwrap());
            assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()), "{x} vs {y}");
        }

        let ft = g.detach(pass.fake_target);
        let fs = g.detach(pass.fake_source);
        let d = discriminator_pass(&mut g, &b.config, &vars, sv, tv, ft, fs).unwrap();
        let dt = adversarial_discriminator_loss(&mut g, &b.config, &vars.d_t, fakes_t, t1).unwrap();
        let ds = adversarial_discriminator_loss(&mut g, &b.config, &vars.d_s, fakes_s, s1).unwrap();
        assert!((g.item(d.d_t).unwrap() - g.item(dt).unwrap()).abs() < 1e-10);
        assert!((g.item(d.d_s).unwrap() - g.item(ds).unwrap()).abs() < 1e-10);
    }
}

#[test]
fn losses_are_non_negative() {
    let c = classifier();
    for seed in 0..4 {
        let b = bundle(seed);
        let mut g = Graph::new();
        let vars = b.bind(&mut g, true, true);
        let cvars = c.bind(&mut g, false);
        let sv = g.constant(images(seed + 10, 4));
        let tv = g.constant(images(seed + 20, 4));
        let pass = generator_pass(&mut g, &b.config, &vars, &c, &cvars, sv, tv, &[1.0, 0.0], LossWeights::default()).unwrap();
        let d = discriminator_pass(&mut g, &b.config, &vars, sv, tv, pass.fake_target, pass.fake_source).unwrap();
        let t = pass.terms;
        for v in [t.adv_g, t.adv_f, t.cycle, t.sim, pass.total, d.d_s, d.d_t, d.total] {
            assert!(g.item(v).unwrap() >= 0.0);
        }
    }
}

#[test]
fn zero_weights_leave_only_adversarial_gradients() {
    let (b, c) = (bundle(4), classifier());
    let grads_of = |weights: Option<LossWeights>| {
        let mut g = Graph::new();
        let vars = b.bind(&mut g, true, false);
        let cvars = c.bind(&mut g, false);
        let sv = g.constant(images(5, 2));
        let tv = g.constant(images(6, 2));
        let pass = generator_pass(&mut g, &b.config, &vars, &c, &cvars, sv, tv, &[1.0], weights.unwrap_or_default()).unwrap();
        let loss = match weights {
            Some(_) => pass.total,
            None => g.add(pass.terms.adv_g, pass.terms.adv_f).unwrap(),
        };
        let grads = g.backward(loss).unwrap();
        (vars.g.grads(&grads), vars.f.grads(&grads))
    };
    let (g0, f0) = grads_of(Some(LossWeights { lambda1: 0.0, lambda2: 0.0 }));
    let (ga, fa) = grads_of(None);
    for (x, y) in [(&g0, &ga), (&f0, &fa)] {
        for (name, t) in x.iter() {
            assert!(t.max_abs_diff(y.get(name).unwrap()).unwrap() < 1e-12, "{name}");
        }
    }
}

#[test]
fn classifier_stays_frozen() {
    let (b, c) = (bundle(7), classifier());
    let mut g = Graph::new();
    let vars = b.bind(&mut g, true, false);
    let cvars = c.bind(&mut g, false);
    let sv = g.constant(images(8, 2));
    let tv = g.constant(images(9, 2));
    let pass = generator_pass(&mut g, &b.config, &vars, &c, &cvars, sv, tv, &[0.0], LossWeights::default()).unwrap();
    let grads = g.backward(pass.total).unwrap();
    assert!(cvars.all().all(|(_, v)| grads.get(v).is_none()));
    assert!(vars.g.grads(&grads).len() > 0);

    let trainable = c.bind(&mut g, true);
    let err = generator_pass(&mut g, &b.config, &vars, &c, &trainable, sv, tv, &[0.0], LossWeights::default());
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn fresh_generators_have_zero_cycle_loss() {
    let b: GanBundle<f64> = GanBundle::init(gan_config(), 3).unwrap();
    let mut g = Graph::new();
    let vars = b.bind(&mut g, true, true);
    let s = constants(&mut g, split(&images(1, 2)));
    let t = constants(&mut g, split(&images(2, 2)));
    let l = cycle_loss(&mut g, &b.config, &vars, s, t).unwrap();
    assert!(g.item(l).unwrap() < 1e-12);
}

#[test]
fn pass_rejects_mismatched_stacks() {
    let (b, c) = (bundle(1), classifier());
    let mut g = Graph::new();
    let vars = b.bind(&mut g, true, false);
    let cvars = c.bind(&mut g, false);
    let sv = g.constant(images(1, 2));
    let tv = g.constant(images(2, 4));
    assert!(generator_pass(&mut g, &b.config, &vars, &c, &cvars, sv, tv, &[1.0], LossWeights::default()).is_err());
    assert!(generator_pass(&mut g, &b.config, &vars, &c, &cvars, sv, sv, &[1.0, 0.0], LossWeights::default()).is_err());
}

#[test]
fn constant_reconstruction_error_gives_four_tenths() {
    // four round-trip terms, each off by 0.1 everywhere
    let mut g = Graph::new();
    let mut total = g.scalar(0.0);
    for seed in 0..4 {
        let x = images(seed, 1);
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let (a, b) = (g.constant(shifted), g.constant(x));
        let term = mean_abs_error(&mut g, a, b).unwrap();
        total = g.add(total, term).unwrap();
    }
    assert!((g.item(total).unwrap() - 0.4).abs() < 1e-12);
}

#[test]
fn identity_generators_reduce_similarity_loss_to_the_variation_loss() {
    let b: GanBundle<f64> = GanBundle::init(gan_config(), 3).unwrap();
    let c = classifier();
    let mut g = Graph::new();
    let vars = b.bind(&mut g, true, false);
    let cvars = c.bind(&mut g, false);
    let s = constants(&mut g, split(&images(4, 2)));
    for q in [0.0, 1.0] {
        let sim = similarity_consistency_loss(&mut g, &b.config, &vars, &c, &cvars, s, q).unwrap();
        let raw = variation_on_pair(&mut g, &c, &cvars, s, q).unwrap();
        assert!((g.item(sim).unwrap() - g.item(raw).unwrap()).abs() < 1e-12);
    }
}
