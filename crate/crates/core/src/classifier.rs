//! Siamese re-identification classifier.
//!
//! Both branches share one backbone. A pair is scored by a dense map over the
//! element-wise squared embedding difference followed by a sigmoid; each
//! branch also predicts a softmax over the `K` training identities.

use crate::diff::{Graph, Scalar, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::nn::{init_params, layer_forward, Activation, Bound, LayerSpec, ParamSet};

/// Clamp applied to the similarity score before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;
/// Floor for the selected identity probability before taking its log.
const PROB_FLOOR: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the stride-2 backbone stages; the last one is the
    /// embedding dimension.
    pub stage_channels: Vec<usize>,
    pub num_identities: usize,
    pub leaky_slope: f64,
}

impl ClassifierConfig {
    pub fn new(num_identities: usize) -> Self {
        ClassifierConfig {
            channels: 3,
            height: 64,
            width: 32,
            stage_channels: vec![16, 32, 64, 64],
            num_identities,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated: at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone needs at least one stage with positive channels".into()));
        }
        if self.num_identities < 2 {
            return Err(Error::Config(format!("need at least 2 identities, got {}", self.num_identities)));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn backbone_specs(&self) -> Result<Vec<LayerSpec>> {
        let mut specs = Vec::new();
        let mut cin = self.channels;
        for (i, &cout) in self.stage_channels.iter().enumerate() {
            specs.push(LayerSpec::conv(&format!("stage{}", i + 1), cin, cout, 3, 2, 1)?);
            specs.push(LayerSpec::activation(&format!("stage{}.act", i + 1), Activation::LeakyRelu(self.leaky_slope))?);
            cin = cout;
        }
        Ok(specs)
    }

    fn similarity_spec(&self) -> Result<LayerSpec> {
        LayerSpec::dense("similarity", self.embedding_dim(), 1)
    }

    fn identity_spec(&self) -> Result<LayerSpec> {
        LayerSpec::dense("identity", self.embedding_dim(), self.num_identities)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Ground truth for one image pair. `q` is 1 exactly when the identities match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairLabel {
    q: bool,
    id1: usize,
    id2: usize,
}

impl PairLabel {
    pub fn new(id1: usize, id2: usize) -> Self {
        PairLabel { q: id1 == id2, id1, id2 }
    }

    pub fn from_parts(q: bool, id1: usize, id2: usize) -> Result<Self> {
        if q != (id1 == id2) {
            return Err(Error::Label(format!("q={} inconsistent with identities {id1}, {id2}", q as u8)));
        }
        Ok(PairLabel { q, id1, id2 })
    }

    pub fn q(&self) -> bool {
        self.q
    }

    pub fn q_value(&self) -> f64 {
        if self.q {
            1.0
        } else {
            0.0
        }
    }

    pub fn ids(&self) -> (usize, usize) {
        (self.id1, self.id2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiameseModel<S = f32> {
    pub config: ClassifierConfig,
    pub backbone: ParamSet<S>,
    pub similarity_head: ParamSet<S>,
    pub identity_head: ParamSet<S>,
}

/// Graph handles of a bound [`SiameseModel`].
pub struct ClassifierVars {
    pub backbone: Bound,
    pub similarity: Bound,
    pub identity: Bound,
}

impl ClassifierVars {
    pub fn all(&self) -> impl Iterator<Item = (&str, Var)> {
        self.backbone.vars().chain(self.similarity.vars()).chain(self.identity.vars())
    }
}

/// The three terms of the combined classifier objective.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierLosses {
    pub all: Var,
    pub variation: Var,
    pub identification: Var,
}

impl<S: Scalar> SiameseModel<S> {
    pub fn init(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = init_params(&config.backbone_specs()?, seed)?;
        let similarity_head = init_params(&[config.similarity_spec()?], seed.wrapping_add(1))?;
        let identity_head = init_params(&[config.identity_spec()?], seed.wrapping_add(2))?;
        Ok(SiameseModel { config, backbone, similarity_head, identity_head })
    }

    /// All parameters under `backbone.`, `similarity.` and `identity.` prefixes.
    pub fn params(&self) -> ParamSet<S> {
        let mut all = self.backbone.prefixed("backbone");
        all.extend(self.similarity_head.prefixed("heads")).expect("prefixes are disjoint");
        all.extend(self.identity_head.prefixed("heads")).expect("head names are disjoint");
        all
    }

    pub fn from_params(config: ClassifierConfig, params: &ParamSet<S>) -> Result<Self> {
        config.validate()?;
        let backbone = params.strip_prefix("backbone");
        let heads = params.strip_prefix("heads");
        let split = |prefix: &str| {
            let mut p = ParamSet::new();
            for (k, v) in heads.iter().filter(|(k, _)| k.starts_with(prefix)) {
                p.insert(k, v.clone())?;
            }
            Ok::<_, Error>(p)
        };
        let model = SiameseModel {
            backbone,
            similarity_head: split("similarity.")?,
            identity_head: split("identity.")?,
            config,
        };
        let fresh: SiameseModel<S> = SiameseModel::init(model.config.clone(), 0)?;
        for (name, t) in fresh.params().iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, architecture expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != fresh.params().len() {
            return Err(Error::Config("unexpected extra classifier parameters".into()));
        }
        Ok(model)
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> ClassifierVars {
        ClassifierVars {
            backbone: self.backbone.bind(g, trainable),
            similarity: self.similarity_head.bind(g, trainable),
            identity: self.identity_head.bind(g, trainable),
        }
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.config.image_shape() {
            return Err(Error::Config(format!(
                "image shape {shape:?} does not match classifier input [N, {}, {}, {}]",
                self.config.channels, self.config.height, self.config.width
            )));
        }
        Ok(())
    }

    /// `[N, C, H, W]` images to `[N, D]` embeddings.
    pub fn embed(&self, g: &mut Graph<S>, vars: &ClassifierVars, images: Var) -> Result<Var> {
        self.check_image(g.shape(images))?;
        let mut x = images;
        for spec in self.config.backbone_specs()? {
            x = layer_forward(g, &spec, &vars.backbone, x)?;
        }
        Ok(g.global_avg_pool(x)?)
    }

    /// `q̂ = sigmoid(θ_s · (v1 − v2)²)`, shape `[N, 1]`.
    pub fn similarity_score(&self, g: &mut Graph<S>, vars: &ClassifierVars, v1: Var, v2: Var) -> Result<Var> {
        if g.shape(v1) != g.shape(v2) {
            return Err(Error::Config(format!(
                "embedding shapes differ: {:?} vs {:?}",
                g.shape(v1),
                g.shape(v2)
            )));
        }
        let d = g.sub(v1, v2)?;
        let vs = g.square(d)?;
        let logit = layer_forward(g, &self.config.similarity_spec()?, &vars.similarity, vs)?;
        Ok(g.sigmoid(logit)?)
    }

    /// Softmax over the `K` identities, shape `[N, K]`.
    pub fn identity_probs(&self, g: &mut Graph<S>, vars: &ClassifierVars, v: Var) -> Result<Var> {
        let logits = layer_forward(g, &self.config.identity_spec()?, &vars.identity, v)?;
        Ok(g.softmax(logits)?)
    }

    pub fn classifier_loss(
        &self,
        g: &mut Graph<S>,
        vars: &ClassifierVars,
        image1: Var,
        image2: Var,
        label: PairLabel,
    ) -> Result<ClassifierLosses> {
        let v1 = self.embed(g, vars, image1)?;
        let v2 = self.embed(g, vars, image2)?;
        let q_hat = self.similarity_score(g, vars, v1, v2)?;
        let variation = variation_loss(g, q_hat, label.q_value())?;
        let p1 = self.identity_probs(g, vars, v1)?;
        let p2 = self.identity_probs(g, vars, v2)?;
        let identification = identification_loss(g, p1, label.id1, p2, label.id2)?;
        let all = g.add(variation, identification)?;
        Ok(ClassifierLosses { all, variation, identification })
    }

    /// Embeddings of a `[N, C, H, W]` batch without gradient tracking.
    pub fn embed_tensor(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let v = self.embed(&mut g, &vars, x)?;
        Ok(g.value(v).clone())
    }

    /// q̂ of one query embedding `[D]` against every row of `candidates`
    /// (`[M, D]`).
    pub fn score_against(&self, query: &[S], candidates: &Tensor<S>) -> Result<Vec<S>> {
        let d = self.config.embedding_dim();
        if query.len() != d || candidates.rank() != 2 || candidates.shape()[1] != d {
            return Err(Error::Config(format!(
                "embedding dimension mismatch: query {}, candidates {:?}",
                query.len(),
                candidates.shape()
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let q = g.constant(Tensor::new(vec![1, d], query.to_vec())?);
        let c = g.constant(candidates.clone());
        let diff = g.sub(c, q)?;
        let vs = g.square(diff)?;
        let logit = layer_forward(&mut g, &self.config.similarity_spec()?, &vars.similarity, vs)?;
        let s = g.sigmoid(logit)?;
        Ok(g.value(s).data().to_vec())
    }
}

/// `−q·log(q̂) − (1−q)·log(1−q̂)` with `q̂` clamped to `[1e-7, 1−1e-7]`.
pub fn variation_loss<S: Scalar>(g: &mut Graph<S>, q_hat: Var, q: f64) -> Result<Var> {
    if g.value(q_hat).len() != 1 {
        return Err(Error::Config(format!("variation loss expects one score, got shape {:?}", g.shape(q_hat))));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Label(format!("match indicator {q} outside [0, 1]")));
    }
    let c = g.clamp(q_hat, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    let log_c = g.log(c)?;
    let neg = g.scale(c, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let log_1m = g.log(one_minus)?;
    let a = g.scale(log_c, -q)?;
    let b = g.scale(log_1m, -(1.0 - q))?;
    let l = g.add(a, b)?;
    Ok(g.sum(l)?)
}

fn neg_log_prob<S: Scalar>(g: &mut Graph<S>, p: Var, label: usize) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    let k = *shape.last().unwrap_or(&0);
    if shape.len() != 2 || shape[0] != 1 {
        return Err(Error::Config(format!("identity probabilities must be [1, K], got {shape:?}")));
    }
    if label >= k {
        return Err(Error::Label(format!("identity {label} out of range for K = {k}")));
    }
    let mut onehot = Tensor::zeros(shape);
    onehot.data_mut()[label] = S::one();
    let mask = g.constant(onehot);
    let picked = g.mul(p, mask)?;
    let p_true = g.sum(picked)?;
    let p_true = g.clamp(p_true, PROB_FLOOR, 1.0)?;
    let lp = g.log(p_true)?;
    Ok(g.scale(lp, -1.0)?)
}

/// `−log p̂1[label1] − log p̂2[label2]` (cross-entropy against one-hot truth).
pub fn identification_loss<S: Scalar>(g: &mut Graph<S>, p1: Var, label1: usize, p2: Var, label2: usize) -> Result<Var> {
    let a = neg_log_prob(g, p1, label1)?;
    let b = neg_log_prob(g, p2, label2)?;
    Ok(g.add(a, b)?)
}
