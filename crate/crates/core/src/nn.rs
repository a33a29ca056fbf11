//! Parameterized layers, initializers and named parameter collections.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::diff::{DiffError, Gradients, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Dense { in_dim: usize, out_dim: usize },
    /// Per-sample, per-channel normalization over the spatial axes; no affine.
    InstanceNorm,
    Activation(Activation),
    /// `x + IN(conv(act(IN(conv(x)))))` with 3×3 same-padded convolutions.
    ResidualBlock { channels: usize, slope: f64 },
    /// 3×3 convolution, stride 2, padding 1.
    Downsample { in_channels: usize, out_channels: usize },
    /// Nearest-neighbour upsampling followed by a 3×3 same-padded convolution.
    Upsample { in_channels: usize, out_channels: usize, factor: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Whether the layer's own convolution or dense map adds a bias.
    /// Residual blocks never do: instance norm would cancel it.
    pub bias: bool,
}

struct ParamShape {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    bias: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Result<Self> {
        let spec = LayerSpec { name: name.into(), kind, bias: true };
        spec.validate()?;
        Ok(spec)
    }

    /// Drops the bias, for layers followed by instance norm.
    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::new(name, LayerKind::Conv { in_channels, out_channels, kernel, stride, pad })
    }

    pub fn dense(name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::new(name, LayerKind::Dense { in_dim, out_dim })
    }

    pub fn activation(name: &str, act: Activation) -> Result<Self> {
        Self::new(name, LayerKind::Activation(act))
    }

    pub fn instance_norm(name: &str) -> Result<Self> {
        Self::new(name, LayerKind::InstanceNorm)
    }

    fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("layer `{}`: {what} must be positive", self.name)))
            } else {
                Ok(())
            }
        };
        match &self.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, stride, .. } => {
                positive("in_channels", *in_channels)?;
                positive("out_channels", *out_channels)?;
                positive("kernel", *kernel)?;
                positive("stride", *stride)
            }
            LayerKind::Dense { in_dim, out_dim } => {
                positive("in_dim", *in_dim)?;
                positive("out_dim", *out_dim)
            }
            LayerKind::InstanceNorm | LayerKind::Activation(_) => Ok(()),
            LayerKind::ResidualBlock { channels, .. } => positive("channels", *channels),
            LayerKind::Downsample { in_channels, out_channels } => {
                positive("in_channels", *in_channels)?;
                positive("out_channels", *out_channels)
            }
            LayerKind::Upsample { in_channels, out_channels, factor } => {
                positive("in_channels", *in_channels)?;
                positive("out_channels", *out_channels)?;
                positive("factor", *factor)
            }
        }
    }

    fn conv_params(prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Vec<ParamShape> {
        let mut p = vec![ParamShape { name: format!("{prefix}.weight"), shape: vec![cout, cin, k, k], fan_in: cin * k * k, bias: false }];
        if bias {
            p.push(ParamShape { name: format!("{prefix}.bias"), shape: vec![cout], fan_in: 0, bias: true });
        }
        p
    }

    fn params(&self) -> Vec<ParamShape> {
        let n = &self.name;
        match &self.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
                Self::conv_params(n, *in_channels, *out_channels, *kernel, self.bias)
            }
            LayerKind::Dense { in_dim, out_dim } => {
                let mut p = vec![ParamShape { name: format!("{n}.weight"), shape: vec![*out_dim, *in_dim], fan_in: *in_dim, bias: false }];
                if self.bias {
                    p.push(ParamShape { name: format!("{n}.bias"), shape: vec![*out_dim], fan_in: 0, bias: true });
                }
                p
            }
            LayerKind::InstanceNorm | LayerKind::Activation(_) => Vec::new(),
            LayerKind::ResidualBlock { channels, .. } => {
                let mut p = Self::conv_params(&format!("{n}.conv1"), *channels, *channels, 3, false);
                p.extend(Self::conv_params(&format!("{n}.conv2"), *channels, *channels, 3, false));
                p
            }
            LayerKind::Downsample { in_channels, out_channels } | LayerKind::Upsample { in_channels, out_channels, .. } => {
                Self::conv_params(n, *in_channels, *out_channels, 3, self.bias)
            }
        }
    }

    /// Names of the parameters this layer owns.
    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|p| p.name).collect()
    }

    /// Output shape for `input`, without running the layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::Layer {
            layer: self.name.clone(),
            source: DiffError::ShapeMismatch { op: "layer", shapes: vec![input.to_vec()] },
        };
        let conv = |cin: usize, cout: usize, k: usize, s: usize, p: usize, input: &[usize]| {
            if input.len() != 4 || input[1] != cin || input[2] + 2 * p < k || input[3] + 2 * p < k {
                return Err(bad());
            }
            Ok(vec![input[0], cout, (input[2] + 2 * p - k) / s + 1, (input[3] + 2 * p - k) / s + 1])
        };
        match &self.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, stride, pad } => {
                conv(*in_channels, *out_channels, *kernel, *stride, *pad, input)
            }
            LayerKind::Dense { in_dim, out_dim } => {
                if input.len() != 2 || input[1] != *in_dim {
                    return Err(bad());
                }
                Ok(vec![input[0], *out_dim])
            }
            LayerKind::InstanceNorm => {
                if input.len() < 3 {
                    return Err(bad());
                }
                Ok(input.to_vec())
            }
            LayerKind::Activation(_) => Ok(input.to_vec()),
            LayerKind::ResidualBlock { channels, .. } => conv(*channels, *channels, 3, 1, 1, input),
            LayerKind::Downsample { in_channels, out_channels } => conv(*in_channels, *out_channels, 3, 2, 1, input),
            LayerKind::Upsample { in_channels, out_channels, factor } => {
                if input.len() != 4 {
                    return Err(bad());
                }
                let up = [input[0], input[1], input[2] * factor, input[3] * factor];
                conv(*in_channels, *out_channels, 3, 1, 1, &up)
            }
        }
    }
}

/// Output shape of a layer stack.
pub fn stack_output_shape(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    specs.iter().try_fold(input.to_vec(), |shape, spec| spec.output_shape(&shape))
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S = f32> {
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if value.first_non_finite().is_some() {
            return Err(Error::NonFiniteParam(name));
        }
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.first_non_finite().is_none())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Same tensors under `prefix.` + name.
    pub fn prefixed(&self, prefix: &str) -> ParamSet<S> {
        ParamSet { params: self.params.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect() }
    }

    /// Tensors whose names start with `prefix.`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<S> {
        let p = format!("{prefix}.");
        ParamSet {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet<S>) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Names this set's tensors, in iteration order, with existing graph handles.
    pub fn rebind(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::Config(format!("{} handles for {} parameters", vars.len(), self.params.len())));
        }
        Ok(Bound { vars: self.params.keys().cloned().zip(vars.iter().copied()).collect() })
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable))).collect() }
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn contains(&self, v: Var) -> bool {
        self.vars.values().any(|&x| x == v)
    }

    /// Gradients of the bound parameters, keyed by parameter name.
    pub fn grads<S: Scalar>(&self, grads: &Gradients<S>) -> ParamSet<S> {
        ParamSet {
            params: self
                .vars
                .iter()
                .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
                .collect(),
        }
    }
}

/// He-normal weights (`N(0, 2 / fan_in)`), zero biases. Deterministic in
/// `(specs, seed)`.
pub fn init_params<S: Scalar>(specs: &[LayerSpec], seed: u64) -> Result<ParamSet<S>> {
    let mut rng = rng::stream(seed, "init_params");
    let mut set = ParamSet::new();
    for spec in specs {
        spec.validate()?;
        for p in spec.params() {
            let t = if p.bias {
                Tensor::zeros(p.shape)
            } else {
                let std = (2.0 / p.fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                let n: usize = p.shape.iter().product();
                let data = (0..n).map(|_| S::of(normal.sample(&mut rng))).collect();
                Tensor::new(p.shape, data)?
            };
            set.insert(p.name, t)?;
        }
    }
    Ok(set)
}

fn conv_fwd<S: Scalar>(g: &mut Graph<S>, bound: &Bound, prefix: &str, bias: bool, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.weight"))?;
    let b = if bias { Some(bound.var(&format!("{prefix}.bias"))?) } else { None };
    Ok(g.conv2d(x, w, b, stride, pad)?)
}

fn activate<S: Scalar>(g: &mut Graph<S>, act: Activation, x: Var) -> Result<Var, DiffError> {
    match act {
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Tanh => g.tanh(x),
    }
}

fn layer_inner<S: Scalar>(g: &mut Graph<S>, spec: &LayerSpec, bound: &Bound, x: Var) -> Result<Var> {
    let n = &spec.name;
    match &spec.kind {
        LayerKind::Conv { stride, pad, .. } => conv_fwd(g, bound, n, spec.bias, x, *stride, *pad),
        LayerKind::Dense { .. } => {
            let w = bound.var(&format!("{n}.weight"))?;
            let wt = g.transpose(w)?;
            let y = g.matmul(x, wt)?;
            if !spec.bias {
                return Ok(y);
            }
            let b = bound.var(&format!("{n}.bias"))?;
            Ok(g.add(y, b)?)
        }
        LayerKind::InstanceNorm => Ok(g.instance_norm(x)?),
        LayerKind::Activation(act) => Ok(activate(g, *act, x)?),
        LayerKind::ResidualBlock { slope, .. } => {
            let h = conv_fwd(g, bound, &format!("{n}.conv1"), false, x, 1, 1)?;
            let h = g.instance_norm(h)?;
            let h = g.leaky_relu(h, *slope)?;
            let h = conv_fwd(g, bound, &format!("{n}.conv2"), false, h, 1, 1)?;
            let h = g.instance_norm(h)?;
            Ok(g.add(x, h)?)
        }
        LayerKind::Downsample { .. } => conv_fwd(g, bound, n, spec.bias, x, 2, 1),
        LayerKind::Upsample { factor, .. } => {
            let u = g.upsample_nearest(x, *factor)?;
            conv_fwd(g, bound, n, spec.bias, u, 1, 1)
        }
    }
}

/// Runs one layer; shape errors are reported with the layer name.
pub fn layer_forward<S: Scalar>(g: &mut Graph<S>, spec: &LayerSpec, bound: &Bound, input: Var) -> Result<Var> {
    spec.output_shape(g.shape(input))?;
    layer_inner(g, spec, bound, input).map_err(|e| match e {
        Error::Diff(source) => Error::Layer { layer: spec.name.clone(), source },
        other => other,
    })
}

pub fn stack_forward<S: Scalar>(g: &mut Graph<S>, specs: &[LayerSpec], bound: &Bound, input: Var) -> Result<Var> {
    specs.iter().try_fold(input, |x, spec| layer_forward(g, spec, bound, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;

    fn run(spec: &LayerSpec, params: &ParamSet<f64>, input: Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let x = g.constant(input);
        let y = layer_forward(&mut g, spec, &b, x).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn determinism_and_shapes() {
        let specs = vec![LayerSpec::dense("fc", 4, 2).unwrap(), LayerSpec::conv("c", 3, 5, 3, 1, 1).unwrap()];
        let a: ParamSet<f32> = init_params(&specs, 11).unwrap();
        let b: ParamSet<f32> = init_params(&specs, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("fc.weight").unwrap().shape(), &[2, 4]);
        assert_eq!(a.get("fc.bias").unwrap().shape(), &[2]);
        assert!(a.get("fc.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let c: ParamSet<f32> = init_params(&specs, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn he_variance() {
        // 1000 weights, fan_in 40
        let spec = LayerSpec::conv("c", 10, 25, 2, 1, 0).unwrap();
        let p: ParamSet<f64> = init_params(&[spec], 3).unwrap();
        let w = p.get("c.weight").unwrap();
        assert_eq!(w.len(), 1000);
        let mean = w.data().iter().sum::<f64>() / 1000.0;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0;
        let want = 2.0 / 40.0;
        assert!((var - want).abs() / want < 0.3, "var {var} vs {want}");
    }

    #[test]
    fn rejects_zero_sizes() {
        assert!(LayerSpec::conv("c", 3, 0, 3, 1, 1).is_err());
        assert!(LayerSpec::conv("c", 3, 4, 3, 0, 1).is_err());
        assert!(LayerSpec::dense("d", 0, 4).is_err());
    }

    #[test]
    fn zero_dense_outputs_bias() {
        let spec = LayerSpec::dense("fc", 3, 2).unwrap();
        let mut p = ParamSet::<f64>::new();
        p.insert("fc.weight", Tensor::zeros(vec![2, 3])).unwrap();
        p.insert("fc.bias", Tensor::from_f64(vec![2], &[0.25, -1.5]).unwrap()).unwrap();
        for input in [[1.0, 2.0, 3.0], [-7.0, 0.0, 9.5]] {
            let y = run(&spec, &p, Tensor::from_f64(vec![1, 3], &input).unwrap());
            assert_eq!(y.data(), &[0.25, -1.5]);
        }
    }

    #[test]
    fn instance_norm_statistics() {
        let spec = LayerSpec::instance_norm("in").unwrap();
        let data: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 37 % 11) as f64) * 0.3 - 1.0 + (i / 20) as f64).collect();
        let y = run(&spec, &ParamSet::new(), Tensor::new(vec![2, 3, 5, 4], data).unwrap());
        for chunk in y.data().chunks(20) {
            let m = chunk.iter().sum::<f64>() / 20.0;
            let v = chunk.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-3);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let spec = LayerSpec::new("res", LayerKind::ResidualBlock { channels: 2, slope: 0.2 }).unwrap();
        let mut p: ParamSet<f64> = init_params(std::slice::from_ref(&spec), 1).unwrap();
        p.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let x = Tensor::from_f64(vec![1, 2, 3, 3], &(0..18).map(|i| i as f64 * 0.1 - 0.7).collect::<Vec<_>>()).unwrap();
        let y = run(&spec, &p, x.clone());
        assert_eq!(y, x);
    }

    #[test]
    fn mismatched_input_names_layer() {
        let spec = LayerSpec::dense("head", 4, 2).unwrap();
        let p: ParamSet<f64> = init_params(std::slice::from_ref(&spec), 1).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(vec![1, 5]));
        let err = layer_forward(&mut g, &spec, &b, x).unwrap_err();
        assert!(err.to_string().contains("head"), "{err}");
    }

    #[test]
    fn layers_pass_grad_check() {
        let specs = [
            LayerSpec::conv("c", 2, 3, 3, 2, 1).unwrap(),
            LayerSpec::dense("d", 5, 3).unwrap(),
            LayerSpec::new("r", LayerKind::ResidualBlock { channels: 2, slope: 0.2 }).unwrap(),
            LayerSpec::new("down", LayerKind::Downsample { in_channels: 2, out_channels: 2 }).unwrap(),
            LayerSpec::new("up", LayerKind::Upsample { in_channels: 2, out_channels: 2, factor: 2 }).unwrap(),
        ];
        let inputs = [vec![1, 2, 5, 4], vec![2, 5], vec![1, 2, 4, 4], vec![1, 2, 4, 4], vec![1, 2, 3, 2]];
        for (spec, shape) in specs.iter().zip(inputs) {
            let params: ParamSet<f64> = init_params(std::slice::from_ref(spec), 5).unwrap();
            let names: Vec<String> = params.names().map(str::to_string).collect();
            let n: usize = shape.iter().product();
            let x = Tensor::from_f64(shape, &(0..n).map(|i| ((i * 7919) % 97) as f64 / 40.0 - 1.2).collect::<Vec<_>>()).unwrap();
            let mut point = vec![x];
            point.extend(names.iter().map(|k| params.get(k).unwrap().clone()));
            let out_len: usize = spec.output_shape(point[0].shape()).unwrap().iter().product();
            let weights: Vec<f64> = (0..out_len).map(|i| 0.5 + (i % 7) as f64 * 0.13).collect();
            let r = grad_check(
                |g, v| {
                    let mut p = Bound::default();
                    for (k, var) in names.iter().zip(&v[1..]) {
                        p.vars.insert(k.clone(), *var);
                    }
                    let y = layer_inner(g, spec, &p, v[0]).map_err(|e| match e {
                        Error::Diff(d) => d,
                        e => panic!("{e}"),
                    })?;
                    let w = g.constant(Tensor::new(g.shape(y).to_vec(), weights.clone())?);
                    let yw = g.mul(y, w)?;
                    g.sum(yw)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{}: {r:?}", spec.name);
        }
    }
}
