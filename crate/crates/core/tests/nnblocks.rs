use proptest::prelude::*;
use simpgan::diff::{Graph, Tensor};
use simpgan::nn::{init_params, layer_forward, stack_output_shape, Activation, LayerKind, LayerSpec, ParamSet};
use simpgan::Error;

fn forward_shape(spec: &LayerSpec, input: &[usize]) -> Vec<usize> {
    let params: ParamSet<f64> = init_params(std::slice::from_ref(spec), 3).unwrap();
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let n: usize = input.iter().product();
    let x = g.constant(Tensor::from_f64(input.to_vec(), &(0..n).map(|i| (i % 13) as f64 / 7.0 - 0.9).collect::<Vec<_>>()).unwrap());
    let y = layer_forward(&mut g, spec, &b, x).unwrap();
    g.shape(y).to_vec()
}

/// A layer together with an input shape it accepts.
fn spec_and_input() -> impl Strategy<Value = (LayerSpec, Vec<usize>)> {
    let dims = (1usize..3, 1usize..4, 1usize..9, 1usize..9);
    (0usize..7, dims, 1usize..5, 1usize..4, 1usize..3, 0usize..2, 1usize..3, any::<bool>()).prop_map(
        |(kind, (n, c, h, w), cout, k, stride, pad, factor, bias)| {
            let (h, w) = (h + k, w + k);
            let (spec, input) = match kind {
                0 => (LayerSpec::conv("conv", c, cout, k, stride, pad).unwrap(), vec![n, c, h, w]),
                1 => (LayerSpec::dense("dense", c * h, cout).unwrap(), vec![n, c * h]),
                2 => (LayerSpec::instance_norm("norm").unwrap(), vec![n, c, h, w]),
                3 => (LayerSpec::activation("act", Activation::LeakyRelu(0.2)).unwrap(), vec![n, c, h, w]),
                4 => (LayerSpec::new("res", LayerKind::ResidualBlock { channels: c, slope: 0.2 }).unwrap(), vec![n, c, h, w]),
                5 => (
                    LayerSpec::new("down", LayerKind::Downsample { in_channels: c, out_channels: cout }).unwrap(),
                    vec![n, c, h, w],
                ),
                _ => (
                    LayerSpec::new("up", LayerKind::Upsample { in_channels: c, out_channels: cout, factor }).unwrap(),
                    vec![n, c, h, w],
                ),
            };
            (if bias { spec } else { spec.without_bias() }, input)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn shape_inference_matches_forward((spec, input) in spec_and_input()) {
        let inferred = spec.output_shape(&input).unwrap();
        prop_assert_eq!(inferred, forward_shape(&spec, &input));
    }
}

#[test]
fn stack_shape_inference_composes() {
    let specs = vec![
        LayerSpec::conv("a", 3, 4, 3, 2, 1).unwrap(),
        LayerSpec::instance_norm("a.norm").unwrap(),
        LayerSpec::new("up", LayerKind::Upsample { in_channels: 4, out_channels: 2, factor: 2 }).unwrap(),
    ];
    assert_eq!(stack_output_shape(&specs, &[2, 3, 8, 6]).unwrap(), vec![2, 2, 8, 6]);
}

#[test]
fn init_is_deterministic_with_expected_shapes() {
    let specs = vec![LayerSpec::dense("fc", 4, 2).unwrap()];
    let a: ParamSet<f32> = init_params(&specs, 9).unwrap();
    let b: ParamSet<f32> = init_params(&specs, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.get("fc.weight").unwrap().shape(), &[2, 4]);
    assert_eq!(a.get("fc.bias").unwrap().shape(), &[2]);
}

#[test]
fn init_variance_follows_fan_in() {
    // fan_in = 10 * 2 * 2 = 40, 1000 weights
    let spec = LayerSpec::conv("c", 10, 25, 2, 1, 0).unwrap();
    let p: ParamSet<f64> = init_params(&[spec], 21).unwrap();
    let w = p.get("c.weight").unwrap().data();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    assert!((var / (2.0 / 40.0) - 1.0).abs() < 0.3, "{var}");
}

#[test]
fn bias_free_layers_own_only_weights() {
    let spec = LayerSpec::conv("c", 2, 3, 3, 1, 1).unwrap().without_bias();
    assert_eq!(spec.param_names(), vec!["c.weight".to_string()]);
    let res = LayerSpec::new("r", LayerKind::ResidualBlock { channels: 2, slope: 0.2 }).unwrap();
    assert_eq!(res.param_names(), vec!["r.conv1.weight".to_string(), "r.conv2.weight".to_string()]);
}

#[test]
fn shape_mismatch_names_the_layer() {
    let spec = LayerSpec::conv("stage7", 3, 4, 3, 1, 1).unwrap();
    let err = spec.output_shape(&[1, 2, 8, 8]).unwrap_err();
    assert!(matches!(&err, Error::Layer { layer, .. } if layer == "stage7"), "{err}");
}

#[test]
fn param_sets_reject_duplicates_and_non_finite_values() {
    let mut p = ParamSet::<f32>::new();
    p.insert("w", Tensor::zeros(vec![2])).unwrap();
    assert!(p.insert("w", Tensor::zeros(vec![2])).is_err());
    assert!(p.insert("x", Tensor::new(vec![1], vec![f32::NAN]).unwrap()).is_err());
}
