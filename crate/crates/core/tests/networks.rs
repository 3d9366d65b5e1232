use lslu::networks::{
    build_mini_cnn, build_mini_resnet, build_mini_vanillanet, count_params_flops, gradcheck_graph, Activation,
    GradcheckOptions, Insertion, LayerGraph, NodeKind, ParamRole,
};
use lslu::nn::{BaseActivation, ConvLayer, Linear, Mode};
use lslu::rng::{self, Stream};
use lslu::series::SeriesParamKind;
use lslu::tensor::FaultSite;
use lslu::{Error, Tensor};

const BASES: [BaseActivation; 4] = [
    BaseActivation::Relu,
    BaseActivation::LeakyRelu(0.01),
    BaseActivation::Gelu,
    BaseActivation::Silu,
];

fn vanilla(depth: usize, terms: usize, base: BaseActivation, blended: bool) -> LayerGraph<f64> {
    build_mini_vanillanet(
        [3, 16, 16],
        4,
        depth,
        6,
        terms,
        base,
        0.1,
        blended,
        &mut rng::stream(3, Stream::Init),
    )
    .unwrap()
}

fn resnet(blocks: &[usize], terms: usize, insertion: Insertion) -> LayerGraph<f64> {
    build_mini_resnet(
        [3, 8, 8],
        3,
        blocks,
        4,
        terms,
        BaseActivation::Relu,
        insertion,
        None,
        0.0,
        &mut rng::stream(4, Stream::Init),
    )
    .unwrap()
}

fn series_scalars(g: &LayerGraph<f64>) -> usize {
    g.params()
        .iter()
        .filter(|p| matches!(p.role, ParamRole::Series(_)))
        .map(|p| p.param.value.numel())
        .sum()
}

/// Non-series parameters as (name, values).
fn plain_params(g: &LayerGraph<f64>) -> Vec<(String, Vec<f64>)> {
    g.params()
        .iter()
        .filter(|p| !matches!(p.role, ParamRole::Series(_)))
        .map(|p| (p.name.clone(), p.param.value.data().to_vec()))
        .collect()
}

#[test]
fn vanillanet_series_scalar_count() {
    for depth in 4..=6 {
        let g = vanilla(depth, 3, BaseActivation::Relu, false);
        let acts = g.activation_layers().len();
        assert_eq!(acts, depth - 1);
        assert_eq!(g.series_layers().len(), acts);
        assert_eq!(series_scalars(&g), 4 * 3 * acts);
    }
    assert!(matches!(
        build_mini_vanillanet::<f64, _>(
            [3, 16, 16],
            4,
            7,
            6,
            3,
            BaseActivation::Relu,
            0.0,
            false,
            &mut rng::stream(0, Stream::Init)
        ),
        Err(Error::InvalidDepth(7))
    ));
}

#[test]
fn zero_terms_gives_the_same_graph_with_plain_activations() {
    let with = vanilla(5, 3, BaseActivation::Gelu, false);
    let without = vanilla(5, 0, BaseActivation::Gelu, false);
    assert_eq!(with.nodes.len(), without.nodes.len());
    for (a, b) in with.nodes.iter().zip(&without.nodes) {
        assert_eq!(a.name, b.name);
        if let NodeKind::Activation(Activation::Series(_)) = &a.kind {
            assert!(matches!(
                b.kind,
                NodeKind::Activation(Activation::Base(BaseActivation::Gelu))
            ));
        }
    }
    assert_eq!(plain_params(&with), plain_params(&without));
    assert!(without.series_layers().is_empty());
    let x = Tensor::randn([2, 3, 16, 16], 1.0, &mut rng::stream(0, Stream::Probe));
    let mut a = with.clone();
    let mut b = without.clone();
    a.set_mode(Mode::Eval);
    b.set_mode(Mode::Eval);
    let (ya, yb) = (a.predict(&x).unwrap(), b.predict(&x).unwrap());
    assert_eq!(ya.max_abs_diff(&yb).unwrap(), 0.0);
}

#[test]
fn forward_shapes() {
    let mut r = rng::stream(5, Stream::Init);
    let g =
        build_mini_vanillanet::<f32, _>([3, 32, 32], 10, 5, 16, 3, BaseActivation::Relu, 0.0, false, &mut r).unwrap();
    let x = Tensor::randn([2, 3, 32, 32], 1.0, &mut r);
    assert_eq!(g.predict(&x).unwrap().shape(), [2, 10]);
    let g = build_mini_resnet::<f32, _>(
        [3, 32, 32],
        7,
        &[1, 1, 1],
        8,
        2,
        BaseActivation::Silu,
        Insertion::Full,
        None,
        0.0,
        &mut r,
    )
    .unwrap();
    assert_eq!(g.predict(&x).unwrap().shape(), [2, 7]);
    let g = build_mini_cnn::<f32, _>([1, 28, 28], 10, &[8, 16], 3, BaseActivation::Relu, 0.2, &mut r).unwrap();
    let x = Tensor::randn([3, 1, 28, 28], 1.0, &mut r);
    assert_eq!(g.predict(&x).unwrap().shape(), [3, 10]);
}

#[test]
fn downsampling_only_places_one_series_per_strided_block() {
    for blocks in [vec![1], vec![1, 1], vec![2, 1, 1], vec![1, 2, 2]] {
        let g = resnet(&blocks, 3, Insertion::DownsamplingOnly);
        let strided = blocks.len() - 1;
        assert_eq!(g.series_layers().len(), strided, "blocks {blocks:?}");
        for &i in &g.series_layers() {
            assert!(g.nodes[i].name.ends_with(".blocks.0.act1"), "{}", g.nodes[i].name);
        }
    }
    let masked = build_mini_resnet::<f64, _>(
        [3, 8, 8],
        3,
        &[1, 1, 1],
        4,
        3,
        BaseActivation::Relu,
        Insertion::DownsamplingOnly,
        Some(&[false, true]),
        0.0,
        &mut rng::stream(4, Stream::Init),
    )
    .unwrap();
    let names: Vec<&str> = masked
        .series_layers()
        .iter()
        .map(|&i| masked.nodes[i].name.as_str())
        .collect();
    assert_eq!(names, ["stages.2.blocks.0.act1"]);
}

#[test]
fn insertion_mode_changes_only_activations() {
    let full = resnet(&[1, 1], 3, Insertion::Full);
    let down = resnet(&[1, 1], 3, Insertion::DownsamplingOnly);
    let plain = resnet(&[1, 1], 0, Insertion::Full);
    assert_eq!(plain_params(&full), plain_params(&down));
    assert_eq!(plain_params(&full), plain_params(&plain));
    assert_eq!(full.series_layers().len(), full.activation_layers().len());
    assert!(plain.series_layers().is_empty());
    assert_eq!(full.param_count() - plain.param_count(), series_scalars(&full));
}

#[test]
fn zeroed_block_is_identity() {
    let mut g = resnet(&[2], 0, Insertion::Full);
    g.set_mode(Mode::Eval);
    for node in &mut g.nodes {
        if node.name.starts_with("stages.0.blocks.1.conv") {
            if let NodeKind::Conv(c) = &mut node.kind {
                c.weight.value = Tensor::zeros(c.weight.value.shape().to_vec());
                c.bias.value = Tensor::zeros(c.bias.value.shape().to_vec());
            }
        }
    }
    let mut shortened = g.clone();
    shortened.nodes.retain(|n| !n.name.starts_with("stages.0.blocks.1."));
    assert!(shortened.nodes.len() < g.nodes.len());
    let x = Tensor::randn([2, 3, 8, 8], 1.0, &mut rng::stream(1, Stream::Probe));
    assert_eq!(g.predict(&x).unwrap(), shortened.predict(&x).unwrap());
}

#[test]
fn params_and_flops_examples() {
    let mut r = rng::stream(0, Stream::Init);
    let mut g = LayerGraph::<f64>::new([3, 8, 8], 2);
    g.push("c", NodeKind::Conv(ConvLayer::kaiming(3, 8, 3, 1, 1, &mut r)));
    g.push("p", NodeKind::GlobalAvgPool);
    g.push("fc", NodeKind::Linear(Linear::kaiming(8, 2, &mut r)));
    let base = count_params_flops(&g).unwrap();
    assert_eq!(base.params, 8 * 3 * 9 + 8 + 8 * 2 + 2);

    let mut with_series = g.clone();
    with_series.nodes.insert(
        1,
        lslu::networks::Node {
            name: "a".into(),
            kind: NodeKind::Activation(Activation::Series(lslu::series::SeriesActivationParams::init(
                3,
                BaseActivation::Relu,
            ))),
        },
    );
    assert_eq!(count_params_flops(&with_series).unwrap().params, base.params + 12);

    let mut pw = LayerGraph::<f64>::new([16, 8, 8], 2);
    pw.push("c", NodeKind::Conv(ConvLayer::kaiming(16, 16, 1, 1, 0, &mut r)));
    pw.push("p", NodeKind::GlobalAvgPool);
    pw.push("fc", NodeKind::Linear(Linear::kaiming(16, 2, &mut r)));
    let conv_only = 2 * 16 * 16 * 8 * 8;
    assert_eq!(
        count_params_flops(&pw).unwrap().flops,
        conv_only + 16 * 8 * 8 + 2 * 16 * 2
    );
}

#[test]
fn every_builder_passes_gradcheck() {
    let opts = GradcheckOptions::default();
    let mut graphs = Vec::new();
    for base in BASES {
        graphs.push((format!("vanilla d5 {base}"), vanilla(5, 2, base, false)));
    }
    graphs.push(("vanilla d4 blended".into(), {
        let mut g = vanilla(4, 3, BaseActivation::Relu, true);
        g.set_blend_lambda(0.4);
        g
    }));
    graphs.push(("resnet full".into(), resnet(&[1, 1], 2, Insertion::Full)));
    graphs.push((
        "resnet downsampling".into(),
        resnet(&[1, 1], 3, Insertion::DownsamplingOnly),
    ));
    graphs.push((
        "cnn".into(),
        build_mini_cnn(
            [1, 8, 8],
            3,
            &[4, 4],
            3,
            BaseActivation::Silu,
            0.0,
            &mut rng::stream(8, Stream::Init),
        )
        .unwrap(),
    ));
    for (label, g) in graphs {
        let report = gradcheck_graph(&g, &opts).unwrap();
        assert!(report.passed(), "{label}: {:?}", report.groups);
        for kind in [SeriesParamKind::Theta, SeriesParamKind::Omega] {
            if let Some(group) = report.group(ParamRole::Series(kind)) {
                assert!(group.max_rel_err < 1e-6, "{label} {kind:?}: {}", group.max_rel_err);
            }
        }
    }
}

#[test]
fn corrupted_rule_fails_exactly_one_group() {
    let g = resnet(&[1, 1], 3, Insertion::Full);
    let cases = [
        (FaultSite::SeriesTheta, ParamRole::Series(SeriesParamKind::Theta)),
        (FaultSite::SeriesOmega, ParamRole::Series(SeriesParamKind::Omega)),
        (FaultSite::BatchNormGamma, ParamRole::BnGamma),
        (FaultSite::BatchNormBeta, ParamRole::BnBeta),
    ];
    for (site, role) in cases {
        let opts = GradcheckOptions {
            fault: Some((site, 1.5)),
            ..GradcheckOptions::default()
        };
        let report = gradcheck_graph(&g, &opts).unwrap();
        assert_eq!(report.failing_groups(), vec![role], "{site:?}");
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let mut g = vanilla(5, 3, BaseActivation::Relu, false);
    g.set_mode(Mode::Eval);
    let x = Tensor::randn([4, 3, 16, 16], 1.0, &mut rng::stream(2, Stream::Probe));
    let a = g.predict(&x).unwrap();
    let b = g.predict(&x).unwrap();
    assert_eq!(a, b);
    let (mut r1, mut r2) = (rng::stream(1, Stream::Dropout), rng::stream(2, Stream::Dropout));
    let t1 = lslu::Tape::new();
    let t2 = lslu::Tape::new();
    let y1 = g
        .forward(&t1, t1.constant(x.clone()), &mut r1, false)
        .unwrap()
        .output
        .value();
    let y2 = g.forward(&t2, t2.constant(x), &mut r2, false).unwrap().output.value();
    assert_eq!(*y1, *y2);
}
