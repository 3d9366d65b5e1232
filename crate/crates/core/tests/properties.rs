use lslu::analysis::{convergence_stats, selectivity_index, TrajectoryRecord};
use lslu::data::{batch_indices, RawTensor};
use lslu::fusion::{fuse_conv_bn, FusedConv};
use lslu::nn::{self, BaseActivation, BatchNormState, ConvLayer, Mode};
use lslu::rng::{self, Stream};
use lslu::series::SeriesActivationParams;
use lslu::{Tape, Tensor};
use proptest::prelude::*;

fn base_strategy() -> impl Strategy<Value = BaseActivation> {
    prop_oneof![
        Just(BaseActivation::Relu),
        (0.001f64..0.5).prop_map(BaseActivation::LeakyRelu),
        Just(BaseActivation::Gelu),
        Just(BaseActivation::Silu),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn epoch_is_a_permutation(n in 1usize..200, q in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = batch_indices(n, q, seed, epoch).unwrap();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= q));
        prop_assert_eq!(batches.len(), n.div_ceil(q));
        let mut all = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn csi_stays_in_unit_interval(means in prop::collection::vec(-5.0f64..5.0, 2..12)) {
        let c = selectivity_index(&means).unwrap();
        prop_assert!((0.0..=1.0).contains(&c), "{c}");
    }

    #[test]
    fn series_at_init_is_the_base(terms in 1usize..6, base in base_strategy(), seed in any::<u64>()) {
        let x = Tensor::<f64>::randn([257], 3.0, &mut rng::stream(seed, Stream::Data));
        let p = SeriesActivationParams::<f64>::init(terms, base);
        let y = p.eval(&x).unwrap();
        let expect = x.map(|v| base.eval(v));
        prop_assert_eq!(y.max_abs_diff(&expect).unwrap(), 0.0);
    }

    #[test]
    fn raw_tensor_round_trip_is_bitwise(
        shape in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        let t = Tensor::<f32>::randn(shape.clone(), 10.0, &mut rng::stream(seed, Stream::Data));
        let back: Tensor<f32> = RawTensor::from_tensor("t", &t).to_tensor().unwrap();
        prop_assert_eq!(back.shape(), &shape[..]);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn constant_series_has_zero_spread(value in -1e3f64..1e3, epochs in 10usize..20) {
        let records: Vec<TrajectoryRecord> = (0..epochs)
            .map(|epoch| TrajectoryRecord {
                run_id: "r".into(),
                epoch,
                layer: "l".into(),
                kind: "theta".into(),
                term: 0,
                value,
            })
            .collect();
        let stats = convergence_stats(&records, 10).unwrap();
        prop_assert_eq!(stats[0].mean, value);
        prop_assert_eq!(stats[0].std, 0.0);
    }

    #[test]
    fn conv_bn_fusion_matches_dual_execution(
        c_in in 1usize..4,
        c_out in 1usize..5,
        k in prop_oneof![Just(1usize), Just(3)],
        seed in any::<u64>(),
    ) {
        let mut r = rng::stream(seed, Stream::Init);
        let conv = ConvLayer::<f64>::kaiming(c_in, c_out, k, 1, k / 2, &mut r);
        let mut bn = BatchNormState::<f64>::new(c_out);
        bn.gamma.value = Tensor::uniform([c_out], 0.5, 2.0, &mut r);
        bn.beta.value = Tensor::randn([c_out], 1.0, &mut r);
        bn.set_running_stats(Tensor::randn([c_out], 1.0, &mut r), Tensor::uniform([c_out], 0.1, 3.0, &mut r))
            .unwrap();
        let x = Tensor::randn([2, c_in, 5, 5], 1.0, &mut r);

        let tape = Tape::new();
        let y = nn::conv2d(
            tape.constant(x.clone()),
            tape.constant(conv.weight.value.clone()),
            tape.constant(conv.bias.value.clone()),
            1,
            k / 2,
        ).unwrap();
        let (y, _) = nn::batch_norm(
            y,
            tape.constant(bn.gamma.value.clone()),
            tape.constant(bn.beta.value.clone()),
            &bn,
            Mode::Eval,
        ).unwrap();
        let fused = fuse_conv_bn(&FusedConv::from_conv(&conv, "c"), &bn).unwrap().into_conv();
        let z = fused.apply(&x).unwrap();
        prop_assert!(y.value().max_abs_diff(&z).unwrap() < 1e-10);
    }

    #[test]
    fn train_mode_batch_norm_standardises(
        n in 16usize..24,
        c in 1usize..4,
        shift in -5.0f64..5.0,
        scale in 0.5f64..4.0,
        seed in any::<u64>(),
    ) {
        let mut r = rng::stream(seed, Stream::Data);
        let x = Tensor::<f64>::randn([n, c, 3, 3], 1.0, &mut r).map(|v| v * scale + shift);
        let bn = BatchNormState::<f64>::new(c);
        let tape = Tape::new();
        let (y, stats) = nn::batch_norm(
            tape.constant(x),
            tape.constant(bn.gamma.value.clone()),
            tape.constant(bn.beta.value.clone()),
            &bn,
            Mode::Train,
        ).unwrap();
        prop_assert!(stats.is_some());
        let y = y.value();
        let inner = 9;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| y.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() < 1e-6, "mean {m}");
            prop_assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }
}
