use lslu::data::{Checkpoint, CheckpointMeta, Normalization, CHECKPOINT_VERSION};
use lslu::networks::{
    build_mini_cnn, build_mini_resnet, build_mini_vanillanet, Activation, Insertion, LayerGraph, NodeKind,
};
use lslu::nn::{BaseActivation, Mode};
use lslu::rng::{self, Stream};
use lslu::series::SeriesParamKind;
use lslu::{Error, Tensor};

fn meta<T: lslu::Real>(g: &LayerGraph<T>) -> CheckpointMeta {
    CheckpointMeta::new(
        g,
        3,
        "abc".into(),
        7,
        Normalization::identity(g.input_shape[0]),
        serde_json::json!({"n": 3}),
    )
}

/// A mini-resnet whose series scalars and running statistics are no longer
/// at their initial values.
fn perturbed_resnet() -> LayerGraph<f32> {
    let mut r = rng::stream(11, Stream::Init);
    let mut g = build_mini_resnet::<f32, _>(
        [3, 8, 8],
        4,
        &[1, 1],
        8,
        3,
        BaseActivation::Relu,
        Insertion::DownsamplingOnly,
        None,
        0.2,
        &mut r,
    )
    .unwrap();
    for node in &mut g.nodes {
        if let NodeKind::Activation(Activation::Series(p)) = &mut node.kind {
            for kind in SeriesParamKind::ALL {
                let v = p.get_mut(kind);
                v.value = Tensor::randn(v.value.shape().to_vec(), 0.3, &mut r);
            }
        }
    }
    for (_, bn) in g.batch_norms_mut() {
        let c = bn.channels();
        bn.running_mean = Tensor::randn([c], 1.0, &mut r);
        bn.running_var = Tensor::uniform([c], 0.5, 2.0, &mut r);
        bn.tracked = 5;
    }
    g.set_mode(Mode::Eval);
    g
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let g = perturbed_resnet();
    let ckpt = Checkpoint::from_graph(&g, meta(&g));
    let path = dir.path().join("a.lslu");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let again = dir.path().join("b.lslu");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn round_trip_preserves_every_value_bitwise() {
    let g = perturbed_resnet();
    let ckpt = Checkpoint::from_bytes(&Checkpoint::from_graph(&g, meta(&g)).to_bytes().unwrap()).unwrap();
    let back = ckpt.to_graph::<f32>().unwrap();
    let bits = |g: &LayerGraph<f32>| -> Vec<(String, Vec<u32>)> {
        g.params()
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.param.value.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .chain(
                g.buffers()
                    .iter()
                    .map(|b| (b.name.clone(), b.tensor.data().iter().map(|v| v.to_bits()).collect())),
            )
            .collect()
    };
    assert_eq!(bits(&back), bits(&g));
    let x = Tensor::randn([2, 3, 8, 8], 1.0, &mut rng::stream(1, Stream::Probe));
    assert_eq!(back.predict(&x).unwrap(), g.predict(&x).unwrap());
    assert_eq!(ckpt.meta.epoch, 3);
    assert_eq!(ckpt.meta.seed, 7);
}

#[test]
fn restore_into_matching_graph() {
    let g = perturbed_resnet();
    let ckpt = Checkpoint::from_graph(&g, meta(&g));
    let mut fresh = build_mini_resnet::<f32, _>(
        [3, 8, 8],
        4,
        &[1, 1],
        8,
        3,
        BaseActivation::Relu,
        Insertion::DownsamplingOnly,
        None,
        0.2,
        &mut rng::stream(99, Stream::Init),
    )
    .unwrap();
    ckpt.restore_into(&mut fresh).unwrap();
    fresh.set_mode(Mode::Eval);
    let x = Tensor::randn([2, 3, 8, 8], 1.0, &mut rng::stream(2, Stream::Probe));
    assert_eq!(fresh.predict(&x).unwrap(), g.predict(&x).unwrap());
}

#[test]
fn every_truncation_is_corrupt() {
    let mut r = rng::stream(0, Stream::Init);
    let g = build_mini_cnn::<f64, _>([1, 8, 8], 3, &[4], 2, BaseActivation::Relu, 0.0, &mut r).unwrap();
    let bytes = Checkpoint::from_graph(&g, meta(&g)).to_bytes().unwrap();
    for cut in [0, 3, 4, 8, 11, 12, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "cut at {cut}: {err}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Corrupt(_))));
}

#[test]
fn truncated_file_on_disk_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let g = perturbed_resnet();
    let path = dir.path().join("t.lslu");
    Checkpoint::from_graph(&g, meta(&g)).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt(_))));
    assert!(matches!(
        Checkpoint::load(&dir.path().join("missing.lslu")),
        Err(Error::FileMissing(_))
    ));
}

#[test]
fn version_and_magic_are_checked() {
    let g = perturbed_resnet();
    let mut bytes = Checkpoint::from_graph(&g, meta(&g)).to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"LSLU");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    bytes[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::VersionMismatch { found: 9, expected: 1 })
    ));
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn mismatched_architecture_names_the_tensor() {
    let mut r = rng::stream(0, Stream::Init);
    let narrow =
        build_mini_vanillanet::<f32, _>([3, 16, 16], 4, 5, 8, 3, BaseActivation::Relu, 0.0, false, &mut r).unwrap();
    let ckpt = Checkpoint::from_graph(&narrow, meta(&narrow));
    let mut wide =
        build_mini_vanillanet::<f32, _>([3, 16, 16], 4, 5, 16, 3, BaseActivation::Relu, 0.0, false, &mut r).unwrap();
    match ckpt.restore_into(&mut wide) {
        Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "stem.conv.weight"),
        other => panic!("expected a shape error, got {other:?}"),
    }

    let mut fewer_terms =
        build_mini_vanillanet::<f32, _>([3, 16, 16], 4, 5, 8, 2, BaseActivation::Relu, 0.0, false, &mut r).unwrap();
    match ckpt.restore_into(&mut fewer_terms) {
        Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "stem.act.theta"),
        other => panic!("expected a shape error, got {other:?}"),
    }

    let mut plain =
        build_mini_vanillanet::<f32, _>([3, 16, 16], 4, 5, 8, 0, BaseActivation::Relu, 0.0, false, &mut r).unwrap();
    match ckpt.restore_into(&mut plain) {
        Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "stem.act.theta"),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn dtype_is_checked_on_rebuild() {
    let g = perturbed_resnet();
    let ckpt = Checkpoint::from_graph(&g, meta(&g));
    assert!(matches!(ckpt.to_graph::<f64>(), Err(Error::CheckpointShape { .. })));
}
