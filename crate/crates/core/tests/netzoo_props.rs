//! Zoo invariants: boundary chains, and parameter and FLOP counts against
//! closed-form enumerations written independently of the builders.

use proptest::prelude::*;
use scion_core::netzoo::{
    build_network, count_flops, count_params, ArchSpec, BlockSpec, ZooError, CUSTOM_CNN, RESNET18, TOY_CNN,
    TOY_RESNET, VGG16, VGG16_HALF,
};
use scion_core::nn::{Shape, Tensor};

/// 3x3 conv without bias followed by batch norm (scale and shift).
fn conv3_bn(cin: usize, cout: usize) -> usize {
    9 * cin * cout + 2 * cout
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn toy_cnn_params(w: usize, cin: usize, classes: usize) -> usize {
    let mut total = 0;
    let mut c_prev = cin;
    for c in [w, 2 * w, 4 * w, 8 * w] {
        total += conv3_bn(c_prev, c) + conv3_bn(c, c);
        c_prev = c;
    }
    total + linear(8 * w, classes)
}

fn basic_block_params(cin: usize, cout: usize, projected: bool) -> usize {
    conv3_bn(cin, cout) + conv3_bn(cout, cout) + if projected { cin * cout + 2 * cout } else { 0 }
}

fn toy_resnet_params(w: usize, cin: usize, classes: usize) -> usize {
    conv3_bn(cin, w)
        + basic_block_params(w, w, false)
        + basic_block_params(w, 2 * w, true)
        + basic_block_params(2 * w, 4 * w, true)
        + basic_block_params(4 * w, 8 * w, true)
        + linear(8 * w, classes)
}

fn vgg16_params(w: usize, classes: usize) -> usize {
    let widths = [w, w, 2 * w, 2 * w, 4 * w, 4 * w, 4 * w, 8 * w, 8 * w, 8 * w, 8 * w, 8 * w, 8 * w];
    let mut c_prev = 3;
    let mut total = 0;
    for c in widths {
        total += conv3_bn(c_prev, c);
        c_prev = c;
    }
    total + linear(8 * w, 8 * w) + 2 * 8 * w + linear(8 * w, classes)
}

/// Per-sample FLOPs of toy-cnn: two 3x3 convs per block at the block's output
/// resolution, plus the classifier.
fn toy_cnn_flops(w: usize, res: usize, classes: usize) -> (Vec<u64>, u64) {
    let mut per_block = Vec::new();
    let (mut c_prev, mut r) = (3u64, res as u64);
    for (i, c) in [w, 2 * w, 4 * w, 8 * w].into_iter().enumerate() {
        let c = c as u64;
        if i > 0 {
            r = (r - 1) / 2 + 1;
        }
        per_block.push(2 * 9 * r * r * (c_prev * c + c * c));
        c_prev = c;
    }
    (per_block, 2 * (8 * w * classes) as u64)
}

#[test]
fn vgg16_matches_enumeration() {
    let net = build_network(&ArchSpec::new(VGG16, 10), 0).unwrap();
    assert_eq!(count_params(&net), vgg16_params(64, 10));
    assert_eq!(count_params(&net), 14_987_722);
    let half = build_network(&ArchSpec::new(VGG16_HALF, 10), 0).unwrap();
    assert_eq!(count_params(&half), vgg16_params(32, 10));
}

#[test]
fn unknown_names_are_rejected() {
    let err = build_network(&ArchSpec::new("alexnet", 10), 0).unwrap_err();
    assert_eq!(err, ZooError::UnknownArch("alexnet".into()));
}

#[test]
fn custom_chain_break_names_the_boundary() {
    let blocks = vec![
        BlockSpec { in_channels: 3, out_channels: 8, stride: 1, convs: 2 },
        BlockSpec { in_channels: 8, out_channels: 16, stride: 2, convs: 1 },
        BlockSpec { in_channels: 12, out_channels: 32, stride: 2, convs: 1 },
    ];
    let spec = ArchSpec::new(CUSTOM_CNN, 10).with_blocks(blocks).with_resolution(8, 8);
    match build_network(&spec, 0).unwrap_err() {
        ZooError::ChannelChain { boundary, out_channels, next_in_channels } => {
            assert_eq!((boundary, out_channels, next_in_channels), (2, 16, 12));
        }
        other => panic!("unexpected error {other:?}"),
    }
}

fn arch_strategy() -> impl Strategy<Value = ArchSpec> {
    let small = (prop::sample::select(vec![TOY_CNN, TOY_RESNET, RESNET18]), 1usize..5, prop::sample::select(vec![8usize, 16, 24]), 2usize..12)
        .prop_map(|(a, w, r, k)| ArchSpec::new(a, k).with_width(w).with_resolution(r, r));
    let vgg = (1usize..4, 2usize..12).prop_map(|(w, k)| ArchSpec::new(VGG16, k).with_width(w));
    prop_oneof![3 => small, 1 => vgg]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn boundaries_chain_and_match_activations(spec in arch_strategy(), seed in any::<u64>()) {
        let net = build_network(&spec, seed).unwrap();
        let sigs = net.signatures();
        prop_assert!(sigs.len() >= 2);
        for pair in sigs.windows(2) {
            prop_assert_eq!(pair[0].out_channels, pair[1].in_channels);
            prop_assert_eq!(pair[0].output_resolution(), pair[1].input_resolution);
        }
        let (c, h, w) = net.input_dims();
        prop_assert_eq!(sigs[0].input_shape(1), Shape::new(1, c, h, w));
        let (acts, logits) = net.trace(&Tensor::zeros(Shape::new(2, c, h, w)));
        for (l, sig) in sigs.iter().enumerate() {
            prop_assert_eq!(acts[l + 1].shape(), sig.output_shape(2));
        }
        prop_assert_eq!(logits.shape(), Shape::new(2, spec.num_classes, 1, 1));
    }

    #[test]
    fn toy_counts_match_enumeration(w in 1usize..9, classes in 2usize..20, res in prop::sample::select(vec![8usize, 16, 24])) {
        let cnn = build_network(&ArchSpec::new(TOY_CNN, classes).with_width(w).with_resolution(res, res), 0).unwrap();
        prop_assert_eq!(count_params(&cnn), toy_cnn_params(w, 3, classes));
        let report = count_flops(&cnn, (3, res, res)).unwrap();
        let (per_block, head) = toy_cnn_flops(w, res, classes);
        prop_assert_eq!(&report.per_block, &per_block);
        prop_assert_eq!(report.head, head);
        prop_assert_eq!(report.total, per_block.iter().sum::<u64>() + head);
        let resnet = build_network(&ArchSpec::new(TOY_RESNET, classes).with_width(w).with_resolution(res, res), 0).unwrap();
        prop_assert_eq!(count_params(&resnet), toy_resnet_params(w, 3, classes));
    }
}
