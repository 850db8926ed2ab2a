use num_rational::Ratio;
use pokebnn::cost::count_macs;
use pokebnn::graphir::*;
use proptest::prelude::*;

fn binary_macs(g: &GraphSpec) -> u64 {
    count_macs(g)
        .unwrap()
        .iter()
        .filter(|b| b.act_bits == DType::Binary && b.weight_bits == DType::Binary)
        .map(|b| b.count)
        .sum()
}

#[test]
fn every_builtin_validates_and_infers_deterministically() {
    for name in builtin_names() {
        let g = builtin(&name).unwrap();
        assert!(validate_graph(&g).is_empty(), "{name}: {:?}", validate_graph(&g));
        let a = infer_shapes(&g).unwrap();
        let b = infer_shapes(&g).unwrap();
        assert_eq!(a, b, "{name}");
        assert_eq!(a.len(), g.nodes.len());
    }
}

#[test]
fn pokebnn_node_inventory() {
    let g = build_pokebnn(Ratio::from_integer(1)).unwrap();
    let mac: Vec<&NodeSpec> = g.nodes.iter().filter(|n| n.op.is_mac()).collect();
    let binary = mac.iter().filter(|n| n.attrs.act_bits == Some(DType::Binary)).count();
    let int8: Vec<_> = mac.iter().filter(|n| n.attrs.weight_bits == Some(DType::Int8)).collect();
    assert_eq!(binary, 48);
    assert_eq!(int8.iter().filter(|n| n.op != OpKind::Dense).count(), 2);
    assert_eq!(int8.iter().filter(|n| n.op == OpKind::Dense).count(), 1);
    // Shortcuts never pass through a convolution: every add operand is a non-MAC node.
    for n in g.nodes.iter().filter(|n| n.op == OpKind::Add) {
        for i in &n.inputs {
            assert!(!g.node(i).unwrap().op.is_mac(), "{} feeds {} directly", i, n.id);
        }
    }
}

#[test]
fn pokeinit_output_resolution() {
    let g = build_pokebnn(Ratio::from_integer(1)).unwrap();
    let shapes = infer_shapes(&g).unwrap();
    let first_binary = g
        .nodes
        .iter()
        .find(|n| n.attrs.act_bits == Some(DType::Binary))
        .unwrap();
    assert_eq!(shapes[&first_binary.inputs[0]], [56, 56, 64]);
}

#[test]
fn binary_macs_scale_quadratically_between_variants() {
    let ms = ["0.5", "0.75", "1", "1.25", "1.4", "1.5", "1.75", "2"];
    let macs: Vec<(f64, f64)> = ms
        .iter()
        .map(|s| {
            let m = parse_multiplier(s).unwrap();
            (*m.numer() as f64 / *m.denom() as f64, binary_macs(&build_pokebnn(m).unwrap()) as f64)
        })
        .collect();
    for w in macs.windows(2) {
        let ((m0, b0), (m1, b1)) = (w[0], w[1]);
        let expected = (m1 / m0).powi(2);
        let got = b1 / b0;
        assert!((got / expected - 1.0).abs() < 0.005, "{m0}->{m1}: {got} vs {expected}");
        assert!(got > m1 / m0, "not faster than linear");
    }
}

#[test]
fn resnet_layer_figures() {
    let g = build_resnet50(DType::Bf16, DType::Bf16).unwrap();
    let shapes = infer_shapes(&g).unwrap();
    let stem = g.nodes.iter().find(|n| n.op == OpKind::Conv2d).unwrap();
    let [ho, wo, co] = shapes[&stem.id];
    let [kh, kw] = stem.attrs.kernel();
    let cin = shapes[&stem.inputs[0]][2];
    assert_eq!((ho * wo * co * kh * kw * cin) as u64, 118_013_952);
    let total: u64 = count_macs(&g).unwrap().iter().map(|b| b.count).sum();
    assert_eq!((total as f64 / 1e5).round() / 10.0, 4089.2);
}

#[test]
fn save_load_round_trip_all_builtins() {
    let dir = tempfile::tempdir().unwrap();
    for name in builtin_names() {
        let g = builtin(&name).unwrap();
        let path = dir.path().join(format!("{name}.json"));
        save_graph(&g, &path).unwrap();
        let back = load_graph(&path).unwrap();
        assert_eq!(g, back, "{name}");
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let json = graph_to_json(&builtin("pokebnn-toy").unwrap());
    let truncated = dir.path().join("t.json");
    std::fs::write(&truncated, &json[..json.len() / 2]).unwrap();
    assert!(matches!(load_graph(&truncated), Err(GraphIoError::Parse { .. })));

    let bad_op = dir.path().join("op.json");
    std::fs::write(&bad_op, json.replacen("\"conv2d\"", "\"conv5d\"", 1)).unwrap();
    match load_graph(&bad_op) {
        Err(e @ GraphIoError::UnknownOp { .. }) => assert!(e.to_string().contains("conv5d")),
        other => panic!("expected unknown-op error, got {other:?}"),
    }
}

#[test]
fn dangling_input_diagnostic_names_the_id() {
    let mut g = builtin("pokebnn-toy").unwrap();
    let last = g.nodes.len() - 1;
    g.nodes[last].inputs[0] = "ghost".into();
    let d = validate_graph(&g);
    assert_eq!(d.len(), 1);
    assert!(d[0].message.contains("ghost"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn toy_graphs_are_valid_and_serializable(
        groups in 2usize..=5,
        m in prop::sample::select(vec![(1, 4), (1, 2), (3, 4), (1, 1)]),
        side in prop::sample::select(vec![16usize, 32, 48]),
    ) {
        let g = match build_pokebnn_toy(Ratio::new(m.0, m.1), groups, [side, side, 3]) {
            Ok(g) => g,
            Err(GraphError::Underflow { .. }) => {
                // Each group halves the resolution; small inputs run out first.
                prop_assert!(side >> groups < 2);
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(validate_graph(&g).is_empty());
        prop_assert!(g.count_op(OpKind::TileChannels) >= 1);
        prop_assert!(g.count_op(OpKind::PadChannels) >= 1);
        let back = graph_from_json(&graph_to_json(&g)).unwrap();
        prop_assert_eq!(back, g);
    }
}
