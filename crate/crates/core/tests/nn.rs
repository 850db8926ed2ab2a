use std::collections::BTreeMap;

use num_rational::Ratio;
use pokebnn::graphir::{build_pokebnn_toy_with_classes, DType, GraphBuilder, OpKind, ResidualMode};
use pokebnn::nn::blocks::{
    dprelu, pokeconv, pokeinit, reshape_add, se_4b, BlockQuant, BnParams, DprParams, PokeConvParams, PokeInitParams,
    SeParams,
};
use pokebnn::nn::quantize::binarize;
use pokebnn::nn::{
    load_checkpoint, save_checkpoint, Bounds, ForwardOptions, Mode, Model, ModelConfig, NnError, Phase, QuantForm,
    Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn row(v: &[f64]) -> Tensor {
    Tensor::new([1, 1, 1, v.len()], v.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn toy_model(seed: u64) -> Model {
    let g = build_pokebnn_toy_with_classes(Ratio::new(1, 4), 2, [16, 16, 3], 5).unwrap();
    Model::new(g, ModelConfig::default(), seed).unwrap()
}

fn toy_batch(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform([n, 16, 16, 3], 1.0, &mut rng)
}

fn one_hot(n: usize, classes: usize) -> Tensor {
    let mut t = Tensor::zeros([n, 1, 1, classes]);
    for i in 0..n {
        t.data[i * classes + i % classes] = 1.0;
    }
    t
}

fn loss_grads(model: &mut Model, x: &Tensor, opts: ForwardOptions) -> (Tensor, BTreeMap<String, Tensor>) {
    let mut pass = model.forward_opts(x, opts).unwrap();
    let targets = one_hot(x.batch(), model.classes());
    let loss = pass.tape.kl_loss(pass.logits, &targets).unwrap();
    let grads = model.backward(&pass, loss).unwrap();
    (pass.logits().clone(), grads)
}

#[test]
fn dprelu_examples() {
    let mut tape = Tape::new();
    let p = DprParams::init(&mut tape, 2);
    let x = tape.constant(row(&[2.0, -2.0]));
    let y = dprelu(&mut tape, x, &p).unwrap();
    assert_eq!(tape.value(y).data, vec![2.0, -0.5]);

    let mut tape = Tape::new();
    let p = DprParams {
        alpha: tape.param(row(&[1.0])),
        beta: tape.param(row(&[0.5])),
        gamma: tape.param(row(&[0.25])),
        eta: tape.param(row(&[2.0])),
    };
    let x = tape.constant(row(&[3.0]));
    let y = dprelu(&mut tape, x, &p).unwrap();
    assert!((tape.value(y).data[0] - 3.5).abs() < 1e-12);
}

#[test]
fn hardsigmoid_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(row(&[0.0, 3.0, 10.0, -3.0, -10.0, 1.5]));
    let y = tape.hardsigmoid(x);
    assert!(close(&tape.value(y).data, &[0.5, 1.0, 1.0, 0.0, 0.0, 0.75], 1e-12));
}

#[test]
fn se_gate_on_zero_input_is_hardsigmoid_of_bias() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = SeParams::init(&mut tape, 16, 8, &mut rng).unwrap();
    let b2 = [-4.0, -1.0, 0.0, 0.3, 1.2, 2.9, 3.0, 7.0];
    p.b2 = tape.param(row(&b2));
    let r = tape.constant(Tensor::zeros([1, 4, 4, 16]));
    let g = se_4b(&mut tape, r, &p, &BlockQuant::new(Phase::One)).unwrap();
    let want: Vec<f64> = b2.iter().map(|b| ((b + 3.0) / 6.0_f64).clamp(0.0, 1.0)).collect();
    assert_eq!(tape.value(g).shape, [1, 1, 1, 8]);
    assert!(close(&tape.value(g).data, &want, 1e-12));
}

#[test]
fn reshape_add_examples() {
    let (a, b) = (1.5, -2.0);
    let cases: [(&[f64], &[f64], ResidualMode, &[f64]); 3] = [
        (&[0.0; 4], &[a, b], ResidualMode::Pad, &[a, b, 0.0, 0.0]),
        (&[0.0; 4], &[a, b], ResidualMode::Tile, &[a, b, a, b]),
        (&[0.0; 2], &[1.0, 3.0, 5.0, 7.0], ResidualMode::Pad, &[2.0, 6.0]),
    ];
    for (x, r, mode, want) in cases {
        let mut tape = Tape::new();
        let xv = tape.constant(row(x));
        let rv = tape.constant(row(r));
        let y = reshape_add(&mut tape, xv, rv, mode).unwrap();
        assert_eq!(tape.value(y).data, want.to_vec(), "{mode:?} {r:?}");
    }
}

#[test]
fn reshape_add_rejects_non_integral_ratio() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 2, 6]));
    let r = tape.constant(Tensor::zeros([1, 2, 2, 4]));
    assert!(matches!(
        reshape_add(&mut tape, x, r, ResidualMode::Pad),
        Err(NnError::Ratio { from: 4, to: 6 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reshape_add_conserves_channel_sums(
        cr in 1usize..5, ratio in 1usize..4, grow in any::<bool>(), tile in any::<bool>(), seed in any::<u64>(),
    ) {
        let cx = if grow { cr * ratio } else { cr };
        let cr = if grow { cr } else { cr * ratio };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Tensor::uniform([2, 3, 3, cr], 2.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros([2, 3, 3, cx]));
        let rv = tape.constant(r.clone());
        let mode = if tile { ResidualMode::Tile } else { ResidualMode::Pad };
        let y = reshape_add(&mut tape, xv, rv, mode).unwrap();
        let total_in: f64 = r.data.iter().sum();
        let total_out: f64 = tape.value(y).data.iter().sum();
        // Padding keeps the sum, tiling multiplies it by the ratio, averaging divides it.
        let want = if cx > cr && tile { total_in * ratio as f64 }
            else if cx < cr { total_in / ratio as f64 }
            else { total_in };
        prop_assert!((total_out - want).abs() < 1e-9 * (1.0 + want.abs()));
    }

    #[test]
    fn se_gate_in_unit_interval(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let p = SeParams::init(&mut tape, 8, 16, &mut rng).unwrap();
        let r = tape.constant(Tensor::uniform([2, 3, 3, 8], scale, &mut rng));
        for phase in [Phase::One, Phase::Two] {
            let g = se_4b(&mut tape, r, &p, &BlockQuant::new(phase)).unwrap();
            prop_assert!(tape.value(g).data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pokeconv_shapes_and_gradients(
        side in 2usize..7, stride in 1usize..3, c_in_k in 1usize..3, grow in 0usize..2, kernel in prop::sample::select(vec![1usize, 3]),
        phase_two in any::<bool>(), seed in any::<u64>(),
    ) {
        let c_in = 8 * c_in_k;
        let ch = c_in << grow;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let p = PokeConvParams::init(&mut tape, c_in, ch, kernel, &mut rng).unwrap();
        let x = tape.constant(Tensor::uniform([2, side, side, c_in], 2.0, &mut rng));
        let phase = if phase_two { Phase::Two } else { Phase::One };
        let y = pokeconv(&mut tape, x, None, stride, &p, Mode::Train, &BlockQuant::new(phase)).unwrap();
        let out = side.div_ceil(stride);
        prop_assert_eq!(tape.value(y).shape, [2, out, out, ch]);
        let seed_t = Tensor::uniform(tape.value(y).shape, 1.0, &mut rng);
        let grads = tape.backward_with(y, seed_t).unwrap();
        let vars: Vec<Var> = vec![
            p.conv, p.bn1.scale, p.bn1.bias, p.act.alpha, p.act.beta, p.act.gamma, p.act.eta,
            p.se.w1, p.se.b1, p.se.w2, p.se.b2, p.bn2.scale, p.bn2.bias,
        ];
        for v in vars {
            let g = grads.get(v);
            prop_assert!(g.is_some_and(|g| g.all_finite() && g.shape == tape.value(v).shape));
        }
    }

    #[test]
    fn binarize_outputs_signs_and_masks_gradient(seed in any::<u64>(), bound in 0.2f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::uniform([1, 4, 4, 3], 4.0, &mut rng));
        let y = binarize(&mut tape, x, &Bounds::PerTensor(bound), QuantForm::Exact).unwrap();
        prop_assert!(tape.value(y).data.iter().all(|&v| v == 1.0 || v == -1.0));
        let ones = Tensor::full(tape.value(y).shape, 1.0);
        let grads = tape.backward_with(y, ones).unwrap();
        let g = grads.get(x).unwrap();
        for (xv, gv) in tape.value(x).data.iter().zip(&g.data) {
            if xv.abs() >= bound {
                prop_assert_eq!(*gv, 0.0);
            } else {
                prop_assert_eq!(*gv, 1.0);
            }
        }
    }
}

#[test]
fn pokeinit_output_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (side, out) in [(32, 8), (224, 56)] {
        let mut tape = Tape::new();
        let p = PokeInitParams::init(&mut tape, 3, &mut rng);
        let x = tape.constant(Tensor::uniform([1, side, side, 3], 1.0, &mut rng));
        let y = pokeinit(&mut tape, x, &p, Mode::Train, &BlockQuant::new(Phase::Two)).unwrap();
        assert_eq!(tape.value(y).shape, [1, out, out, 64]);
    }
}

/// Graph with one PokeConv block, then a float classifier.
fn single_block_model(c_in: usize, ch: usize, stride: usize) -> Model {
    let mut b = GraphBuilder::new("one-block", [6, 6, c_in], Ratio::from_integer(1));
    let x = b.input();
    let y = b.pokeconv("pc", &x, None, 3, ch, stride).unwrap();
    let s = b.unary("pool", OpKind::SpatialMean, &y).unwrap();
    let s = b.dense("fc", &s, 4, DType::Fp32, DType::Fp32).unwrap();
    Model::new(b.finish(&s).unwrap(), ModelConfig::default(), 9).unwrap()
}

fn block_params_from(tape: &mut Tape, model: &Model) -> PokeConvParams {
    let mut p = |n: &str| tape.param(model.params()[&format!("pc.{n}")].clone());
    let conv = p("conv.weight");
    let bn1 = (p("bn1.scale"), p("bn1.bias"));
    let act = DprParams {
        alpha: p("act.alpha"),
        beta: p("act.beta"),
        gamma: p("act.gamma"),
        eta: p("act.eta"),
    };
    let se = SeParams {
        w1: p("se.fc1.weight"),
        b1: p("se.fc1.bias"),
        w2: p("se.fc2.weight"),
        b2: p("se.fc2.bias"),
    };
    let bn2 = (p("bn2.scale"), p("bn2.bias"));
    let bn = |(scale, bias): (Var, Var), c: usize| BnParams {
        scale,
        bias,
        running_mean: vec![0.0; c],
        running_var: vec![1.0; c],
    };
    let ch = model.params()["pc.bn1.scale"].len();
    PokeConvParams {
        conv,
        bn1: bn(bn1, ch),
        act,
        se,
        bn2: bn(bn2, ch),
    }
}

#[test]
fn graph_interpreter_matches_block_implementation() {
    for (c_in, ch, stride) in [(8, 8, 1), (8, 16, 2), (16, 8, 1)] {
        let mut model = single_block_model(c_in, ch, stride);
        let mut rng = ChaCha8Rng::seed_from_u64(c_in as u64 + ch as u64);
        let x = Tensor::uniform([3, 6, 6, c_in], 2.0, &mut rng);
        let out_idx = model.graph().nodes.iter().position(|n| n.id == "pc.bn2").unwrap();
        // Calibrate activation bounds, then freeze them so both sides use the same values.
        model.forward(&x, Mode::Train, Phase::Two).unwrap();
        model.freeze_bounds();
        for phase in [Phase::One, Phase::Two] {
            let mut opts = ForwardOptions::new(Mode::Train, phase);
            opts.update_state = false;
            let pass = model.forward_opts(&x, opts).unwrap();
            let got = pass.tape.value(pass.nodes[out_idx]).clone();

            let mut tape = Tape::new();
            let p = block_params_from(&mut tape, &model);
            let xv = tape.constant(x.clone());
            let mut q = BlockQuant::new(phase);
            q.act_bounds = [
                model.bound_states()["pc.se.fc1"].bound,
                model.bound_states()["pc.se.fc2"].bound,
            ];
            let y = pokeconv(&mut tape, xv, None, stride, &p, Mode::Train, &q).unwrap();
            assert_eq!(tape.value(y).shape, got.shape);
            assert!(close(&tape.value(y).data, &got.data, 1e-9), "{c_in}->{ch}/{stride} {phase:?}");
        }
    }
}

#[test]
fn model_logits_finite_and_sized() {
    let mut model = toy_model(1);
    let x = toy_batch(4, 1);
    for phase in [Phase::One, Phase::Two] {
        for mode in [Mode::Train, Mode::Eval] {
            let pass = model.forward(&x, mode, phase).unwrap();
            assert_eq!(pass.logits().shape, [4, 1, 1, 5]);
            assert!(pass.logits().all_finite());
        }
    }
}

#[test]
fn eval_forward_is_deterministic_and_stateless() {
    let mut model = toy_model(2);
    let x = toy_batch(3, 2);
    model.forward(&x, Mode::Train, Phase::Two).unwrap();
    let before = model.clone();
    let a = model.forward(&x, Mode::Eval, Phase::Two).unwrap().logits().clone();
    let b = model.forward(&x, Mode::Eval, Phase::Two).unwrap().logits().clone();
    assert_eq!(a, b);
    assert_eq!(model, before);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut model = toy_model(3);
    let x = toy_batch(2, 3);
    let pass = model.forward(&x, Mode::Train, Phase::Two).unwrap();
    let seed = Tensor::zeros(pass.logits().shape);
    let grads = model.backward_with(&pass, pass.logits, seed).unwrap();
    assert!(!grads.is_empty());
    assert!(grads.values().all(|g| g.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn every_param_receives_a_finite_gradient() {
    let mut model = toy_model(4);
    let x = toy_batch(4, 4);
    let (_, grads) = loss_grads(&mut model, &x, ForwardOptions::new(Mode::Train, Phase::Two));
    for name in model.params().keys() {
        let g = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(g.all_finite(), "{name}");
        assert_eq!(g.shape, model.params()[name].shape, "{name}");
    }
}

#[test]
fn binary_act_bound_changes_gradients_not_values() {
    let x = toy_batch(4, 5);
    let opts = ForwardOptions {
        update_state: false,
        ..ForwardOptions::new(Mode::Train, Phase::One)
    };
    let mut a = toy_model(5);
    let mut b = toy_model(5);
    a.config.binary_act_bound = 3.0;
    b.config.binary_act_bound = 0.05;
    let (la, ga) = loss_grads(&mut a, &x, opts);
    let (lb, gb) = loss_grads(&mut b, &x, opts);
    assert_eq!(la, lb);
    assert_ne!(ga, gb);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = toy_model(6);
    let x = toy_batch(4, 6);
    model.forward(&x, Mode::Train, Phase::Two).unwrap();
    model.freeze_bounds();
    save_checkpoint(&model, &path).unwrap();
    let mut other = toy_model(7);
    assert_ne!(other.state_dict(), model.state_dict());
    load_checkpoint(&mut other, &path).unwrap();
    assert_eq!(other.state_dict(), model.state_dict());
    let a = model.forward(&x, Mode::Eval, Phase::Two).unwrap().logits().clone();
    let b = other.forward(&x, Mode::Eval, Phase::Two).unwrap().logits().clone();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = toy_model(8);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOTACKPT\0\0\0\0\0\0\0\0").unwrap();
    assert!(matches!(load_checkpoint(&mut model, &bad), Err(NnError::Checkpoint(_))));

    let good = dir.path().join("good.ckpt");
    save_checkpoint(&model, &good).unwrap();
    let bytes = std::fs::read(&good).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&mut model, &cut).is_err());
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let mut model = toy_model(9);
    let x = Tensor::zeros([1, 8, 8, 3]);
    assert!(matches!(model.forward(&x, Mode::Eval, Phase::One), Err(NnError::Shape(_))));
}
