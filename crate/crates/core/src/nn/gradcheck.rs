//! Central finite-difference checks of the tape's analytic gradients.
//!
//! For a builder `f` and inputs `x_k`, the scalar `L = Σ r · f(x)` with a
//! fixed random `r` is differentiated both ways. The error of input `k` is
//! `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖, NORM_FLOOR)` over a random subset of
//! coordinates; a check reports the maximum over inputs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::{self, BlockQuant, PokeConvParams};
use super::quantize::QuantForm;
use super::{Mode, NnError, Phase, Tape, Tensor, Var};
use crate::graphir::{Padding, ResidualMode};

pub const FD_STEP: f64 = 1e-6;

/// Gradients whose norm is below this are compared absolutely. Round-off in
/// the central difference is about `ε·|L|/h`, up to `1e-8` per coordinate for
/// block-level objectives, so an exactly-zero analytic gradient would
/// otherwise show a relative error of one.
pub const NORM_FLOOR: f64 = 1e-4;

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, NnError> + 'a;

/// Maximum normwise relative error over every input of `f`.
pub fn check_gradients(inputs: &[Tensor], f: &Builder, coords: usize, seed: u64) -> Result<f64, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var), NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let shape = tape.value(out).shape;
    let r = Tensor::uniform(shape, 1.0, &mut rng);
    let grads = tape.backward_with(out, r.clone())?;
    let objective = |xs: &[Tensor]| -> Result<f64, NnError> {
        let (t, _, o) = eval(xs)?;
        Ok(t.value(o).data.iter().zip(&r.data).map(|(a, b)| a * b).sum())
    };
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape);
        let analytic = grads.get(*v).unwrap_or(&zeros);
        let n = inputs[k].len();
        let picks = sample(&mut rng, n, coords.min(n));
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for i in picks.iter() {
            let mut xs = inputs.to_vec();
            xs[k].data[i] += FD_STEP;
            let plus = objective(&xs)?;
            xs[k].data[i] -= 2.0 * FD_STEP;
            let minus = objective(&xs)?;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data[i];
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
        }
        let err = diff.sqrt() / na.sqrt().max(nf.sqrt()).max(NORM_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Values in `[-1, 1)` kept at least `gap` away from every point of `kinks`.
fn away_from<R: Rng>(shape: [usize; 4], kinks: &[f64], gap: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::uniform(shape, 1.0, rng);
    for v in t.data.iter_mut() {
        while kinks.iter().any(|k| (*v - k).abs() < gap) {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    t
}

/// Result of one finite-difference suite.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Names of the suites run by [`run_suite`].
pub const SUITES: [&str; 13] = [
    "conv2d",
    "depthwise_conv2d",
    "dense",
    "batchnorm_train",
    "batchnorm_eval",
    "dprelu",
    "hardsigmoid",
    "se_path",
    "avg_pool",
    "spatial_mean",
    "reshape_add",
    "kl_loss",
    "pokeconv_surrogate",
];

/// Runs `instances` random instances of suite `op`.
pub fn run_suite(op: &'static str, instances: usize, seed: u64) -> Result<OpCheck, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(inst as u64);
        let err = match op {
            "conv2d" => {
                let (h, w, c, o) = (rng.gen_range(3..7), rng.gen_range(3..7), rng.gen_range(1..4), rng.gen_range(1..4));
                let k = rng.gen_range(1..4);
                let stride = rng.gen_range(1..3);
                let pad = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
                let x = Tensor::uniform([2, h, w, c], 1.0, &mut rng);
                let wt = Tensor::uniform([k, k, c, o], 1.0, &mut rng);
                check_gradients(&[x, wt], &|t, v| t.conv2d(v[0], v[1], stride, pad, 1), 24, s)?
            }
            "depthwise_conv2d" => {
                let c = rng.gen_range(1..4);
                let mult = rng.gen_range(1..3);
                let x = Tensor::uniform([2, 5, 5, c], 1.0, &mut rng);
                let wt = Tensor::uniform([3, 3, 1, c * mult], 1.0, &mut rng);
                check_gradients(&[x, wt], &|t, v| t.conv2d(v[0], v[1], 1, Padding::Same, c), 24, s)?
            }
            "dense" => {
                let (i, o) = (rng.gen_range(1..6), rng.gen_range(1..6));
                let x = Tensor::uniform([3, 1, 1, i], 1.0, &mut rng);
                let wt = Tensor::uniform([1, 1, i, o], 1.0, &mut rng);
                let b = Tensor::uniform([1, 1, 1, o], 1.0, &mut rng);
                check_gradients(&[x, wt, b], &|t, v| t.dense(v[0], v[1], Some(v[2])), 24, s)?
            }
            "batchnorm_train" | "batchnorm_eval" => {
                let c = rng.gen_range(1..4);
                let x = Tensor::uniform([3, 2, 2, c], 2.0, &mut rng);
                let sc = Tensor::uniform([1, 1, 1, c], 1.0, &mut rng);
                let bi = Tensor::uniform([1, 1, 1, c], 1.0, &mut rng);
                let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
                let train = op == "batchnorm_train";
                check_gradients(
                    &[x, sc, bi],
                    &|t, v| {
                        let mode = if train {
                            super::BnMode::Batch
                        } else {
                            super::BnMode::Running { mean: &mean, var: &var }
                        };
                        Ok(t.batchnorm(v[0], v[1], v[2], mode)?.0)
                    },
                    24,
                    s,
                )?
            }
            "dprelu" => {
                let c = rng.gen_range(1..4);
                let alpha = Tensor::uniform([1, 1, 1, c], 0.3, &mut rng);
                let mut x = Tensor::uniform([2, 3, 3, c], 1.0, &mut rng);
                for (i, v) in x.data.iter_mut().enumerate() {
                    while (*v - alpha.data[i % c]).abs() < 1e-3 {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                }
                let rest: Vec<Tensor> = (0..3).map(|_| Tensor::uniform([1, 1, 1, c], 1.0, &mut rng)).collect();
                let inputs = [x, alpha, rest[0].clone(), rest[1].clone(), rest[2].clone()];
                check_gradients(&inputs, &|t, v| t.dprelu(v[0], v[1], v[2], v[3], v[4]), 24, s)?
            }
            "hardsigmoid" => {
                let x = away_from([2, 1, 1, 5], &[-1.0, 1.0], 1e-3, &mut rng).map(|v| 4.0 * v);
                check_gradients(&[x], &|t, v| Ok(t.hardsigmoid(v[0])), 10, s)?
            }
            "se_path" => {
                let c = 8 * rng.gen_range(1..3);
                let out = rng.gen_range(1..5);
                let r = Tensor::uniform([2, 3, 3, c], 1.0, &mut rng);
                let w1 = Tensor::uniform([1, 1, c, c / 8], 1.0, &mut rng);
                let b1 = Tensor::uniform([1, 1, 1, c / 8], 1.0, &mut rng);
                let w2 = Tensor::uniform([1, 1, c / 8, out], 1.0, &mut rng);
                let b2 = Tensor::uniform([1, 1, 1, out], 1.0, &mut rng);
                let q = BlockQuant::new(Phase::One);
                check_gradients(
                    &[r, w1, b1, w2, b2],
                    &|t, v| {
                        let p = blocks::SeParams {
                            w1: v[1],
                            b1: v[2],
                            w2: v[3],
                            b2: v[4],
                        };
                        blocks::se_4b(t, v[0], &p, &q)
                    },
                    24,
                    s,
                )?
            }
            "avg_pool" => {
                let x = Tensor::uniform([2, 5, 4, 2], 1.0, &mut rng);
                let stride = rng.gen_range(1..3);
                check_gradients(&[x], &|t, v| t.avg_pool(v[0], 3, stride, Padding::Same, 9.0), 24, s)?
            }
            "spatial_mean" => {
                let x = Tensor::uniform([2, 3, 4, 3], 1.0, &mut rng);
                check_gradients(&[x], &|t, v| Ok(t.spatial_mean(v[0])), 24, s)?
            }
            "reshape_add" => {
                let (cx, cr, down) = [(4, 2, false), (4, 2, true), (2, 4, true), (3, 3, true), (6, 2, false)][inst % 5];
                let mode = if rng.gen_bool(0.5) { ResidualMode::Pad } else { ResidualMode::Tile };
                let rs = if down { 6 } else { 3 };
                let x = Tensor::uniform([2, 3, 3, cx], 1.0, &mut rng);
                let r = Tensor::uniform([2, rs, rs, cr], 1.0, &mut rng);
                check_gradients(&[x, r], &|t, v| blocks::reshape_add(t, v[0], v[1], mode), 24, s)?
            }
            "kl_loss" => {
                let k = rng.gen_range(2..6);
                let logits = Tensor::uniform([3, 1, 1, k], 2.0, &mut rng);
                let mut target = Tensor::uniform([3, 1, 1, k], 1.0, &mut rng).map(|v| v.abs() + 0.1);
                for row in target.data.chunks_exact_mut(k) {
                    let sum: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= sum);
                }
                check_gradients(&[logits], &|t, v| t.kl_loss(v[0], &target), 12, s)?
            }
            "pokeconv_surrogate" => pokeconv_check(&mut rng, s)?,
            other => return Err(NnError::Shape(format!("unknown gradient suite `{other}`"))),
        };
        worst = worst.max(err);
    }
    Ok(OpCheck {
        op,
        instances,
        max_rel_err: worst,
    })
}

/// Full PokeConv block with every quantizer replaced by its clipping surrogate.
fn pokeconv_check(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, NnError> {
    let c_in = 8;
    let ch = 8 * rng.gen_range(1..3);
    let stride = rng.gen_range(1..3);
    let mut init_tape = Tape::new();
    let p = PokeConvParams::init(&mut init_tape, c_in, ch, 3, rng)?;
    let x = away_from([2, 4, 4, c_in], &[0.0], 1e-2, rng);
    let r1 = Tensor::uniform([2, 4, 4, 8], 1.0, rng);
    let mut params: Vec<Tensor> = vec![x, r1];
    let leaves = [
        p.conv, p.bn1.scale, p.bn1.bias, p.act.alpha, p.act.beta, p.act.gamma, p.act.eta, p.se.w1, p.se.b1, p.se.w2,
        p.se.b2, p.bn2.scale, p.bn2.bias,
    ];
    for v in leaves {
        let mut t = init_tape.value(v).clone();
        // Move DPReLU and BN parameters off their symmetric initial values.
        t.data.iter_mut().for_each(|d| *d += rng.gen_range(-0.2..0.2));
        params.push(t);
    }
    let q = BlockQuant {
        phase: Phase::Two,
        form: QuantForm::Surrogate,
        binary_act_bound: 3.0,
        act_bounds: [4.0, 4.0],
        epsilon: crate::quant::DEFAULT_EPSILON,
    };
    check_gradients(
        &params,
        &|t, v| {
            let bn = |s: Var, b: Var, c: usize| blocks::BnParams {
                scale: s,
                bias: b,
                running_mean: vec![0.0; c],
                running_var: vec![1.0; c],
            };
            let p = PokeConvParams {
                conv: v[2],
                bn1: bn(v[3], v[4], ch),
                act: blocks::DprParams {
                    alpha: v[5],
                    beta: v[6],
                    gamma: v[7],
                    eta: v[8],
                },
                se: blocks::SeParams {
                    w1: v[9],
                    b1: v[10],
                    w2: v[11],
                    b2: v[12],
                },
                bn2: bn(v[13], v[14], ch),
            };
            blocks::pokeconv(t, v[0], Some(v[1]), stride, &p, Mode::Train, &q)
        },
        16,
        seed,
    )
}
