mod common;

use common::toy;
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtfgraph::beamformer::{mvdr_weights, BeamWeights};
use rtfgraph::error::Error;
use rtfgraph::gcn::{
    forward, gcn_forward, infer, load_checkpoint, message, save_checkpoint, train, Adam, CheckpointMeta, GcnParams,
    InMemoryExamples, LinearSchedule, Mode, Node, TrainConfig,
};
use rtfgraph::graph::{attach_query, leave_one_out, FeatureBank, QueryAttachment};
use rtfgraph::linalg::HermitianMatrix;
use rtfgraph::objective::{evaluate, Objective};
use rtfgraph::rtf::{feature_to_rtf, npm_features, RtfFeature};

fn flatten(p: &GcnParams) -> Vec<f64> {
    p.slices().concat()
}

fn unflatten(d: usize, x: &[f64]) -> GcnParams {
    let mut p = GcnParams::zeros(d);
    let mut at = 0;
    for s in p.slices_mut() {
        s.copy_from_slice(&x[at..at + s.len()]);
        at += s.len();
    }
    p
}

/// Straight loops over `out x in` weights.
fn mlp_oracle(p: &GcnParams, x: &[f64]) -> Vec<f64> {
    let layer = |w: &Array2<f64>, b: &[f64], v: &[f64], relu: bool| -> Vec<f64> {
        (0..w.nrows())
            .map(|o| {
                let mut s = b[o];
                for i in 0..w.ncols() {
                    s += w[[o, i]] * v[i];
                }
                if relu {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect()
    };
    let h1 = layer(&p.w1, p.b1.as_slice().unwrap(), x, true);
    let h2 = layer(&p.w2, p.b2.as_slice().unwrap(), &h1, true);
    layer(&p.w3, p.b3.as_slice().unwrap(), &h2, false)
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn message_matches_loop_oracle() {
    let d = 6;
    let p = GcnParams::he_uniform(d, 4);
    let mut r = common::rng(1);
    for _ in 0..10 {
        let c = random_vec(d, &mut r);
        let n = random_vec(d, &mut r);
        let got = message(&p, &c, &n).unwrap();
        let want = mlp_oracle(&p, &[c.clone(), n.clone()].concat());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn aggregation_is_mean_of_messages() {
    let d = 4;
    let p = GcnParams::he_uniform(d, 9);
    let mut r = common::rng(2);
    let c = random_vec(d, &mut r);
    let ns: Vec<Vec<f64>> = (0..5).map(|_| random_vec(d, &mut r)).collect();
    let keyed: Vec<(usize, &[f64])> = ns.iter().enumerate().map(|(i, n)| (i, n.as_slice())).collect();
    let got = gcn_forward(&p, &c, &keyed).unwrap();
    let mut want = vec![0.0; d];
    for n in &ns {
        let m = mlp_oracle(&p, &[c.clone(), n.clone()].concat());
        want.iter_mut().zip(m).for_each(|(w, v)| *w += v / 5.0);
    }
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identity_weights_pass_positive_inputs() {
    // W1 = I, W2 = I, W3 = [0 I]: the message is the neighbor itself when all
    // entries are positive
    let d = 3;
    let mut p = GcnParams::zeros(d);
    for i in 0..2 * d {
        p.w1[[i, i]] = 1.0;
        p.w2[[i, i]] = 1.0;
    }
    for i in 0..d {
        p.w3[[i, d + i]] = 1.0;
    }
    let a = [0.1, 0.2, 0.3];
    let b = [1.0, 2.0, 4.0];
    let out = gcn_forward(&p, &[5.0, 5.0, 5.0], &[(7, &a), (2, &b)]).unwrap();
    assert_eq!(out, vec![0.55, 1.1, 2.15]);
}

#[test]
fn shifted_identity_reproduces_an_affine_map() {
    // b1 lifts inputs in [-1, 1] clear of the ReLU kink and b3 removes the
    // lift again, so the message is A x + B y + c
    let d = 4;
    let shift = 2.0;
    let mut r = common::rng(21);
    let a = Array2::from_shape_fn((d, d), |_| r.random_range(-1.0..1.0));
    let b = Array2::from_shape_fn((d, d), |_| r.random_range(-1.0..1.0));
    let c = random_vec(d, &mut r);
    let mut p = GcnParams::zeros(d);
    for i in 0..2 * d {
        p.w1[[i, i]] = 1.0;
        p.b1[i] = shift;
        p.w2[[i, i]] = 1.0;
    }
    for o in 0..d {
        p.b3[o] = c[o];
        for i in 0..d {
            p.w3[[o, i]] = a[[o, i]];
            p.w3[[o, d + i]] = b[[o, i]];
            p.b3[o] -= shift * (a[[o, i]] + b[[o, i]]);
        }
    }
    for _ in 0..3 {
        let x = random_vec(d, &mut r);
        let y = random_vec(d, &mut r);
        let m = message(&p, &x, &y).unwrap();
        for o in 0..d {
            let want: f64 = c[o] + (0..d).map(|i| a[[o, i]] * x[i] + b[[o, i]] * y[i]).sum::<f64>();
            assert!((m[o] - want).abs() < 1e-12, "{} vs {want}", m[o]);
        }
    }
}

#[test]
fn bias_output_is_independent_of_inputs() {
    let mut p = GcnParams::zeros(4);
    p.b3 = ndarray::Array1::from(vec![1.0, -2.0, 0.25, 3.0]);
    let mut r = common::rng(5);
    for k in 1..6 {
        let ns: Vec<Vec<f64>> = (0..k).map(|_| random_vec(4, &mut r)).collect();
        let keyed: Vec<(usize, &[f64])> = ns.iter().enumerate().map(|(i, n)| (i, n.as_slice())).collect();
        assert_eq!(gcn_forward(&p, &random_vec(4, &mut r), &keyed).unwrap(), vec![1.0, -2.0, 0.25, 3.0]);
    }
}

proptest! {
    #[test]
    fn neighbor_order_does_not_change_output(seed in 0u64..1000, k in 1usize..8) {
        let d = 5;
        let p = GcnParams::he_uniform(d, seed);
        let mut r = common::rng(seed + 1);
        let c = random_vec(d, &mut r);
        let ns: Vec<Vec<f64>> = (0..k).map(|_| random_vec(d, &mut r)).collect();
        let mut keyed: Vec<(usize, &[f64])> = ns.iter().enumerate().map(|(i, n)| (10 * i + 3, n.as_slice())).collect();
        let a = gcn_forward(&p, &c, &keyed).unwrap();
        keyed.shuffle(&mut r);
        let b = gcn_forward(&p, &c, &keyed).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn weighted_output(p: &GcnParams, nodes: &[Node], weights: &Array2<f64>, seed: Option<u64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let mode = match seed {
        Some(_) => Mode::Train {
            dropout: 0.5,
            rng: &mut rng,
        },
        None => Mode::Eval,
    };
    let (out, _) = forward(p, nodes, mode).unwrap();
    (&out * weights).sum()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let d = 4;
    let mut r = common::rng(11);
    let centers: Vec<Vec<f64>> = (0..3).map(|_| random_vec(d, &mut r)).collect();
    let ns: Vec<Vec<f64>> = (0..7).map(|_| random_vec(d, &mut r)).collect();
    let nodes: Vec<Node> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| Node {
            center: c,
            neighbors: (0..2 + i).map(|j| (j, ns[(i + j) % 7].as_slice())).collect(),
        })
        .collect();
    let weights = Array2::from_shape_fn((3, d), |_| r.random_range(-1.0..1.0));
    for seed in [None, Some(3)] {
        // nonzero biases keep pre-activations off the ReLU kink when dropout
        // zeroes a whole hidden row
        let mut p = GcnParams::he_uniform(d, 21);
        for b in [&mut p.b1, &mut p.b2, &mut p.b3] {
            b.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let mode = match seed {
            Some(_) => Mode::Train {
                dropout: 0.5,
                rng: &mut rng,
            },
            None => Mode::Eval,
        };
        let (_, mut tape) = forward(&p, &nodes, mode).unwrap();
        let grad = flatten(&tape.backward(&p, weights.view()).unwrap());
        let x = flatten(&p);
        let coords: Vec<usize> = (0..x.len()).collect();
        let mut f = |v: &[f64]| weighted_output(&unflatten(d, v), &nodes, &weights, seed);
        let err = common::fd_max_rel_err(&mut f, &x, &grad, &coords, 1e-6, 1e-4);
        assert!(err < 1e-6, "dropout {seed:?}: rel err {err:e}");
    }
}

#[test]
fn zero_output_gradient_gives_zero_parameter_gradient() {
    let p = GcnParams::he_uniform(3, 2);
    let n = [0.3, -0.2, 0.9];
    let node = Node {
        center: &[1.0, 0.0, -1.0],
        neighbors: vec![(0, &n)],
    };
    let (out, mut tape) = forward(&p, &[node], Mode::Eval).unwrap();
    let g = tape.backward(&p, Array2::zeros(out.dim()).view()).unwrap();
    assert!(flatten(&g).iter().all(|v| *v == 0.0));
}

#[test]
fn duplicated_neighbor_splits_gradient() {
    // k copies of one neighbor produce the same output and gradient as one
    let p = GcnParams::he_uniform(3, 8);
    let n = [0.5, 0.1, -0.4];
    let c = [0.2, 0.2, 0.2];
    let g = Array2::from_shape_vec((1, 3), vec![1.0, -0.5, 2.0]).unwrap();
    let run = |k: usize| {
        let node = Node {
            center: &c,
            neighbors: (0..k).map(|i| (i, n.as_slice())).collect(),
        };
        let (out, mut tape) = forward(&p, &[node], Mode::Eval).unwrap();
        (out, flatten(&tape.backward(&p, g.view()).unwrap()))
    };
    let (o1, g1) = run(1);
    let (o5, g5) = run(5);
    for (a, b) in o1.iter().zip(o5.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in g1.iter().zip(&g5) {
        assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn dropout_zero_training_matches_eval() {
    let p = GcnParams::he_uniform(3, 6);
    let n = [0.5, 0.1, -0.4];
    let node = || Node {
        center: &[0.1, 0.9, 0.3],
        neighbors: vec![(1, &n), (4, &n)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, _) = forward(&p, &[node()], Mode::Eval).unwrap();
    let (b, _) = forward(
        &p,
        &[node()],
        Mode::Train {
            dropout: 0.0,
            rng: &mut rng,
        },
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn schedule_warms_up_then_decays() {
    let s = LinearSchedule::new(2e-3, 0.1, 95);
    assert_eq!(s.warmup, 10);
    let lrs: Vec<f64> = (0..=95).map(|t| s.lr(t)).collect();
    assert!(lrs[..10].windows(2).all(|w| w[1] > w[0]));
    assert!((lrs[10] - 2e-3).abs() < 1e-15);
    assert!(lrs[10..].windows(2).all(|w| w[1] < w[0]));
    assert_eq!(lrs[95], 0.0);
    assert!((lrs[5] - 1e-3).abs() < 1e-15);
    assert!((lrs[50] - 2e-3 * 45.0 / 85.0).abs() < 1e-15);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = GcnParams::zeros(2);
    let mut g = GcnParams::zeros(2);
    g.w1.fill(3.0);
    g.b3.fill(-0.01);
    let mut adam = Adam::new(2);
    adam.step(&mut p, &g, 0.1);
    assert!(p.w1.iter().all(|v| (v + 0.1).abs() < 1e-8));
    assert!(p.b3.iter().all(|v| (v - 0.1).abs() < 1e-6));
    assert!(p.w2.iter().all(|v| *v == 0.0));
}

/// A small bank of toy positions; each training example is a noisy copy of
/// one position attached to the remaining ones.
fn toy_problem(n: usize, noise: f64, seed: u64) -> (FeatureBank, InMemoryExamples) {
    let pairs: Vec<_> = (0..n as u64).map(|i| toy::example(seed * 100 + i, 1200)).collect();
    let oracles: Vec<RtfFeature> = pairs.iter().map(|(_, o)| o.clone()).collect();
    let bank = FeatureBank::new((0..n).collect(), &oracles).unwrap();
    let mut r = common::rng(seed);
    let items = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (ex, o))| {
            let data = o.data().iter().map(|v| v + noise * r.random_range(-1.0..1.0)).collect();
            let noisy = RtfFeature::new(o.l_uncausal(), o.l_causal(), o.mics(), o.ref_index(), data).unwrap();
            (leave_one_out(&bank, i, &noisy, 3).unwrap(), ex)
        })
        .collect();
    (bank, InMemoryExamples { items })
}

#[test]
fn feature_mse_training_reduces_loss() {
    for seed in 0..5 {
        let (bank, set) = toy_problem(8, 0.05, seed);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 15,
            dropout_p: 0.0,
            seed,
            loss: Objective::FeatureMse,
            validation: Objective::FeatureMse,
            ..TrainConfig::default()
        };
        let (_, log) = train(&bank, &set, None::<&InMemoryExamples>, &cfg).unwrap();
        let first = log.epochs[0].train_objective;
        let last = log.epochs.last().unwrap().train_objective;
        assert!(last < 0.5 * first, "seed {seed}: {first} -> {last}");
        assert_eq!(log.steps, 15 * 8);
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (bank, set) = toy_problem(6, 0.05, 7);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 3,
        dropout_p: 0.5,
        seed: 12,
        loss: Objective::Sisdr2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let (a, la) = train(&bank, &set, Some(&set), &cfg).unwrap();
    let (b, lb) = train(&bank, &set, Some(&set), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let other = TrainConfig { seed: 13, ..cfg };
    let (c, _) = train(&bank, &set, Some(&set), &other).unwrap();
    assert_ne!(a, c);
}

#[test]
fn best_validation_epoch_is_returned() {
    let (bank, set) = toy_problem(6, 0.05, 3);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 4,
        dropout_p: 0.0,
        seed: 1,
        loss: Objective::FeatureMse,
        validation: Objective::Sisdr2,
        ..TrainConfig::default()
    };
    let (p, log) = train(&bank, &set, Some(&set), &cfg).unwrap();
    let best = log
        .epochs
        .iter()
        .map(|e| e.validation.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(log.epochs[log.best_epoch].validation.unwrap(), best);
    let mut total = 0.0;
    for (att, ex) in &set.items {
        total += evaluate(Objective::Sisdr2, ex, &infer(&p, &bank, att).unwrap()).unwrap().value;
    }
    assert!((total / set.items.len() as f64 - best).abs() < 1e-9);
}

#[test]
fn invalid_configs_rejected() {
    let (bank, set) = toy_problem(4, 0.05, 1);
    for cfg in [
        TrainConfig { dropout_p: 1.0, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
    ] {
        assert!(train(&bank, &set, None::<&InMemoryExamples>, &cfg).is_err());
    }
}

#[test]
fn infer_with_self_only_attachment() {
    let (_, o) = toy::example(1, 1200);
    let bank = FeatureBank::new(vec![0], std::slice::from_ref(&o)).unwrap();
    let mut p = GcnParams::zeros(o.dim());
    p.b3.fill(0.5);
    let out = infer(&p, &bank, &QueryAttachment::self_only(o.clone())).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.5));
    assert_eq!(out.rows(), o.rows());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bgtc");
    let p = GcnParams::he_uniform(6, 5);
    let meta = CheckpointMeta {
        d: 6,
        k: 5,
        m: 5,
        loss: Objective::Stoi,
        seed: 5,
        epoch: 2,
    };
    save_checkpoint(&path, &p, &meta).unwrap();
    let (q, m) = load_checkpoint(&path).unwrap();
    assert_eq!(q, p);
    assert_eq!(m, meta);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    assert!(load_checkpoint(dir.path().join("missing.bgtc")).is_err());
}

#[test]
fn checkpoint_rejects_mismatched_metadata() {
    let p = GcnParams::he_uniform(4, 1);
    let meta = CheckpointMeta {
        d: 5,
        k: 5,
        m: 5,
        loss: Objective::Sbf,
        seed: 0,
        epoch: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(save_checkpoint(dir.path().join("x"), &p, &meta).is_err());
}

#[test]
fn one_epoch_on_five_examples_lowers_loss() {
    for seed in 0..5 {
        let (bank, set) = toy_problem(5, 0.05, 40 + seed);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            dropout_p: 0.0,
            seed,
            loss: Objective::FeatureMse,
            validation: Objective::FeatureMse,
            ..TrainConfig::default()
        };
        let (_, log) = train(&bank, &set, None::<&InMemoryExamples>, &cfg).unwrap();
        let (a, b) = (log.epochs[0].train_objective, log.epochs[1].train_objective);
        assert!(b < a, "seed {seed}: {a} -> {b}");
    }
}

#[test]
fn zero_network_steers_at_the_reference_channel() {
    let (bank, set) = toy_problem(5, 0.05, 2);
    let f = infer(&GcnParams::zeros(bank.dim()), &bank, &set.items[0].0).unwrap();
    assert_eq!((f.rows(), f.dim()), (toy::M - 1, bank.dim()));
    assert!(f.data().iter().all(|v| *v == 0.0));
    let h = feature_to_rtf(&f, toy::K).unwrap();
    let phi = vec![HermitianMatrix::identity(toy::M); toy::K];
    let w = mvdr_weights(&h, &phi).unwrap();
    let sel = BeamWeights::reference_selector(toy::K, toy::M, toy::REF).unwrap();
    for (a, b) in w.data().iter().zip(sel.data()) {
        assert!((a - b).norm() < 1e-15);
    }
}

#[test]
fn rows_share_one_set_of_weights() {
    let (bank, set) = toy_problem(6, 0.05, 9);
    let p = GcnParams::he_uniform(bank.dim(), 4);
    let att = &set.items[2].0;
    let out = infer(&p, &bank, att).unwrap();
    assert_eq!(out.rows(), toy::M - 1);
    let mut rev: Vec<usize> = (0..out.rows()).collect();
    rev.reverse();
    for row in rev {
        let alone = gcn_forward(&p, att.query.row(row), &att.neighbor_features(&bank, row)).unwrap();
        assert_eq!(alone.as_slice(), out.row(row));
    }
}

#[test]
fn trained_network_beats_untrained_on_held_out_clean_queries() {
    let (bank, set) = toy_problem(8, 0.05, 11);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 15,
        dropout_p: 0.0,
        seed: 11,
        loss: Objective::FeatureMse,
        validation: Objective::FeatureMse,
        ..TrainConfig::default()
    };
    let (trained, _) = train(&bank, &set, None::<&InMemoryExamples>, &cfg).unwrap();
    let untrained = GcnParams::he_uniform(bank.dim(), 11);
    let (mut a, mut b) = (0.0, 0.0);
    for i in 0..4 {
        let (_, clean) = toy::example(5000 + i, 1200);
        let att = attach_query(&bank, &clean, 3).unwrap();
        a += npm_features(&infer(&trained, &bank, &att).unwrap(), &clean).unwrap().mean;
        b += npm_features(&infer(&untrained, &bank, &att).unwrap(), &clean).unwrap().mean;
    }
    assert!(a <= b, "trained {a} vs untrained {b}");
}
