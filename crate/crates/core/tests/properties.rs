use proptest::prelude::*;
use rand::Rng as _;

use pilab::autodiff::{cross_entropy, gradient_check, one_hot, Tape};
use pilab::models::{
    afm_predict_with, distill_targets, sop_logits, tram_loss, MlpSpec, Network, NetworkSpec,
    PiTowerSpec, SopParams,
};
use pilab::pi::{self, PiKind, PiMatrix};
use pilab::relabel::{
    agreement, relabel_from_probs, select_policy, temper_distribution, AnnotatorMeta, Policy,
    Split,
};
use pilab::report::{aggregate, welch_p_value, CellInput, TraceRow};
use pilab::rng;
use pilab::train::{early_stop_select, EarlyStop, EpochRecord};
use pilab::Tensor;

fn random_net(seed: u64, hidden: Vec<usize>, pi_width: usize) -> Network {
    let mut net = Network::new(
        NetworkSpec {
            mlp: MlpSpec::new(3, hidden).unwrap(),
            classes: 3,
            tower: Some(PiTowerSpec { width: 5, pi_width }),
            no_pi_head: true,
        },
        seed,
    )
    .unwrap();
    let mut r = rng::stream(seed, "weights", 0);
    for id in net.store.ids().collect::<Vec<_>>() {
        for v in net.store.value_mut(id).data_mut() {
            *v = r.random_range(-0.9..0.9);
        }
    }
    net
}

fn matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut r = rng::from_seed(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn record(acc: f64) -> EpochRecord {
    EpochRecord {
        epoch: 0,
        lr: 0.1,
        train_loss: 0.0,
        val_acc: acc,
        clean_val_acc: acc,
        test_acc: 0.0,
        trace: TraceRow::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn network_gradients_match_finite_differences(seed in 0u64..10_000, lambda in 0.0f64..1.5) {
        let net = random_net(seed, vec![4], 2);
        let x = matrix(seed ^ 1, 5, 3);
        let a = matrix(seed ^ 2, 5, 2);
        let y: Vec<usize> = (0..5).map(|i| (seed as usize + i) % 3).collect();
        let t = one_hot(&y, 3).unwrap();
        // both heads on an unblocked representation: every parameter is reachable
        let err = gradient_check(&net.store, 1e-5, 1e-4, |tape, s| {
            let mut n = net.clone();
            n.store = s.clone();
            let xn = tape.leaf(x.clone());
            let an = tape.leaf(a.clone());
            let phi = n.features(tape, xn)?;
            let pi = n.pi_logits(tape, phi, an)?;
            let nopi = n.no_pi_logits(tape, phi)?;
            let l_pi = cross_entropy(tape, pi, &t)?;
            let l_nopi = cross_entropy(tape, nopi, &t)?;
            let w = tape.scale(l_nopi, lambda)?;
            tape.add(l_pi, w)
        })
        .unwrap();
        // ReLU kinks are not excluded here, so allow a looser bound than the op-level check
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn tram_phi_gradients_are_those_of_the_pi_loss(seed in 0u64..10_000, lambda in 0.0f64..1.5) {
        let net = random_net(seed, vec![4], 2);
        let x = matrix(seed ^ 1, 5, 3);
        let a = matrix(seed ^ 2, 5, 2);
        let t = one_hot(&[0, 1, 2, 2, 1], 3).unwrap();
        let mut tape = Tape::new();
        let loss = tram_loss(&net, &mut tape, &x, Some(&a), &t, lambda).unwrap();
        let g = tape.backward(loss).unwrap();
        let h = 1e-5;
        let pi_loss = |n: &Network| {
            let mut tp = Tape::new();
            let l = tram_loss(n, &mut tp, &x, Some(&a), &t, 0.0).unwrap();
            tp.value(l).item()
        };
        for id in net.phi_params() {
            let analytic = tape.param_grad(&g, &net.store, id);
            for k in 0..analytic.data().len() {
                let mut up = net.clone();
                up.store.value_mut(id).data_mut()[k] += h;
                let mut down = net.clone();
                down.store.value_mut(id).data_mut()[k] -= h;
                let numeric = (pi_loss(&up) - pi_loss(&down)) / (2.0 * h);
                let diff = (analytic.data()[k] - numeric).abs();
                prop_assert!(diff <= 1e-4 * analytic.data()[k].abs().max(numeric.abs()).max(1e-4));
            }
        }
    }

    #[test]
    fn phi_gradients_ignore_lambda(seed in 0u64..10_000, lambda in 0.0f64..5.0) {
        let net = random_net(seed, vec![6, 4], 2);
        let x = matrix(seed ^ 3, 8, 3);
        let a = matrix(seed ^ 4, 8, 2);
        let y: Vec<usize> = (0..8).map(|i| (i * 7 + seed as usize) % 3).collect();
        let t = one_hot(&y, 3).unwrap();
        let grads = |l: f64| {
            let mut tape = Tape::new();
            let loss = tram_loss(&net, &mut tape, &x, Some(&a), &t, l).unwrap();
            let g = tape.backward(loss).unwrap();
            net.phi_params().into_iter().map(|id| tape.param_grad(&g, &net.store, id)).collect::<Vec<_>>()
        };
        prop_assert_eq!(grads(0.0), grads(lambda));
    }

    #[test]
    fn psi_gradients_vanish_at_zero_lambda(seed in 0u64..10_000) {
        let net = random_net(seed, vec![4], 2);
        let x = matrix(seed ^ 5, 6, 3);
        let a = matrix(seed ^ 6, 6, 2);
        let t = one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let mut tape = Tape::new();
        let loss = tram_loss(&net, &mut tape, &x, Some(&a), &t, 0.0).unwrap();
        let g = tape.backward(loss).unwrap();
        for id in net.psi_params() {
            prop_assert!(tape.param_grad(&g, &net.store, id).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn afm_is_invariant_to_bank_order(seed in 0u64..10_000, rows in 1usize..20) {
        let net = random_net(seed, vec![4], 2);
        let x = matrix(seed ^ 7, 4, 3);
        let bank = PiMatrix::new(PiKind::RandomId, matrix(seed ^ 8, rows, 2));
        let forward: Vec<usize> = (0..rows).collect();
        let backward: Vec<usize> = (0..rows).rev().collect();
        let p = afm_predict_with(&net, &x, &bank, &forward).unwrap();
        let q = afm_predict_with(&net, &x, &bank, &backward).unwrap();
        prop_assert!(p.zip_map(&q, |a, b| (a - b).abs()).max_abs() < 1e-12);
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distillation_preserves_argmax(
        logits in prop::collection::vec(-8.0f64..8.0, 4),
        tau in 0.05f64..50.0,
    ) {
        let t = Tensor::from_vec(1, 4, logits.clone()).unwrap();
        let soft = distill_targets(&t, tau).unwrap();
        prop_assert_eq!(soft.argmax_rows(), t.argmax_rows());
        prop_assert!((soft.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tempering_at_one_is_identity(raw in prop::collection::vec(0.001f64..1.0, 2..8)) {
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let q = temper_distribution(&p, 1.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_ignores_cell_and_seed_order(
        accs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..6), 1..6),
        rotate in 0usize..6,
    ) {
        let cells: Vec<CellInput> = accs
            .iter()
            .enumerate()
            .map(|(i, a)| CellInput {
                group: "g".into(),
                method: format!("m{i}"),
                pi: "none".into(),
                accuracies: a.clone(),
            })
            .collect();
        let mut shuffled = cells.clone();
        shuffled.rotate_left(rotate % cells.len());
        for c in &mut shuffled {
            c.accuracies.reverse();
        }
        prop_assert_eq!(aggregate(&cells).unwrap(), aggregate(&shuffled).unwrap());
    }

    #[test]
    fn welch_is_symmetric(
        a in prop::collection::vec(0.0f64..1.0, 2..8),
        b in prop::collection::vec(0.0f64..1.0, 2..8),
    ) {
        let p = welch_p_value(&a, &b);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p - welch_p_value(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_never_picks_a_worse_epoch(accs in prop::collection::vec(0.0f64..1.0, 1..30)) {
        let history: Vec<EpochRecord> = accs.iter().map(|&a| record(a)).collect();
        let best = early_stop_select(&history, EarlyStop::NoisyVal).unwrap();
        prop_assert!(accs.iter().all(|&a| a <= accs[best]));
        prop_assert!(accs[..best].iter().all(|&a| a < accs[best]));
        prop_assert_eq!(early_stop_select(&history, EarlyStop::None).unwrap(), accs.len() - 1);
    }

    #[test]
    fn indicator_mean_is_one_minus_noise_rate(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
    ) {
        let (clean, noisy): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let ind = pi::indicator_pi(&clean, &noisy).unwrap();
        let mean = ind.values.sum() / ind.rows() as f64;
        prop_assert!((mean - agreement(&clean, &noisy)).abs() < 1e-12);
        let near = pi::near_optimal_pi(&clean, &noisy, 4).unwrap();
        prop_assert_eq!(near.rows(), clean.len());
        let degenerate = pi::near_optimal_pi(&clean, &clean, 4).unwrap();
        for r in 0..degenerate.rows() {
            prop_assert_eq!(degenerate.values.row(r), &[1.0, 0.0, 0.0, 0.0, 0.0][..]);
        }
    }

    #[test]
    fn worst_policy_agreement_is_all_correct_fraction(seed in 0u64..10_000) {
        let mut r = rng::from_seed(seed);
        let n = 50;
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let probs: Vec<Tensor> = (0..3).map(|m| matrix(seed + m, n, 3).map(f64::exp).softmax_rows()).collect();
        let metas = vec![AnnotatorMeta { accuracy: 0.5, parameters: 10 }; 3];
        let ids: Vec<u64> = (0..n as u64).collect();
        let rec = relabel_from_probs(&ids, &probs, metas, 1.0, &mut r).unwrap();
        let (noisy, _) = select_policy(&rec, &y, Policy::Worst, &mut r).unwrap();
        let all_correct = rec.labels.iter().zip(&y).filter(|(row, &yi)| row.iter().all(|&l| l == yi)).count();
        prop_assert!((agreement(&noisy, &y) - all_correct as f64 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn sop_residuals_vanish_at_equal_init(seed in 0u64..10_000, init in -1.0f64..1.0) {
        let mut net = random_net(seed, vec![4], 2);
        let sop = SopParams::new(&mut net.store, 6, 3, init);
        let mut tape = Tape::new();
        let f = tape.leaf(matrix(seed, 3, 3));
        let z = sop_logits(&mut tape, &net.store, &sop, f, &[0, 4, 5], Split::Train).unwrap();
        prop_assert_eq!(tape.value(z), &matrix(seed, 3, 3));
    }
}

#[test]
fn training_is_deterministic() {
    use pilab::methods::{self, MethodKind, MethodSettings};
    use pilab::relabel::SyntheticSpec;

    let spec = methods::PresetSpec {
        name: "tiny".into(),
        data: SyntheticSpec::new(3, 300, 4, 0.6, 12),
        test_size: 100,
        noise: methods::NoiseSpec::Flips { rate: 0.2 },
    };
    let bench = methods::build_benchmark(&spec, Default::default()).unwrap();
    let cfg = methods::desk_config().with_epochs(4);
    let s = MethodSettings::default();
    let run = || methods::run_method(&bench, MethodKind::Tram, Some(PiKind::Indicator), &cfg, &s, &[3]).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.runs[0].trace, b.runs[0].trace);
}
