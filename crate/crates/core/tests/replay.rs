mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use replaylens::lens::{entropy, kl_divergence, logit_lens, LensProfile};
use replaylens::model::{
    decode_with, forward_tokens, forward_with_trace, Checkpoint, DecodeMode, InputEdit, ModelPair,
    MultimodalSequence,
};
use replaylens::replay::{
    apply_and_decode, low_entropy_mask, lower_quantile, mask_for, mask_from_entropies, replay_objective,
    replay_optimize, static_threshold, MaskGranularity, Polarity, ReplayConfig, ReplayState, ThresholdMode,
};
use replaylens::Tensor;

fn pair(layers: usize, d: usize, seed: u64) -> ModelPair {
    let cfg = common::tiny_config(layers, d);
    let (b, t) = common::random_pair(&cfg, seed);
    ModelPair::new(b, t).unwrap()
}

fn random_x(n: usize, d: usize, scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn all_layers_mask(n_layers: usize, n: usize) -> replaylens::replay::Mask {
    replaylens::replay::Mask {
        cells: vec![vec![true; n]; n_layers + 1],
    }
}

proptest! {
    #[test]
    fn dynamic_mask_matches_pairwise_rule(
        rows in prop::collection::vec(prop::collection::vec(0f64..4.0, 6), 1..5),
        tau in 0.01f64..1.0,
    ) {
        let low = mask_from_entropies(&rows, tau, Polarity::Low).unwrap();
        let high = mask_from_entropies(&rows, tau, Polarity::High).unwrap();
        for (l, row) in rows.iter().enumerate() {
            for (i, &e) in row.iter().enumerate() {
                let selected = row.iter().any(|&other| e < tau * other);
                prop_assert_eq!(low.cells[l][i], selected);
                prop_assert_eq!(high.cells[l][i], !selected);
            }
        }
    }

    #[test]
    fn quantile_matches_sorted_index(values in prop::collection::vec(-10f64..10.0, 1..40), f in 0f64..=1.0) {
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = (f * (sorted.len() - 1) as f64).floor() as usize;
        prop_assert_eq!(lower_quantile(&values, f).unwrap(), sorted[idx]);
    }
}

#[test]
fn tau_one_keeps_all_but_the_maxima() {
    let rows = vec![vec![1.0, 3.0, 3.0, 0.5], vec![2.0, 2.0, 2.0, 2.0]];
    let m = mask_from_entropies(&rows, 1.0, Polarity::Low).unwrap();
    assert_eq!(m.cells, vec![vec![true, false, false, true], vec![false; 4]]);
    assert!(mask_from_entropies(&rows, 0.0, Polarity::Low).is_err());
}

#[test]
fn position_majority_repeats_the_vote() {
    let cfg = ReplayConfig {
        granularity: MaskGranularity::PositionMajority,
        ..ReplayConfig::default()
    };
    let p = pair(3, 8, 1);
    let seq = common::random_sequence(&p.base.config, 4, 2, 1);
    let profile = LensProfile::of_sequence(&p.base, &seq).unwrap();
    let per_layer = low_entropy_mask(&profile, cfg.tau, Polarity::Low).unwrap();
    let majority = mask_for(&profile, &cfg).unwrap();
    for i in 0..4 {
        let votes = (1..=3).filter(|&l| per_layer.cells[l][i]).count();
        for l in 0..=3 {
            assert_eq!(majority.cells[l][i], votes >= 2);
        }
    }
}

#[test]
fn static_threshold_is_the_pooled_quantile() {
    let p = pair(2, 8, 2);
    let seqs: Vec<MultimodalSequence> = (0..6)
        .map(|s| common::random_sequence(&p.base.config, 3, 1, s))
        .collect();
    let mut pooled = Vec::new();
    for s in &seqs {
        let trace = forward_with_trace(&p.base, s, &[]).unwrap().trace;
        for l in [1, 2] {
            for i in 0..3 {
                pooled.push(entropy(&logit_lens(&p.base, trace.hidden(l, i)).unwrap()).unwrap());
            }
        }
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let got = static_threshold(&seqs, &p.base, &[1, 2], 0.3).unwrap();
    assert_eq!(got, pooled[(0.3 * (pooled.len() - 1) as f64).floor() as usize]);

    let cfg = ReplayConfig {
        threshold_mode: ThresholdMode::Static,
        static_threshold: Some(got),
        ..ReplayConfig::default()
    };
    let profile = LensProfile::of_sequence(&p.base, &seqs[0]).unwrap();
    let m = mask_for(&profile, &cfg).unwrap();
    for l in 0..=2 {
        for i in 0..3 {
            assert_eq!(m.cells[l][i], profile.entropy[l][i] < got);
        }
    }
}

#[test]
fn objective_matches_recomputed_masked_kl() {
    for seed in 0..5 {
        let p = pair(2, 16, seed);
        let seq = common::random_sequence(&p.base.config, 4, 2, seed);
        let base_profile = LensProfile::of_sequence(&p.base, &seq).unwrap();
        let mask = low_entropy_mask(&base_profile, 0.9, Polarity::Low).unwrap();
        let x = random_x(4, 16, 0.5, seed);
        let obj = replay_objective(&p.tuned, &seq, &x, &base_profile, &mask, &[1, 2]).unwrap();

        let trace = forward_tokens(&p.tuned, &seq.visual, &seq.text, &InputEdit::additive(x.clone()))
            .unwrap()
            .trace;
        let mut expect = 0.0;
        for l in [1, 2] {
            for i in 0..4 {
                if mask.cells[l][i] {
                    let q = logit_lens(&p.tuned, trace.hidden(l, i)).unwrap();
                    expect += kl_divergence(base_profile.dist(l, i), &q).unwrap();
                }
            }
        }
        assert!((obj.value - expect).abs() < 1e-10, "{} vs {expect}", obj.value);
    }
}

#[test]
fn objective_gradient_matches_central_differences() {
    let p = pair(2, 16, 5);
    let seq = common::random_sequence(&p.base.config, 3, 2, 5);
    let base_profile = LensProfile::of_sequence(&p.base, &seq).unwrap();
    let mask = all_layers_mask(2, 3);
    let x = random_x(3, 16, 0.3, 5);
    let layers = [1, 2];
    let obj = replay_objective(&p.tuned, &seq, &x, &base_profile, &mask, &layers).unwrap();
    let h = 1e-3;
    let f = |x: &Tensor| replay_objective(&p.tuned, &seq, x, &base_profile, &mask, &layers).unwrap().value;
    for j in 0..x.len() {
        let at = |d: f64| {
            let mut y = x.clone();
            y.data_mut()[j] += d;
            f(&y)
        };
        let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        let g = obj.grad.data()[j];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
        assert!(rel < 1e-6, "coord {j}: {g} vs {fd}");
    }
}

#[test]
fn empty_mask_gives_zero_objective_and_no_motion() {
    let p = pair(2, 8, 3);
    let seq = common::random_sequence(&p.base.config, 3, 1, 3);
    let profile = LensProfile::of_sequence(&p.base, &seq).unwrap();
    let empty = replaylens::replay::Mask {
        cells: vec![vec![false; 3]; 3],
    };
    let obj = replay_objective(&p.tuned, &seq, &Tensor::zeros(&[3, 8]), &profile, &empty, &[1, 2]).unwrap();
    assert_eq!(obj.value, 0.0);
    assert_eq!(obj.grad, Tensor::zeros(&[3, 8]));
    let cfg = ReplayConfig {
        tau: 1e-9,
        ..ReplayConfig::default()
    };
    let state = replay_optimize(&p, &seq, &cfg).unwrap();
    assert_eq!(state.x, Tensor::zeros(&[3, 8]));
    assert_eq!(state.history, vec![0.0, 0.0]);
}

#[test]
fn zero_tokens_leave_decoding_bit_identical() {
    let p = pair(2, 8, 4);
    for s in 0..10 {
        let seq = common::random_sequence(&p.base.config, 3, 2, s);
        let zeros = Tensor::zeros(&[3, 8]);
        let plain = forward_tokens(&p.tuned, &seq.visual, &seq.text, &InputEdit::none()).unwrap();
        let edited = forward_tokens(&p.tuned, &seq.visual, &seq.text, &InputEdit::additive(zeros.clone())).unwrap();
        assert_eq!(plain.logits, edited.logits);
        assert_eq!(plain.trace, edited.trace);
        for mode in [DecodeMode::Greedy, DecodeMode::Sample { temperature: 1.0, seed: s }] {
            assert_eq!(
                decode_with(&p.tuned, &seq, &InputEdit::none(), mode, 4).unwrap(),
                apply_and_decode(&p.tuned, &seq, &zeros, mode, 4).unwrap()
            );
        }
    }
}

#[test]
fn zero_step_size_keeps_the_baseline() {
    let p = pair(2, 8, 6);
    let seq = common::random_sequence(&p.base.config, 3, 1, 6);
    for backtracking in [true, false] {
        let cfg = ReplayConfig {
            alpha: 0.0,
            tau: 1.0,
            backtracking,
            ..ReplayConfig::default()
        };
        let state = replay_optimize(&p, &seq, &cfg).unwrap();
        assert_eq!(state.x, Tensor::zeros(&[3, 8]));
        assert_eq!(state.initial_objective(), state.final_objective());
    }
}

#[test]
fn accepted_steps_strictly_descend() {
    for seed in 0..20 {
        let p = pair(2, 16, seed);
        let seq = common::random_sequence(&p.base.config, 4, 2, seed);
        let cfg = ReplayConfig {
            tau: 1.0,
            alpha: 4.0,
            steps: 8,
            ..ReplayConfig::default()
        };
        let s = replay_optimize(&p, &seq, &cfg).unwrap();
        assert!(s.history.len() > s.step_sizes.len());
        for w in s.history.windows(2).take(s.step_sizes.len()) {
            assert!(w[1] < w[0], "seed {seed}: {:?}", s.history);
        }
        assert!(s.final_objective().unwrap() <= s.initial_objective().unwrap());
    }
}

#[test]
fn replay_is_deterministic_and_persists() {
    let p = pair(2, 8, 8);
    let seq = common::random_sequence(&p.base.config, 3, 2, 8);
    let cfg = ReplayConfig {
        tau: 1.0,
        ..ReplayConfig::default()
    };
    let a = replay_optimize(&p, &seq, &cfg).unwrap();
    let b = replay_optimize(&p, &seq, &cfg).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    a.save(&path).unwrap();
    assert_eq!(ReplayState::load(&path).unwrap(), a);
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let p = pair(2, 8, 9);
    let seq = common::random_sequence(&p.base.config, 3, 1, 9);
    for cfg in [
        ReplayConfig { tau: 0.0, ..ReplayConfig::default() },
        ReplayConfig { alpha: -1.0, ..ReplayConfig::default() },
        ReplayConfig { steps: 0, ..ReplayConfig::default() },
        ReplayConfig { layer_set: Some(vec![5]), ..ReplayConfig::default() },
        ReplayConfig { threshold_mode: ThresholdMode::Static, ..ReplayConfig::default() },
    ] {
        assert!(matches!(replay_optimize(&p, &seq, &cfg), Err(replaylens::Error::Contract(_))));
    }
}
