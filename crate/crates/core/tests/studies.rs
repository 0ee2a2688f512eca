mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use replaylens::model::{
    decode_greedy, decode_with, forward_with_trace, make_tuned, perplexity, Checkpoint, DecodeMode, InputEdit,
    ModelConfig, ModelPair, MultimodalSequence, TaskSpec, TuneMode,
};
use replaylens::replay::{replay_optimize, ReplayConfig};
use replaylens::studies::{
    ablation_grid, pass_at_k, perturbation_sweep, spearman, splice_decode, ModelSampler, PassKReport,
    ProbeResponse, Sampler, SpliceMode,
};
use replaylens::Result;

fn corrupted_pair() -> (ModelPair, Vec<MultimodalSequence>) {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        vocab: 16,
        max_seq: 12,
        visual_dim: 6,
        d_ff: 32,
    };
    let spec = TaskSpec {
        visual_tokens: 4,
        digits: 2,
        visual_dim: 6,
        content_dims: 4,
        ..TaskSpec::default()
    };
    let base = Checkpoint::init(&cfg, 31).unwrap();
    let tuned = make_tuned(&base, &spec, &TuneMode::SeededCorruption { scale: 0.5, seed: 3 }).unwrap();
    let seqs = replaylens::model::held_out_sequences(&spec, 12);
    (ModelPair::new(base, tuned).unwrap(), seqs)
}

#[test]
fn self_splice_changes_nothing() {
    let (pair, seqs) = corrupted_pair();
    for seq in &seqs {
        let all: Vec<usize> = (0..seq.context_len()).collect();
        for mode in [SpliceMode::Layer0, SpliceMode::AllLayers] {
            let spliced = splice_decode(&pair.tuned, &pair.tuned, seq, &all, mode, DecodeMode::Greedy, 2).unwrap();
            assert_eq!(spliced, decode_greedy(&pair.tuned, seq, 2).unwrap());
        }
    }
}

#[test]
fn splicing_every_visual_input_restores_the_base_model() {
    // Corruption touches only the connector, so the base model's layer-0
    // visual rows are all that separates the two.
    let (pair, seqs) = corrupted_pair();
    for seq in &seqs {
        let visual: Vec<usize> = (0..seq.visual.len()).collect();
        let spliced = splice_decode(&pair.tuned, &pair.base, seq, &visual, SpliceMode::Layer0, DecodeMode::Greedy, 2)
            .unwrap();
        assert_eq!(spliced, decode_greedy(&pair.base, seq, 2).unwrap());
        let empty = splice_decode(&pair.tuned, &pair.base, seq, &[], SpliceMode::Layer0, DecodeMode::Greedy, 2).unwrap();
        assert_eq!(empty, decode_greedy(&pair.tuned, seq, 2).unwrap());
    }
    let bad = splice_decode(&pair.tuned, &pair.base, &seqs[0], &[99], SpliceMode::Layer0, DecodeMode::Greedy, 2);
    assert!(bad.is_err());
}

fn probes(seq: &MultimodalSequence) -> Vec<ProbeResponse> {
    let gold = seq.answer.clone().unwrap();
    (0..10)
        .map(|d| ProbeResponse {
            tokens: vec![d, gold[1]],
            correct: d == gold[0],
        })
        .collect()
}

#[test]
fn zero_noise_reproduces_the_clean_pipeline() {
    let (pair, seqs) = corrupted_pair();
    let seq = &seqs[0];
    let pr = probes(seq);
    let recs = perturbation_sweep(&pair.tuned, &pair.base, seq, &pr, &[0.0], &[1, 2], 0.4).unwrap();
    for r in &recs {
        assert_eq!(r.kl_shift_low, 0.0);
        assert_eq!(r.kl_shift_high, 0.0);
        for (p, probe) in r.perplexities.iter().zip(&pr) {
            assert_eq!(*p, perplexity(&pair.tuned, seq, &probe.tokens).unwrap());
        }
    }
    assert_eq!(recs[0].perplexities, recs[1].perplexities);
}

#[test]
fn perturbation_is_seeded() {
    let (pair, seqs) = corrupted_pair();
    let pr = probes(&seqs[1]);
    let run = || perturbation_sweep(&pair.tuned, &pair.base, &seqs[1], &pr, &[0.1, 0.5], &[0, 1], 0.4).unwrap();
    let a = run();
    assert_eq!(a, run());
    assert_ne!(a[0].perplexities, a[1].perplexities);
    assert_eq!(a.len(), 4);
    assert_eq!(a[0].correct.iter().filter(|&&c| c).count(), 1);
    assert!(perturbation_sweep(&pair.tuned, &pair.base, &seqs[1], &pr, &[-1.0], &[0], 0.4).is_err());
}

/// Succeeds independently with probability `p` on every draw.
struct Bernoulli {
    p: f64,
}

impl Sampler for Bernoulli {
    fn sample(&self, _task: usize, seq: &MultimodalSequence, seed: u64) -> Result<Vec<usize>> {
        let hit = ChaCha8Rng::seed_from_u64(seed).random::<f64>() < self.p;
        let gold = seq.answer.clone().unwrap();
        Ok(if hit { gold } else { vec![(gold[0] + 1) % 10, gold[1]] })
    }
}

#[test]
fn bernoulli_pass_at_k_matches_closed_form() {
    let (_, seqs) = corrupted_pair();
    let tasks: Vec<MultimodalSequence> = (0..500).map(|i| seqs[i % seqs.len()].clone()).collect();
    let r = pass_at_k(&Bernoulli { p: 0.3 }, &tasks, 8, 99).unwrap();
    for k in 1..=8 {
        let expect = 1.0 - 0.7f64.powi(k as i32);
        let se = (expect * (1.0 - expect) / 500.0).sqrt();
        assert!((r.pass(k) - expect).abs() < 3.0 * se, "Pass@{k} {} vs {expect}", r.pass(k));
    }
}

#[test]
fn model_sampler_prefixes_nest() {
    let (pair, seqs) = corrupted_pair();
    let sampler = ModelSampler {
        ckpt: &pair.tuned,
        replay: None,
        temperature: 1.0,
        max_new: 2,
    };
    let k8 = pass_at_k(&sampler, &seqs, 8, 5).unwrap();
    let k3 = pass_at_k(&sampler, &seqs, 3, 5).unwrap();
    for (a, b) in k8.correct.iter().zip(&k3.correct) {
        assert_eq!(&a[..3], &b[..]);
    }
    assert_eq!(&k8.pass_at[..3], &k3.pass_at[..]);
    assert!(PassKReport::svg(&[("plain", &k8), ("k3", &k3)]).contains("polyline"));

    let xs = vec![replaylens::Tensor::zeros(&[4, 16]); seqs.len()];
    let zeroed = ModelSampler {
        replay: Some(&xs),
        ..sampler
    };
    assert_eq!(pass_at_k(&zeroed, &seqs, 8, 5).unwrap(), k8);
}

proptest! {
    #[test]
    fn pass_at_k_is_nondecreasing(rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 1..30)) {
        let r = PassKReport::from_correct(rows).unwrap();
        for w in r.pass_at.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(r.pass_at.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn spearman_matches_rank_difference_formula(perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle()) {
        let a: Vec<f64> = (0..12).map(|i| (i as f64).sqrt()).collect();
        let b: Vec<f64> = perm.iter().map(|&i| i as f64 * 3.0 - 1.0).collect();
        let d2: f64 = perm.iter().enumerate().map(|(i, &p)| (i as f64 - p as f64).powi(2)).sum();
        let expect = 1.0 - 6.0 * d2 / (12.0 * (144.0 - 1.0));
        prop_assert!((spearman(&a, &b).unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn ablation_zero_step_column_is_the_baseline() {
    let (pair, seqs) = corrupted_pair();
    let r = ablation_grid(&pair, &seqs, &[0.4, 0.8], &[0.0, 5.0], &ReplayConfig::default()).unwrap();
    assert_eq!(r.cells.len(), 4);
    for t in 0..2 {
        assert_eq!(r.cell(t, 0).accuracy, Some(r.baseline));
        assert_eq!(r.cell(t, 0).delta, Some(0.0));
    }
    assert!(r.to_csv().lines().count() == 5);
}

#[test]
fn replayed_decoding_uses_the_optimized_tokens() {
    let (pair, seqs) = corrupted_pair();
    let cfg = ReplayConfig {
        tau: 1.0,
        ..ReplayConfig::default()
    };
    let state = replay_optimize(&pair, &seqs[2], &cfg).unwrap();
    let via_edit = decode_with(&pair.tuned, &seqs[2], &state.edit(), DecodeMode::Greedy, 2).unwrap();
    let direct = replaylens::replay::apply_and_decode(&pair.tuned, &seqs[2], &state.x, DecodeMode::Greedy, 2).unwrap();
    assert_eq!(via_edit, direct);
    let logits = forward_with_trace(&pair.tuned, &seqs[2], &[]).unwrap().logits;
    let edited = replaylens::model::forward_tokens(&pair.tuned, &seqs[2].visual, &seqs[2].text, &InputEdit::additive(state.x.clone()))
        .unwrap()
        .logits;
    assert_eq!(state.x.norm() > 0.0, logits != edited);
}
