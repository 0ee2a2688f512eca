use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use replaylens::lens::{heatmap_from_profiles, top_prediction_shift, PairProfile};
use replaylens::model::{
    decode_greedy, held_out_sequences, is_correct, make_tuned, read_jsonl, train_toy, vocab, Checkpoint,
    DecodeMode, ModelPair, MultimodalSequence,
};
use replaylens::replay::{apply_and_decode, low_entropy_mask, replay_with_profile, Polarity};
use replaylens::studies::{
    ablation_grid, intervene_decode, pass_at_k, perturbation_sweep, spearman, InterventionSpec, ModelSampler,
    PassKReport, ProbeResponse,
};
use replaylens::lens::LensProfile;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{Manifest, RunOutput};

pub const COMMANDS: [&str; 7] = [
    "train-pair",
    "lens-report",
    "replay-eval",
    "intervene",
    "perturb",
    "passk",
    "ablate",
];

/// Runs `command` with a fully resolved config, writing into `out`.
pub fn run(command: &str, config: &RunConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    match command {
        "train-pair" => train_pair(config, out),
        "lens-report" => lens_report(config, out),
        "replay-eval" => replay_eval(config, out),
        "intervene" => intervene(config, out),
        "perturb" => perturb(config, out),
        "passk" => passk(config, out),
        "ablate" => ablate(config, out),
        other => Err(CliError::Config(format!("unknown command {other:?}"))),
    }
}

/// Reruns the command a manifest records into `out` and checks that every
/// output hashes the same.
pub fn rerun(manifest_path: &Path, out: &Path) -> Result<Manifest> {
    let recorded = Manifest::load(manifest_path)?;
    recorded.check_inputs()?;
    let fresh = run(&recorded.command, &recorded.config, out)?;
    if fresh.outputs != recorded.outputs {
        let differing: Vec<String> = fresh
            .outputs
            .iter()
            .filter(|f| !recorded.outputs.contains(f))
            .map(|f| f.path.display().to_string())
            .collect();
        return Err(CliError::Mismatch(format!(
            "outputs differ from {}: {}",
            manifest_path.display(),
            differing.join(", ")
        )));
    }
    Ok(fresh)
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("row serializes");
        buf.push(b'\n');
    }
    buf
}

fn load_pair(config: &RunConfig, out: &mut RunOutput) -> Result<ModelPair> {
    let dir = config
        .pair_dir
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs pair_dir (or --pair)".into()))?;
    let load = |name: &str, out: &mut RunOutput| -> Result<Checkpoint> {
        let path = dir.join(name);
        let ckpt = Checkpoint::load(&path).map_err(|e| CliError::reading(&path, e))?;
        out.add_input(&path)?;
        Ok(ckpt)
    };
    let base = load("base.ckpt", out)?;
    let tuned = load("tuned.ckpt", out)?;
    ModelPair::new(base, tuned).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn load_dataset(config: &RunConfig, out: &mut RunOutput) -> Result<Vec<MultimodalSequence>> {
    let seqs = match &config.dataset {
        Some(path) => {
            let seqs = read_jsonl(path).map_err(|e| CliError::reading(path, e))?;
            out.add_input(path)?;
            if seqs.is_empty() {
                return Err(CliError::Data(format!("dataset {} is empty", path.display())));
            }
            seqs
        }
        None => held_out_sequences(&config.task, config.dataset_size),
    };
    if let Some(i) = seqs.iter().position(|s| s.answer.is_none()) {
        return Err(CliError::Data(format!("task {i} has no gold answer")));
    }
    Ok(seqs)
}

fn answer(seq: &MultimodalSequence) -> &[usize] {
    seq.answer.as_deref().expect("checked on load")
}

fn accuracy(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

fn summary_csv(rows: &[(&str, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

fn train_pair(config: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut out = RunOutput::new(dir);
    let report = match train_toy(&config.model, &config.task, &config.train, config.seed) {
        Ok(r) => r,
        Err(replaylens::Error::Training {
            accuracy,
            steps,
            loss_curve,
        }) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            let path = dir.join("loss_curve.csv");
            replaylens::container::write_atomic(&path, loss_csv(&loss_curve).as_bytes())
                .map_err(|e| CliError::reading(&path, e))?;
            return Err(CliError::Numeric(format!(
                "training reached held-out accuracy {accuracy:.3} after {steps} steps (need {}); loss curve written to {}",
                config.train.min_accuracy,
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let base = report.checkpoint;
    let tuned = make_tuned(&base, &config.task, &config.tune)?;
    let held = held_out_sequences(&config.task, config.train.held_out_tasks);
    let tuned_accuracy = replaylens::model::greedy_accuracy(&tuned, &held)?;
    out.add("base.ckpt", base.to_bytes()?);
    out.add("tuned.ckpt", tuned.to_bytes()?);
    out.add("loss_curve.csv", loss_csv(&report.loss_curve));
    let summary = json!({
        "held_out_accuracy": report.held_out_accuracy,
        "tuned_held_out_accuracy": tuned_accuracy,
        "final_loss": report.loss_curve.last(),
    });
    out.finish("train-pair", config, summary)
}

fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

fn lens_report(config: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut out = RunOutput::new(dir);
    let pair = load_pair(config, &mut out)?;
    let seqs = load_dataset(config, &mut out)?;
    let layers = pair.base.config.layers;
    let mut profiles = Vec::with_capacity(seqs.len());
    let mut rows = Vec::with_capacity(seqs.len());
    let mut shifted = 0.0;
    for (i, s) in seqs.iter().enumerate() {
        let p = PairProfile::of_sequence(&pair, s)?;
        let shift = top_prediction_shift(&p.base, &p.tuned, 1)?;
        let low = low_entropy_mask(&p.base, config.replay.tau, Polarity::Low)?;
        shifted += shift.rate;
        rows.push(json!({
            "task": i,
            "mean_visual_kl": (0..=layers).map(|l| p.mean_visual_kl([l])).collect::<Vec<_>>(),
            "low_entropy_cells": low.count_in(&(1..=layers).collect::<Vec<_>>()),
            "top1_shift_rate": shift.rate,
        }));
        profiles.push(p);
    }
    let hm = heatmap_from_profiles(&profiles, layers, &config.heatmap)?;
    out.add("lens_tasks.jsonl", jsonl(&rows));
    out.add("heatmap_raw.csv", hm.raw_csv());
    out.add("heatmap_normalized.csv", hm.normalized_csv());
    out.add("heatmap.svg", hm.to_svg());
    let mean_shift = shifted / seqs.len() as f64;
    out.add("summary.csv", summary_csv(&[("tasks", seqs.len() as f64), ("mean_top1_shift_rate", mean_shift)]));
    out.finish(
        "lens-report",
        config,
        json!({"tasks": seqs.len(), "mean_top1_shift_rate": mean_shift, "heatmap_raw": hm.raw}),
    )
}

fn numeric_at(task: usize, e: replaylens::Error) -> CliError {
    match e {
        replaylens::Error::NonFinite { .. } => CliError::Numeric(format!("task {task}: {e}")),
        other => other.into(),
    }
}

fn replay_eval(config: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut out = RunOutput::new(dir);
    let pair = load_pair(config, &mut out)?;
    let seqs = load_dataset(config, &mut out)?;
    let (mut plain_hits, mut replay_hits, mut ratio) = (0, 0, 0.0);
    let mut rows = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let gold = answer(s);
        let plain = decode_greedy(&pair.tuned, s, gold.len())?;
        let profile = LensProfile::of_sequence(&pair.base, s)?;
        let state = replay_with_profile(&pair.tuned, s, &profile, &config.replay).map_err(|e| numeric_at(i, e))?;
        let replayed = apply_and_decode(&pair.tuned, s, &state.x, DecodeMode::Greedy, gold.len())?;
        let (pc, rc) = (is_correct(&plain, gold), is_correct(&replayed, gold));
        plain_hits += usize::from(pc);
        replay_hits += usize::from(rc);
        let (f0, f1) = (state.initial_objective().unwrap_or(0.0), state.final_objective().unwrap_or(0.0));
        ratio += if f0 > 0.0 { f1 / f0 } else { 1.0 };
        rows.push(json!({
            "task": i,
            "answer": gold,
            "plain": plain,
            "replay": replayed,
            "plain_correct": pc,
            "replay_correct": rc,
            "initial_objective": f0,
            "final_objective": f1,
            "accepted_steps": state.step_sizes.len(),
            "mask_cells": state.mask.count(),
        }));
    }
    let n = seqs.len();
    let (pa, ra, mr) = (accuracy(plain_hits, n), accuracy(replay_hits, n), ratio / n as f64);
    out.add("replay.jsonl", jsonl(&rows));
    out.add(
        "summary.csv",
        summary_csv(&[("tasks", n as f64), ("plain_accuracy", pa), ("replay_accuracy", ra), ("mean_objective_ratio", mr)]),
    );
    out.finish(
        "replay-eval",
        config,
        json!({"tasks": n, "plain_accuracy": pa, "replay_accuracy": ra, "mean_objective_ratio": mr}),
    )
}

fn intervene(config: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut out = RunOutput::new(dir);
    let pair = load_pair(config, &mut out)?;
    let seqs = load_dataset(config, &mut out)?;
    let spec = |strategy| InterventionSpec {
        strategy,
        ..config.intervention.clone()
    };
    let (low_spec, high_spec) = (spec(Polarity::Low), spec(Polarity::High));
    let mut hits = [0usize; 3];
    let mut rows = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let gold = answer(s);
        let plain = decode_greedy(&pair.tuned, s, gold.len())?;
        let low = intervene_decode(&pair, s, &low_spec, DecodeMode::Greedy, gold.len())?;
        let high = intervene_decode(&pair, s, &high_spec, DecodeMode::Greedy, gold.len())?;
        let c = [is_correct(&plain, gold), is_correct(&low, gold), is_correct(&high, gold)];
        for (h, ok) in hits.iter_mut().zip(c) {
            *h += usize::from(ok);
        }
        rows.push(json!({
            "task": i,
            "answer": gold,
            "plain": plain,
            "low_splice": low,
            "high_splice": high,
            "plain_correct": c[0],
            "low_correct": c[1],
            "high_correct": c[2],
        }));
    }
    let n = seqs.len();
    let acc = hits.map(|h| accuracy(h, n));
    out.add("intervention.jsonl", jsonl(&rows));
    out.add(
        "summary.csv",
        summary_csv(&[
            ("tasks", n as f64),
            ("plain_accuracy", acc[0]),
            ("low_splice_accuracy", acc[1]),
            ("high_splice_accuracy", acc[2]),
        ]),
    );
    out.finish(
        "intervene",
        config,
        json!({"tasks": n, "plain_accuracy": acc[0], "low_splice_accuracy": acc[1], "high_splice_accuracy": acc[2]}),
    )
}

/// Every single-digit answer followed by the gold continuation, labelled
/// by agreement with the gold digit.
pub fn digit_probes(gold: &[usize]) -> Vec<ProbeResponse> {
    (0..vocab::DIGITS)
        .map(|d| {
            let mut tokens = vec![vocab::digit(d)];
            tokens.extend_from_slice(&gold[1..]);
            ProbeResponse {
                correct: tokens == gold,
                tokens,
            }
        })
        .collect()
}

fn perturb(config: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut out = RunOutput::new(dir);
    let pair = load_pair(config, &mut out)?;
    let seqs = load_dataset(config, &mut out)?;
    let p = &config.perturbation;
    let index = match p.task_index {
        Some(i) if i < seqs.len() => i,
        Some(i) => return Err(CliError::Data(format!("task_index {i} outside a dataset of {}", seqs.len()))),
        None => {
            let mut found = None;
            for (i, s) in seqs.iter().enumerate() {
                if is_correct(&decode_greedy(&pair.tuned, s, answer(s).len())?, answer(s)) {
                    found = Some(i);
                    break;
                }
            }
            found.ok_or_else(|| CliError::Data("the tuned model answers no task correctly".into()))?
        }
    };
    let seq = &seqs[index];
    let gold = answer(seq);
    if gold.is_empty() || gold[0] >= vocab::DIGITS {
        return Err(CliError::Data(format!("task {index} does not start its answer with a digit")));
    }
    let probes = digit_probes(gold);
    let records = perturbation_sweep(&pair.tuned, &pair.base, seq, &probes, &p.scales, &p.seeds, p.tau)?;
    let kl: Vec<f64> = records.iter().map(|r| r.kl_shift_low).collect();
    let series = |f: fn(&replaylens::studies::PerturbationRecord) -> Option<f64>| -> Vec<f64> {
        records.iter().filter_map(f).collect()
    };
    let rho_c = spearman(&kl, &series(|r| r.mean_correct_perplexity()));
    let rho_w = spearman(&kl, &series(|r| r.mean_incorrect_perplexity()));
    out.add("perturbation.jsonl", jsonl(&records));
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "task,{index}");
    let _ = writeln!(csv, "records,{}", records.len());
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let _ = writeln!(csv, "spearman_correct,{}", opt(rho_c));
    let _ = writeln!(csv, "spearman_incorrect,{}", opt(rho_w));
    out.add("summary.csv", csv);
    out.finish(
        "perturb",
        config,
        json!({"task": index, "records": records.len(), "spearman_correct": rho_c, "spearman_incorrect": rho_w}),
    )
}

fn passk(config: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut out = RunOutput::new(dir);
    let pair = load_pair(config, &mut out)?;
    let seqs = load_dataset(config, &mut out)?;
    let max_new = seqs.iter().map(|s| answer(s).len()).max().unwrap_or(1);
    let mut xs = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let profile = LensProfile::of_sequence(&pair.base, s)?;
        xs.push(replay_with_profile(&pair.tuned, s, &profile, &config.replay).map_err(|e| numeric_at(i, e))?.x);
    }
    let sampler = ModelSampler {
        ckpt: &pair.tuned,
        replay: None,
        temperature: config.passk.temperature,
        max_new,
    };
    let plain = pass_at_k(&sampler, &seqs, config.passk.k, config.seed)?;
    let replayed = pass_at_k(
        &ModelSampler {
            replay: Some(&xs),
            ..sampler
        },
        &seqs,
        config.passk.k,
        config.seed,
    )?;
    let rows: Vec<_> = (0..seqs.len())
        .map(|i| json!({"task": i, "plain": plain.correct[i], "replay": replayed.correct[i]}))
        .collect();
    let mut csv = String::from("k,plain,replay\n");
    for k in 1..=config.passk.k {
        let _ = writeln!(csv, "{k},{},{}", plain.pass(k), replayed.pass(k));
    }
    out.add("passk.jsonl", jsonl(&rows));
    out.add("passk.csv", csv);
    out.add("passk.svg", PassKReport::svg(&[("plain", &plain), ("replay", &replayed)]));
    out.finish(
        "passk",
        config,
        json!({"tasks": seqs.len(), "k": config.passk.k, "plain": plain.pass_at, "replay": replayed.pass_at}),
    )
}

fn ablate(config: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut out = RunOutput::new(dir);
    let pair = load_pair(config, &mut out)?;
    let seqs = load_dataset(config, &mut out)?;
    let a = &config.ablation;
    let report = ablation_grid(&pair, &seqs, &a.taus, &a.alphas, &config.replay)?;
    out.add("ablation.jsonl", jsonl(&report.cells));
    out.add("ablation.csv", report.to_csv());
    out.finish(
        "ablate",
        config,
        json!({"tasks": seqs.len(), "baseline": report.baseline, "cells": report.cells.len()}),
    )
}
