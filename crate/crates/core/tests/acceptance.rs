//! End-to-end acceptance gate. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{
    brute_stream, brute_window, central_diff, miniature_utterance, random_hmm, random_scores, reference_iou,
    rel_err, rng, round_trip_all,
};
use kws_core::corpus::{synthesize_corpus, Utterance};
use kws_core::decoder::{StreamDecoder, StreamInit};
use kws_core::dnn::{encode_checkpoint, init_params, DnnParams};
use kws_core::e2e::{score_window_grad_with, score_window_with, WindowInit};
use kws_core::experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
use kws_core::hmm::{estimate_hmm, Topology};
use kws_core::sampling::{sample_negatives, sample_positive, swap_augment, Source, UtteranceSpan, Window};
use kws_core::synth::SynthConfig;
use kws_core::trainer::{e2e_batch_gradient, pretrain_ce, train_e2e, TrainConfig};
use ndarray::Array2;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, t0: Instant) -> Result<Duration, String> {
    let took = t0.elapsed();
    if took > limit {
        return Err(format!("took {took:.1?}, limit {limit:?}"));
    }
    Ok(took)
}

fn viterbi_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut instances = 0;
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let c = r.random_range(1..=5);
        let hmm = random_hmm(c, &mut r);
        let t = r.random_range(1..=8);
        let scores = random_scores(t, c, &mut r);
        for init in [WindowInit::FirstState, WindowInit::Priors] {
            match (score_window_with(scores.view(), &hmm, init), brute_window(&scores, &hmm, init)) {
                (Ok(got), Some(want)) => {
                    ensure!((got.log_prob - want.log_prob).abs() < 1e-9, "window seed {seed}: log-prob mismatch");
                    ensure!(got.argmax_path == want.path, "window seed {seed}: path mismatch");
                }
                (Err(_), None) => {}
                _ => return Err(format!("window seed {seed}: feasibility disagrees")),
            }
        }
        let mut dec = StreamDecoder::with_init(&hmm, StreamInit::FirstState).keep_backpointers();
        for end in 0..t {
            let det = dec.push(scores.row(end)).map_err(|e| e.to_string())?;
            match (det, brute_stream(&scores, &hmm, end, true)) {
                (Some(d), Some(w)) => {
                    ensure!((d.log_prob - w.log_prob).abs() < 1e-9, "stream seed {seed} end {end}: log-prob mismatch");
                    ensure!(dec.backtrack(end) == Some((w.start, w.path)), "stream seed {seed} end {end}: path mismatch");
                }
                (None, None) => {}
                _ => return Err(format!("stream seed {seed} end {end}: feasibility disagrees")),
            }
        }
        instances += 1;
    }
    let took = within(Duration::from_secs(10), t0)?;
    Ok(format!("{instances} instances in {took:.2?}"))
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();

    let mut worst_dnn = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let sizes = vec![r.random_range(3..=8), r.random_range(3..=7), r.random_range(2..=6)];
        let params = init_params::<f64>(&sizes, seed).map_err(|e| e.to_string())?;
        let x = Array2::from_shape_fn((4, sizes[0]), |_| r.random_range(-1.5..1.5));
        let g = Array2::from_shape_fn((4, sizes[2]), |_| r.random_range(-1.0..1.0));
        let trace = params.forward_trace(&x).map_err(|e| e.to_string())?;
        let analytic = params.backward_trace(&trace, &g).map_err(|e| e.to_string())?.to_flat();
        let numeric = central_diff(&params, 1e-6, |p| (&p.forward_matrix(&x).unwrap().log_posteriors * &g).sum());
        worst_dnn = worst_dnn.max(rel_err(&analytic, &numeric));
    }
    ensure!(worst_dnn <= 1e-4, "(a) DNN rel err {worst_dnn:e}");

    let (eps, mut worst_win, mut checked) = (1e-6, 0.0f64, 0);
    for seed in 0..60u64 {
        let mut r = rng(100 + seed);
        let c = r.random_range(1..=5);
        let hmm = random_hmm(c, &mut r);
        let t = r.random_range(hmm.topology.chain_len()..=8);
        let scores = random_scores(t, c, &mut r);
        let (ws, grad) = score_window_grad_with(scores.view(), &hmm, WindowInit::FirstState).map_err(|e| e.to_string())?;
        for ((i, j), &an) in grad.indexed_iter() {
            let (mut up, mut down) = (scores.clone(), scores.clone());
            up[[i, j]] += eps;
            down[[i, j]] -= eps;
            let a = score_window_with(up.view(), &hmm, WindowInit::FirstState).map_err(|e| e.to_string())?;
            let b = score_window_with(down.view(), &hmm, WindowInit::FirstState).map_err(|e| e.to_string())?;
            if a.argmax_path != ws.argmax_path || b.argmax_path != ws.argmax_path {
                continue;
            }
            worst_win = worst_win.max(((a.d - b.d) / (2.0 * eps) - an).abs());
            checked += 1;
        }
    }
    ensure!(checked > 0 && worst_win <= 1e-6, "(b) window grad abs err {worst_win:e}");

    let mut r = rng(42);
    let utts: Vec<Utterance> = (0..3).map(|i| miniature_utterance(i, &mut r)).collect();
    let labels: Vec<Vec<u16>> = utts.iter().map(|u| u.labels.clone()).collect();
    let hmm = estimate_hmm::<f64, _>(&labels, Topology::new(4, 1, 3).unwrap()).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        delta: 0,
        layer_sizes: vec![8, 6, 4],
        max_negatives: 6,
        swap_count: 2,
        ..TrainConfig::default()
    };
    let mut params: DnnParams<f64> = init_params(&config.layer_sizes, 3).map_err(|e| e.to_string())?;
    for b in &mut params.biases {
        b.mapv_inplace(|_| r.random_range(-0.1..0.1));
    }
    let batch: Vec<(&Utterance, f64)> = utts.iter().map(|u| (u, 1.0)).collect();
    let (grads, _) = e2e_batch_gradient(&params, &hmm, &batch, &config, 11).map_err(|e| e.to_string())?;
    let numeric = central_diff(&params, 1e-6, |p| e2e_batch_gradient(p, &hmm, &batch, &config, 11).unwrap().1.loss);
    let chain = rel_err(&grads.to_flat(), &numeric);
    ensure!(chain <= 1e-3, "(c) full chain rel err {chain:e}");

    let took = within(Duration::from_secs(30), t0)?;
    Ok(format!(
        "dnn {worst_dnn:.1e}, window {worst_win:.1e} over {checked} entries, chain {chain:.1e} in {took:.2?}"
    ))
}

fn sampling_contracts() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(9);
    let span = |r: &mut rand_chacha::ChaCha8Rng| {
        let num_frames = r.random_range(20..400);
        let len = r.random_range(2..=num_frames.min(150));
        let start = r.random_range(0..=num_frames - len);
        UtteranceSpan {
            num_frames,
            keyword: Window::new(start, start + len).unwrap(),
        }
    };
    for i in 0..10_000 {
        let s = span(&mut r);
        let w = sample_positive(&s, 0.95, &mut r).window;
        let v = reference_iou((s.keyword.start, s.keyword.end), (w.start, w.end));
        ensure!(v >= 0.95, "positive {i}: IOU {v}");
    }
    let mut negatives = 0;
    while negatives < 10_000 {
        let s = span(&mut r);
        for ex in sample_negatives(&s, 0.5, 20, &mut r) {
            let w = ex.window;
            let v = reference_iou((s.keyword.start, s.keyword.end), (w.start, w.end));
            ensure!(v <= 0.5, "negative {negatives}: IOU {v}");
            negatives += 1;
        }
    }
    let mut swaps = 0;
    for _ in 0..2_000 {
        let s = span(&mut r);
        let g = s.keyword;
        for ex in swap_augment(&s, 3, &mut r) {
            let Source::SwapAugmented { split } = ex.source else {
                return Err("swap example without a split".into());
            };
            let mut want: Vec<usize> = (g.start..g.end).collect();
            want.rotate_right(g.end - split);
            ensure!(ex.row_indices() == want, "swap at {split} in {g:?} is not a two-block rotation");
            swaps += 1;
        }
    }
    let took = within(Duration::from_secs(10), t0)?;
    Ok(format!("10000 positives, {negatives} negatives, {swaps} swaps in {took:.2?}"))
}

const FA_GRID: [f64; 7] = [2.0, 5.0, 10.0, 15.0, 20.0, 30.0, 50.0];

fn frr_reduction(out: &ExperimentOutcome, took: Duration) -> Outcome {
    let fa = out.ce_report.operating_fa_per_hour;
    let op = out.compare_at(&[fa]).map_err(|e| e.to_string())?[0];
    let grid = out.compare_at(&FA_GRID).map_err(|e| e.to_string())?;
    let lower = grid.iter().filter(|p| p.e2e_frr < p.ce_frr).count();
    let detail = format!(
        "FRR@{fa} ce {:.4} e2e {:.4}, e2e lower at {lower}/{} points, {took:.0?}",
        op.ce_frr,
        op.e2e_frr,
        FA_GRID.len()
    );
    ensure!(op.e2e_frr <= 0.7 * op.ce_frr, "{detail}");
    ensure!(lower >= 3, "{detail}");
    ensure!(took < Duration::from_secs(15 * 60), "{detail}");
    Ok(detail)
}

fn accuracy_gap(out: &ExperimentOutcome) -> Outcome {
    let (ce, e2e) = (out.ce_report.state_accuracy, out.e2e_report.state_accuracy);
    let detail = format!("state accuracy ce {:.2}% e2e {:.2}%", 100.0 * ce, 100.0 * e2e);
    ensure!(100.0 * (ce - e2e) >= 2.0, "{detail}");
    Ok(detail)
}

fn localization(out: &ExperimentOutcome) -> Outcome {
    let (Some(ce), Some(e2e)) = (out.ce_report.mean_tp_iou, out.e2e_report.mean_tp_iou) else {
        return Err("a model produced no true positives".into());
    };
    let detail = format!("mean TP IOU ce {ce:.4} e2e {e2e:.4}");
    ensure!(e2e >= ce, "{detail}");
    Ok(detail)
}

fn swap_rejection(out: &ExperimentOutcome) -> Outcome {
    let (intact, swapped) = out.e2e_swap_scores;
    let detail = format!("intact {intact:.3} swapped {swapped:.3}");
    ensure!(intact - swapped >= 1.0, "{detail}");
    Ok(detail)
}

fn train_checkpoints(cfg: &TrainConfig, synth: &SynthConfig) -> Result<(Vec<u8>, Vec<u8>), String> {
    let corpus = synthesize_corpus(synth, 24, 4, "det").map_err(|e| e.to_string())?;
    let hmm = estimate_hmm::<f64, _>(&corpus.label_sequences(), synth.topology()).map_err(|e| e.to_string())?;
    let init = init_params(&cfg.layer_sizes, cfg.seed).map_err(|e| e.to_string())?;
    let (ce, _) = pretrain_ce(&corpus, init, cfg).map_err(|e| e.to_string())?;
    let (e2e, _) = train_e2e(&corpus, ce.clone(), &hmm, cfg).map_err(|e| e.to_string())?;
    Ok((encode_checkpoint(&ce), encode_checkpoint(&e2e)))
}

fn determinism_and_formats() -> Outcome {
    let cfg = TrainConfig {
        delta: 2,
        layer_sizes: vec![13 * 5, 24, 20],
        ce_epochs: 2,
        e2e_epochs: 2,
        batch_utterances: 8,
        ..TrainConfig::default()
    };
    let synth = SynthConfig::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let a = pool.install(|| train_checkpoints(&cfg, &synth))?;
    let b = pool.install(|| train_checkpoints(&cfg, &synth))?;
    ensure!(a == b, "same-seed checkpoints differ");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..3 {
        round_trip_all(dir.path(), seed)?;
    }
    Ok(format!("{} + {} checkpoint bytes identical, formats round-trip", a.0.len(), a.1.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (1, "viterbi oracle", guarded(viterbi_oracle)),
        (2, "gradient fidelity", guarded(gradient_fidelity)),
        (3, "sampling contracts", guarded(sampling_contracts)),
    ];

    let t0 = Instant::now();
    match run_experiment(&ExperimentConfig::default()) {
        Ok(out) => {
            let took = t0.elapsed();
            results.push((4, "frr reduction", guarded(|| frr_reduction(&out, took))));
            results.push((5, "accuracy gap", guarded(|| accuracy_gap(&out))));
            results.push((6, "localization", guarded(|| localization(&out))));
            results.push((7, "swap rejection", guarded(|| swap_rejection(&out))));
        }
        Err(e) => {
            for (n, name) in [(4, "frr reduction"), (5, "accuracy gap"), (6, "localization"), (7, "swap rejection")] {
                results.push((n, name, Err(format!("experiment failed: {e}"))));
            }
        }
    }
    results.push((8, "determinism and round-trips", guarded(determinism_and_formats)));

    for (n, name, res) in &results {
        match res {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(why) => println!("FAIL criterion {n} ({name}): {why}"),
        }
    }
    let failed: Vec<u8> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
