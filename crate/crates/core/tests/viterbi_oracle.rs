mod common;

use common::{brute_stream, brute_window, random_hmm, random_scores, rng};
use kws_core::decoder::{StreamDecoder, StreamInit};
use kws_core::e2e::{score_window_with, WindowInit};
use kws_core::KwsError;
use rand::Rng;

const INSTANCES: u64 = 200;

#[test]
fn window_scoring_matches_enumeration() {
    for init in [WindowInit::FirstState, WindowInit::Priors] {
        for seed in 0..INSTANCES {
            let mut r = rng(seed);
            let c = r.random_range(1..=5);
            let hmm = random_hmm(c, &mut r);
            let t = r.random_range(1..=8);
            let scores = random_scores(t, c, &mut r);
            let got = score_window_with(scores.view(), &hmm, init);
            match brute_window(&scores, &hmm, init) {
                Some(want) => {
                    let ws = got.unwrap_or_else(|e| panic!("seed {seed} {init:?}: {e}"));
                    assert!(
                        (ws.log_prob - want.log_prob).abs() < 1e-9,
                        "seed {seed} {init:?}: {} vs {}",
                        ws.log_prob,
                        want.log_prob
                    );
                    assert!((ws.d - want.log_prob / t as f64).abs() < 1e-9);
                    assert_eq!(ws.argmax_path, want.path, "seed {seed} {init:?}");
                }
                None => assert!(
                    matches!(got, Err(KwsError::InfeasibleWindow { .. })),
                    "seed {seed} {init:?}: expected infeasible"
                ),
            }
        }
    }
}

#[test]
fn stream_decoder_matches_enumeration() {
    for init in [StreamInit::FirstState, StreamInit::Priors] {
        for seed in 0..INSTANCES {
            let mut r = rng(1_000 + seed);
            let c = r.random_range(1..=5);
            let hmm = random_hmm(c, &mut r);
            let t = r.random_range(1..=8);
            let scores = random_scores(t, c, &mut r);
            let mut dec = StreamDecoder::with_init(&hmm, init).keep_backpointers();
            for end in 0..t {
                let det = dec.push(scores.row(end)).unwrap();
                let want = brute_stream(&scores, &hmm, end, init == StreamInit::FirstState);
                match (det, want) {
                    (Some(d), Some(w)) => {
                        assert!(
                            (d.log_prob - w.log_prob).abs() < 1e-9,
                            "seed {seed} {init:?} end {end}: {} vs {}",
                            d.log_prob,
                            w.log_prob
                        );
                        assert_eq!(d.start_frame, w.start, "seed {seed} {init:?} end {end}");
                        assert_eq!(d.end_frame, end);
                        assert!((d.score - w.log_prob / (end - w.start + 1) as f64).abs() < 1e-9);
                        assert_eq!(dec.backtrack(end), Some((w.start, w.path)), "seed {seed} {init:?} end {end}");
                    }
                    (None, None) => {}
                    (d, w) => panic!("seed {seed} {init:?} end {end}: decoder {d:?}, oracle {w:?}"),
                }
            }
        }
    }
}

#[test]
fn window_decoding_is_shift_covariant_per_frame() {
    // adding a constant to one frame's scores shifts log_prob by it, path fixed
    for seed in 0..50 {
        let mut r = rng(5_000 + seed);
        let c = r.random_range(2..=5);
        let hmm = random_hmm(c, &mut r);
        let t = r.random_range(hmm.topology.chain_len()..=8);
        let scores = random_scores(t, c, &mut r);
        let a = score_window_with(scores.view(), &hmm, WindowInit::FirstState).unwrap();
        let frame = r.random_range(0..t);
        let shift = r.random_range(-3.0..3.0);
        let mut moved = scores.clone();
        moved.row_mut(frame).mapv_inplace(|v| v + shift);
        let b = score_window_with(moved.view(), &hmm, WindowInit::FirstState).unwrap();
        assert_eq!(a.argmax_path, b.argmax_path);
        assert!((b.log_prob - a.log_prob - shift).abs() < 1e-9);
    }
}
