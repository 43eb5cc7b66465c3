use std::fs;
use std::path::Path;

use kws_core::corpus::{generate_corpus, read_labels, read_manifest, synthesize_corpus, Corpus};
use kws_core::decoder::viterbi_stream;
use kws_core::hmm::estimate_hmm;
use kws_core::synth::{SynthConfig, SynthGenerator};
use ndarray::Array2;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "feats", "labels"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn same_seed_gives_byte_identical_corpus() {
    let cfg = SynthConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(&cfg, 500, 7, "utt", a.path()).unwrap();
    generate_corpus(&cfg, 500, 7, "utt", b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), 1 + 2 * 500);
    assert!(fa == fb, "corpora differ");
}

#[test]
fn manifest_windows_match_label_files() {
    let cfg = SynthConfig::default();
    let topo = cfg.topology();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(&cfg, 200, 3, "utt", dir.path()).unwrap();
    for e in read_manifest(&manifest).unwrap() {
        let labels = read_labels(dir.path().join(&e.labels_path)).unwrap();
        let kw: Vec<usize> = (0..labels.len()).filter(|&t| topo.is_keyword(labels[t] as usize)).collect();
        let w = e.keyword().unwrap().expect("every utterance has a keyword");
        assert_eq!((w.start, w.end), (kw[0], kw[kw.len() - 1] + 1), "{}", e.id);
        // exactly one instance: keyword frames are contiguous and in chain order
        assert_eq!(kw.len(), w.len());
        let seq = &labels[w.start..w.end];
        assert!(seq.windows(2).all(|p| p[1] == p[0] || p[1] == p[0] + 1));
        assert_eq!(seq[0] as usize, topo.first_kw);
        assert_eq!(seq[seq.len() - 1] as usize, topo.last_kw);
    }
    let corpus = Corpus::load(&manifest).unwrap();
    corpus.validate(&topo).unwrap();
}

#[test]
fn estimated_dwell_matches_generator() {
    let cfg = SynthConfig::default();
    let corpus = synthesize_corpus(&cfg, 1000, 11, "d").unwrap();
    let hmm = estimate_hmm::<f64, _>(&corpus.label_sequences(), cfg.topology()).unwrap();
    for s in hmm.topology.first_kw..=hmm.topology.last_kw {
        let dwell = 1.0 / (1.0 - hmm.log_self[s].exp());
        let rel = (dwell - cfg.keyword_dwell_mean).abs() / cfg.keyword_dwell_mean;
        assert!(rel < 0.1, "state {s}: dwell {dwell:.3}");
    }
}

#[test]
fn noiseless_limit_is_separable() {
    let cfg = SynthConfig {
        noise_sigma: 1e-3,
        babble_confusable_prob: 0.0,
        fragment_prob: 0.0,
        near_miss_prob: 0.0,
        ..SynthConfig::default()
    };
    let gen = SynthGenerator::new(cfg.clone()).unwrap();
    let means = &gen.emissions;
    let n_states = cfg.num_states;
    let corpus = synthesize_corpus(&cfg, 30, 5, "s").unwrap();
    let hmm = estimate_hmm::<f64, _>(&corpus.label_sequences(), cfg.topology()).unwrap();
    let sq = |x: ndarray::ArrayView1<f64>, m: ndarray::ArrayView1<f64>| (&x - &m).mapv(|v| v * v).sum();
    for u in &corpus.utterances {
        // maximum likelihood over every emission mean; babble means are background
        for (t, x) in u.base.rows().into_iter().enumerate() {
            let mut best = (f64::INFINITY, 0u16);
            for s in 0..n_states {
                let d = sq(x, means.state_means.row(s));
                if d < best.0 {
                    best = (d, s as u16);
                }
            }
            for b in 0..means.babble_means.nrows() {
                let d = sq(x, means.babble_means.row(b));
                if d < best.0 {
                    best = (d, 0);
                }
            }
            assert_eq!(best.1, u.labels[t], "{} frame {t}", u.id);
        }
        // hybrid scores from the exact Gaussian posterior: the best detection is the truth
        let sigma2 = cfg.noise_sigma * cfg.noise_sigma;
        let mut scores = Array2::from_shape_fn((u.num_frames(), n_states), |(t, s)| {
            -sq(u.base.row(t), means.state_means.row(s)) / (2.0 * sigma2)
        });
        for mut row in scores.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
            for (v, f) in row.iter_mut().zip(&hmm.log_class_freq) {
                *v -= lse + f;
            }
        }
        let dets = viterbi_stream(scores.view(), &hmm).unwrap();
        let top = dets.iter().max_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
        let w = u.keyword.unwrap();
        assert_eq!((top.start_frame, top.end_frame + 1), (w.start, w.end), "{}", u.id);
    }
}
