//! Trains the CE baseline and the e2e model on a synthetic corpus and prints
//! how they compare on the same test set.
//!
//! Optional argument: path to a JSON experiment config.

use std::time::Instant;

use kws_core::experiment::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config: ExperimentConfig = match std::env::args().nth(1) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let t0 = Instant::now();
    let out = run_experiment(&config)?;
    for (name, r) in [("ce", &out.ce_report), ("e2e", &out.e2e_report)] {
        println!(
            "{name:>3}: state acc {:.4}  FRR@{} {:.4}  TP IOU {:?}  boundary err {:?} s",
            r.state_accuracy, r.operating_fa_per_hour, r.frr_at_operating_fa, r.mean_tp_iou, r.mean_abs_start_end_error_sec
        );
    }
    for p in out.compare_at(&[2.0, 5.0, 10.0, 15.0, 20.0, 30.0, 50.0])? {
        println!("FA/hr {:>4}: ce FRR {:.4}  e2e FRR {:.4}", p.fa_per_hour, p.ce_frr, p.e2e_frr);
    }
    println!("swap windows: intact {:.3}  swapped {:.3}", out.e2e_swap_scores.0, out.e2e_swap_scores.1);
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
