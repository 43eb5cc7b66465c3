//! Desk-scale comparison of a cross-entropy model against its end-to-end
//! fine-tuned successor on the same synthetic data.

use serde::{Deserialize, Serialize};

use crate::corpus::{synthesize_corpus, Corpus};
use crate::dnn::{init_params, DnnParams};
use crate::error::Result;
use crate::eval::{evaluate, frr_at_fa, swap_score_gap, EvalConfig, EvalReport};
use crate::hmm::{estimate_hmm, HmmParams};
use crate::synth::SynthConfig;
use crate::trainer::{derive_seed, pretrain_ce, train_e2e, LogRow, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_utterances: 500,
            test_utterances: 200,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub struct ExperimentOutcome {
    pub hmm: HmmParams<f64>,
    pub ce_params: DnnParams<f64>,
    pub e2e_params: DnnParams<f64>,
    pub ce_report: EvalReport,
    pub e2e_report: EvalReport,
    pub ce_log: Vec<LogRow>,
    pub e2e_log: Vec<LogRow>,
    /// `(intact, swapped)` mean window scores under the e2e model.
    pub e2e_swap_scores: (f64, f64),
    pub test: Corpus,
}

/// FRR of both models read at common FA/hr values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fa_per_hour: f64,
    pub ce_frr: f64,
    pub e2e_frr: f64,
}

impl ExperimentOutcome {
    pub fn compare_at(&self, fa_per_hour: &[f64]) -> Result<Vec<OperatingPoint>> {
        fa_per_hour
            .iter()
            .map(|&fa| {
                Ok(OperatingPoint {
                    fa_per_hour: fa,
                    ce_frr: frr_at_fa(&self.ce_report.det_points, fa)?,
                    e2e_frr: frr_at_fa(&self.e2e_report.det_points, fa)?,
                })
            })
            .collect()
    }
}

pub fn split_corpora(config: &ExperimentConfig) -> Result<(Corpus, Corpus)> {
    let train = synthesize_corpus(&config.synth, config.train_utterances, derive_seed(config.seed, &[1]), "train")?;
    let test = synthesize_corpus(&config.synth, config.test_utterances, derive_seed(config.seed, &[2]), "test")?;
    Ok((train, test))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.synth.validate()?;
    config.train.validate()?;
    let (train, test) = split_corpora(config)?;
    let topology = config.synth.topology();
    let hmm = estimate_hmm::<f64, _>(&train.label_sequences(), topology)?;
    let init = init_params::<f64>(&config.train.layer_sizes, config.train.seed)?;
    let (ce_params, ce_log) = pretrain_ce(&train, init, &config.train)?;
    let (e2e_params, e2e_log) = train_e2e(&train, ce_params.clone(), &hmm, &config.train)?;
    let eval_cfg = EvalConfig {
        delta: config.train.delta,
        ..config.eval.clone()
    };
    let ce_report = evaluate(&ce_params, &hmm, &test, &eval_cfg)?;
    let e2e_report = evaluate(&e2e_params, &hmm, &test, &eval_cfg)?;
    let e2e_swap_scores = swap_score_gap(&e2e_params, &hmm, &test, eval_cfg.delta, config.train.window_init)?;
    Ok(ExperimentOutcome {
        hmm,
        ce_params,
        e2e_params,
        ce_report,
        e2e_report,
        ce_log,
        e2e_log,
        e2e_swap_scores,
        test,
    })
}
