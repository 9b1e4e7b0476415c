use std::path::{Path, PathBuf};

use cmflow::grad::AdamConfig;
use cmflow::marginal::{train_marginal, MarginalError, MarginalTrainConfig, TailBelief, UnivariateMarginalFlow};
use cmflow::rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::model::ModelFile;
use crate::output::{read_text, OutDir};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRunConfig {
    pub data: PathBuf,
    pub belief: TailBelief,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRunReport {
    pub config: MarginalRunConfig,
    pub rows: usize,
    pub body_samples: usize,
    pub tail_samples: usize,
    pub epoch_nll: Vec<f64>,
    /// Mean negative log density of the full fitted marginal over all rows.
    pub final_nll: f64,
    pub artifacts: Vec<String>,
}

/// One float per non-empty line.
pub fn read_column(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| CliError::Usage(format!("{}:{}: not a number: '{t}'", path.display(), k + 1)))?;
        if !v.is_finite() {
            return Err(CliError::Usage(format!("{}:{}: non-finite value", path.display(), k + 1)));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{}: no data", path.display())));
    }
    Ok(out)
}

pub fn read_belief(path: &Path) -> Result<TailBelief, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn classify(e: MarginalError) -> CliError {
    match e {
        MarginalError::InvalidBelief(_) | MarginalError::NoBodySamples | MarginalError::DegenerateBody => {
            CliError::usage(e)
        }
        other => CliError::numeric(other),
    }
}

pub fn run(cfg: &MarginalRunConfig, data: &[f64], out: &mut OutDir) -> Result<MarginalRunReport, CliError> {
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(CliError::usage("epochs, batch and lr must be positive"));
    }
    if !(cfg.belief.b() > cfg.belief.a()) {
        return Err(CliError::usage("the belief leaves no probability mass for the body"));
    }
    let init = UnivariateMarginalFlow::with_default_body(cfg.belief.clone(), &mut rng::stream(cfg.seed, 0))
        .map_err(classify)?;
    let train_cfg = MarginalTrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        adam: AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        seed: cfg.seed,
        ..MarginalTrainConfig::default()
    };
    let (flow, report) = train_marginal(&init, data, &train_cfg).map_err(classify)?;
    let mut total = 0.0;
    for &x in data {
        // splice points carry no density; they are skipped like in training
        match flow.ln_pdf(x) {
            Ok(l) => total -= l,
            Err(MarginalError::Seam(_)) => {}
            Err(e) => return Err(CliError::numeric(e)),
        }
    }
    let final_nll = total / data.len() as f64;
    if !final_nll.is_finite() {
        return Err(CliError::numeric("final NLL is not finite"));
    }

    let mut loss = String::from("epoch,body_nll\n");
    for (k, v) in report.epoch_nll.iter().enumerate() {
        loss.push_str(&format!("{},{v}\n", k + 1));
    }
    out.write_json("model.json", &ModelFile::Marginal(flow))?;
    out.write("loss.csv", loss)?;
    Ok(MarginalRunReport {
        config: cfg.clone(),
        rows: data.len(),
        body_samples: report.kept,
        tail_samples: report.discarded,
        epoch_nll: report.epoch_nll,
        final_nll,
        artifacts: out.artifacts(&["train_report.json"]),
    })
}
