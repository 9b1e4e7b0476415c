use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::flow::Coord;
use super::{MarginalError, UnivariateMarginalFlow};
use crate::ddsf::Ddsf;
use crate::grad::{cosine_lr, AdamConfig, AdamState, GradError, Tape, Var};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate at the last step as a fraction of `adam.lr`, reached by
    /// cosine decay. 1 keeps the rate constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for MarginalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 500,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            final_lr_fraction: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTrainReport {
    /// Mean body NLL of each epoch, averaged over its minibatches.
    pub epoch_nll: Vec<f64>,
    pub kept: usize,
    pub discarded: usize,
}

/// Body samples mapped to the network coordinate, with the constant part of
/// their log density.
pub(crate) struct BodyData {
    coord: Coord,
    t: Vec<f64>,
    offset: Vec<f64>,
}

impl BodyData {
    pub(crate) fn new(flow: &UnivariateMarginalFlow, samples: &[f64]) -> Self {
        let coord = flow.coord();
        let ln_mass = (flow.belief().b() - flow.belief().a()).ln();
        let (t, offset) = samples
            .iter()
            .filter(|&&x| flow.in_body(x))
            .map(|&x| (coord.to_t(x), ln_mass + coord.ln_dt(x)))
            .unzip();
        Self { coord, t, offset }
    }

    pub(crate) fn len(&self) -> usize {
        self.t.len()
    }

    /// Mean NLL of the rows `idx` for a body bound on `tape`.
    pub(crate) fn nll(&self, tape: &mut Tape, body: &Ddsf, idx: &[usize]) -> Var {
        let bound = body.bind(tape);
        let ts: Vec<f64> = idx.iter().map(|&i| self.t[i]).collect();
        let offset = idx.iter().map(|&i| self.offset[i]).sum::<f64>() / idx.len() as f64;
        let x = tape.column(&ts);
        let (_, ln_slope) = bound.forward_log(tape, x);
        let (t_lo, t_hi) = self.coord.bounds();
        let lo = tape.column(&[t_lo]);
        let hi = tape.column(&[t_hi]);
        let (f_lo, _) = bound.forward(tape, lo);
        let (f_hi, _) = bound.forward(tape, hi);
        let span = tape.sub(f_hi, f_lo);
        let ln_span = tape.log(span);
        let mean_slope = tape.mean(ln_slope);
        let ll = tape.sub(mean_slope, ln_span);
        tape.affine(ll, -1.0, -offset)
    }
}

/// Mean body NLL of `samples` with the body parameters set to `params`,
/// recorded on `tape`. Samples outside the body interval are ignored.
pub fn body_nll_tape(
    flow: &UnivariateMarginalFlow,
    samples: &[f64],
    tape: &mut Tape,
    params: &[f64],
) -> Result<Var, MarginalError> {
    let data = BodyData::new(flow, samples);
    if data.len() == 0 {
        return Err(MarginalError::NoBodySamples);
    }
    let mut body = flow.body().clone();
    body.set_flat_params(params)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(data.nll(tape, &body, &idx))
}

/// Fits the body by minibatch Adam on the NLL of the samples strictly inside
/// `(alpha, beta)`. Tail branches are fixed by the belief.
pub fn train_marginal(
    flow: &UnivariateMarginalFlow,
    samples: &[f64],
    cfg: &MarginalTrainConfig,
) -> Result<(UnivariateMarginalFlow, MarginalTrainReport), MarginalError> {
    let data = BodyData::new(flow, samples);
    if data.len() == 0 {
        return Err(MarginalError::NoBodySamples);
    }
    let mut body = flow.body().clone();
    let mut params = body.flat_params();
    let mut adam = AdamState::new(params.len(), cfg.adam.clone());
    let batch = cfg.batch_size.clamp(1, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_nll = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * data.len().div_ceil(batch);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let mut tape = Tape::new();
            let loss = data.nll(&mut tape, &body, idx);
            let grads = tape.backward(loss).map_err(|e| match e {
                GradError::NonFinite { .. } => MarginalError::NonFiniteLoss { epoch },
                other => other.into(),
            })?;
            total += tape.scalar(loss) * idx.len() as f64;
            adam.config.lr = cosine_lr(cfg.adam.lr, cfg.final_lr_fraction, step, total_steps);
            step += 1;
            adam.step(&mut params, &grads.flat())?;
            body.set_flat_params(&params)?;
        }
        let nll = total / data.len() as f64;
        if !nll.is_finite() {
            return Err(MarginalError::NonFiniteLoss { epoch });
        }
        epoch_nll.push(nll);
    }

    let mut trained = flow.clone();
    trained.set_body(body)?;
    Ok((
        trained,
        MarginalTrainReport {
            epoch_nll,
            kept: data.len(),
            discarded: samples.len() - data.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{grad_compare, relative_error};
    use crate::marginal::TailBelief;

    #[test]
    fn tape_nll_matches_direct_evaluation() {
        let mut r = rng::stream(3, 0);
        let belief = TailBelief::gaussian(0.0, 1.0, -1.2, 1.5).unwrap();
        let flow = UnivariateMarginalFlow::new(belief, Ddsf::random(&[6, 6], 0.6, &mut r)).unwrap();
        let xs = [-1.0, -0.3, 0.2, 0.9, 1.4, 2.0];
        let data = BodyData::new(&flow, &xs);
        assert_eq!(data.len(), 5);
        let mut tape = Tape::new();
        let loss = data.nll(&mut tape, flow.body(), &[0, 1, 2, 3, 4]);
        let (direct, kept) = flow.body_nll(&xs).unwrap();
        assert_eq!(kept, 5);
        assert!((tape.scalar(loss) - direct).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_passes_check() {
        let h = 3e-4;
        for seed in 0..6 {
            let mut r = rng::stream(seed, 0);
            let belief = TailBelief::gaussian(0.0, 1.0, -1.0, 1.0).unwrap();
            let body = Ddsf::random(&[4, 4], 0.5, &mut r);
            let flow = UnivariateMarginalFlow::new(belief, body).unwrap();
            let data = BodyData::new(&flow, &[-0.7, -0.1, 0.3, 0.8]);
            let params = flow.body().flat_params();
            let pairs = grad_compare(
                |tape, p| {
                    let mut body = flow.body().clone();
                    body.set_flat_params(p).unwrap();
                    data.nll(tape, &body, &[0, 1, 2, 3])
                },
                &params,
                h,
            )
            .unwrap();
            // The single-unit output layer acts as `a * h + b` and its 1x1
            // mixing weight is constant; the endpoint rescaling cancels all three.
            let last = params.len() - 4;
            let invariant = last - 3..last;
            for (i, &(analytic, fd)) in pairs.iter().enumerate() {
                if invariant.contains(&i) {
                    assert!(analytic.abs() < 1e-12 && fd.abs() < 1e-9, "{i}: {analytic} {fd}");
                } else {
                    let err = relative_error(analytic, fd);
                    assert!(err <= 1e-5, "seed {seed} coord {i}: {analytic} {fd}");
                }
            }
        }
    }

    #[test]
    fn all_samples_outside_body_is_an_error() {
        let mut r = rng::stream(0, 0);
        let belief = TailBelief::gaussian(0.0, 1.0, -1.0, 1.0).unwrap();
        let flow = UnivariateMarginalFlow::with_default_body(belief, &mut r).unwrap();
        let res = train_marginal(&flow, &[-3.0, -1.0, 1.0, 2.0], &MarginalTrainConfig::default());
        assert!(matches!(res, Err(MarginalError::NoBodySamples)));
    }
}
