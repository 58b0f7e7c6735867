//! Option discovery from flat trajectories.
//!
//! Options are inferred by gradient ascent on the dynamics-free trajectory
//! likelihood of a two-level latent model (meta-policy `eta`, option policies
//! `pi_h`, terminations `psi_h`). Posteriors come from a scaled forward-backward
//! pass; [`brute_force_posteriors`] enumerates latent sequences as a reference.
//! Two post-hoc controls are supported: a termination scale applied at readout,
//! and a pairwise-KL bonus that keeps option policies apart.

mod gradient;
mod oracle;
mod params;
mod posterior;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradient::{gradient, pairwise_kl, DdoGradient, GradientPass};
pub use oracle::{brute_force_posteriors, MAX_SEQUENCES};
pub use params::{log_softmax, logistic, softmax_into, DdoParams, Readout};
pub use posterior::{forward_backward, forward_backward_with, log_likelihood, PosteriorTables};

use crate::expert::{OptionDefinition, Trajectory};
use crate::rng;
use crate::smdp::OptionSet;

#[derive(Debug, Error, PartialEq)]
pub enum DdoError {
    #[error("trajectory has no actions")]
    EmptyTrajectory,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("likelihood normalizer vanished at step {step}")]
    DegenerateLikelihood { step: usize },
    #[error("enumeration needs {sequences} option sequences, limit is {MAX_SEQUENCES}")]
    TooLarge { sequences: u64 },
    #[error("termination scale must lie in (0,1], got {0}")]
    BadAlpha(f64),
    #[error("parameter shapes do not match the state space")]
    ShapeMismatch,
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
}

/// State weighting for the diversity regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoMode {
    ExpertVisitation,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_options: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Trajectories per update; 0 means the whole dataset.
    pub minibatch: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub init_scale: f64,
    pub rho: RhoMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_options: 6,
            learning_rate: 5.0,
            epochs: 500,
            minibatch: 0,
            lambda: 0.0,
            alpha: 1.0,
            seed: 0,
            init_scale: 0.1,
            rho: RhoMode::ExpertVisitation,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DdoError> {
        if self.n_options == 0 {
            return Err(DdoError::BadConfig("n_options must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DdoError::BadConfig("learning_rate must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(DdoError::BadConfig("lambda must be non-negative"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(DdoError::BadAlpha(self.alpha));
        }
        if !(self.init_scale >= 0.0) {
            return Err(DdoError::BadConfig("init_scale must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Dataset log-likelihood before training and after each epoch.
    pub log_likelihood: Vec<f64>,
    /// Unweighted regularizer value at the same points.
    pub regularizer: Vec<f64>,
    pub no_progress: bool,
}

/// Normalized visitation of the states where actions were taken.
pub fn visitation_weights(n_states: usize, dataset: &[Trajectory]) -> Vec<f64> {
    let mut w = vec![0.0; n_states];
    let mut total = 0.0;
    for xi in dataset {
        for s in &xi.states[..xi.actions.len()] {
            w[s.0] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    }
    w
}

pub fn rho_weights(mode: RhoMode, n_states: usize, dataset: &[Trajectory]) -> Vec<f64> {
    match mode {
        RhoMode::ExpertVisitation => visitation_weights(n_states, dataset),
        RhoMode::Uniform => vec![1.0 / n_states as f64; n_states],
    }
}

pub fn init_params(n_states: usize, config: &TrainConfig) -> DdoParams {
    let mut rng = rng::derived(config.seed, "ddo-init", 0);
    DdoParams::random(n_states, config.n_options, config.init_scale, &mut rng)
}

/// Trains from a seeded random initialization, then applies `config.alpha`.
pub fn train(
    n_states: usize,
    dataset: &[Trajectory],
    config: &TrainConfig,
) -> Result<(DdoParams, TrainHistory), DdoError> {
    config.validate()?;
    train_from(init_params(n_states, config), dataset, config)
}

/// Fixed-rate gradient ascent on `mean_batch log P(xi) + lambda * pairwise_kl`,
/// starting from `params`. The returned params carry `config.alpha` as their
/// termination scale; training itself runs at scale 1.
pub fn train_from(
    mut params: DdoParams,
    dataset: &[Trajectory],
    config: &TrainConfig,
) -> Result<(DdoParams, TrainHistory), DdoError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DdoError::EmptyDataset);
    }
    if !params.shape_ok() || params.n_options != config.n_options {
        return Err(DdoError::ShapeMismatch);
    }
    params.termination_scale = 1.0;
    let rho = rho_weights(config.rho, params.n_states, dataset);
    let mut history = TrainHistory::default();
    let record = |p: &DdoParams, h: &mut TrainHistory| -> Result<(), DdoError> {
        h.log_likelihood.push(log_likelihood(p, dataset)?);
        h.regularizer.push(pairwise_kl(p, &rho, None));
        Ok(())
    };
    record(&params, &mut history)?;

    let batch = if config.minibatch == 0 {
        dataset.len()
    } else {
        config.minibatch.min(dataset.len())
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = rng::derived(config.seed, "ddo-batches", 0);
    let mut scratch: Vec<Trajectory> = Vec::with_capacity(batch);
    for _ in 0..config.epochs {
        if batch < dataset.len() {
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(batch) {
            scratch.clear();
            scratch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            // Per-trajectory mean of the likelihood; the regularizer weight is
            // multiplied by the batch size so it survives the division below.
            let n = scratch.len() as f64;
            let pass = gradient(&params, &scratch, config.lambda * n, &rho)?;
            let step = config.learning_rate / n;
            for (x, g) in params
                .eta_logits
                .iter_mut()
                .chain(params.pi_logits.iter_mut())
                .chain(params.psi_logits.iter_mut())
                .zip(pass.gradient.iter())
            {
                *x += step * g;
            }
        }
        record(&params, &mut history)?;
    }
    let first = history.log_likelihood[0];
    let last = *history.log_likelihood.last().unwrap_or(&first);
    if config.epochs > 0 && last <= first {
        history.no_progress = true;
        warn!("DDO training made no progress: log-likelihood {first} -> {last}");
    }
    let params = scale_termination(&params, config.alpha)?;
    Ok((params, history))
}

/// Multiplies the effective termination probabilities by `alpha`.
pub fn scale_termination(params: &DdoParams, alpha: f64) -> Result<DdoParams, DdoError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DdoError::BadAlpha(alpha));
    }
    let mut out = params.clone();
    out.termination_scale *= alpha;
    Ok(out)
}

/// One executable option per latent option, labelled `opt0..opt{H-1}`.
pub fn extract_options(params: &DdoParams) -> OptionSet {
    let r = Readout::new(params);
    let options = (0..params.n_options)
        .map(|h| OptionDefinition {
            label: format!("opt{h}"),
            policy: (0..params.n_states).map(|s| params.pi(h, s)).collect(),
            termination: (0..params.n_states).map(|s| r.psi(h, s)).collect(),
        })
        .collect();
    OptionSet::new(options).expect("generated labels are unique")
}

/// Mean KL over ordered option pairs, weighted by `rho` over states.
pub fn mean_pairwise_kl(params: &DdoParams, rho: &[f64]) -> f64 {
    let h = params.n_options;
    if h < 2 {
        return 0.0;
    }
    pairwise_kl(params, rho, None) / (h * (h - 1)) as f64
}
