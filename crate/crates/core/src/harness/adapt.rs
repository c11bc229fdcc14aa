use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::sweep::{load_pool, pilots_for};
use super::{evaluate, fit_method, target_centroids, Fitted, Method};
use crate::channel::{sample_channel, ChannelParams, ChannelRealization, NoiseModel, RisPhases};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptCondition {
    /// Designed and evaluated on the original channel without RIS.
    Pre,
    /// Direct link blocked, equalizer unchanged.
    Blocked,
    /// Direct link blocked, RIS added and only its phases re-optimized.
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRow {
    pub method: Method,
    pub nphi: usize,
    pub seed: u64,
    pub condition: AdaptCondition,
    pub mse: f64,
    pub accuracy: f64,
    pub matched_accuracy: f64,
    pub max_phase_dev: f64,
}

fn nphi_list(cfg: &ExperimentConfig) -> Vec<usize> {
    let nt = cfg.channel.nt;
    match (&cfg.sweep.nphi, &cfg.sweep.nphi_ratio) {
        (Some(v), _) => v.clone(),
        (None, Some(r)) => r.iter().map(|x| (x * nt as f64).round() as usize).collect(),
        (None, None) => vec![cfg.channel.nphi],
    }
}

/// Designs each method on a channel with a direct link of path loss
/// `alpha_pre` and no RIS, then blocks the direct link (redrawn with path
/// loss `alpha_post`) and adds an RIS whose phases alone are optimized,
/// starting from random phases. Reports all three conditions per RIS size
/// and seed. Only the linear and neural equalizers can be adapted.
pub fn run_adaptation(cfg: &ExperimentConfig) -> Result<Vec<AdaptationRow>> {
    cfg.validate()?;
    let pool = load_pool(cfg)?;
    let settings = cfg.settings();
    let a = &cfg.adaptation;
    let n_train = match &cfg.task {
        super::TaskSource::Synthetic(s) => s.n_train,
        super::TaskSource::Files { n_train, .. } => *n_train,
    };
    let mut rows = Vec::new();
    for method in cfg.methods() {
        if !matches!(method, Method::Linear | Method::Neural) {
            return Err(Error::InvalidParameter(format!(
                "channel adaptation needs the linear or neural equalizer, not {}",
                method.name()
            )));
        }
        for run in 0..cfg.n_seeds as u64 {
            let seed = cfg.seed.wrapping_add(run);
            let (train, val, test) = pilots_for(cfg, pool.as_ref(), n_train, run, seed)?;
            let centroids = match train.labels {
                Some(_) => Some(target_centroids(&train)?),
                None => None,
            };
            let matched = match (&centroids, &test.labels) {
                (Some(c), Some(l)) => {
                    c.accuracy(&test.s_gamma.rows(0, test.raw_gamma).into_owned(), l)
                }
                _ => f64::NAN,
            };
            let params = ChannelParams {
                nphi: 0,
                alpha_d: a.alpha_pre,
                ..cfg.channel.clone()
            };
            let noise = NoiseModel::from_params(&params);
            let pre = sample_channel(&params, seed)?;
            let fitted = fit_method(method, &train, &val, &pre, &noise, &settings, seed)?;
            let blocked = pre.with_redrawn_direct(a.alpha_post, seed)?;

            let mut emit =
                |condition, nphi, model: &Fitted, real: &ChannelRealization| -> Result<()> {
                    let (mse, acc) = evaluate(
                        model,
                        &test,
                        centroids.as_ref(),
                        real,
                        &noise,
                        cfg.n_noise_draws,
                        seed,
                    )?;
                    rows.push(AdaptationRow {
                        method,
                        nphi,
                        seed,
                        condition,
                        mse,
                        accuracy: acc.unwrap_or(f64::NAN),
                        matched_accuracy: matched,
                        max_phase_dev: model.phases().max_modulus_error(),
                    });
                    Ok(())
                };
            for nphi in nphi_list(cfg) {
                emit(AdaptCondition::Pre, nphi, &fitted, &pre)?;
                emit(AdaptCondition::Blocked, nphi, &fitted, &blocked)?;
                let with_ris = blocked.with_ris(nphi, seed)?;
                let start = RisPhases::random(nphi, &mut substream(seed, Stream::Ris, 2));
                let phi = match &fitted {
                    Fitted::Linear(eq) => {
                        eq.adapt_phases(&train, &with_ris, start, a.steps, cfg.admm.step_rule)?
                    }
                    Fitted::Neural(eq) => {
                        eq.adapt_phases(&train, &with_ris, start, a.steps, &noise, seed)?
                    }
                    Fitted::Baseline { .. } => unreachable!("rejected above"),
                };
                emit(
                    AdaptCondition::Adapted,
                    nphi,
                    &fitted.with_phases(phi),
                    &with_ris,
                )?;
            }
        }
    }
    Ok(rows)
}
