//! Experiment runner: fitting any method on a pilot split, evaluation
//! metrics, FLOP counts, parameter sweeps with resumable CSV output and the
//! RIS-only channel adaptation experiment.

mod adapt;
mod config;
mod sweep;

pub use adapt::{run_adaptation, AdaptCondition, AdaptationRow};
pub use config::{
    parse_config, AdaptationSettings, ConfigFormat, ExperimentConfig, SweepAxes, TaskSource,
};
pub use sweep::{
    aggregate, aggregate_path, prepare_run, read_rows, run_sweep, sweep_points, write_aggregate,
    write_csv, AggregateRow, ResultRow, RunData, SweepPoint, RESULTS_TAG,
};

use serde::{Deserialize, Serialize};

use crate::baselines::{
    fit_alignment, fit_physical, run_baseline, AlignmentMap, BaselineKind, PhysicalEqualizer,
};
use crate::channel::{effective_channel, ChannelRealization, NoiseModel, RisPhases};
use crate::error::{Error, Result};
use crate::linalg::{fro_norm2, RMat};
use crate::linear::{self, AdmmConfig, LinearEqualizer};
use crate::neural::{self, NeuralEqualizer, TrainConfig};
use crate::pilots::{CentroidClassifier, PilotSet};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    Neural,
    FirstK,
    TopK,
    EigenK,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Neural => "neural",
            Method::FirstK => "first_k",
            Method::TopK => "top_k",
            Method::EigenK => "eigen_k",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::FirstK => Some(BaselineKind::FirstK),
            Method::TopK => Some(BaselineKind::TopK),
            Method::EigenK => Some(BaselineKind::EigenK),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Method::Linear),
            "neural" => Ok(Method::Neural),
            "first_k" => Ok(Method::FirstK),
            "top_k" => Ok(Method::TopK),
            "eigen_k" => Ok(Method::EigenK),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Method settings used by [`fit_method`].
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSettings {
    pub admm: AdmmConfig,
    pub train: TrainConfig,
    pub physical_iters: usize,
}

impl Default for MethodSettings {
    fn default() -> Self {
        MethodSettings {
            admm: AdmmConfig::default(),
            train: TrainConfig::default(),
            physical_iters: 30,
        }
    }
}

/// A fitted transmission scheme.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    Linear(LinearEqualizer),
    Neural(NeuralEqualizer),
    Baseline {
        kind: BaselineKind,
        align: AlignmentMap,
        phy: PhysicalEqualizer,
    },
}

/// Pilots a method is fitted on: the training set for the neural
/// equalizer (which keeps `val` for early stopping), training and
/// validation sets together otherwise.
pub fn fitting_set(method: Method, train: &PilotSet, val: &PilotSet) -> PilotSet {
    if method == Method::Neural || val.is_empty() {
        return train.clone();
    }
    let join = |a: &RMat, b: &RMat| {
        let mut m = RMat::zeros(a.nrows(), a.ncols() + b.ncols());
        m.columns_mut(0, a.ncols()).copy_from(a);
        m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
        m
    };
    let labels = match (&train.labels, &val.labels) {
        (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
        _ => None,
    };
    let mut p = PilotSet::new(
        join(&train.s_theta, &val.s_theta),
        join(&train.s_gamma, &val.s_gamma),
        labels,
    )
    .expect("train and validation sets share dimensions");
    p.raw_theta = train.raw_theta;
    p.raw_gamma = train.raw_gamma;
    p
}

/// Fits `method` for one channel realization. The neural equalizer uses
/// `val` for early stopping; the other methods fit on `train` and `val`
/// together.
pub fn fit_method(
    method: Method,
    train: &PilotSet,
    val: &PilotSet,
    real: &ChannelRealization,
    noise: &NoiseModel,
    settings: &MethodSettings,
    seed: u64,
) -> Result<Fitted> {
    let fit_set = fitting_set(method, train, val);
    match method {
        Method::Linear => {
            let cfg = AdmmConfig {
                seed,
                ..settings.admm.clone()
            };
            Ok(Fitted::Linear(linear::fit(&fit_set, real, noise, &cfg)?))
        }
        Method::Neural => {
            let cfg = TrainConfig {
                seed,
                ..settings.train.clone()
            };
            Ok(Fitted::Neural(neural::train(
                train, val, real, noise, &cfg,
            )?))
        }
        Method::FirstK | Method::TopK | Method::EigenK => {
            let align = fit_alignment(&fit_set)?;
            let phy = fit_physical(real, noise, settings.physical_iters, seed)?;
            Ok(Fitted::Baseline {
                kind: method.baseline().expect("baseline method"),
                align,
                phy,
            })
        }
    }
}

impl Fitted {
    pub fn method(&self) -> Method {
        match self {
            Fitted::Linear(_) => Method::Linear,
            Fitted::Neural(_) => Method::Neural,
            Fitted::Baseline { kind, .. } => match kind {
                BaselineKind::FirstK => Method::FirstK,
                BaselineKind::TopK => Method::TopK,
                BaselineKind::EigenK => Method::EigenK,
            },
        }
    }

    /// RIS phases in use, if the method has any.
    pub fn phases(&self) -> RisPhases {
        match self {
            Fitted::Linear(eq) => eq.phi.clone(),
            Fitted::Neural(eq) => eq.phi(),
            Fitted::Baseline { phy, .. } => phy.phi.clone(),
        }
    }

    /// Replaces the RIS phases, keeping everything else fixed.
    pub fn with_phases(&self, phi: RisPhases) -> Fitted {
        let mut out = self.clone();
        match &mut out {
            Fitted::Linear(eq) => eq.phi = phi,
            Fitted::Neural(eq) => eq.phi_raw = phi.as_vec().clone(),
            Fitted::Baseline { phy, .. } => phy.phi = phi,
        }
        out
    }

    /// Target estimates (real coordinates, pad row dropped) for one noise
    /// draw from `seed`.
    pub fn reconstruct(
        &self,
        test: &PilotSet,
        real: &ChannelRealization,
        noise: &NoiseModel,
        seed: u64,
    ) -> Result<RMat> {
        let mut rng = substream(seed, Stream::Eval, 2);
        match self {
            Fitted::Linear(eq) => {
                let he = effective_channel(real, &eq.phi)?;
                let y = he.apply(&eq.encode(&test.z_theta)?)
                    + noise.sample_matrix(test.len(), &mut rng);
                Ok(test.gamma_from_complex(&eq.decode(&y)?))
            }
            Fitted::Neural(eq) => {
                let he = effective_channel(real, &eq.phi())?;
                let y = he.apply(&eq.encode(&test.z_theta)?)
                    + noise.sample_matrix(test.len(), &mut rng);
                Ok(test.gamma_from_complex(&eq.decode(&y)?))
            }
            Fitted::Baseline { kind, align, phy } => {
                let mut phy = phy.clone();
                phy.block = crate::channel::effective_block(real, &phy.phi)?;
                let (_, est) = run_baseline(*kind, test, align, &phy, real, noise, seed)?;
                Ok(est.rows(0, test.raw_gamma).into_owned())
            }
        }
    }

    /// Batch-mean transmit power on the given pilots.
    pub fn transmit_power(&self, pilots: &PilotSet) -> Result<f64> {
        match self {
            Fitted::Linear(eq) => Ok(fro_norm2(&eq.encode(&pilots.z_theta)?) / pilots.len() as f64),
            Fitted::Neural(eq) => Ok(eq.batch_power(pilots)),
            // every sample is normalized to unit power per slot
            Fitted::Baseline { phy, .. } => Ok(phy.k as f64 * fro_norm2(&phy.f)),
        }
    }

    pub fn sparsity(&self) -> f64 {
        match self {
            Fitted::Neural(eq) => eq.sparsity(),
            _ => 0.0,
        }
    }

    pub fn flops(&self, dims: &FlopDims) -> u64 {
        match self {
            Fitted::Neural(eq) => count_flops_neural(dims, eq.g2.w.ncols(), eq.sparsity()),
            _ => count_flops_linear(dims),
        }
    }
}

/// Mean `||s_gamma - s_gamma_hat||^2` over the test samples and
/// `n_draws` independent noise draws.
pub fn evaluate_mse(
    fitted: &Fitted,
    test: &PilotSet,
    real: &ChannelRealization,
    noise: &NoiseModel,
    n_draws: usize,
    seed: u64,
) -> Result<f64> {
    Ok(evaluate(fitted, test, None, real, noise, n_draws, seed)?.0)
}

/// Fraction of test samples whose estimate is nearest to the centroid of
/// their own class.
pub fn evaluate_accuracy(
    fitted: &Fitted,
    test: &PilotSet,
    centroids: &CentroidClassifier,
    real: &ChannelRealization,
    noise: &NoiseModel,
    seed: u64,
) -> Result<f64> {
    Ok(
        evaluate(fitted, test, Some(centroids), real, noise, 1, seed)?
            .1
            .expect("accuracy requested"),
    )
}

/// MSE and, when `centroids` is given, accuracy, both averaged over
/// `n_draws` noise draws. Draw `i` uses seed `seed + i`.
pub fn evaluate(
    fitted: &Fitted,
    test: &PilotSet,
    centroids: Option<&CentroidClassifier>,
    real: &ChannelRealization,
    noise: &NoiseModel,
    n_draws: usize,
    seed: u64,
) -> Result<(f64, Option<f64>)> {
    if test.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: 1,
            available: 0,
        });
    }
    let labels = match centroids {
        Some(_) => Some(test.labels.as_deref().ok_or(Error::MissingLabels)?),
        None => None,
    };
    let truth = test.s_gamma.rows(0, test.raw_gamma);
    let draws = n_draws.max(1);
    let (mut mse, mut acc) = (0.0, 0.0);
    for i in 0..draws {
        let est = fitted.reconstruct(test, real, noise, seed.wrapping_add(i as u64))?;
        mse += (&est - truth).norm_squared() / test.len() as f64;
        if let (Some(c), Some(l)) = (centroids, labels) {
            acc += c.accuracy(&est, l);
        }
    }
    let n = draws as f64;
    Ok((mse / n, centroids.map(|_| acc / n)))
}

/// Centroid classifier fitted on the matched target latents of `train`.
pub fn target_centroids(train: &PilotSet) -> Result<CentroidClassifier> {
    let labels = train.labels.as_deref().ok_or(Error::MissingLabels)?;
    let n_classes = train.n_classes().ok_or(Error::MissingLabels)?;
    CentroidClassifier::fit(
        &train.s_gamma.rows(0, train.raw_gamma).into_owned(),
        labels,
        n_classes,
    )
}

/// Dimensions entering the FLOP counts. `n_theta` and `n_gamma` are real
/// latent dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopDims {
    pub k: usize,
    pub nt: usize,
    pub nr: usize,
    pub n_theta: usize,
    pub n_gamma: usize,
}

/// Cost in FLOPs of one GELU evaluation.
pub const GELU_FLOPS: u64 = 100;

/// Complex matrix-vector products `F z` and `G y`; an `a × b` product costs
/// `a (8b - 2)`.
pub fn count_flops_linear(d: &FlopDims) -> u64 {
    let (k, nt, nr) = (d.k as u64, d.nt as u64, d.nr as u64);
    let (ht, hg) = (d.n_theta.div_ceil(2) as u64, d.n_gamma.div_ceil(2) as u64);
    k * nt * (8 * ht - 2) + hg * (8 * k * nr - 2)
}

/// Four dense layers at `8 (1 - s)` FLOPs per complex weight plus two
/// activation layers of width `hidden`.
pub fn count_flops_neural(d: &FlopDims, hidden: usize, sparsity: f64) -> u64 {
    let (k, nt, nr, h) = (d.k as u64, d.nt as u64, d.nr as u64, hidden as u64);
    let (ht, hg) = (d.n_theta.div_ceil(2) as u64, d.n_gamma.div_ceil(2) as u64);
    let weights = ht * h + h * k * nt + k * nr * h + h * hg;
    let active = ((1.0 - sparsity.clamp(0.0, 1.0)) * weights as f64).round() as u64;
    8 * active + 2 * GELU_FLOPS * h
}

pub fn count_flops(method: Method, d: &FlopDims, sparsity: f64) -> u64 {
    match method {
        Method::Neural => count_flops_neural(d, d.n_gamma.div_ceil(2), sparsity),
        _ => count_flops_linear(d),
    }
}
