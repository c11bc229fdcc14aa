//! Disjoint "align, then transmit" baselines.
//!
//! A least-squares alignment map `T` is fitted offline on the pilots, and
//! the latent is sent over an SVD/MMSE physical link whose RIS phases are
//! tuned to make `G H_e F` close to the identity. Three ways of fitting the
//! latent into the `K N_t` complex symbols are provided: the leading
//! components (First-κ), the largest-magnitude components with free index
//! signalling (Top-κ) and a truncated-SVD factorization of `T` (Eigen-κ).
//!
//! Every transmission is normalized per sample to total power `P` over the
//! `K` channel uses; the receiver knows the scale. Symbols are placed
//! strongest stream first: slot `m` is stream `m / K` of use `m % K`.

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::channel::{effective_block, ChannelRealization, NoiseModel, RisPhases};
use crate::error::{Error, Result};
use crate::linalg::{c64, fro_norm2, svd, CMat, CVec, RMat, RVec, C64};
use crate::linear::{phi_step, StepRule};
use crate::pilots::PilotSet;
use crate::rng::{substream, SimRng, Stream};

const RIDGE_EPS: f64 = 1e-8;

/// Affine least-squares alignment `s_gamma ≈ T (s_theta - m_theta) + m_gamma`
/// and the SVD of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    pub t: RMat,
    pub mean_theta: RVec,
    pub mean_gamma: RVec,
    /// `T = U diag(sigma) V^T`, singular values nonincreasing.
    pub u: RMat,
    pub sigma: RVec,
    pub v: RMat,
}

fn centered(s: &RMat) -> (RVec, RMat) {
    let mean = s.column_mean();
    let mut c = s.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    (mean, c)
}

pub fn fit_alignment(train: &PilotSet) -> Result<AlignmentMap> {
    if train.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            available: train.len(),
        });
    }
    let (mean_theta, x) = centered(&train.s_theta);
    let (mean_gamma, y) = centered(&train.s_gamma);
    // T^T = (X X^T)^{-1} X Y^T
    let gram = &x * x.transpose();
    let rhs = &x * y.transpose();
    let tt = match gram.clone().cholesky().filter(|ch| {
        let d = ch.l_dirty().diagonal();
        d.min() * d.min() > 1e-13 * d.max() * d.max()
    }) {
        Some(ch) => ch.solve(&rhs),
        None => {
            log::warn!("fit_alignment: source Gram matrix is singular, ridge applied");
            let n = gram.nrows();
            let ridge = RIDGE_EPS * gram.trace().abs().max(1e-300) / n as f64;
            let reg = gram + RMat::identity(n, n) * ridge;
            reg.cholesky()
                .ok_or(Error::NoConvergence("ridge Cholesky"))?
                .solve(&rhs)
        }
    };
    let t = tt.transpose();
    let dec = SVD::try_new(t.clone(), true, true, f64::EPSILON, 10_000)
        .ok_or(Error::NoConvergence("alignment SVD"))?;
    let mut order: Vec<usize> = (0..dec.singular_values.len()).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));
    let (u0, vt0) = (dec.u.unwrap(), dec.v_t.unwrap());
    let u = RMat::from_fn(u0.nrows(), order.len(), |i, j| u0[(i, order[j])]);
    let v = RMat::from_fn(vt0.ncols(), order.len(), |i, j| vt0[(order[j], i)]);
    let sigma = RVec::from_fn(order.len(), |j, _| dec.singular_values[order[j]]);
    Ok(AlignmentMap {
        t,
        mean_theta,
        mean_gamma,
        u,
        sigma,
        v,
    })
}

impl AlignmentMap {
    pub fn apply(&self, s_theta: &RMat) -> RMat {
        let offset = &self.mean_gamma - &self.t * &self.mean_theta;
        let mut out = &self.t * s_theta;
        for mut col in out.column_iter_mut() {
            col += &offset;
        }
        out
    }
}

/// SVD/MMSE precoder and combiner for one channel use plus RIS phases.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalEqualizer {
    /// `N_t × N_t` precoder `sqrt(P/K) V / sqrt(N_t)`.
    pub f: CMat,
    /// `N_t × N_r` MMSE combiner recovering unit-power symbols.
    pub g: CMat,
    pub phi: RisPhases,
    pub block: CMat,
    /// Channel uses per latent.
    pub k: usize,
}

/// SVD/MMSE pair for the channel `h`. With per-use power `P/K` spread
/// evenly over `N_t` unit-power streams (amplitude `a = sqrt(P/(K N_t))`),
/// `F = a sqrt(N_t) V / sqrt(N_t)`, and the per-stream MMSE combiner is
/// `G = a^{-1} (Sigma^2 + sigma2/a^2)^{-1} Sigma U^H`. Zero singular values
/// get a zero combiner row (pseudo-inverse) in the noiseless case.
fn svd_mmse(h: &CMat, p: f64, k: usize, sigma2: f64) -> Result<(CMat, CMat)> {
    let nt = h.ncols();
    let dec = svd(h)?;
    let a = (p / (k * nt) as f64).sqrt();
    let f = &dec.v * c64(a, 0.0);
    let mut g = dec.u.adjoint();
    for (i, &s) in dec.sigma.iter().enumerate() {
        let denom = s * s + sigma2 / (a * a);
        let w = if denom > 0.0 && s > 0.0 {
            s / (a * denom)
        } else {
            0.0
        };
        g.row_mut(i).scale_mut(w);
    }
    Ok((f, g))
}

/// Alternates SVD/MMSE design with one projected gradient step on
/// `||I - G H_e(phi) F||^2` per iteration, then recomputes `F` and `G` for the
/// final phases.
pub fn fit_physical(
    real: &ChannelRealization,
    noise: &NoiseModel,
    n_iters: usize,
    seed: u64,
) -> Result<PhysicalEqualizer> {
    let p = &real.params;
    if p.nt != p.nr {
        return Err(Error::InvalidParameter(
            "the SVD/MMSE baseline link needs nt == nr".into(),
        ));
    }
    let nphi = real.nphi();
    let mut phi = RisPhases::random(nphi, &mut substream(seed, Stream::Ris, 1));
    if nphi > 0 {
        for _ in 0..n_iters {
            let block = effective_block(real, &phi)?;
            let (f, g) = svd_mmse(&block, p.power, p.k, noise.sigma2)?;
            let gd = &g * &real.hd * &f;
            let id = CMat::identity(gd.nrows(), gd.ncols());
            let v = CVec::from_column_slice((id - gd).as_slice());
            let gh2 = &g * &real.h2;
            let h1f = &real.h1 * &f;
            let mut d = CMat::zeros(v.len(), nphi);
            for j in 0..nphi {
                let outer = gh2.column(j) * h1f.row(j);
                d.column_mut(j).copy_from_slice(outer.as_slice());
            }
            phi = phi_step(&phi, &v, &d, StepRule::Lipschitz)?;
        }
    }
    let block = effective_block(real, &phi)?;
    let (f, g) = svd_mmse(&block, p.power, p.k, noise.sigma2)?;
    Ok(PhysicalEqualizer {
        f,
        g,
        phi,
        block,
        k: p.k,
    })
}

impl PhysicalEqualizer {
    /// `||I - G H F||_F^2`.
    pub fn residual(&self) -> f64 {
        let m = &self.g * &self.block * &self.f;
        let n = m.nrows();
        fro_norm2(&(CMat::identity(n, n) - m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    FirstK,
    TopK,
    EigenK,
}

/// Packs consecutive real pairs `(c_{2m}, c_{2m+1})` into complex symbols.
fn pack_pairs(c: &[f64]) -> Vec<C64> {
    c.chunks(2)
        .map(|p| c64(p[0], p.get(1).copied().unwrap_or(0.0)))
        .collect()
}

fn unpack_pairs(z: &[C64], len: usize) -> Vec<f64> {
    let mut out: Vec<f64> = z.iter().flat_map(|c| [c.re, c.im]).collect();
    out.truncate(len);
    out
}

/// Sends `payload` (at most `K N_t` symbols) multiplied by `scale` over
/// the link and returns the symbol estimates divided by `scale`.
fn transmit(
    payload: &[C64],
    scale: f64,
    phy: &PhysicalEqualizer,
    k: usize,
    noise: &NoiseModel,
    rng: &mut SimRng,
) -> Vec<C64> {
    let nt = phy.f.ncols();
    let nr = phy.g.ncols();
    debug_assert!(payload.len() <= k * nt);
    let mut e = CMat::zeros(nt, k);
    for (m, s) in payload.iter().enumerate() {
        e[(m / k, m % k)] = s * scale;
    }
    let w = NoiseModel {
        sigma2: noise.sigma2,
        dim: nr,
    }
    .sample_matrix(k, rng);
    let y = &phy.block * (&phy.f * e) + w;
    let est = &phy.g * y;
    (0..payload.len())
        .map(|m| est[(m / k, m % k)] / scale)
        .collect()
}

/// Indices of the `count` largest magnitudes; ties go to the lower index.
pub fn top_indices(x: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Runs one baseline on every test sample. Returns the mean squared error
/// `mean ||s_gamma - s_gamma_hat||^2` and the estimates.
pub fn run_baseline(
    kind: BaselineKind,
    test: &PilotSet,
    align: &AlignmentMap,
    phy: &PhysicalEqualizer,
    real: &ChannelRealization,
    noise: &NoiseModel,
    seed: u64,
) -> Result<(f64, RMat)> {
    let k = real.params.k;
    let nt = phy.f.ncols();
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    let n_theta = test.n_theta();
    if align.t.ncols() != n_theta || align.t.nrows() != test.n_gamma() {
        return Err(Error::dims(
            "baseline alignment",
            format!("{}x{}", test.n_gamma(), n_theta),
            format!("{}x{}", align.t.nrows(), align.t.ncols()),
        ));
    }
    let slots = k * nt;
    let n_gamma = test.n_gamma();
    let kept = match kind {
        BaselineKind::FirstK => (2 * slots).min(n_theta),
        BaselineKind::TopK => slots.min(n_theta),
        BaselineKind::EigenK => (2 * slots).min(align.sigma.len()),
    };
    // compress every sample: payload components and, for Top-κ, indices
    let mut payloads = Vec::with_capacity(test.len());
    let mut supports = Vec::with_capacity(test.len());
    for j in 0..test.len() {
        let x = test.s_theta.column(j) - &align.mean_theta;
        let (values, support): (Vec<f64>, Vec<usize>) = match kind {
            BaselineKind::FirstK => (x.as_slice()[..kept].to_vec(), Vec::new()),
            BaselineKind::TopK => {
                let idx = top_indices(x.as_slice(), kept);
                (idx.iter().map(|&i| x[i]).collect(), idx)
            }
            BaselineKind::EigenK => (
                (0..kept)
                    .map(|i| align.sigma[i].sqrt() * align.v.column(i).dot(&x))
                    .collect(),
                Vec::new(),
            ),
        };
        payloads.push(pack_pairs(&values));
        supports.push(support);
    }
    let mut rng = substream(seed, Stream::Noise, 2);
    let mut est = RMat::zeros(n_gamma, test.len());
    for (j, (payload, support)) in payloads.iter().zip(&supports).enumerate() {
        // unit average power per slot over all K N_t slots
        let e: f64 = payload.iter().map(|c| c.norm_sqr()).sum();
        let received = if e > 0.0 {
            let sym = transmit(payload, (slots as f64 / e).sqrt(), phy, k, noise, &mut rng);
            unpack_pairs(&sym, kept)
        } else {
            vec![0.0; kept]
        };
        let out: RVec = match kind {
            BaselineKind::FirstK => {
                let mut s_hat = RVec::zeros(n_theta);
                s_hat.rows_mut(0, kept).copy_from_slice(&received);
                &align.t * s_hat
            }
            BaselineKind::TopK => {
                let mut s_hat = RVec::zeros(n_theta);
                for (&i, v) in support.iter().zip(received) {
                    s_hat[i] = v;
                }
                &align.t * s_hat
            }
            BaselineKind::EigenK => {
                let mut s_hat = RVec::zeros(n_gamma);
                for (i, v) in received.into_iter().enumerate() {
                    s_hat += align.u.column(i) * (align.sigma[i].sqrt() * v);
                }
                s_hat
            }
        };
        est.column_mut(j).copy_from(&(out + &align.mean_gamma));
    }
    let raw = test.raw_gamma;
    let err: f64 = (0..test.len())
        .map(|j| {
            (0..raw)
                .map(|i| (est[(i, j)] - test.s_gamma[(i, j)]).powi(2))
                .sum::<f64>()
        })
        .sum();
    let mse = if test.is_empty() {
        f64::NAN
    } else {
        err / test.len() as f64
    };
    Ok((mse, est))
}

pub fn run_first_k(
    test: &PilotSet,
    align: &AlignmentMap,
    phy: &PhysicalEqualizer,
    real: &ChannelRealization,
    noise: &NoiseModel,
    seed: u64,
) -> Result<(f64, RMat)> {
    run_baseline(BaselineKind::FirstK, test, align, phy, real, noise, seed)
}

pub fn run_top_k(
    test: &PilotSet,
    align: &AlignmentMap,
    phy: &PhysicalEqualizer,
    real: &ChannelRealization,
    noise: &NoiseModel,
    seed: u64,
) -> Result<(f64, RMat)> {
    run_baseline(BaselineKind::TopK, test, align, phy, real, noise, seed)
}

pub fn run_eigen_k(
    test: &PilotSet,
    align: &AlignmentMap,
    phy: &PhysicalEqualizer,
    real: &ChannelRealization,
    noise: &NoiseModel,
    seed: u64,
) -> Result<(f64, RMat)> {
    run_baseline(BaselineKind::EigenK, test, align, phy, real, noise, seed)
}
