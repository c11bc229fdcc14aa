//! Rayleigh MIMO channel with a passive RIS, receiver noise and the SNR
//! convention used by every experiment.
//!
//! The `K`-use effective channel is block diagonal with `K` copies of
//! `H_d + H_2 diag(phi) H_1`; [`EffectiveChannel`] stores one block and
//! applies it per use.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c64, CMat, CVec};
use crate::rng::{complex_normal, complex_normal_matrix, substream, SimRng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub nt: usize,
    pub nr: usize,
    pub nphi: usize,
    pub k: usize,
    pub alpha_d: f64,
    pub alpha_1: f64,
    pub alpha_2: f64,
    /// Transmission SNR in dB; `inf` gives a noiseless channel.
    pub snr_db: f64,
    pub power: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            nt: 8,
            nr: 8,
            nphi: 16,
            k: 1,
            alpha_d: 1e6,
            alpha_1: 10.0,
            alpha_2: 10.0,
            snr_db: 10.0,
            power: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.nt == 0 || self.nr == 0 || self.k == 0 {
            return Err(Error::InvalidParameter(
                "nt, nr and k must be at least 1".into(),
            ));
        }
        for (name, a) in [
            ("alpha_d", self.alpha_d),
            ("alpha_1", self.alpha_1),
            ("alpha_2", self.alpha_2),
        ] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::InvalidParameter("power must be positive".into()));
        }
        if self.snr_db.is_nan() {
            return Err(Error::InvalidParameter("snr_db is NaN".into()));
        }
        Ok(())
    }

    pub fn snr_linear(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }

    /// Transmitted complex symbols per latent.
    pub fn symbols(&self) -> usize {
        self.k * self.nt
    }
}

/// One draw of the direct and RIS channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `nr × nt`
    pub hd: CMat,
    /// `nphi × nt`
    pub h1: CMat,
    /// `nr × nphi`
    pub h2: CMat,
    pub params: ChannelParams,
    pub seed: u64,
}

/// Draws `H_d`, `H_1`, `H_2` with i.i.d. `CN(0, 1/alpha)` entries.
pub fn sample_channel(params: &ChannelParams, seed: u64) -> Result<ChannelRealization> {
    params.validate()?;
    let mut rng = substream(seed, Stream::Channel, 0);
    let hd = complex_normal_matrix(&mut rng, params.nr, params.nt, 1.0 / params.alpha_d);
    let mut rng = substream(seed, Stream::Channel, 1);
    let h1 = complex_normal_matrix(&mut rng, params.nphi, params.nt, 1.0 / params.alpha_1);
    let mut rng = substream(seed, Stream::Channel, 2);
    let h2 = complex_normal_matrix(&mut rng, params.nr, params.nphi, 1.0 / params.alpha_2);
    Ok(ChannelRealization {
        hd,
        h1,
        h2,
        params: params.clone(),
        seed,
    })
}

impl ChannelRealization {
    /// Replaces the direct channel by a fresh draw with attenuation `alpha_d`
    /// (e.g. a blockage), keeping the RIS links.
    pub fn with_redrawn_direct(&self, alpha_d: f64, seed: u64) -> Result<Self> {
        let mut params = self.params.clone();
        params.alpha_d = alpha_d;
        params.validate()?;
        let mut rng = substream(seed, Stream::Channel, 3);
        let hd = complex_normal_matrix(&mut rng, params.nr, params.nt, 1.0 / alpha_d);
        Ok(ChannelRealization {
            hd,
            params,
            ..self.clone()
        })
    }

    /// Same channel with RIS links of `nphi` elements drawn from `seed`.
    pub fn with_ris(&self, nphi: usize, seed: u64) -> Result<Self> {
        let mut params = self.params.clone();
        params.nphi = nphi;
        let mut rng = substream(seed, Stream::Channel, 4);
        let h1 = complex_normal_matrix(&mut rng, nphi, params.nt, 1.0 / params.alpha_1);
        let mut rng = substream(seed, Stream::Channel, 5);
        let h2 = complex_normal_matrix(&mut rng, params.nr, nphi, 1.0 / params.alpha_2);
        Ok(ChannelRealization {
            h1,
            h2,
            params,
            ..self.clone()
        })
    }

    pub fn nphi(&self) -> usize {
        self.h1.nrows()
    }
}

/// Tolerance on `|phi_i| = 1`.
pub const UNIT_MODULUS_TOL: f64 = 1e-9;

/// Unit-modulus RIS reflection coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RisPhases(CVec);

impl RisPhases {
    pub fn new(phi: CVec) -> Result<Self> {
        for (index, p) in phi.iter().enumerate() {
            let modulus = p.norm();
            if !((modulus - 1.0).abs() <= UNIT_MODULUS_TOL) {
                return Err(Error::NotUnitModulus { index, modulus });
            }
        }
        Ok(RisPhases(phi))
    }

    pub fn ones(n: usize) -> Self {
        RisPhases(CVec::from_element(n, c64(1.0, 0.0)))
    }

    pub fn from_angles(angles: &[f64]) -> Self {
        RisPhases(CVec::from_iterator(
            angles.len(),
            angles.iter().map(|a| c64(a.cos(), a.sin())),
        ))
    }

    /// Uniformly random phases.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let angles: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Self::from_angles(&angles)
    }

    /// Elementwise projection `phi_i / |phi_i|` onto the unit circle. An
    /// element of (near) zero magnitude has no defined direction; it takes
    /// the corresponding entry of `fallback`, or `1` when there is none.
    pub fn project(raw: &CVec, fallback: Option<&RisPhases>) -> Self {
        RisPhases(CVec::from_fn(raw.len(), |i, _| {
            let r = raw[i].norm();
            if r > f64::MIN_POSITIVE && r.is_finite() {
                raw[i] / r
            } else {
                fallback.map_or(c64(1.0, 0.0), |f| f.0[i])
            }
        }))
    }

    pub fn as_vec(&self) -> &CVec {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_modulus_error(&self) -> f64 {
        self.0
            .iter()
            .map(|p| (p.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// The `K`-use block-diagonal channel `I_K ⊗ block`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveChannel {
    /// `nr × nt` per-use block.
    pub block: CMat,
    pub k: usize,
}

pub fn effective_block(real: &ChannelRealization, phi: &RisPhases) -> Result<CMat> {
    if phi.len() != real.nphi() {
        return Err(Error::dims("effective_channel", real.nphi(), phi.len()));
    }
    let mut block = real.hd.clone();
    if !phi.is_empty() {
        let mut h2_phi = real.h2.clone();
        for (j, p) in phi.as_vec().iter().enumerate() {
            for v in h2_phi.column_mut(j).iter_mut() {
                *v *= *p;
            }
        }
        block += h2_phi * &real.h1;
    }
    Ok(block)
}

/// `H_e = I_K ⊗ (H_d + H_2 diag(phi) H_1)`.
pub fn effective_channel(real: &ChannelRealization, phi: &RisPhases) -> Result<EffectiveChannel> {
    Ok(EffectiveChannel {
        block: effective_block(real, phi)?,
        k: real.params.k,
    })
}

impl EffectiveChannel {
    pub fn nr(&self) -> usize {
        self.block.nrows()
    }

    pub fn nt(&self) -> usize {
        self.block.ncols()
    }

    pub fn rows(&self) -> usize {
        self.k * self.nr()
    }

    pub fn cols(&self) -> usize {
        self.k * self.nt()
    }

    /// `H_e X` for `X` with `K·nt` rows.
    pub fn apply(&self, x: &CMat) -> CMat {
        assert_eq!(x.nrows(), self.cols(), "effective channel input rows");
        let (nr, nt) = (self.nr(), self.nt());
        let mut out = CMat::zeros(self.rows(), x.ncols());
        for k in 0..self.k {
            let y = &self.block * x.rows(k * nt, nt);
            out.rows_mut(k * nr, nr).copy_from(&y);
        }
        out
    }

    /// `G H_e` for `G` with `K·nr` columns.
    pub fn left_multiply(&self, g: &CMat) -> CMat {
        assert_eq!(g.ncols(), self.rows(), "post-equalizer columns");
        let (nr, nt) = (self.nr(), self.nt());
        let mut out = CMat::zeros(g.nrows(), self.cols());
        for k in 0..self.k {
            let y = g.columns(k * nr, nr) * &self.block;
            out.columns_mut(k * nt, nt).copy_from(&y);
        }
        out
    }

    /// Materialized `K·nr × K·nt` matrix.
    pub fn dense(&self) -> CMat {
        let (nr, nt) = (self.nr(), self.nt());
        let mut out = CMat::zeros(self.rows(), self.cols());
        for k in 0..self.k {
            out.view_mut((k * nr, k * nt), (nr, nt))
                .copy_from(&self.block);
        }
        out
    }
}

/// Receiver noise `w ~ CN(0, sigma2 I_dim)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma2: f64,
    pub dim: usize,
}

impl NoiseModel {
    /// `sigma2 = P / (K · SNR)`, so that the transmission SNR `P/(K sigma2)`
    /// is exactly the configured value.
    pub fn from_params(params: &ChannelParams) -> Self {
        let snr = params.snr_linear();
        let sigma2 = if snr.is_infinite() {
            0.0
        } else {
            params.power / (params.k as f64 * snr)
        };
        NoiseModel {
            sigma2,
            dim: params.k * params.nr,
        }
    }

    pub fn noiseless(dim: usize) -> Self {
        NoiseModel { sigma2: 0.0, dim }
    }

    pub fn sample(&self, rng: &mut SimRng) -> CVec {
        sample_noise_with(self, rng)
    }

    /// `dim × cols` matrix of independent noise vectors.
    pub fn sample_matrix(&self, cols: usize, rng: &mut SimRng) -> CMat {
        if self.sigma2 == 0.0 {
            return CMat::zeros(self.dim, cols);
        }
        complex_normal_matrix(rng, self.dim, cols, self.sigma2)
    }
}

fn sample_noise_with(model: &NoiseModel, rng: &mut SimRng) -> CVec {
    if model.sigma2 == 0.0 {
        return CVec::zeros(model.dim);
    }
    CVec::from_iterator(
        model.dim,
        (0..model.dim).map(|_| complex_normal(rng, model.sigma2)),
    )
}

/// One noise vector drawn from the `Noise` substream of `seed`.
pub fn sample_noise(model: &NoiseModel, seed: u64) -> CVec {
    sample_noise_with(model, &mut substream(seed, Stream::Noise, 0))
}

/// `zeta = K nt / (N_theta / 2)`.
pub fn compression_factor(params: &ChannelParams, n_theta: usize) -> f64 {
    let half = n_theta.div_ceil(2);
    (params.k * params.nt) as f64 / half as f64
}
