//! Joint linear pre/post equalizer with RIS phase design.
//!
//! The training problem
//!
//! ```text
//! min (1/N)||Z_g - G H_e(phi) F Z_t||_F^2 + sigma^2 ||G||_F^2
//! s.t. Tr(F^H F) <= P, |phi_i| = 1
//! ```
//!
//! is solved by scaled ADMM with the splitting `F = R`, cycling through
//! closed-form G, a Sylvester F update, projection of `F + S` onto the power
//! ball, one projected gradient step on `phi` and the dual update.
//! All routines work on whitened source latents `Z_t` and centered target
//! latents `Z_g` (see [`Standardizer`]).

use serde::{Deserialize, Serialize};

use crate::channel::{
    effective_channel, ChannelRealization, EffectiveChannel, NoiseModel, RisPhases,
};
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::linalg::{
    c64, fro_norm2, hermitian_eig, hermitian_part, power, solve_hpd, solve_sylvester, CMat, CVec,
    Whitening,
};
use crate::pilots::{PilotSet, Standardizer};
use crate::rng::{complex_normal_matrix, substream, Stream};

/// Relative ridge used when a normal-equation system is singular.
const RIDGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `alpha = 1 / sigma_max(D)^2`.
    Lipschitz,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iters: usize,
    pub step_rule: StepRule,
    pub tol_rel: f64,
    pub seed: u64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            max_iters: 30,
            step_rule: StepRule::Lipschitz,
            tol_rel: 1e-8,
            seed: 0,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter("rho must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "max_iters must be at least 1".into(),
            ));
        }
        if let StepRule::Fixed(a) = self.step_rule {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidParameter(
                    "fixed step must be nonnegative".into(),
                ));
            }
        }
        Ok(())
    }
}

fn check_cols(context: &'static str, a: &CMat, b: &CMat) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::dims(context, a.ncols(), b.ncols()));
    }
    Ok(())
}

/// `(1/N)||Z_g - G H_e F Z_t||^2 + sigma2 ||G||^2`, the expected training
/// loss with the noise term in closed form.
pub fn objective(
    z_theta: &CMat,
    z_gamma: &CMat,
    f: &CMat,
    g: &CMat,
    he: &EffectiveChannel,
    sigma2: f64,
) -> Result<f64> {
    check_cols("objective pilots", z_theta, z_gamma)?;
    if f.ncols() != z_theta.nrows() || f.nrows() != he.cols() {
        return Err(Error::dims(
            "objective F",
            format!("{}x{}", he.cols(), z_theta.nrows()),
            format!("{}x{}", f.nrows(), f.ncols()),
        ));
    }
    if g.ncols() != he.rows() || g.nrows() != z_gamma.nrows() {
        return Err(Error::dims(
            "objective G",
            format!("{}x{}", z_gamma.nrows(), he.rows()),
            format!("{}x{}", g.nrows(), g.ncols()),
        ));
    }
    let n = z_theta.ncols() as f64;
    let resid = z_gamma - he.left_multiply(g) * (f * z_theta);
    Ok(fro_norm2(&resid) / n + sigma2 * fro_norm2(g))
}

/// MMSE post-equalizer `G = Z_g Z~^H (Z~ Z~^H + N sigma2 I)^{-1}` with
/// `Z~ = H_e F Z_t`.
pub fn g_step(
    z_theta: &CMat,
    z_gamma: &CMat,
    f: &CMat,
    he: &EffectiveChannel,
    sigma2: f64,
) -> Result<CMat> {
    check_cols("g_step pilots", z_theta, z_gamma)?;
    let n = z_theta.ncols() as f64;
    let zr = he.apply(&(f * z_theta));
    let mut m = &zr * zr.adjoint();
    for i in 0..m.nrows() {
        m[(i, i)] += c64(n * sigma2, 0.0);
    }
    let (x, ridged) = solve_hpd(&m, &(&zr * z_gamma.adjoint()), RIDGE_EPS)?;
    if ridged {
        log::warn!("g_step: received-signal Gram matrix is singular, ridge applied");
    }
    Ok(x.adjoint())
}

/// Pre-equalizer update: minimizes
/// `(1/N)||Z_g - G H_e F Z_t||^2 + rho ||F - R + S||^2` by solving
/// `A F + F B = C` with `A = (G H_e)^H (G H_e)`, `B = N rho (Z_t Z_t^H)^{-1}`
/// and `C = [N rho (R - S) + (G H_e)^H Z_g Z_t^H] (Z_t Z_t^H)^{-1}`.
#[allow(clippy::too_many_arguments)]
pub fn f_step(
    z_theta: &CMat,
    z_gamma: &CMat,
    g: &CMat,
    he: &EffectiveChannel,
    r: &CMat,
    s: &CMat,
    rho: f64,
) -> Result<CMat> {
    check_cols("f_step pilots", z_theta, z_gamma)?;
    let n = z_theta.ncols() as f64;
    let d = z_theta.nrows();
    let gh = he.left_multiply(g);
    let a = hermitian_part(&(gh.adjoint() * &gh));
    let gram = z_theta * z_theta.adjoint();
    let (gram_inv, ridged) = solve_hpd(&gram, &CMat::identity(d, d), RIDGE_EPS)?;
    if ridged {
        log::warn!("f_step: source Gram matrix is singular, ridge applied");
    }
    let gram_inv = hermitian_part(&gram_inv);
    let nrho = c64(n * rho, 0.0);
    let b = &gram_inv * nrho;
    let c = ((r - s) * nrho + gh.adjoint() * z_gamma * z_theta.adjoint()) * &gram_inv;
    solve_sylvester(&a, &b, &c)
}

/// Euclidean projection onto `{R : Tr(R^H R) <= P}`.
pub fn r_step(x: &CMat, p: f64) -> CMat {
    let tr = power(x);
    if tr <= p {
        x.clone()
    } else {
        x * c64((p / tr).sqrt(), 0.0)
    }
}

/// Quadratic form of the residual in `phi`: returns `(v, D)` such that
/// `||v - D phi||^2 = ||Z_g - G H_e(phi) F Z_t||_F^2` for every `phi`.
///
/// `v = vec(Z_g - G (I_K ⊗ H_d) F Z_t)`; column `j` of `D` sums, over the
/// channel uses `l`, `vec(G_l h2_j h1_j^T F_l Z_t)`, where `G_l`/`F_l` are the
/// use-`l` blocks and `h2_j`/`h1_j^T` the `j`-th column/row of `H_2`/`H_1`.
pub fn build_ris_system(
    z_theta: &CMat,
    z_gamma: &CMat,
    f: &CMat,
    g: &CMat,
    real: &ChannelRealization,
) -> Result<(CVec, CMat)> {
    check_cols("build_ris_system pilots", z_theta, z_gamma)?;
    let k = real.params.k;
    let (nt, nr, nphi) = (real.hd.ncols(), real.hd.nrows(), real.nphi());
    let direct = EffectiveChannel {
        block: real.hd.clone(),
        k,
    };
    if f.nrows() != k * nt || g.ncols() != k * nr {
        return Err(Error::dims(
            "build_ris_system",
            format!("F rows {} / G cols {}", k * nt, k * nr),
            format!("{} / {}", f.nrows(), g.ncols()),
        ));
    }
    let fz = f * z_theta;
    let resid = z_gamma - direct.left_multiply(g) * &fz;
    let v = CVec::from_column_slice(resid.as_slice());

    let (m, n) = z_gamma.shape();
    let mut d = CMat::zeros(m * n, nphi);
    for l in 0..k {
        // P_l = G_l H_2 (columns p_j), Q_l = H_1 F_l Z_t (rows q_j)
        let p_l = g.columns(l * nr, nr) * &real.h2;
        let q_l = &real.h1 * fz.rows(l * nt, nt);
        for j in 0..nphi {
            let outer = p_l.column(j) * q_l.row(j);
            let mut col = d.column_mut(j);
            for (dst, src) in col.iter_mut().zip(outer.iter()) {
                *dst += *src;
            }
        }
    }
    Ok((v, d))
}

/// Step size used by [`phi_step`] for the system `D`.
pub fn step_size(d: &CMat, rule: StepRule) -> Result<f64> {
    match rule {
        StepRule::Fixed(a) => Ok(a),
        StepRule::Lipschitz => {
            if d.ncols() == 0 {
                return Ok(0.0);
            }
            let (eig, _) = hermitian_eig(&(d.adjoint() * d))?;
            let lmax = eig.iter().copied().fold(0.0, f64::max);
            Ok(if lmax > 0.0 { 1.0 / lmax } else { 0.0 })
        }
    }
}

/// One projected gradient step `Pi(phi - alpha D^H (D phi - v))`.
pub fn phi_step(phi: &RisPhases, v: &CVec, d: &CMat, rule: StepRule) -> Result<RisPhases> {
    if d.ncols() != phi.len() || d.nrows() != v.len() {
        return Err(Error::dims(
            "phi_step",
            format!("D {}x{}", v.len(), phi.len()),
            format!("D {}x{}", d.nrows(), d.ncols()),
        ));
    }
    let alpha = step_size(d, rule)?;
    let grad = d.adjoint() * (d * phi.as_vec() - v);
    let raw = phi.as_vec() - grad * c64(alpha, 0.0);
    Ok(RisPhases::project(&raw, Some(phi)))
}

/// A fitted linear equalizer together with the standardization of its
/// inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEqualizer {
    /// `K N_t × N_theta/2` pre-equalizer.
    pub f: CMat,
    /// `N_gamma/2 × K N_r` post-equalizer.
    pub g: CMat,
    pub r: CMat,
    pub s: CMat,
    pub phi: RisPhases,
    pub rho: f64,
    pub power: f64,
    pub k: usize,
    /// Objective after every outer iteration, evaluated at the feasible
    /// iterate `(R, G, phi)`.
    pub history: Vec<f64>,
    pub standardizer: Standardizer,
}

fn init_precoder(rows: usize, cols: usize, p: f64, seed: u64) -> CMat {
    let f = complex_normal_matrix(&mut substream(seed, Stream::Init, 0), rows, cols, 1.0);
    let scale = (p / power(&f)).sqrt();
    f * c64(scale, 0.0)
}

/// Fits the equalizer on training pilots for a fixed channel realization.
pub fn fit(
    train: &PilotSet,
    real: &ChannelRealization,
    noise: &NoiseModel,
    cfg: &AdmmConfig,
) -> Result<LinearEqualizer> {
    cfg.validate()?;
    real.params.validate()?;
    let standardizer = Standardizer::fit(train)?;
    let (zt, zg) = standardizer.apply(train);
    let k = real.params.k;
    let p = real.params.power;
    let sigma2 = noise.sigma2;
    let nphi = real.nphi();

    let mut f = init_precoder(k * real.params.nt, zt.nrows(), p, cfg.seed);
    let mut r = f.clone();
    let mut s = CMat::zeros(f.nrows(), f.ncols());
    let mut phi = RisPhases::random(nphi, &mut substream(cfg.seed, Stream::Ris, 0));
    let mut history = Vec::with_capacity(cfg.max_iters);

    for it in 0..cfg.max_iters {
        let he = effective_channel(real, &phi)?;
        let g = g_step(&zt, &zg, &f, &he, sigma2)?;
        f = f_step(&zt, &zg, &g, &he, &r, &s, cfg.rho)?;
        r = r_step(&(&f + &s), p);
        if nphi > 0 {
            let (v, d) = build_ris_system(&zt, &zg, &f, &g, real)?;
            phi = phi_step(&phi, &v, &d, cfg.step_rule)?;
        }
        s += &f - &r;
        let he = effective_channel(real, &phi)?;
        let obj = objective(&zt, &zg, &r, &g, &he, sigma2)?;
        if !obj.is_finite() {
            return Err(Error::NonFinite("linear equalizer objective"));
        }
        let converged = history.last().is_some_and(|&prev: &f64| {
            (prev - obj).abs() <= cfg.tol_rel * prev.abs().max(f64::MIN_POSITIVE)
        });
        history.push(obj);
        log::debug!("admm iteration {it}: objective {obj:.6e}");
        if converged {
            break;
        }
    }

    // Use the feasible iterate, fill the power budget and refit G. Scaling F
    // up by c >= 1 never increases the optimal objective (G/c keeps the fit
    // and shrinks the noise term), and the refit G is optimal for the
    // final F.
    let tr = power(&r);
    let f_final = if tr > 0.0 {
        &r * c64((p / tr).sqrt(), 0.0)
    } else {
        init_precoder(r.nrows(), r.ncols(), p, cfg.seed)
    };
    let he = effective_channel(real, &phi)?;
    let g_final = g_step(&zt, &zg, &f_final, &he, sigma2)?;

    Ok(LinearEqualizer {
        f: f_final,
        g: g_final,
        r,
        s,
        phi,
        rho: cfg.rho,
        power: p,
        k,
        history,
        standardizer,
    })
}

impl LinearEqualizer {
    /// Transmitted symbols `F W (z - mean)` for source latents `z` (columns).
    pub fn encode(&self, z_theta: &CMat) -> Result<CMat> {
        if z_theta.nrows() != self.f.ncols() {
            return Err(Error::dims(
                "linear encode",
                self.f.ncols(),
                z_theta.nrows(),
            ));
        }
        Ok(&self.f * self.standardizer.source(z_theta))
    }

    /// Target estimate `G y + mean` from received symbols `y` (columns).
    pub fn decode(&self, y: &CMat) -> Result<CMat> {
        if y.nrows() != self.g.ncols() {
            return Err(Error::dims("linear decode", self.g.ncols(), y.nrows()));
        }
        Ok(self.standardizer.restore_target(&(&self.g * y)))
    }

    /// Objective of the fitted equalizer on a pilot set (standardized with
    /// the training statistics).
    pub fn objective_on(
        &self,
        pilots: &PilotSet,
        real: &ChannelRealization,
        sigma2: f64,
    ) -> Result<f64> {
        let (zt, zg) = self.standardizer.apply(pilots);
        let he = effective_channel(real, &self.phi)?;
        objective(&zt, &zg, &self.f, &self.g, &he, sigma2)
    }

    /// Re-optimizes only the RIS phases with `steps` projected gradient steps
    /// on the training pilots, keeping `F` and `G` fixed. Starts from the
    /// given phases.
    pub fn adapt_phases(
        &self,
        train: &PilotSet,
        real: &ChannelRealization,
        start: RisPhases,
        steps: usize,
        rule: StepRule,
    ) -> Result<RisPhases> {
        let (zt, zg) = self.standardizer.apply(train);
        let mut phi = start;
        if phi.is_empty() {
            return Ok(phi);
        }
        let (v, d) = build_ris_system(&zt, &zg, &self.f, &self.g, real)?;
        for _ in 0..steps {
            phi = phi_step(&phi, &v, &d, rule)?;
        }
        Ok(phi)
    }
}

pub const LINEAR_MAGIC: &[u8; 8] = b"SEMEQLIN";
pub const LINEAR_VERSION: u32 = 1;
const MAX_DIM: u64 = 1 << 20;

/// Serializes the inference state (F, G, phi, standardization).
///
/// Layout after the magic and `u32` version: `u64` fields `k`, `nt`, `nr`,
/// `nphi`, `n_theta/2`, `n_gamma/2`, raw target dim, then `f64` power and
/// `rho`, `u32` whitening-floored flag, then complex matrices as interleaved
/// `(re, im)` f64 pairs in column-major order: F, G, phi, whitening mean,
/// whitening matrix, target mean.
pub fn encode_linear(eq: &LinearEqualizer) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(LINEAR_MAGIC, LINEAR_VERSION);
    let nt = eq.f.nrows() / eq.k;
    let nr = eq.g.ncols() / eq.k;
    for v in [
        eq.k,
        nt,
        nr,
        eq.phi.len(),
        eq.f.ncols(),
        eq.g.nrows(),
        eq.standardizer.raw_gamma,
    ] {
        w.u64(v as u64);
    }
    w.f64(eq.power);
    w.f64(eq.rho);
    w.u32(eq.standardizer.whitening.floored as u32);
    w.cmat(&eq.f);
    w.cmat(&eq.g);
    w.cmat(&CMat::from_column_slice(
        eq.phi.len(),
        1,
        eq.phi.as_vec().as_slice(),
    ));
    let wh = &eq.standardizer.whitening;
    w.cmat(&CMat::from_column_slice(
        wh.mean.len(),
        1,
        wh.mean.as_slice(),
    ));
    w.cmat(&wh.w);
    let gm = &eq.standardizer.gamma_mean;
    w.cmat(&CMat::from_column_slice(gm.len(), 1, gm.as_slice()));
    w.buf
}

fn column(m: CMat) -> CVec {
    CVec::from_column_slice(m.as_slice())
}

/// Inverse of [`encode_linear`]. Training-only state (`R`, `S`, history)
/// is not stored; `R` is restored as `F` and `S` as zero.
pub fn decode_linear(bytes: &[u8]) -> Result<LinearEqualizer, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(LINEAR_MAGIC, LINEAR_VERSION)?;
    let k = r.dim("k", MAX_DIM)?;
    let nt = r.dim("nt", MAX_DIM)?;
    let nr = r.dim("nr", MAX_DIM)?;
    let nphi = r.dim("nphi", MAX_DIM)?;
    let dt = r.dim("n_theta", MAX_DIM)?;
    let dg = r.dim("n_gamma", MAX_DIM)?;
    let raw_gamma = r.dim("raw_gamma", MAX_DIM)?;
    if k == 0 || nt == 0 || nr == 0 || dt == 0 || dg == 0 {
        return Err(FormatError::BadHeader("zero dimension"));
    }
    if raw_gamma > 2 * dg || raw_gamma + 1 < 2 * dg {
        return Err(FormatError::BadHeader("raw_gamma"));
    }
    let p = r.f64()?;
    let rho = r.f64()?;
    if !(p > 0.0 && p.is_finite()) || !(rho > 0.0 && rho.is_finite()) {
        return Err(FormatError::BadHeader("power/rho"));
    }
    let floored = match r.u32()? {
        0 => false,
        1 => true,
        _ => return Err(FormatError::BadHeader("floored flag")),
    };
    let kt = k.checked_mul(nt).ok_or(FormatError::BadHeader("k*nt"))?;
    let kr = k.checked_mul(nr).ok_or(FormatError::BadHeader("k*nr"))?;
    let f = r.cmat(kt, dt)?;
    let g = r.cmat(dg, kr)?;
    let phi = RisPhases::new(column(r.cmat(nphi, 1)?))
        .map_err(|_| FormatError::BadHeader("phi modulus"))?;
    let mean = column(r.cmat(dt, 1)?);
    let wmat = r.cmat(dt, dt)?;
    let gamma_mean = column(r.cmat(dg, 1)?);
    r.finish()?;
    Ok(LinearEqualizer {
        r: f.clone(),
        s: CMat::zeros(kt, dt),
        f,
        g,
        phi,
        rho,
        power: p,
        k,
        history: Vec::new(),
        standardizer: Standardizer {
            whitening: Whitening {
                mean,
                w: wmat,
                floored,
            },
            gamma_mean,
            raw_gamma,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channel, ChannelParams};
    use crate::linalg::{real_to_complex_cols, svd, whiten};
    use crate::rng::normal_matrix;

    struct Instance {
        zt: CMat,
        zg: CMat,
        real: ChannelRealization,
        f: CMat,
        g: CMat,
    }

    fn instance(seed: u64, k: usize, nt: usize, nphi: usize, n: usize) -> Instance {
        let params = ChannelParams {
            nt,
            nr: nt,
            nphi,
            k,
            alpha_d: 1.0,
            alpha_1: 1.0,
            alpha_2: 1.0,
            snr_db: 10.0,
            power: 1.0,
        };
        let real = sample_channel(&params, seed).unwrap();
        let mut rng = substream(seed, Stream::Eval, 0);
        let zt = whiten(&complex_normal_matrix(&mut rng, 8, n, 1.0))
            .unwrap()
            .1;
        let zg = complex_normal_matrix(&mut rng, 4, n, 1.0);
        let f = complex_normal_matrix(&mut rng, k * nt, 8, 0.1);
        let g = complex_normal_matrix(&mut rng, 4, k * nt, 1.0);
        Instance { zt, zg, real, f, g }
    }

    /// Central differences of `obj` over the real and imaginary parts of
    /// every entry of `x`.
    fn fd_gradient_norm(x: &CMat, obj: impl Fn(&CMat) -> f64) -> f64 {
        let h = 1e-6;
        let mut acc = 0.0;
        for idx in 0..x.len() {
            for dir in [c64(h, 0.0), c64(0.0, h)] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[idx] += dir;
                xm[idx] -= dir;
                let gr = (obj(&xp) - obj(&xm)) / (2.0 * h);
                acc += gr * gr;
            }
        }
        acc.sqrt()
    }

    #[test]
    fn g_step_is_stationary() {
        for seed in 0..5 {
            let ins = instance(seed, 2, 2, 3, 64);
            let phi = RisPhases::random(3, &mut substream(seed, Stream::Ris, 0));
            let he = effective_channel(&ins.real, &phi).unwrap();
            let g = g_step(&ins.zt, &ins.zg, &ins.f, &he, 0.05).unwrap();
            let norm = fd_gradient_norm(&g, |g| {
                objective(&ins.zt, &ins.zg, &ins.f, g, &he, 0.05).unwrap()
            });
            assert!(norm < 1e-6, "seed {seed}: {norm}");
        }
    }

    #[test]
    fn g_step_shrinks_with_noise() {
        let ins = instance(1, 2, 2, 0, 64);
        let he = effective_channel(&ins.real, &RisPhases::ones(0)).unwrap();
        let mut prev = f64::INFINITY;
        for sigma2 in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let g = g_step(&ins.zt, &ins.zg, &ins.f, &he, sigma2).unwrap();
            let norm = g.norm();
            assert!(norm < prev);
            prev = norm;
        }
    }

    #[test]
    fn g_step_interpolates_square_system() {
        // K N_r = N = 4 with an invertible received signal
        let params = ChannelParams {
            nt: 2,
            nr: 2,
            nphi: 0,
            k: 2,
            alpha_d: 1.0,
            ..ChannelParams::default()
        };
        let real = sample_channel(&params, 3).unwrap();
        let he = effective_channel(&real, &RisPhases::ones(0)).unwrap();
        let mut rng = substream(3, Stream::Eval, 0);
        let zt = complex_normal_matrix(&mut rng, 4, 4, 1.0);
        let zg = complex_normal_matrix(&mut rng, 3, 4, 1.0);
        let f = complex_normal_matrix(&mut rng, 4, 4, 1.0);
        let g = g_step(&zt, &zg, &f, &he, 0.0).unwrap();
        let zr = he.apply(&(&f * &zt));
        let oracle = &zg * zr.clone().try_inverse().unwrap();
        assert!((&g - oracle).norm() < 1e-8 * g.norm());
        assert!(objective(&zt, &zg, &f, &g, &he, 0.0).unwrap() < 1e-18);
    }

    fn f_subobjective(
        ins: &Instance,
        he: &EffectiveChannel,
        f: &CMat,
        r: &CMat,
        s: &CMat,
        rho: f64,
    ) -> f64 {
        let n = ins.zt.ncols() as f64;
        let fit = fro_norm2(&(&ins.zg - he.left_multiply(&ins.g) * (f * &ins.zt))) / n;
        fit + rho * fro_norm2(&(f - r + s))
    }

    #[test]
    fn f_step_is_stationary() {
        for seed in 0..5 {
            let ins = instance(seed, 2, 2, 3, 64);
            let he = effective_channel(&ins.real, &RisPhases::ones(3)).unwrap();
            let mut rng = substream(seed, Stream::Eval, 1);
            let r = complex_normal_matrix(&mut rng, 4, 8, 0.1);
            let s = complex_normal_matrix(&mut rng, 4, 8, 0.01);
            let f = f_step(&ins.zt, &ins.zg, &ins.g, &he, &r, &s, 0.7).unwrap();
            let norm = fd_gradient_norm(&f, |f| f_subobjective(&ins, &he, f, &r, &s, 0.7));
            assert!(norm < 1e-6, "seed {seed}: {norm}");
        }
    }

    #[test]
    fn f_step_with_zero_post_equalizer_returns_prox_center() {
        let ins = instance(2, 2, 2, 0, 64);
        let he = effective_channel(&ins.real, &RisPhases::ones(0)).unwrap();
        let mut rng = substream(2, Stream::Eval, 1);
        let r = complex_normal_matrix(&mut rng, 4, 8, 1.0);
        let s = complex_normal_matrix(&mut rng, 4, 8, 1.0);
        // unwhitened source so the Gram matrix is not a multiple of I
        let zt = complex_normal_matrix(&mut rng, 8, 64, 2.0);
        let f = f_step(&zt, &ins.zg, &CMat::zeros(4, 4), &he, &r, &s, 1.0).unwrap();
        assert!((f - (&r - &s)).norm() < 1e-10);
    }

    #[test]
    fn f_step_proximal_limit() {
        let ins = instance(4, 2, 2, 0, 64);
        let he = effective_channel(&ins.real, &RisPhases::ones(0)).unwrap();
        let mut rng = substream(4, Stream::Eval, 1);
        let r = complex_normal_matrix(&mut rng, 4, 8, 1.0);
        let s = CMat::zeros(4, 8);
        let dist = |rho| (f_step(&ins.zt, &ins.zg, &ins.g, &he, &r, &s, rho).unwrap() - &r).norm();
        let (d1, d2) = (dist(1e3), dist(1e4));
        assert!(d2 < d1 / 9.0, "{d1} {d2}");
    }

    /// Projection onto the power ball by bisection on the multiplier.
    fn bisection_projection(x: &CMat, p: f64) -> CMat {
        if power(x) <= p {
            return x.clone();
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while power(&(x / c64(1.0 + hi, 0.0))) > p {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if power(&(x / c64(1.0 + mid, 0.0))) > p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        x / c64(1.0 + hi, 0.0)
    }

    #[test]
    fn r_step_examples_and_oracle() {
        let x = CMat::from_element(2, 2, c64(0.5f64.sqrt() / 2.0, 0.0));
        assert!((power(&x) - 0.5).abs() < 1e-15);
        assert_eq!(r_step(&x, 1.0), x);
        let x4 = CMat::from_element(1, 4, c64(1.0, 0.0));
        let r = r_step(&x4, 1.0);
        assert!((r - CMat::from_element(1, 4, c64(0.5, 0.0))).norm() < 1e-15);

        let mut rng = substream(0, Stream::Eval, 2);
        for _ in 0..20 {
            let x = complex_normal_matrix(&mut rng, 3, 5, 1.0);
            let r = r_step(&x, 1.0);
            assert!((power(&r) - 1.0).abs() < 1e-12);
            assert!((&r - bisection_projection(&x, 1.0)).norm() < 1e-10);
        }
    }

    #[test]
    fn r_step_is_the_closest_feasible_point() {
        let mut rng = substream(1, Stream::Eval, 2);
        for _ in 0..100 {
            let x = complex_normal_matrix(&mut rng, 2, 3, 2.0);
            let r = r_step(&x, 1.0);
            let d = (&x - &r).norm();
            for _ in 0..100 {
                let y = r_step(&complex_normal_matrix(&mut rng, 2, 3, 1.0), 1.0);
                assert!(d <= (&x - &y).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn ris_system_matches_direct_objective() {
        for k in 1..=3 {
            for nphi in [1, 4, 8] {
                let ins = instance(k as u64 * 10 + nphi as u64, k, 2, nphi, 16);
                let (v, d) = build_ris_system(&ins.zt, &ins.zg, &ins.f, &ins.g, &ins.real).unwrap();
                let phi = RisPhases::random(nphi, &mut substream(7, Stream::Ris, k as u32));
                let quad = (&v - &d * phi.as_vec()).norm_squared();
                let he = effective_channel(&ins.real, &phi).unwrap();
                let direct = fro_norm2(&(&ins.zg - he.left_multiply(&ins.g) * (&ins.f * &ins.zt)));
                assert!(
                    ((quad - direct) / direct).abs() < 1e-10,
                    "k {k} nphi {nphi}"
                );
            }
        }
    }

    #[test]
    fn ris_system_degenerate_cases() {
        let ins = instance(5, 2, 2, 0, 8);
        let (v, d) = build_ris_system(&ins.zt, &ins.zg, &ins.f, &ins.g, &ins.real).unwrap();
        assert_eq!(d.ncols(), 0);
        let he = effective_channel(&ins.real, &RisPhases::ones(0)).unwrap();
        let direct = &ins.zg - he.left_multiply(&ins.g) * (&ins.f * &ins.zt);
        assert_eq!(v.as_slice(), direct.as_slice());

        // K = 1: D equals the single-use construction
        let ins = instance(6, 1, 2, 3, 8);
        let (_, d) = build_ris_system(&ins.zt, &ins.zg, &ins.f, &ins.g, &ins.real).unwrap();
        let fz = &ins.f * &ins.zt;
        for j in 0..3 {
            let oracle = (&ins.g * ins.real.h2.column(j)) * (ins.real.h1.row(j) * &fz);
            assert!((d.column(j) - CVec::from_column_slice(oracle.as_slice())).norm() < 1e-12);
        }
    }

    #[test]
    fn phi_step_fixed_points() {
        let phi = RisPhases::from_angles(&[0.3, -1.2]);
        let v = CVec::from_element(5, c64(1.0, 2.0));
        let zero = CMat::zeros(5, 2);
        assert_eq!(phi_step(&phi, &v, &zero, StepRule::Lipschitz).unwrap(), phi);
        let d = complex_normal_matrix(&mut substream(0, Stream::Eval, 3), 5, 2, 1.0);
        let out = phi_step(&phi, &v, &d, StepRule::Fixed(0.0)).unwrap();
        assert!((out.as_vec() - phi.as_vec()).norm() < 1e-15);
    }

    #[test]
    fn single_element_step_matches_grid_search() {
        let mut rng = substream(2, Stream::Eval, 4);
        for _ in 0..10 {
            let d = normal_matrix(&mut rng, 6, 1).map(|x| c64(x, 0.0));
            let v = normal_matrix(&mut rng, 6, 1).map(|x| c64(x, 0.0));
            let v = CVec::from_column_slice(v.as_slice());
            let start = RisPhases::random(1, &mut rng);
            let out = phi_step(&start, &v, &d, StepRule::Lipschitz).unwrap();
            let cost = |p: C64Local| (&v - &d * p).norm_squared();
            let best = (0..10_000)
                .map(|i| {
                    let a = i as f64 * std::f64::consts::TAU / 10_000.0;
                    c64(a.cos(), a.sin())
                })
                .min_by(|a, b| cost(*a).partial_cmp(&cost(*b)).unwrap())
                .unwrap();
            let got = out.as_vec()[0];
            assert!(cost(got) <= cost(best) + 1e-9);
            // real data: the optimum is +1 or -1
            assert!((got.re.abs() - 1.0).abs() < 1e-12);
        }
    }

    type C64Local = crate::linalg::C64;

    fn identical_agent_pilots(n: usize, seed: u64) -> PilotSet {
        let s = normal_matrix(&mut substream(seed, Stream::Eval, 5), 16, n);
        // target = first 4 complex coordinates of the source
        let zg = real_to_complex_cols(&s).rows(0, 4).into_owned();
        let sg = crate::linalg::complex_to_real_cols(&zg, 8);
        PilotSet::new(s, sg, None).unwrap()
    }

    #[test]
    fn exact_recovery_without_noise() {
        let pilots = identical_agent_pilots(64, 1);
        let params = ChannelParams {
            nt: 4,
            nr: 4,
            nphi: 0,
            k: 2,
            alpha_d: 1.0,
            snr_db: f64::INFINITY,
            ..ChannelParams::default()
        };
        let real = sample_channel(&params, 1).unwrap();
        let noise = NoiseModel::from_params(&params);
        let eq = fit(&pilots, &real, &noise, &AdmmConfig::default()).unwrap();
        assert!(eq.history.len() <= 30);
        let y = effective_channel(&real, &eq.phi)
            .unwrap()
            .apply(&eq.encode(&pilots.z_theta).unwrap());
        let est = eq.decode(&y).unwrap();
        let mse = fro_norm2(&(est - &pilots.z_gamma)) / 64.0;
        assert!(mse < 1e-6, "{mse}");
        assert!((power(&eq.f) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fit_respects_constraints_and_is_deterministic() {
        let s = normal_matrix(&mut substream(3, Stream::Eval, 6), 16, 128);
        let t = normal_matrix(&mut substream(3, Stream::Eval, 7), 8, 16) * &s;
        let pilots = PilotSet::new(s, t, None).unwrap();
        let params = ChannelParams {
            nt: 2,
            nr: 2,
            nphi: 4,
            k: 2,
            ..ChannelParams::default()
        };
        let real = sample_channel(&params, 3).unwrap();
        let noise = NoiseModel::from_params(&params);
        let cfg = AdmmConfig {
            seed: 9,
            ..AdmmConfig::default()
        };
        let eq = fit(&pilots, &real, &noise, &cfg).unwrap();
        assert!(power(&eq.f) <= 1.0 + 1e-9);
        assert!(eq.phi.max_modulus_error() < 1e-9);
        // whitened training pilots carry exactly Tr(F F^H) per sample
        let x = eq.encode(&pilots.z_theta).unwrap();
        assert!((fro_norm2(&x) / 128.0 - 1.0).abs() < 1e-9);
        assert_eq!(fit(&pilots, &real, &noise, &cfg).unwrap(), eq);
    }

    #[test]
    fn objective_examples() {
        let ins = instance(8, 2, 2, 2, 32);
        let he = effective_channel(&ins.real, &RisPhases::ones(2)).unwrap();
        let zero_g = CMat::zeros(4, 4);
        let o = objective(&ins.zt, &ins.zg, &ins.f, &zero_g, &he, 0.3).unwrap();
        assert!((o - fro_norm2(&ins.zg) / 32.0).abs() < 1e-12);
        assert!(objective(&ins.zt, &ins.zg, &ins.f, &CMat::zeros(3, 4), &he, 0.3).is_err());
    }

    #[test]
    fn objective_matches_monte_carlo() {
        let ins = instance(9, 2, 2, 2, 16);
        let he = effective_channel(&ins.real, &RisPhases::ones(2)).unwrap();
        let sigma2 = 0.2;
        let analytic = objective(&ins.zt, &ins.zg, &ins.f, &ins.g, &he, sigma2).unwrap();
        let clean = he.apply(&(&ins.f * &ins.zt));
        let model = NoiseModel { sigma2, dim: 4 };
        let mut rng = substream(9, Stream::Noise, 0);
        let draws = 100_000 / 16 + 1;
        let mut acc = 0.0;
        for _ in 0..draws {
            let y = &clean + model.sample_matrix(16, &mut rng);
            acc += fro_norm2(&(&ins.zg - &ins.g * y)) / 16.0;
        }
        let mc = acc / draws as f64;
        assert!(
            ((mc - analytic) / analytic).abs() < 0.01,
            "{mc} vs {analytic}"
        );
    }

    #[test]
    fn encode_decode_pseudo_inverse_roundtrip() {
        let pilots = identical_agent_pilots(64, 2);
        let st = Standardizer::fit(&pilots).unwrap();
        let mut rng = substream(2, Stream::Eval, 8);
        let f = complex_normal_matrix(&mut rng, 8, 8, 1.0);
        let sv = svd(&f).unwrap();
        let mut sinv = CMat::zeros(8, 8);
        for i in 0..8 {
            sinv[(i, i)] = c64(1.0 / sv.sigma[i], 0.0);
        }
        let pinv = &sv.v * sinv * sv.u.adjoint();
        let eq = LinearEqualizer {
            f: f.clone(),
            g: pinv,
            r: f.clone(),
            s: CMat::zeros(8, 8),
            phi: RisPhases::ones(0),
            rho: 1.0,
            power: 1.0,
            k: 1,
            history: vec![],
            standardizer: Standardizer {
                gamma_mean: CVec::zeros(8),
                raw_gamma: 16,
                ..st.clone()
            },
        };
        let x = eq.encode(&pilots.z_theta).unwrap();
        let back = eq.decode(&x).unwrap();
        assert!((back - st.source(&pilots.z_theta)).norm() < 1e-8);

        let id = LinearEqualizer {
            f: CMat::identity(8, 8),
            ..eq.clone()
        };
        assert_eq!(
            id.encode(&pilots.z_theta).unwrap(),
            st.source(&pilots.z_theta)
        );
    }

    #[test]
    fn serialization_roundtrip() {
        let s = normal_matrix(&mut substream(4, Stream::Eval, 6), 16, 64);
        let t = normal_matrix(&mut substream(4, Stream::Eval, 7), 7, 64);
        let pilots = PilotSet::new(s, t, None).unwrap();
        let params = ChannelParams {
            nt: 2,
            nr: 2,
            nphi: 3,
            k: 2,
            ..ChannelParams::default()
        };
        let real = sample_channel(&params, 4).unwrap();
        let eq = fit(
            &pilots,
            &real,
            &NoiseModel::from_params(&params),
            &AdmmConfig {
                max_iters: 3,
                ..AdmmConfig::default()
            },
        )
        .unwrap();
        let bytes = encode_linear(&eq);
        let back = decode_linear(&bytes).unwrap();
        assert_eq!(back.f, eq.f);
        assert_eq!(back.g, eq.g);
        assert_eq!(back.phi, eq.phi);
        assert_eq!(back.standardizer, eq.standardizer);
        for cut in [0, 10, 40, bytes.len() - 3] {
            assert!(decode_linear(&bytes[..cut]).is_err());
        }
    }
}
