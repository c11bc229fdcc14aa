//! Semantic pilot pairs: a synthetic class-structured generator, the binary
//! pilot file format, dataset splits and a nearest-centroid classifier used
//! as the downstream task.

use std::fs;
use std::path::Path;

use nalgebra::QR;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::linalg::{
    c64, complex_to_real_cols, real_to_complex_cols, whiten, CMat, CVec, RMat, RVec, Whitening, C64,
};
use crate::rng::{complex_normal_matrix, normal_matrix, substream, Stream};

pub const PILOT_MAGIC: &[u8; 8] = b"SEMPILOT";
pub const LABEL_MAGIC: &[u8; 8] = b"SEMLABEL";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound accepted for any dimension or sample count in a pilot file.
const MAX_HEADER_DIM: u64 = u32::MAX as u64;

/// Paired source/target latents with optional class labels.
///
/// Latent dimensions are padded to even length; `raw_theta`/`raw_gamma`
/// keep the original sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotSet {
    pub s_theta: RMat,
    pub s_gamma: RMat,
    pub labels: Option<Vec<u32>>,
    pub z_theta: CMat,
    pub z_gamma: CMat,
    pub raw_theta: usize,
    pub raw_gamma: usize,
}

fn pad_even(s: RMat) -> RMat {
    if s.nrows().is_multiple_of(2) {
        s
    } else {
        let rows = s.nrows();
        s.insert_row(rows, 0.0)
    }
}

impl PilotSet {
    pub fn new(s_theta: RMat, s_gamma: RMat, labels: Option<Vec<u32>>) -> Result<Self> {
        if s_theta.ncols() != s_gamma.ncols() {
            return Err(Error::dims(
                "pilot sample count",
                s_theta.ncols(),
                s_gamma.ncols(),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != s_theta.ncols() {
                return Err(Error::dims("label count", s_theta.ncols(), l.len()));
            }
        }
        if s_theta.nrows() == 0 || s_gamma.nrows() == 0 {
            return Err(Error::InvalidParameter("latent dimension is zero".into()));
        }
        if s_theta.iter().chain(s_gamma.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pilot latents"));
        }
        let raw_theta = s_theta.nrows();
        let raw_gamma = s_gamma.nrows();
        let s_theta = pad_even(s_theta);
        let s_gamma = pad_even(s_gamma);
        let z_theta = real_to_complex_cols(&s_theta);
        let z_gamma = real_to_complex_cols(&s_gamma);
        Ok(PilotSet {
            s_theta,
            s_gamma,
            labels,
            z_theta,
            z_gamma,
            raw_theta,
            raw_gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.s_theta.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Padded source dimension `N_theta`.
    pub fn n_theta(&self) -> usize {
        self.s_theta.nrows()
    }

    /// Padded target dimension `N_gamma`.
    pub fn n_gamma(&self) -> usize {
        self.s_gamma.nrows()
    }

    pub fn theta_padded(&self) -> bool {
        self.raw_theta != self.n_theta()
    }

    pub fn gamma_padded(&self) -> bool {
        self.raw_gamma != self.n_gamma()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|&c| c as usize + 1).max().unwrap_or(0))
    }

    /// Columns `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> PilotSet {
        let pick = |m: &RMat| RMat::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])]);
        let pickc = |m: &CMat| CMat::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])]);
        PilotSet {
            s_theta: pick(&self.s_theta),
            s_gamma: pick(&self.s_gamma),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            z_theta: pickc(&self.z_theta),
            z_gamma: pickc(&self.z_gamma),
            raw_theta: self.raw_theta,
            raw_gamma: self.raw_gamma,
        }
    }

    /// Target latents rebuilt from a complex estimate, pad row dropped.
    pub fn gamma_from_complex(&self, z: &CMat) -> RMat {
        complex_to_real_cols(z, self.raw_gamma)
    }
}

/// Source latents whitened with a transform fitted on training pilots and
/// target latents centered on the training mean. This is the coordinate
/// system the equalizers are designed in.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub whitening: Whitening<C64>,
    pub gamma_mean: CVec,
    pub raw_gamma: usize,
}

impl Standardizer {
    pub fn fit(train: &PilotSet) -> Result<Self> {
        let (whitening, _) = whiten(&train.z_theta)?;
        let n = train.len() as f64;
        let gamma_mean = train.z_gamma.column_sum() / c64(n, 0.0);
        Ok(Standardizer {
            whitening,
            gamma_mean,
            raw_gamma: train.raw_gamma,
        })
    }

    pub fn source(&self, z_theta: &CMat) -> CMat {
        self.whitening.apply(z_theta)
    }

    pub fn target(&self, z_gamma: &CMat) -> CMat {
        let mut out = z_gamma.clone();
        for mut col in out.column_iter_mut() {
            col -= &self.gamma_mean;
        }
        out
    }

    /// Adds the target mean back to centered estimates.
    pub fn restore_target(&self, centered: &CMat) -> CMat {
        let mut out = centered.clone();
        for mut col in out.column_iter_mut() {
            col += &self.gamma_mean;
        }
        out
    }

    /// `(whitened Z_theta, centered Z_gamma)` of a pilot set.
    pub fn apply(&self, pilots: &PilotSet) -> (CMat, CMat) {
        (self.source(&pilots.z_theta), self.target(&pilots.z_gamma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MismatchKind {
    Linear,
    Nonlinear,
}

/// Parameters of the synthetic pilot generator.
///
/// Concepts `u` are drawn from a Gaussian mixture with `n_classes`
/// components whose closest pair of means is `class_separation` apart. With
/// a positive `spectrum_decay` the within-class spread of concept
/// coordinate `i` is scaled by `(i + 1)^(-spectrum_decay / 2)` and the class
/// means by `(i + 1)^(-spectrum_decay)`, so the leading directions carry
/// both most of the variance and most of the class information. Each
/// agent sees `Q_x psi_x(u) + noise`, where `Q_x` is a random embedding with
/// orthonormal columns, `M_x` an agent-specific random Gaussian mixing with
/// entries of variance `1/d`, and `psi_x(u)` is `M_x u` (linear mismatch) or
/// `tanh(gain · M_x u)` (nonlinear mismatch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub concept_dim: usize,
    pub n_classes: usize,
    pub n_theta: usize,
    pub n_gamma: usize,
    pub mismatch: MismatchKind,
    pub class_separation: f64,
    pub latent_noise: f64,
    pub spectrum_decay: f64,
    pub nonlinear_gain: f64,
    /// Training budget; the validation set is carved out of it.
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            concept_dim: 32,
            n_classes: 10,
            n_theta: 64,
            n_gamma: 32,
            mismatch: MismatchKind::Linear,
            class_separation: 3.0,
            latent_noise: 0.1,
            spectrum_decay: 2.0,
            nonlinear_gain: 1.0,
            n_train: 2000,
            n_val: 400,
            n_test: 2000,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.concept_dim == 0 || !self.concept_dim.is_multiple_of(2) {
            return bad("concept_dim must be a positive even number");
        }
        if !self.n_theta.is_multiple_of(2) || !self.n_gamma.is_multiple_of(2) {
            return bad("n_theta and n_gamma must be even");
        }
        if self.n_theta < self.concept_dim || self.n_gamma < self.concept_dim {
            return bad("latent dimensions must be at least concept_dim");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if !(self.class_separation > 0.0) || !(self.latent_noise >= 0.0) {
            return bad("class_separation must be positive and latent_noise nonnegative");
        }
        if !(self.spectrum_decay >= 0.0 && self.spectrum_decay.is_finite()) {
            return bad("spectrum_decay must be finite and nonnegative");
        }
        if !(self.nonlinear_gain > 0.0 && self.nonlinear_gain.is_finite()) {
            return bad("nonlinear_gain must be positive");
        }
        if self.n_val > self.n_train {
            return bad("n_val must not exceed n_train");
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.n_train + self.n_test
    }
}

/// Random `rows × cols` real matrix with orthonormal columns that acts
/// complex-linearly on the packed latent layout, i.e. the realification of
/// a complex matrix with orthonormal columns.
fn complex_stiefel_embedding<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    let a = complex_normal_matrix(rng, rows / 2, cols / 2, 1.0);
    QR::new(a).q()
}

fn embed(q: &CMat, psi: &RMat) -> RMat {
    let z = q * real_to_complex_cols(psi);
    complex_to_real_cols(&z, 2 * q.nrows())
}

/// Class means in `R^d` with coordinate `i` scaled by `(i + 1)^(-decay)`,
/// rescaled so the closest pair is `separation` apart.
fn class_means<R: Rng>(
    rng: &mut R,
    d: usize,
    n_classes: usize,
    separation: f64,
    decay: f64,
) -> RMat {
    let mut means = normal_matrix(rng, d, n_classes);
    for (i, mut row) in means.row_iter_mut().enumerate() {
        row *= ((i + 1) as f64).powf(-decay);
    }
    let mut min_dist = f64::INFINITY;
    for a in 0..n_classes {
        for b in (a + 1)..n_classes {
            min_dist = min_dist.min((means.column(a) - means.column(b)).norm());
        }
    }
    means *= separation / min_dist;
    means
}

/// All `n_train + n_test` samples of the task, before splitting.
pub fn generate_pool(spec: &SyntheticTaskSpec) -> Result<PilotSet> {
    spec.validate()?;
    let d = spec.concept_dim;
    let n = spec.pool_size();
    let seed = spec.seed;
    let means = class_means(
        &mut substream(seed, Stream::Task, 0),
        d,
        spec.n_classes,
        spec.class_separation,
        spec.spectrum_decay,
    );
    let q_theta = complex_stiefel_embedding(&mut substream(seed, Stream::Task, 1), spec.n_theta, d);
    let q_gamma = complex_stiefel_embedding(&mut substream(seed, Stream::Task, 2), spec.n_gamma, d);

    let labels: Vec<u32> = (0..n).map(|i| (i % spec.n_classes) as u32).collect();
    let mut u = normal_matrix(&mut substream(seed, Stream::Task, 5), d, n);
    for (i, mut row) in u.row_iter_mut().enumerate() {
        row *= ((i + 1) as f64).powf(-spec.spectrum_decay / 2.0);
    }
    for (j, &c) in labels.iter().enumerate() {
        let mut col = u.column_mut(j);
        col += means.column(c as usize);
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mix = |index| normal_matrix(&mut substream(seed, Stream::Task, index), d, d) * scale;
    let (m_theta, m_gamma) = (mix(3), mix(4));
    let (psi_theta, psi_gamma) = match spec.mismatch {
        MismatchKind::Linear => (&m_theta * &u, &m_gamma * &u),
        MismatchKind::Nonlinear => {
            let g = spec.nonlinear_gain;
            (
                (&m_theta * &u).map(|x| (g * x).tanh()),
                (&m_gamma * &u).map(|x| (g * x).tanh()),
            )
        }
    };

    let noise = |index, rows| {
        normal_matrix(&mut substream(seed, Stream::Task, index), rows, n) * spec.latent_noise
    };
    let s_theta = embed(&q_theta, &psi_theta) + noise(6, spec.n_theta);
    let s_gamma = embed(&q_gamma, &psi_gamma) + noise(7, spec.n_gamma);
    PilotSet::new(s_theta, s_gamma, Some(labels))
}

/// Generates the task and splits it with the task seed into
/// `(train, val, test)` of sizes `n_train - n_val`, `n_val`, `n_test`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<(PilotSet, PilotSet, PilotSet)> {
    let pool = generate_pool(spec)?;
    split(&pool, spec.n_train, spec.n_val, spec.seed)
}

/// Shuffled split. The validation set is drawn from within the `n_train`
/// training budget; everything beyond it is the test set.
pub fn split(
    pilots: &PilotSet,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(PilotSet, PilotSet, PilotSet)> {
    let n = pilots.len();
    if n_train > n {
        return Err(Error::InsufficientSamples {
            needed: n_train,
            available: n,
        });
    }
    if n_val > n_train {
        return Err(Error::InsufficientSamples {
            needed: n_val,
            available: n_train,
        });
    }
    if n_train == n {
        log::warn!("split: no samples left for the test set");
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut substream(seed, Stream::Shuffle, 0));
    let val = pilots.select(&perm[..n_val]);
    let train = pilots.select(&perm[n_val..n_train]);
    let test = pilots.select(&perm[n_train..]);
    Ok((train, val, test))
}

/// Nearest-centroid classifier on real latents; ties go to the lowest
/// class id.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidClassifier {
    pub centroids: RMat,
}

impl CentroidClassifier {
    pub fn fit(s: &RMat, labels: &[u32], n_classes: usize) -> Result<Self> {
        if labels.len() != s.ncols() {
            return Err(Error::dims("classifier labels", s.ncols(), labels.len()));
        }
        let mut centroids = RMat::zeros(s.nrows(), n_classes);
        let mut counts = vec![0usize; n_classes];
        for (j, &c) in labels.iter().enumerate() {
            let c = c as usize;
            if c >= n_classes {
                return Err(Error::InvalidParameter(format!(
                    "label {c} out of range for {n_classes} classes"
                )));
            }
            let mut col = centroids.column_mut(c);
            col += s.column(j);
            counts[c] += 1;
        }
        for (c, &k) in counts.iter().enumerate() {
            if k > 0 {
                centroids.column_mut(c).scale_mut(1.0 / k as f64);
            } else {
                centroids.column_mut(c).fill(f64::INFINITY);
            }
        }
        Ok(CentroidClassifier { centroids })
    }

    pub fn predict_one(&self, x: &RVec) -> u32 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..self.centroids.ncols() {
            let d = (self.centroids.column(c) - x).norm_squared();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best as u32
    }

    pub fn predict(&self, s: &RMat) -> Vec<u32> {
        s.column_iter()
            .map(|col| self.predict_one(&col.into_owned()))
            .collect()
    }

    pub fn accuracy(&self, s: &RMat, labels: &[u32]) -> f64 {
        if labels.is_empty() {
            return f64::NAN;
        }
        let hits = self
            .predict(s)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        hits as f64 / labels.len() as f64
    }
}

/// Encodes a `dim × N` matrix in the pilot file format.
pub fn encode_pilot_matrix(s: &RMat) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(PILOT_MAGIC, FORMAT_VERSION);
    w.u64(s.ncols() as u64);
    w.u64(s.nrows() as u64);
    w.rmat(s);
    w.buf
}

/// Decodes a pilot file into a `dim × N` matrix.
pub fn decode_pilot_matrix(bytes: &[u8]) -> Result<RMat, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(PILOT_MAGIC, FORMAT_VERSION)?;
    let n = r.dim("N", MAX_HEADER_DIM)?;
    let dim = r.dim("dim", MAX_HEADER_DIM)?;
    if dim == 0 {
        return Err(FormatError::BadHeader("dim"));
    }
    let s = r.rmat(dim, n)?;
    r.finish()?;
    Ok(s)
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(LABEL_MAGIC, FORMAT_VERSION);
    w.u64(labels.len() as u64);
    for &l in labels {
        w.u32(l);
    }
    w.buf
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(LABEL_MAGIC, FORMAT_VERSION)?;
    let n = r.dim("N", MAX_HEADER_DIM)?;
    let labels = r.u32s(n)?;
    r.finish()?;
    Ok(labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads paired pilot files (and optional labels), padding odd dimensions.
pub fn load_pilots(
    path_theta: &Path,
    path_gamma: &Path,
    path_labels: Option<&Path>,
) -> Result<PilotSet> {
    let decode = |p: &Path| decode_pilot_matrix(&read_file(p)?).map_err(|e| Error::format(p, e));
    let s_theta = decode(path_theta)?;
    let s_gamma = decode(path_gamma)?;
    if s_theta.ncols() != s_gamma.ncols() {
        return Err(Error::format(
            path_gamma,
            FormatError::SampleCountMismatch {
                left: s_theta.ncols() as u64,
                right: s_gamma.ncols() as u64,
            },
        ));
    }
    let labels = match path_labels {
        Some(p) => {
            let l = decode_labels(&read_file(p)?).map_err(|e| Error::format(p, e))?;
            if l.len() != s_theta.ncols() {
                return Err(Error::format(
                    p,
                    FormatError::SampleCountMismatch {
                        left: s_theta.ncols() as u64,
                        right: l.len() as u64,
                    },
                ));
            }
            Some(l)
        }
        None => None,
    };
    PilotSet::new(s_theta, s_gamma, labels)
}

/// Writes the pilot files (pad rows dropped) and the labels when present.
pub fn save_pilots(
    pilots: &PilotSet,
    path_theta: &Path,
    path_gamma: &Path,
    path_labels: Option<&Path>,
) -> Result<()> {
    let raw = |m: &RMat, rows: usize| m.rows(0, rows).into_owned();
    write_file(
        path_theta,
        &encode_pilot_matrix(&raw(&pilots.s_theta, pilots.raw_theta)),
    )?;
    write_file(
        path_gamma,
        &encode_pilot_matrix(&raw(&pilots.s_gamma, pilots.raw_gamma)),
    )?;
    if let (Some(p), Some(l)) = (path_labels, &pilots.labels) {
        write_file(p, &encode_labels(l))?;
    }
    Ok(())
}

/// Least-squares residual `min_T ||T S_theta - S_gamma||_F / ||S_gamma||_F`
/// over real linear maps (used to characterise a task's mismatch).
pub fn linear_relative_residual(pilots: &PilotSet) -> f64 {
    let x = &pilots.s_theta;
    let y = &pilots.s_gamma;
    let svd = x.transpose().svd(true, true);
    // T^T = pinv(X^T) Y^T
    let tt = svd
        .solve(&y.transpose(), 1e-12 * svd.singular_values.max())
        .expect("svd computed with both factors");
    let resid = tt.transpose() * x - y;
    resid.norm() / y.norm()
}
