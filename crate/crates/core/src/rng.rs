//! Reproducible random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by the
//! experiment seed and a (purpose, index) pair, so channel draws, noise,
//! initializations and shuffles never share state and can be regenerated
//! independently.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::linalg::{c64, CMat, C64};

pub type SimRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    Channel = 1,
    Noise = 2,
    Init = 3,
    Shuffle = 4,
    Task = 5,
    Ris = 6,
    Eval = 7,
}

/// Substream for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: Stream, index: u32) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | index as u64);
    rng
}

/// Circular complex Gaussian with total variance `var`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c64(s * re, s * im)
}

pub fn complex_normal_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    var: f64,
) -> CMat {
    // column-major fill keeps the draw order independent of nalgebra internals
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(complex_normal(rng, var));
    }
    CMat::from_vec(rows, cols, data)
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(rng.sample::<f64, _>(StandardNormal));
    }
    DMatrix::from_vec(rows, cols, data)
}
