//! Complex-valued neural pre/post equalizers with a trainable RIS.
//!
//! Pre-equalizer `f`: dense (`N_theta/2 -> h`, magnitude-GELU) then dense
//! (`h -> K N_t`), followed by power normalization. Post-equalizer `g`: dense
//! (`K N_r -> h`, magnitude-GELU) then dense (`h -> N_gamma/2`). Both nets and
//! the raw RIS phases are trained jointly with Adam on the sampled MSE,
//! with optional hard-thresholding sparsity.
//!
//! Gradients of the real loss with respect to a complex parameter `x` are
//! represented as `dL/dRe(x) + i dL/dIm(x)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::channel::{effective_block, ChannelRealization, NoiseModel, RisPhases};
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::linalg::{c64, fro_norm2, CMat, CVec, Whitening, C64};
use crate::pilots::{PilotSet, Standardizer};
use crate::rng::{complex_normal_matrix, substream, SimRng, Stream};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// Below this magnitude the activation is replaced by its linearization.
const SMALL_MAGNITUDE: f64 = 1e-12;

fn gelu(r: f64) -> f64 {
    0.5 * r * (1.0 + erf(r / SQRT_2))
}

fn gelu_prime(r: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(r / SQRT_2));
    let pdf = (-0.5 * r * r).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + r * pdf
}

/// `GELU(|z|) z / |z|`, and 0 at the origin.
pub fn mod_gelu(z: C64) -> C64 {
    let r = z.norm();
    if r < SMALL_MAGNITUDE {
        // GELU(r) = r/2 + O(r^2)
        return z * 0.5;
    }
    z * (gelu(r) / r)
}

/// Backpropagates `g_out` through [`mod_gelu`] at input `z`.
fn mod_gelu_backward(z: C64, g_out: C64) -> C64 {
    let r = z.norm();
    if r < SMALL_MAGNITUDE {
        return g_out * 0.5;
    }
    let u = z / r;
    let proj = u.conj() * g_out;
    // radial part scales with h'(r), tangential part with h(r)/r
    u * proj.re * gelu_prime(r) + u * C64::i() * proj.im * (gelu(r) / r)
}

/// Complex dense layer `y = W x + b` with a pruning mask over `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexDense {
    pub w: CMat,
    pub b: CVec,
    /// Column-major like `w`; `false` marks a pruned weight.
    pub mask: Vec<bool>,
}

impl ComplexDense {
    /// Glorot-style init: entries `CN(0, 1/(in + out))`, zero bias.
    pub fn glorot(out: usize, inp: usize, rng: &mut SimRng) -> Self {
        let var = 1.0 / (inp + out) as f64;
        ComplexDense {
            w: complex_normal_matrix(rng, out, inp, var),
            b: CVec::zeros(out),
            mask: vec![true; out * inp],
        }
    }

    pub fn forward(&self, x: &CMat) -> CMat {
        let mut y = &self.w * x;
        for mut col in y.column_iter_mut() {
            col += &self.b;
        }
        y
    }

    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn total(&self) -> usize {
        self.mask.len()
    }

    fn apply_mask(&mut self) {
        for (w, &m) in self.w.iter_mut().zip(&self.mask) {
            if !m {
                *w = c64(0.0, 0.0);
            }
        }
    }

    /// Adds every active weight with `|w| < threshold` to the pruned set.
    fn prune(&mut self, threshold: f64) {
        for (w, m) in self.w.iter_mut().zip(self.mask.iter_mut()) {
            if *m && w.norm() < threshold {
                *m = false;
            }
            if !*m {
                *w = c64(0.0, 0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: CMat,
    pub b: CVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub f1: LayerGrad,
    pub f2: LayerGrad,
    pub g1: LayerGrad,
    pub g2: LayerGrad,
    pub phi: CVec,
}

/// How the pre-equalizer output is scaled to the power budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleMode {
    /// `c = sqrt(P B / ||X||^2)` from the current batch (training).
    Batch,
    /// A fixed scale (inference).
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x0: CMat,
    pub a1: CMat,
    pub h1: CMat,
    /// Unnormalized pre-equalizer output.
    pub x: CMat,
    pub scale: f64,
    /// Transmitted symbols `scale * x`.
    pub t: CMat,
    pub y: CMat,
    pub a3: CMat,
    pub h3: CMat,
    pub out: CMat,
    pub block: CMat,
    pub phi: RisPhases,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralEqualizer {
    pub f1: ComplexDense,
    pub f2: ComplexDense,
    pub g1: ComplexDense,
    pub g2: ComplexDense,
    /// Raw (unprojected) RIS parameters; the channel uses their projection.
    pub phi_raw: CVec,
    /// Normalization scale used at inference.
    pub scale: f64,
    pub power: f64,
    pub k: usize,
    pub standardizer: Standardizer,
    /// Validation MSE after every epoch.
    pub history: Vec<f64>,
}

fn apply_block(block: &CMat, k: usize, x: &CMat) -> CMat {
    let (nr, nt) = block.shape();
    let mut out = CMat::zeros(k * nr, x.ncols());
    for l in 0..k {
        let y = block * x.rows(l * nt, nt);
        out.rows_mut(l * nr, nr).copy_from(&y);
    }
    out
}

fn apply_block_adjoint(block: &CMat, k: usize, y: &CMat) -> CMat {
    let (nr, nt) = block.shape();
    let bh = block.adjoint();
    let mut out = CMat::zeros(k * nt, y.ncols());
    for l in 0..k {
        let x = &bh * y.rows(l * nr, nr);
        out.rows_mut(l * nt, nt).copy_from(&x);
    }
    out
}

fn row_sums(m: &CMat) -> CVec {
    m.column_sum()
}

fn dense_backward(layer: &ComplexDense, x: &CMat, g_y: &CMat) -> (LayerGrad, CMat) {
    let mut gw = g_y * x.adjoint();
    for (g, &m) in gw.iter_mut().zip(&layer.mask) {
        if !m {
            *g = c64(0.0, 0.0);
        }
    }
    let gx = layer.w.adjoint() * g_y;
    (
        LayerGrad {
            w: gw,
            b: row_sums(g_y),
        },
        gx,
    )
}

impl NeuralEqualizer {
    /// Randomly initialized network for the given dimensions.
    pub fn init(
        n_source: usize,
        hidden: usize,
        n_target: usize,
        real: &ChannelRealization,
        seed: u64,
        standardizer: Standardizer,
    ) -> Self {
        let p = &real.params;
        let (kt, kr) = (p.k * p.nt, p.k * p.nr);
        let layer =
            |i, out, inp| ComplexDense::glorot(out, inp, &mut substream(seed, Stream::Init, i));
        let f1 = layer(1, hidden, n_source);
        let f2 = layer(2, kt, hidden);
        let g1 = layer(3, hidden, kr);
        let g2 = layer(4, n_target, hidden);
        let phi = RisPhases::random(real.nphi(), &mut substream(seed, Stream::Ris, 0));
        NeuralEqualizer {
            f1,
            f2,
            g1,
            g2,
            phi_raw: phi.as_vec().clone(),
            scale: 1.0,
            power: p.power,
            k: p.k,
            standardizer,
            history: Vec::new(),
        }
    }

    pub fn phi(&self) -> RisPhases {
        RisPhases::project(&self.phi_raw, None)
    }

    fn layers(&self) -> [&ComplexDense; 4] {
        [&self.f1, &self.f2, &self.g1, &self.g2]
    }

    pub fn active_weights(&self) -> usize {
        self.layers().iter().map(|l| l.active()).sum()
    }

    pub fn total_weights(&self) -> usize {
        self.layers().iter().map(|l| l.total()).sum()
    }

    /// Fraction of pruned weights, `1 - active/total`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.active_weights() as f64 / self.total_weights() as f64
    }

    /// Unnormalized pre-equalizer output for standardized inputs.
    fn pre_raw(&self, x0: &CMat) -> (CMat, CMat, CMat) {
        let a1 = self.f1.forward(x0);
        let h1 = a1.map(mod_gelu);
        let x = self.f2.forward(&h1);
        (a1, h1, x)
    }

    fn post(&self, y: &CMat) -> (CMat, CMat, CMat) {
        let a3 = self.g1.forward(y);
        let h3 = a3.map(mod_gelu);
        let out = self.g2.forward(&h3);
        (a3, h3, out)
    }

    /// Full forward pass on standardized source latents with a given noise
    /// realization (`K N_r × B`).
    pub fn forward(
        &self,
        x0: &CMat,
        real: &ChannelRealization,
        noise: &CMat,
        mode: ScaleMode,
    ) -> Result<ForwardCache> {
        if x0.nrows() != self.f1.w.ncols() {
            return Err(Error::dims(
                "neural forward input",
                self.f1.w.ncols(),
                x0.nrows(),
            ));
        }
        if noise.shape() != (self.g1.w.ncols(), x0.ncols()) {
            return Err(Error::dims(
                "neural forward noise",
                format!("{}x{}", self.g1.w.ncols(), x0.ncols()),
                format!("{}x{}", noise.nrows(), noise.ncols()),
            ));
        }
        let (a1, h1, x) = self.pre_raw(x0);
        let scale = match mode {
            ScaleMode::Batch => {
                let e = fro_norm2(&x);
                if e > 0.0 {
                    (self.power * x.ncols() as f64 / e).sqrt()
                } else {
                    1.0
                }
            }
            ScaleMode::Fixed(c) => c,
        };
        let t = &x * c64(scale, 0.0);
        let phi = self.phi();
        let block = effective_block(real, &phi)?;
        let y = apply_block(&block, self.k, &t) + noise;
        let (a3, h3, out) = self.post(&y);
        Ok(ForwardCache {
            x0: x0.clone(),
            a1,
            h1,
            x,
            scale,
            t,
            y,
            a3,
            h3,
            out,
            block,
            phi,
        })
    }

    /// Sampled loss `(1/B) ||out - target||^2` and its exact gradients.
    pub fn loss_and_gradients(
        &self,
        x0: &CMat,
        target: &CMat,
        real: &ChannelRealization,
        noise: &CMat,
        mode: ScaleMode,
    ) -> Result<(f64, Gradients, ForwardCache)> {
        let cache = self.forward(x0, real, noise, mode)?;
        let b = x0.ncols() as f64;
        let diff = &cache.out - target;
        let loss = fro_norm2(&diff) / b;
        let g_out = diff * c64(2.0 / b, 0.0);

        let (g2, g_h3) = dense_backward(&self.g2, &cache.h3, &g_out);
        let g_a3 = cache.a3.zip_map(&g_h3, mod_gelu_backward);
        let (g1, g_y) = dense_backward(&self.g1, &cache.y, &g_a3);

        // channel: y_l = B t_l for each use l
        let g_t = apply_block_adjoint(&cache.block, self.k, &g_y);
        let (nr, nt) = cache.block.shape();
        let mut g_block = CMat::zeros(nr, nt);
        for l in 0..self.k {
            g_block += g_y.rows(l * nr, nr) * cache.t.rows(l * nt, nt).adjoint();
        }
        let g_p = (real.h2.adjoint() * &g_block * real.h1.adjoint()).diagonal();
        let g_phi = CVec::from_fn(self.phi_raw.len(), |j, _| {
            let r = self.phi_raw[j].norm();
            if r > f64::MIN_POSITIVE && r.is_finite() {
                let u = self.phi_raw[j] / r;
                u * C64::i() * ((u.conj() * g_p[j]).im / r)
            } else {
                c64(0.0, 0.0)
            }
        });

        let c = cache.scale;
        let g_x = match mode {
            ScaleMode::Batch => {
                let e = fro_norm2(&cache.x);
                let inner: f64 = g_t
                    .iter()
                    .zip(cache.x.iter())
                    .map(|(a, b)| (a.conj() * b).re)
                    .sum();
                &g_t * c64(c, 0.0) - &cache.x * c64(c * inner / e, 0.0)
            }
            ScaleMode::Fixed(_) => &g_t * c64(c, 0.0),
        };
        let (f2, g_h1) = dense_backward(&self.f2, &cache.h1, &g_x);
        let g_a1 = cache.a1.zip_map(&g_h1, mod_gelu_backward);
        let (f1, _) = dense_backward(&self.f1, &cache.x0, &g_a1);

        Ok((
            loss,
            Gradients {
                f1,
                f2,
                g1,
                g2,
                phi: g_phi,
            },
            cache,
        ))
    }

    /// Transmitted symbols for raw source latents, using the inference
    /// scale.
    pub fn encode(&self, z_theta: &CMat) -> Result<CMat> {
        if z_theta.nrows() != self.f1.w.ncols() {
            return Err(Error::dims(
                "neural encode",
                self.f1.w.ncols(),
                z_theta.nrows(),
            ));
        }
        let (_, _, x) = self.pre_raw(&self.standardizer.source(z_theta));
        Ok(x * c64(self.scale, 0.0))
    }

    /// Target estimates (with the training mean restored) from received
    /// symbols.
    pub fn decode(&self, y: &CMat) -> Result<CMat> {
        if y.nrows() != self.g1.w.ncols() {
            return Err(Error::dims("neural decode", self.g1.w.ncols(), y.nrows()));
        }
        let (_, _, out) = self.post(y);
        Ok(self.standardizer.restore_target(&out))
    }

    /// Batch-mean transmit power of the training-mode forward pass, in
    /// which the whole set is one normalization batch.
    pub fn batch_power(&self, pilots: &PilotSet) -> f64 {
        let (_, _, x) = self.pre_raw(&self.standardizer.source(&pilots.z_theta));
        let n = x.ncols() as f64;
        let c = (self.power * n / fro_norm2(&x)).sqrt();
        fro_norm2(&(x * c64(c, 0.0))) / n
    }

    /// Mean `||z_gamma - decode(H_e encode(z) + w)||^2` (centered target
    /// coordinates) for the given noise realization and inference scale.
    fn mse_with_noise(
        &self,
        pilots: &PilotSet,
        real: &ChannelRealization,
        noise: &CMat,
    ) -> Result<f64> {
        let (x0, target) = self.standardizer.apply(pilots);
        let cache = self.forward(&x0, real, noise, ScaleMode::Fixed(self.scale))?;
        Ok(fro_norm2(&(&cache.out - target)) / pilots.len() as f64)
    }

    /// Re-optimizes only the RIS phases with `steps` gradient steps on the
    /// sampled training loss, keeping both networks and the inference
    /// scale fixed. Each step moves the phases along the negative gradient
    /// by at most `max_phase_step` radians, halving the step until the loss
    /// decreases.
    pub fn adapt_phases(
        &self,
        train: &PilotSet,
        real: &ChannelRealization,
        start: RisPhases,
        steps: usize,
        noise_model: &NoiseModel,
        seed: u64,
    ) -> Result<RisPhases> {
        const MAX_PHASE_STEP: f64 = 0.5;
        const MAX_HALVINGS: usize = 30;
        if start.is_empty() {
            return Ok(start);
        }
        let (x0, target) = self.standardizer.apply(train);
        let noise = noise_model.sample_matrix(train.len(), &mut substream(seed, Stream::Noise, 9));
        let mut model = self.clone();
        model.phi_raw = start.as_vec().clone();
        let mode = ScaleMode::Fixed(self.scale);
        for _ in 0..steps {
            let (loss, grads, _) = model.loss_and_gradients(&x0, &target, real, &noise, mode)?;
            // angular derivative dL/dtheta_j for unit-modulus phases
            let dtheta: Vec<f64> = grads
                .phi
                .iter()
                .zip(model.phi_raw.iter())
                .map(|(g, p)| (p.conj() * g * C64::i().conj()).re)
                .collect();
            let gmax = dtheta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            if gmax == 0.0 {
                break;
            }
            let mut alpha = MAX_PHASE_STEP / gmax;
            let current = model.phi_raw.clone();
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let angles: Vec<f64> = current
                    .iter()
                    .zip(&dtheta)
                    .map(|(p, d)| p.arg() - alpha * d)
                    .collect();
                model.phi_raw = RisPhases::from_angles(&angles).as_vec().clone();
                let trial = model.forward(&x0, real, &noise, mode)?;
                if fro_norm2(&(&trial.out - &target)) / (x0.ncols() as f64) < loss {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                model.phi_raw = current;
                break;
            }
        }
        Ok(model.phi())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Sparsity factor; weights below `beta * learning_rate` are pruned.
    pub beta: f64,
    pub seed: u64,
    pub patience: usize,
    /// Hidden width; defaults to `N_gamma / 2`.
    pub hidden: Option<usize>,
    /// EMA momentum of the inference normalization scale.
    pub scale_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 500,
            beta: 0.0,
            seed: 0,
            patience: 20,
            hidden: None,
            scale_momentum: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be nonnegative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.scale_momentum) {
            return bad("scale_momentum must lie in [0, 1)");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad("invalid Adam parameters");
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for one complex tensor; real and
/// imaginary parts are independent coordinates.
#[derive(Debug, Clone)]
struct Moments {
    m: Vec<C64>,
    v: Vec<C64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![c64(0.0, 0.0); n],
            v: vec![c64(0.0, 0.0); n],
        }
    }
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    slots: Vec<Moments>,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, sizes: &[usize]) -> Self {
        OptimizerState {
            kind,
            lr,
            step: 0,
            slots: sizes.iter().map(|&n| Moments::new(n)).collect(),
        }
    }

    fn update(&mut self, slot: usize, params: &mut [C64], grads: &[C64]) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= g * self.lr;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.step;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let mom = &mut self.slots[slot];
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(mom.m.iter_mut().zip(mom.v.iter_mut()))
                {
                    *m = *m * beta1 + g * (1.0 - beta1);
                    v.re = beta2 * v.re + (1.0 - beta2) * g.re * g.re;
                    v.im = beta2 * v.im + (1.0 - beta2) * g.im * g.im;
                    let step_re = (m.re / bc1) / ((v.re / bc2).sqrt() + eps);
                    let step_im = (m.im / bc1) / ((v.im / bc2).sqrt() + eps);
                    *p -= c64(step_re, step_im) * self.lr;
                }
            }
        }
    }
}

fn apply_gradients(eq: &mut NeuralEqualizer, grads: &Gradients, opt: &mut OptimizerState) {
    opt.step += 1;
    let layers: [(&mut ComplexDense, &LayerGrad); 4] = [
        (&mut eq.f1, &grads.f1),
        (&mut eq.f2, &grads.f2),
        (&mut eq.g1, &grads.g1),
        (&mut eq.g2, &grads.g2),
    ];
    for (i, (layer, g)) in layers.into_iter().enumerate() {
        opt.update(2 * i, layer.w.as_mut_slice(), g.w.as_slice());
        opt.update(2 * i + 1, layer.b.as_mut_slice(), g.b.as_slice());
        layer.apply_mask();
    }
    opt.update(8, eq.phi_raw.as_mut_slice(), grads.phi.as_slice());
}

/// Training progress reported to an observer after every optimizer step.
pub struct StepInfo<'a> {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Batch-mean transmit power of this step's forward pass.
    pub batch_power: f64,
    pub model: &'a NeuralEqualizer,
}

/// Trains with [`train_observed`] without an observer.
pub fn train(
    train_set: &PilotSet,
    val_set: &PilotSet,
    real: &ChannelRealization,
    noise: &NoiseModel,
    cfg: &TrainConfig,
) -> Result<NeuralEqualizer> {
    train_observed(train_set, val_set, real, noise, cfg, &mut |_| {})
}

/// Minibatch training with fresh noise every step and hard thresholding.
///
/// After each update every active weight with `|w| < beta · lr` joins the
/// pruned set for good. Dense training (`beta = 0`) returns the snapshot
/// with the best validation MSE; sparse training returns the final model,
/// whose pruned set is the largest reached. Training stops after
/// `patience` epochs without validation improvement.
pub fn train_observed(
    train_set: &PilotSet,
    val_set: &PilotSet,
    real: &ChannelRealization,
    noise: &NoiseModel,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<NeuralEqualizer> {
    cfg.validate()?;
    real.params.validate()?;
    if train_set.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            available: train_set.len(),
        });
    }
    let standardizer = Standardizer::fit(train_set)?;
    let (zt, zg) = standardizer.apply(train_set);
    let (vt, vg) = standardizer.apply(val_set);
    let n_source = zt.nrows();
    let n_target = zg.nrows();
    let hidden = cfg.hidden.unwrap_or(n_target);
    let mut eq = NeuralEqualizer::init(n_source, hidden, n_target, real, cfg.seed, standardizer);

    let sizes: Vec<usize> = [&eq.f1, &eq.f2, &eq.g1, &eq.g2]
        .iter()
        .flat_map(|l| [l.w.len(), l.b.len()])
        .chain([eq.phi_raw.len()])
        .collect();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let threshold = cfg.beta * cfg.learning_rate;
    let mut noise_rng = substream(cfg.seed, Stream::Noise, 0);
    let val_noise = noise.sample_matrix(val_set.len(), &mut substream(cfg.seed, Stream::Noise, 1));

    let n = zt.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    let mut ema: Option<f64> = None;
    let mut best: Option<(f64, NeuralEqualizer)> = None;
    let mut since_best = 0;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, Stream::Shuffle, epoch as u32));
        for chunk in order.chunks(cfg.batch_size) {
            let xb = CMat::from_fn(n_source, chunk.len(), |i, j| zt[(i, chunk[j])]);
            let yb = CMat::from_fn(n_target, chunk.len(), |i, j| zg[(i, chunk[j])]);
            let wb = noise.sample_matrix(chunk.len(), &mut noise_rng);
            let (loss, grads, cache) =
                eq.loss_and_gradients(&xb, &yb, real, &wb, ScaleMode::Batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            ema = Some(match ema {
                None => cache.scale,
                Some(e) => cfg.scale_momentum * e + (1.0 - cfg.scale_momentum) * cache.scale,
            });
            apply_gradients(&mut eq, &grads, &mut opt);
            if threshold > 0.0 {
                for layer in [&mut eq.f1, &mut eq.f2, &mut eq.g1, &mut eq.g2] {
                    layer.prune(threshold);
                }
            }
            eq.scale = ema.unwrap_or(1.0);
            observer(&StepInfo {
                step,
                epoch,
                loss,
                batch_power: fro_norm2(&cache.t) / chunk.len() as f64,
                model: &eq,
            });
            step += 1;
        }

        let val_mse = if val_set.is_empty() {
            f64::NAN
        } else {
            let cache = eq.forward(&vt, real, &val_noise, ScaleMode::Fixed(eq.scale))?;
            fro_norm2(&(&cache.out - &vg)) / val_set.len() as f64
        };
        if val_set.is_empty() {
            eq.history.push(val_mse);
            continue;
        }
        if !val_mse.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: val_mse,
            });
        }
        eq.history.push(val_mse);
        log::debug!(
            "epoch {epoch}: validation mse {val_mse:.6e}, sparsity {:.3}",
            eq.sparsity()
        );
        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, eq.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if cfg.beta == 0.0 {
        if let Some((_, mut snapshot)) = best {
            snapshot.history = eq.history;
            return Ok(snapshot);
        }
    }
    Ok(eq)
}

impl NeuralEqualizer {
    /// Validation-style MSE on a pilot set with a noise draw from `seed`.
    pub fn mse(
        &self,
        pilots: &PilotSet,
        real: &ChannelRealization,
        noise: &NoiseModel,
        seed: u64,
    ) -> Result<f64> {
        let w = noise.sample_matrix(pilots.len(), &mut substream(seed, Stream::Eval, 1));
        self.mse_with_noise(pilots, real, &w)
    }
}

pub const NEURAL_MAGIC: &[u8; 8] = b"SEMEQNN1";
pub const NEURAL_VERSION: u32 = 1;
const MAX_DIM: u64 = 1 << 20;

fn write_layer(w: &mut Writer, layer: &ComplexDense) {
    w.cmat(&layer.w);
    w.cmat(&CMat::from_column_slice(
        layer.b.len(),
        1,
        layer.b.as_slice(),
    ));
    for &m in &layer.mask {
        w.buf.push(m as u8);
    }
}

fn read_layer(r: &mut Reader, out: usize, inp: usize) -> Result<ComplexDense, FormatError> {
    let w = r.cmat(out, inp)?;
    let b = r.cmat(out, 1)?;
    let n = out
        .checked_mul(inp)
        .ok_or(FormatError::BadHeader("layer size"))?;
    let raw = r.bytes(n)?;
    let mut mask = Vec::with_capacity(n);
    for (&m, v) in raw.iter().zip(w.iter()) {
        match m {
            1 => mask.push(true),
            0 if v.re == 0.0 && v.im == 0.0 => mask.push(false),
            0 => return Err(FormatError::BadHeader("pruned weight is nonzero")),
            _ => return Err(FormatError::BadHeader("mask byte")),
        }
    }
    Ok(ComplexDense {
        w,
        b: CVec::from_column_slice(b.as_slice()),
        mask,
    })
}

/// Serializes the inference state.
///
/// Layout after the magic and `u32` version: `u64` fields `n_theta/2`,
/// hidden width, `k`, `nt`, `nr`, `n_gamma/2`, `nphi`, raw target dim;
/// `f64` power and inference scale; `u32` whitening-floored flag; then for
/// each layer (f1, f2, g1, g2) W and b as interleaved complex f64 and the
/// mask as one byte per weight; then raw phi, whitening mean, whitening
/// matrix and target mean as interleaved complex f64.
pub fn encode_neural(eq: &NeuralEqualizer) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(NEURAL_MAGIC, NEURAL_VERSION);
    let nt = eq.f2.w.nrows() / eq.k;
    let nr = eq.g1.w.ncols() / eq.k;
    for v in [
        eq.f1.w.ncols(),
        eq.f1.w.nrows(),
        eq.k,
        nt,
        nr,
        eq.g2.w.nrows(),
        eq.phi_raw.len(),
        eq.standardizer.raw_gamma,
    ] {
        w.u64(v as u64);
    }
    w.f64(eq.power);
    w.f64(eq.scale);
    w.u32(eq.standardizer.whitening.floored as u32);
    for layer in eq.layers() {
        write_layer(&mut w, layer);
    }
    w.cmat(&CMat::from_column_slice(
        eq.phi_raw.len(),
        1,
        eq.phi_raw.as_slice(),
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

pub fn decode_neural(bytes: &[u8]) -> Result<NeuralEqualizer, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(NEURAL_MAGIC, NEURAL_VERSION)?;
    let ns = r.dim("n_theta", MAX_DIM)?;
    let hidden = r.dim("hidden", MAX_DIM)?;
    let k = r.dim("k", MAX_DIM)?;
    let nt = r.dim("nt", MAX_DIM)?;
    let nr = r.dim("nr", MAX_DIM)?;
    let ng = r.dim("n_gamma", MAX_DIM)?;
    let nphi = r.dim("nphi", MAX_DIM)?;
    let raw_gamma = r.dim("raw_gamma", MAX_DIM)?;
    if [ns, hidden, k, nt, nr, ng].contains(&0) {
        return Err(FormatError::BadHeader("zero dimension"));
    }
    if raw_gamma > 2 * ng || raw_gamma + 1 < 2 * ng {
        return Err(FormatError::BadHeader("raw_gamma"));
    }
    let power = r.f64()?;
    let scale = r.f64()?;
    if !(power > 0.0 && power.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
        return Err(FormatError::BadHeader("power/scale"));
    }
    let floored = match r.u32()? {
        0 => false,
        1 => true,
        _ => return Err(FormatError::BadHeader("floored flag")),
    };
    let kt = k.checked_mul(nt).ok_or(FormatError::BadHeader("k*nt"))?;
    let kr = k.checked_mul(nr).ok_or(FormatError::BadHeader("k*nr"))?;
    let f1 = read_layer(&mut r, hidden, ns)?;
    let f2 = read_layer(&mut r, kt, hidden)?;
    let g1 = read_layer(&mut r, hidden, kr)?;
    let g2 = read_layer(&mut r, ng, hidden)?;
    let phi_raw = CVec::from_column_slice(r.cmat(nphi, 1)?.as_slice());
    let mean = CVec::from_column_slice(r.cmat(ns, 1)?.as_slice());
    let wmat = r.cmat(ns, ns)?;
    let gamma_mean = CVec::from_column_slice(r.cmat(ng, 1)?.as_slice());
    r.finish()?;
    Ok(NeuralEqualizer {
        f1,
        f2,
        g1,
        g2,
        phi_raw,
        scale,
        power,
        k,
        standardizer: Standardizer {
            whitening: Whitening {
                mean,
                w: wmat,
                floored,
            },
            gamma_mean,
            raw_gamma,
        },
        history: Vec::new(),
    })
}
