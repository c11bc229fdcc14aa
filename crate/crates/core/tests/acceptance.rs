//! End-to-end acceptance checks. Each check prints one `PASS`/`FAIL` line;
//! the test fails at the end if any check failed.

use std::time::{Duration, Instant};

use semeq::channel::{
    effective_channel, sample_channel, ChannelParams, ChannelRealization, NoiseModel, RisPhases,
};
use semeq::harness::{
    aggregate, parse_config, read_rows, run_adaptation, run_sweep, AdaptCondition, AdaptationRow,
    AggregateRow, ConfigFormat, FlopDims, Method, ResultRow, GELU_FLOPS,
};
use semeq::linalg::{c64, fro_norm2, power, solve_sylvester, whiten, CMat, CVec, Whitening, C64};
use semeq::linear::{self, build_ris_system, f_step, g_step, objective, r_step, AdmmConfig};
use semeq::neural::{self, ComplexDense, NeuralEqualizer, ScaleMode, StepInfo, TrainConfig};
use semeq::pilots::{generate_synthetic, PilotSet, Standardizer, SyntheticTaskSpec};
use semeq::rng::{complex_normal_matrix, normal_matrix, substream, Stream};

struct Report {
    failed: Vec<u32>,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        println!(
            "criterion {id:>2} {:<4} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            self.failed.push(id);
        }
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- oracles

/// Central differences over the real and imaginary part of every entry.
fn fd_gradient_norm(x: &CMat, obj: impl Fn(&CMat) -> f64) -> f64 {
    let h = 1e-6;
    let mut acc = 0.0;
    for idx in 0..x.len() {
        for dir in [c64(h, 0.0), c64(0.0, h)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += dir;
            xm[idx] -= dir;
            let g = (obj(&xp) - obj(&xm)) / (2.0 * h);
            acc += g * g;
        }
    }
    acc.sqrt()
}

/// Projection onto the power ball by bisection on the KKT multiplier.
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

/// `||Z_g - G H_e(phi) F Z_t||^2` with the effective channel built densely.
fn direct_residual(
    zt: &CMat,
    zg: &CMat,
    f: &CMat,
    g: &CMat,
    real: &ChannelRealization,
    phi: &RisPhases,
) -> f64 {
    let block = &real.hd + &real.h2 * CMat::from_diagonal(phi.as_vec()) * &real.h1;
    let k = real.params.k;
    let (nr, nt) = block.shape();
    let mut he = CMat::zeros(k * nr, k * nt);
    for l in 0..k {
        he.view_mut((l * nr, l * nt), (nr, nt)).copy_from(&block);
    }
    fro_norm2(&(zg - g * he * f * zt))
}

// ---------------------------------------------------------------- 1

fn subproblem_suite(rep: &mut Report) {
    let start = Instant::now();
    let params = ChannelParams {
        nt: 2,
        nr: 2,
        nphi: 4,
        k: 2,
        alpha_d: 1.0,
        alpha_1: 1.0,
        alpha_2: 1.0,
        snr_db: 10.0,
        power: 1.0,
    };
    let sigma2 = NoiseModel::from_params(&params).sigma2;
    let (mut g_grad, mut f_grad, mut syl, mut r_err, mut ris_err) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let real = sample_channel(&params, seed).unwrap();
        let mut rng = substream(seed, Stream::Eval, 10);
        let zt = whiten(&complex_normal_matrix(&mut rng, 8, 64, 1.0))
            .unwrap()
            .1;
        let zg = complex_normal_matrix(&mut rng, 4, 64, 1.0);
        let f0 = complex_normal_matrix(&mut rng, 4, 8, 0.1);
        let phi = RisPhases::random(4, &mut rng);
        let he = effective_channel(&real, &phi).unwrap();

        let g = g_step(&zt, &zg, &f0, &he, sigma2).unwrap();
        g_grad = g_grad.max(fd_gradient_norm(&g, |g| {
            objective(&zt, &zg, &f0, g, &he, sigma2).unwrap()
        }));

        let r = complex_normal_matrix(&mut rng, 4, 8, 0.1);
        let s = complex_normal_matrix(&mut rng, 4, 8, 0.01);
        let rho = 0.5 + seed as f64 / 10.0;
        let f = f_step(&zt, &zg, &g, &he, &r, &s, rho).unwrap();
        let sub = |f: &CMat| {
            fro_norm2(&(&zg - he.left_multiply(&g) * (f * &zt))) / 64.0
                + rho * fro_norm2(&(f - &r + &s))
        };
        f_grad = f_grad.max(fd_gradient_norm(&f, sub));

        let a0 = complex_normal_matrix(&mut rng, 4, 4, 1.0);
        let b0 = complex_normal_matrix(&mut rng, 8, 8, 1.0);
        let a = &a0 * a0.adjoint();
        let b = &b0 * b0.adjoint() + CMat::identity(8, 8) * c64(0.1, 0.0);
        let c = complex_normal_matrix(&mut rng, 4, 8, 1.0);
        let x = solve_sylvester(&a, &b, &c).unwrap();
        syl = syl.max((&a * &x + &x * &b - &c).norm());

        let big = complex_normal_matrix(&mut rng, 4, 8, 1.0);
        r_err = r_err.max((r_step(&big, 1.0) - bisection_projection(&big, 1.0)).norm());

        let (v, d) = build_ris_system(&zt, &zg, &f, &g, &real).unwrap();
        let probe = RisPhases::random(4, &mut rng);
        let quad = (&v - &d * probe.as_vec()).norm_squared();
        let direct = direct_residual(&zt, &zg, &f, &g, &real, &probe);
        ris_err = ris_err.max(((quad - direct) / direct).abs());
    }
    let t = start.elapsed();
    let pass = g_grad < 1e-6
        && f_grad < 1e-6
        && syl < 1e-9
        && r_err < 1e-10
        && ris_err < 1e-10
        && t < Duration::from_secs(30);
    rep.line(
        1,
        "subproblem optimality",
        pass,
        format!(
            "max |grad G| {g_grad:.2e}, |grad F| {f_grad:.2e}, sylvester residual {syl:.2e}, \
             projection error {r_err:.2e}, ris quadratic rel. error {ris_err:.2e}, {:.1}s",
            secs(t)
        ),
    );
}

// ---------------------------------------------------------------- 2

/// Returns the fitted model's transmit power deviation and phase deviation
/// for the constraint check.
fn exact_recovery(rep: &mut Report) -> (f64, f64) {
    let s = normal_matrix(&mut substream(11, Stream::Eval, 0), 16, 64);
    let pilots = PilotSet::new(s.clone(), s, None).unwrap();
    let params = ChannelParams {
        nt: 4,
        nr: 4,
        nphi: 4,
        k: 2,
        alpha_d: 1.0,
        alpha_1: 1.0,
        alpha_2: 1.0,
        snr_db: f64::INFINITY,
        power: 1.0,
    };
    let real = sample_channel(&params, 11).unwrap();
    let noise = NoiseModel::from_params(&params);
    let cfg = AdmmConfig::default();
    let eq = linear::fit(&pilots, &real, &noise, &cfg).unwrap();
    let y = effective_channel(&real, &eq.phi)
        .unwrap()
        .apply(&eq.encode(&pilots.z_theta).unwrap());
    let est = pilots.gamma_from_complex(&eq.decode(&y).unwrap());
    let mse = (est - &pilots.s_gamma).norm_squared() / 64.0;
    let iters = eq.history.len();
    rep.line(
        2,
        "exact recovery",
        mse < 1e-6 && iters <= 30,
        format!("final MSE {mse:.3e} after {iters} iterations"),
    );
    let x = eq.encode(&pilots.z_theta).unwrap();
    let batch_power = fro_norm2(&x) / 64.0;
    (
        (batch_power - params.power).abs(),
        eq.phi.max_modulus_error(),
    )
}

// ---------------------------------------------------------------- 3

fn sweep(toml: &str) -> (Vec<ResultRow>, Duration) {
    let cfg = parse_config(toml, ConfigFormat::Toml).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let rows = run_sweep(&cfg, &dir.path().join("results.csv")).unwrap();
    (rows, start.elapsed())
}

fn find(agg: &[AggregateRow], m: Method, k: usize, nphi: usize) -> &AggregateRow {
    agg.iter()
        .find(|a| a.method == m && a.k == k && a.nphi == nphi)
        .unwrap()
}

fn ordering(rep: &mut Report) -> Vec<ResultRow> {
    let (rows, t) = sweep(
        r#"
        methods = ["linear", "eigen_k", "top_k"]
        n_seeds = 5
        [channel]
        nt = 8
        nr = 8
        snr_db = 10.0
        [sweep]
        k = [1, 2, 4, 8]
        nphi_ratio = [0.5, 2.0]
        [task.synthetic]
        mismatch = "linear"
        "#,
    );
    let agg = aggregate(&rows);
    let mut pass = rows.iter().all(|r| r.error.is_empty()) && t < Duration::from_secs(600);
    let mut notes = Vec::new();
    for nphi in [4, 16] {
        for k in [1, 2, 4, 8] {
            let l = find(&agg, Method::Linear, k, nphi);
            let e = find(&agg, Method::EigenK, k, nphi);
            let tk = find(&agg, Method::TopK, k, nphi);
            let ordered = l.mse_mean <= e.mse_mean && e.mse_mean <= tk.mse_mean;
            let mut note = format!(
                "zeta {:.2} nphi {nphi}: mse {:.2}/{:.2}/{:.2}",
                l.zeta, l.mse_mean, e.mse_mean, tk.mse_mean
            );
            pass &= ordered;
            if !ordered {
                note.push_str(" (order violated)");
            }
            if l.zeta <= 0.5 + 1e-12 {
                let best = e.accuracy_mean.max(tk.accuracy_mean);
                let gap = l.accuracy_mean - best;
                note.push_str(&format!(", accuracy gap {:+.1}pp", 100.0 * gap));
                if gap < 0.05 {
                    pass = false;
                    note.push_str(" (below 5pp)");
                }
            }
            notes.push(note);
        }
    }
    rep.line(
        3,
        "ordering Linear <= Eigen-k <= Top-k",
        pass,
        format!("{}; {:.0}s", notes.join("; "), secs(t)),
    );
    rows
}

// ---------------------------------------------------------------- 4

fn nonlinear_advantage(rep: &mut Report) -> Vec<ResultRow> {
    let (rows, t) = sweep(
        r#"
        methods = ["linear", "neural"]
        n_seeds = 5
        [channel]
        snr_db = 10.0
        [task.synthetic]
        mismatch = "nonlinear"
        "#,
    );
    let mean = |m: Method| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == m)
            .map(|r| r.mse)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (lin, nn) = (mean(Method::Linear), mean(Method::Neural));
    let ok = rows.iter().all(|r| r.error.is_empty());
    rep.line(
        4,
        "nonlinear mismatch advantage",
        ok && nn < 0.8 * lin && t < Duration::from_secs(900),
        format!(
            "neural MSE {nn:.3} vs linear {lin:.3} (ratio {:.2}); {:.0}s",
            nn / lin,
            secs(t)
        ),
    );
    rows
}

// ---------------------------------------------------------------- 5

fn rel_err(a: &[C64], b: &[C64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn neural_gradients(rep: &mut Report) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for seed in 0..3u64 {
        let params = ChannelParams {
            nt: 2,
            nr: 2,
            nphi: 3,
            k: 2,
            alpha_d: 1.0,
            alpha_1: 1.0,
            alpha_2: 1.0,
            snr_db: 10.0,
            power: 1.0,
        };
        let real = sample_channel(&params, seed).unwrap();
        let st = Standardizer {
            whitening: Whitening::identity(4),
            gamma_mean: CVec::zeros(3),
            raw_gamma: 6,
        };
        let mut eq = NeuralEqualizer::init(4, 4, 3, &real, seed, st);
        let mut rng = substream(seed, Stream::Eval, 20);
        for layer in [&mut eq.f1, &mut eq.f2, &mut eq.g1, &mut eq.g2] {
            layer.b = CVec::from_column_slice(
                complex_normal_matrix(&mut rng, layer.b.len(), 1, 0.1).as_slice(),
            );
        }
        eq.phi_raw = CVec::from_fn(3, |j, _| eq.phi_raw[j] * (0.5 + j as f64));
        let x = complex_normal_matrix(&mut rng, 4, 4, 1.0);
        let target = complex_normal_matrix(&mut rng, 3, 4, 1.0);
        let w = complex_normal_matrix(&mut rng, 4, 4, 0.05);
        let (_, g, _) = eq
            .loss_and_gradients(&x, &target, &real, &w, ScaleMode::Batch)
            .unwrap();
        let loss = |e: &NeuralEqualizer| {
            let c = e.forward(&x, &real, &w, ScaleMode::Batch).unwrap();
            fro_norm2(&(&c.out - &target)) / 4.0
        };
        let fd = |get: &dyn Fn(&mut NeuralEqualizer) -> &mut [C64]| -> Vec<C64> {
            let h = 1e-5;
            let n = get(&mut eq.clone()).len();
            (0..n)
                .map(|i| {
                    let mut parts = [0.0; 2];
                    for (slot, dir) in [c64(h, 0.0), c64(0.0, h)].into_iter().enumerate() {
                        let mut p = eq.clone();
                        get(&mut p)[i] += dir;
                        let mut m = eq.clone();
                        get(&mut m)[i] -= dir;
                        parts[slot] = (loss(&p) - loss(&m)) / (2.0 * h);
                    }
                    c64(parts[0], parts[1])
                })
                .collect()
        };
        fn w_of(l: &mut ComplexDense) -> &mut [C64] {
            l.w.as_mut_slice()
        }
        fn b_of(l: &mut ComplexDense) -> &mut [C64] {
            l.b.as_mut_slice()
        }
        let checks: [(&str, &[C64], Vec<C64>); 9] = [
            ("f1.w", g.f1.w.as_slice(), fd(&|e| w_of(&mut e.f1))),
            ("f1.b", g.f1.b.as_slice(), fd(&|e| b_of(&mut e.f1))),
            ("f2.w", g.f2.w.as_slice(), fd(&|e| w_of(&mut e.f2))),
            ("f2.b", g.f2.b.as_slice(), fd(&|e| b_of(&mut e.f2))),
            ("g1.w", g.g1.w.as_slice(), fd(&|e| w_of(&mut e.g1))),
            ("g1.b", g.g1.b.as_slice(), fd(&|e| b_of(&mut e.g1))),
            ("g2.w", g.g2.w.as_slice(), fd(&|e| w_of(&mut e.g2))),
            ("g2.b", g.g2.b.as_slice(), fd(&|e| b_of(&mut e.g2))),
            ("phi", g.phi.as_slice(), fd(&|e| e.phi_raw.as_mut_slice())),
        ];
        for (name, analytic, numeric) in checks {
            let e = rel_err(&numeric, analytic);
            if e > worst {
                worst = e;
                worst_name = name;
            }
        }
    }
    let t = start.elapsed();
    rep.line(
        5,
        "neural gradient check",
        worst < 1e-5 && t < Duration::from_secs(10),
        format!(
            "worst relative error {worst:.2e} ({worst_name}); {:.2}s",
            secs(t)
        ),
    );
}

// ---------------------------------------------------------------- 6

fn constraints(rep: &mut Report, exact: (f64, f64), fitted: &[ResultRow]) {
    let p = ChannelParams::default().power;
    let mut power_dev = exact.0;
    let mut phase_dev = exact.1;
    for r in fitted {
        power_dev = power_dev.max((r.power - p).abs());
        phase_dev = phase_dev.max(r.max_phase_dev);
    }
    rep.line(
        6,
        "power and unit-modulus constraints",
        power_dev < 1e-6 && phase_dev < 1e-9,
        format!(
            "{} models: max |power - P| {power_dev:.2e}, max ||phi|-1| {phase_dev:.2e}",
            fitted.len() + 1
        ),
    );
}

// ---------------------------------------------------------------- 7

/// Closed forms evaluated independently in floating point.
fn linear_oracle(k: f64, nt: f64, nr: f64, n_theta: f64, n_gamma: f64) -> f64 {
    k * nt * (8.0 * n_theta / 2.0 - 2.0) + (n_gamma / 2.0) * (8.0 * k * nr - 2.0)
}

fn neural_oracle(k: f64, nt: f64, nr: f64, n_theta: f64, n_gamma: f64, s: f64) -> f64 {
    let (a, b) = (n_theta / 2.0, n_gamma / 2.0);
    8.0 * (1.0 - s) * (a * b + b * k * nt + k * nr * b + b * b) + 2.0 * GELU_FLOPS as f64 * b
}

fn flop_formulas(rep: &mut Report) {
    let paper = FlopDims {
        k: 8,
        nt: 8,
        nr: 8,
        n_theta: 768,
        n_gamma: 384,
    };
    let spot = semeq::harness::count_flops(Method::Linear, &paper, 0.0);
    let mut mismatches = 0;
    let mut cases = 0;
    for k in [1, 2, 4, 8] {
        for nt in [2, 4, 8] {
            for (n_theta, n_gamma) in [(64, 32), (768, 384), (128, 128)] {
                let d = FlopDims {
                    k,
                    nt,
                    nr: nt,
                    n_theta,
                    n_gamma,
                };
                let f = |x: usize| x as f64;
                let lin = linear_oracle(f(k), f(nt), f(nt), f(n_theta), f(n_gamma));
                cases += 1;
                if semeq::harness::count_flops(Method::Linear, &d, 0.0) as f64 != lin {
                    mismatches += 1;
                }
                for s in [0.0, 0.5, 1.0] {
                    let nn = neural_oracle(f(k), f(nt), f(nt), f(n_theta), f(n_gamma), s);
                    cases += 1;
                    if semeq::harness::count_flops(Method::Neural, &d, s) as f64 != nn {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    rep.line(
        7,
        "FLOP formulas",
        spot == 294_400 && mismatches == 0,
        format!("linear spot value {spot}; {mismatches} of {cases} closed-form cases differ"),
    );
}

// ---------------------------------------------------------------- 8

struct PruneStats {
    monotone: bool,
    zeros_held: bool,
    sparsity: f64,
    mse: f64,
}

fn train_pruned(
    beta: f64,
    data: &(PilotSet, PilotSet, PilotSet),
    real: &ChannelRealization,
    noise: &NoiseModel,
) -> PruneStats {
    let cfg = TrainConfig {
        beta,
        ..TrainConfig::default()
    };
    let mut prev: Option<Vec<Vec<bool>>> = None;
    let (mut monotone, mut zeros_held) = (true, true);
    let mut observer = |s: &StepInfo| {
        let m = s.model;
        let masks: Vec<Vec<bool>> = [&m.f1, &m.f2, &m.g1, &m.g2]
            .iter()
            .map(|l| l.mask.clone())
            .collect();
        for (l, layer) in [&m.f1, &m.f2, &m.g1, &m.g2].iter().enumerate() {
            for (w, &active) in layer.w.iter().zip(&masks[l]) {
                if !active && *w != c64(0.0, 0.0) {
                    zeros_held = false;
                }
            }
            if let Some(p) = &prev {
                if p[l].iter().zip(&masks[l]).any(|(&was, &now)| !was && now) {
                    monotone = false;
                }
            }
        }
        prev = Some(masks);
    };
    let eq = neural::train_observed(&data.0, &data.1, real, noise, &cfg, &mut observer).unwrap();
    PruneStats {
        monotone,
        zeros_held,
        sparsity: eq.sparsity(),
        mse: eq.mse(&data.2, real, noise, 0).unwrap(),
    }
}

fn pruning(rep: &mut Report) {
    let data = generate_synthetic(&SyntheticTaskSpec::default()).unwrap();
    let params = ChannelParams::default();
    let real = sample_channel(&params, 0).unwrap();
    let noise = NoiseModel::from_params(&params);
    let dense = train_pruned(0.0, &data, &real, &noise);
    let mut pass = dense.sparsity == 0.0;
    let mut notes = vec![format!("dense MSE {:.3}", dense.mse)];
    for beta in [1.0, 10.0, 20.0] {
        let s = train_pruned(beta, &data, &real, &noise);
        pass &= s.monotone && s.zeros_held;
        if beta == 20.0 {
            pass &= s.sparsity >= 0.9 && s.mse < 3.0 * dense.mse;
        }
        notes.push(format!(
            "beta {beta}: sparsity {:.3}, MSE {:.3}, monotone {}, zeros held {}",
            s.sparsity, s.mse, s.monotone, s.zeros_held
        ));
    }
    rep.line(8, "pruning contract", pass, notes.join("; "));
}

// ---------------------------------------------------------------- 9

fn adaptation(rep: &mut Report) {
    let cfg = parse_config(
        r#"
        methods = ["linear", "neural"]
        n_seeds = 5
        [channel]
        nt = 4
        nr = 4
        k = 4
        snr_db = 10.0
        [sweep]
        nphi = [12]
        [adaptation]
        alpha_pre = 10.0
        alpha_post = 1e6
        steps = 10
        "#,
        ConfigFormat::Toml,
    )
    .unwrap();
    let start = Instant::now();
    let rows = run_adaptation(&cfg).unwrap();
    let t = start.elapsed();
    let mean = |m: Method, c: AdaptCondition| {
        let v: Vec<&AdaptationRow> = rows
            .iter()
            .filter(|r| r.method == m && r.condition == c)
            .collect();
        v.iter().map(|r| r.accuracy).sum::<f64>() / v.len() as f64
    };
    let mut pass = t < Duration::from_secs(300);
    let mut notes = Vec::new();
    for m in [Method::Linear, Method::Neural] {
        let pre = mean(m, AdaptCondition::Pre);
        let blocked = mean(m, AdaptCondition::Blocked);
        let adapted = mean(m, AdaptCondition::Adapted);
        pass &= adapted >= 0.8 * pre && (blocked - 0.1).abs() <= 0.05;
        notes.push(format!(
            "{}: pre {pre:.3}, blocked {blocked:.3}, adapted {adapted:.3}",
            m.name()
        ));
    }
    rep.line(
        9,
        "channel adaptation",
        pass,
        format!("{}; {:.0}s", notes.join("; "), secs(t)),
    );
}

// ---------------------------------------------------------------- 10

fn numeric_columns(r: &ResultRow) -> Vec<u64> {
    vec![
        r.k as u64,
        r.nt as u64,
        r.nr as u64,
        r.nphi as u64,
        r.snr_db.to_bits(),
        r.n_train as u64,
        r.beta.to_bits(),
        r.seed,
        r.zeta.to_bits(),
        r.mse.to_bits(),
        r.accuracy.to_bits(),
        r.matched_accuracy.to_bits(),
        r.flops,
        r.sparsity.to_bits(),
        r.power.to_bits(),
        r.max_phase_dev.to_bits(),
    ]
}

fn determinism(rep: &mut Report) {
    let cfg = parse_config(
        r#"
        methods = ["linear", "neural", "first_k", "top_k", "eigen_k"]
        n_seeds = 2
        [channel]
        nt = 4
        nr = 4
        [train]
        epochs = 20
        beta = 5.0
        [sweep]
        k = [1, 2]
        nphi = [0, 8]
        [task.synthetic]
        n_train = 400
        n_val = 80
        n_test = 300
        "#,
        ConfigFormat::Toml,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    run_sweep(&cfg, &a).unwrap();
    run_sweep(&cfg, &b).unwrap();
    let (ra, rb) = (read_rows(&a).unwrap(), read_rows(&b).unwrap());
    let same = ra.len() == rb.len()
        && ra.iter().zip(&rb).all(|(x, y)| {
            x.method == y.method && x.error == y.error && numeric_columns(x) == numeric_columns(y)
        });
    let ok = ra.iter().all(|r| r.error.is_empty());
    rep.line(
        10,
        "determinism",
        same && ok,
        format!("{} rows compared bitwise across two runs", ra.len()),
    );
}

#[test]
fn acceptance() {
    let mut rep = Report { failed: Vec::new() };
    subproblem_suite(&mut rep);
    let exact = exact_recovery(&mut rep);
    let mut fitted = ordering(&mut rep);
    fitted.extend(nonlinear_advantage(&mut rep));
    neural_gradients(&mut rep);
    constraints(&mut rep, exact, &fitted);
    flop_formulas(&mut rep);
    pruning(&mut rep);
    adaptation(&mut rep);
    determinism(&mut rep);
    assert!(rep.failed.is_empty(), "failed criteria: {:?}", rep.failed);
}
