use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TaskSource};
use super::{evaluate, fit_method, fitting_set, target_centroids, FlopDims, Method};
use crate::channel::{
    compression_factor, sample_channel, ChannelParams, ChannelRealization, NoiseModel,
};
use crate::error::{Error, Result};
use crate::pilots::{generate_synthetic, load_pilots, split, PilotSet, SyntheticTaskSpec};

/// First line of every results file.
pub const RESULTS_TAG: &str = "# semeq-results v1";
const AGGREGATE_TAG: &str = "# semeq-aggregate v1";

/// One grid point of a sweep (all axes fixed, seed free).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub method: Method,
    pub channel: ChannelParams,
    pub n_train: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub k: usize,
    pub nt: usize,
    pub nr: usize,
    pub nphi: usize,
    pub snr_db: f64,
    pub n_train: usize,
    pub beta: f64,
    pub seed: u64,
    pub zeta: f64,
    pub mse: f64,
    pub accuracy: f64,
    /// Accuracy of the true target latents (no-mismatch reference).
    pub matched_accuracy: f64,
    pub flops: u64,
    pub sparsity: f64,
    /// Batch-mean transmit power on the pilots the method was fitted on.
    pub power: f64,
    /// Largest `| |phi_i| - 1 |`.
    pub max_phase_dev: f64,
    pub wall_time: f64,
    pub error: String,
}

type RowKey = (Method, usize, usize, usize, usize, u64, usize, u64);

impl ResultRow {
    fn point_key(&self) -> RowKey {
        (
            self.method,
            self.k,
            self.nt,
            self.nr,
            self.nphi,
            self.snr_db.to_bits(),
            self.n_train,
            self.beta.to_bits(),
        )
    }
}

fn key_of(p: &SweepPoint) -> RowKey {
    (
        p.method,
        p.channel.k,
        p.channel.nt,
        p.channel.nr,
        p.channel.nphi,
        p.channel.snr_db.to_bits(),
        p.n_train,
        p.beta.to_bits(),
    )
}

fn base_n_train(task: &TaskSource) -> usize {
    match task {
        TaskSource::Synthetic(s) => s.n_train,
        TaskSource::Files { n_train, .. } => *n_train,
    }
}

/// Cross product of all axes, methods outermost.
pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let s = &cfg.sweep;
    let c = &cfg.channel;
    let or = |axis: &Option<Vec<usize>>, base: usize| axis.clone().unwrap_or_else(|| vec![base]);
    let ks = or(&s.k, c.k);
    let nts = or(&s.nt, c.nt);
    let snrs = s.snr_db.clone().unwrap_or_else(|| vec![c.snr_db]);
    let n_trains = or(&s.n_train, base_n_train(&cfg.task));
    let betas = s.beta.clone().unwrap_or_else(|| vec![cfg.train.beta]);
    let mut out = Vec::new();
    for method in cfg.methods() {
        for &k in &ks {
            for &nt in &nts {
                let nrs = match (&s.nr, &s.nt) {
                    (Some(v), _) => v.clone(),
                    (None, Some(_)) => vec![nt],
                    (None, None) => vec![c.nr],
                };
                let nphis: Vec<usize> = match (&s.nphi, &s.nphi_ratio) {
                    (Some(v), _) => v.clone(),
                    (None, Some(r)) => r.iter().map(|x| (x * nt as f64).round() as usize).collect(),
                    (None, None) => vec![c.nphi],
                };
                for &nr in &nrs {
                    for &nphi in &nphis {
                        for &snr_db in &snrs {
                            for &n_train in &n_trains {
                                for &beta in &betas {
                                    out.push(SweepPoint {
                                        method,
                                        channel: ChannelParams {
                                            k,
                                            nt,
                                            nr,
                                            nphi,
                                            snr_db,
                                            ..c.clone()
                                        },
                                        n_train,
                                        beta,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Pilot split for a run: synthetic tasks are regenerated with the task
/// seed offset by the run index; pilot files are loaded once and split
/// with the run seed.
pub(super) fn pilots_for(
    cfg: &ExperimentConfig,
    pool: Option<&PilotSet>,
    n_train: usize,
    run: u64,
    seed: u64,
) -> Result<(PilotSet, PilotSet, PilotSet)> {
    match (&cfg.task, pool) {
        (TaskSource::Synthetic(spec), _) => generate_synthetic(&SyntheticTaskSpec {
            n_train,
            seed: spec.seed.wrapping_add(run),
            ..spec.clone()
        }),
        (TaskSource::Files { n_val, .. }, Some(pool)) => split(pool, n_train, *n_val, seed),
        (TaskSource::Files { .. }, None) => {
            Err(Error::InvalidParameter("pilot files not loaded".into()))
        }
    }
}

pub(super) fn load_pool(cfg: &ExperimentConfig) -> Result<Option<PilotSet>> {
    match &cfg.task {
        TaskSource::Files {
            theta,
            gamma,
            labels,
            ..
        } => Ok(Some(load_pilots(theta, gamma, labels.as_deref())?)),
        TaskSource::Synthetic(_) => Ok(None),
    }
}

/// Pilot split, channel and noise of one run at the base (unswept) point
/// of a config; run `i` matches seed `i` of a sweep over that point.
pub struct RunData {
    pub train: PilotSet,
    pub val: PilotSet,
    pub test: PilotSet,
    pub real: ChannelRealization,
    pub noise: NoiseModel,
    pub seed: u64,
}

pub fn prepare_run(cfg: &ExperimentConfig, run: u64) -> Result<RunData> {
    cfg.validate()?;
    let pool = load_pool(cfg)?;
    let seed = cfg.seed.wrapping_add(run);
    let (train, val, test) = pilots_for(cfg, pool.as_ref(), base_n_train(&cfg.task), run, seed)?;
    Ok(RunData {
        train,
        val,
        test,
        real: sample_channel(&cfg.channel, seed)?,
        noise: NoiseModel::from_params(&cfg.channel),
        seed,
    })
}

fn run_point(
    cfg: &ExperimentConfig,
    pool: Option<&PilotSet>,
    point: &SweepPoint,
    run: u64,
) -> ResultRow {
    let start = Instant::now();
    let seed = cfg.seed.wrapping_add(run);
    let ch = &point.channel;
    let mut row = ResultRow {
        method: point.method,
        k: ch.k,
        nt: ch.nt,
        nr: ch.nr,
        nphi: ch.nphi,
        snr_db: ch.snr_db,
        n_train: point.n_train,
        beta: point.beta,
        seed,
        zeta: f64::NAN,
        mse: f64::NAN,
        accuracy: f64::NAN,
        matched_accuracy: f64::NAN,
        flops: 0,
        sparsity: f64::NAN,
        power: f64::NAN,
        max_phase_dev: f64::NAN,
        wall_time: 0.0,
        error: String::new(),
    };
    let result = (|| -> Result<()> {
        let (train, val, test) = pilots_for(cfg, pool, point.n_train, run, seed)?;
        row.zeta = compression_factor(ch, test.raw_theta);
        let real = sample_channel(ch, seed)?;
        let noise = NoiseModel::from_params(ch);
        let mut settings = cfg.settings();
        settings.train.beta = point.beta;
        let fitted = fit_method(point.method, &train, &val, &real, &noise, &settings, seed)?;
        let centroids = match train.labels {
            Some(_) => Some(target_centroids(&train)?),
            None => None,
        };
        let (mse, acc) = evaluate(
            &fitted,
            &test,
            centroids.as_ref(),
            &real,
            &noise,
            cfg.n_noise_draws,
            seed,
        )?;
        row.mse = mse;
        if let (Some(c), Some(acc), Some(labels)) = (&centroids, acc, &test.labels) {
            row.accuracy = acc;
            row.matched_accuracy =
                c.accuracy(&test.s_gamma.rows(0, test.raw_gamma).into_owned(), labels);
        }
        let dims = FlopDims {
            k: ch.k,
            nt: ch.nt,
            nr: ch.nr,
            n_theta: test.raw_theta,
            n_gamma: test.raw_gamma,
        };
        row.flops = fitted.flops(&dims);
        row.sparsity = fitted.sparsity();
        row.power = fitted.transmit_power(&fitting_set(point.method, &train, &val))?;
        row.max_phase_dev = fitted.phases().max_modulus_error();
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!(
            "sweep point {} k={} nt={} seed={seed} failed: {e}",
            point.method.name(),
            ch.k,
            ch.nt
        );
        row.error = e.to_string();
    }
    row.wall_time = start.elapsed().as_secs_f64();
    row
}

/// Reads all rows of a results file.
pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    if first.trim_end() != RESULTS_TAG {
        return Err(Error::InvalidParameter(format!(
            "{} is not a results file (expected first line {RESULTS_TAG:?})",
            path.display()
        )));
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

/// Aggregate file path next to the results file: `r.csv` → `r.aggregate.csv`.
pub fn aggregate_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("results");
    out.with_file_name(format!("{stem}.aggregate.csv"))
}

/// Runs every missing (point, seed) pair, appending each row as it
/// completes, then rewrites the aggregate file. Rows already present in
/// `out` are kept and not recomputed. Returns all rows in file order.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let pool = load_pool(cfg)?;
    let existing = match std::fs::metadata(out) {
        Ok(m) if m.len() > 0 => read_rows(out)?,
        _ => Vec::new(),
    };
    let done: HashSet<(RowKey, u64)> = existing.iter().map(|r| (r.point_key(), r.seed)).collect();
    let work: Vec<(SweepPoint, u64)> = sweep_points(cfg)
        .into_iter()
        .flat_map(|p| (0..cfg.n_seeds as u64).map(move |run| (p.clone(), run)))
        .filter(|(p, run)| !done.contains(&(key_of(p), cfg.seed.wrapping_add(*run))))
        .collect();
    log::info!("sweep: {} runs done, {} to go", existing.len(), work.len());

    let fresh = existing.is_empty();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out)
        .map_err(|e| Error::io(out, e))?;
    if fresh {
        file.set_len(0).map_err(|e| Error::io(out, e))?;
        writeln!(file, "{RESULTS_TAG}").map_err(|e| Error::io(out, e))?;
    }
    let mut writer = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    let mut rows = existing;
    let chunk = rayon::current_num_threads().max(1);
    for batch in work.chunks(chunk) {
        let results: Vec<ResultRow> = batch
            .par_iter()
            .map(|(p, run)| run_point(cfg, pool.as_ref(), p, *run))
            .collect();
        for r in results {
            writer.serialize(&r)?;
            rows.push(r);
        }
        writer.flush().map_err(|e| Error::io(out, e))?;
    }
    write_aggregate(&aggregate(&rows), &aggregate_path(out))?;
    Ok(rows)
}

/// Per-point summary over seeds; metrics use the successful runs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub k: usize,
    pub nt: usize,
    pub nr: usize,
    pub nphi: usize,
    pub snr_db: f64,
    pub n_train: usize,
    pub beta: f64,
    pub zeta: f64,
    pub runs: usize,
    pub failures: usize,
    pub mse_mean: f64,
    pub mse_min: f64,
    pub mse_max: f64,
    pub accuracy_mean: f64,
    pub accuracy_min: f64,
    pub accuracy_max: f64,
    pub matched_accuracy_mean: f64,
    pub flops_mean: f64,
    pub sparsity_mean: f64,
    pub sparsity_min: f64,
    pub sparsity_max: f64,
    pub wall_time_mean: f64,
}

fn stats(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // keep min <= mean <= max under rounding
    (mean.clamp(min, max), min, max)
}

/// Groups rows by grid point in order of first appearance.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut order: Vec<RowKey> = Vec::new();
    let mut seen = HashSet::new();
    for r in rows {
        if seen.insert(r.point_key()) {
            order.push(r.point_key());
        }
    }
    order
        .into_iter()
        .map(|key| {
            let group: Vec<&ResultRow> = rows.iter().filter(|r| r.point_key() == key).collect();
            let ok: Vec<&ResultRow> = group
                .iter()
                .copied()
                .filter(|r| r.error.is_empty())
                .collect();
            let first = group[0];
            let (mse_mean, mse_min, mse_max) = stats(ok.iter().map(|r| r.mse));
            let (accuracy_mean, accuracy_min, accuracy_max) = stats(ok.iter().map(|r| r.accuracy));
            let (sparsity_mean, sparsity_min, sparsity_max) = stats(ok.iter().map(|r| r.sparsity));
            AggregateRow {
                method: first.method,
                k: first.k,
                nt: first.nt,
                nr: first.nr,
                nphi: first.nphi,
                snr_db: first.snr_db,
                n_train: first.n_train,
                beta: first.beta,
                zeta: first.zeta,
                runs: group.len(),
                failures: group.len() - ok.len(),
                mse_mean,
                mse_min,
                mse_max,
                accuracy_mean,
                accuracy_min,
                accuracy_max,
                matched_accuracy_mean: stats(ok.iter().map(|r| r.matched_accuracy)).0,
                flops_mean: stats(ok.iter().map(|r| r.flops as f64)).0,
                sparsity_mean,
                sparsity_min,
                sparsity_max,
                wall_time_mean: stats(group.iter().map(|r| r.wall_time)).0,
            }
        })
        .collect()
}

pub fn write_aggregate(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{AGGREGATE_TAG}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes serializable rows as CSV with a header row.
pub fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
