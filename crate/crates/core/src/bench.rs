//! Timing harness: per-pair latency and one-residual-versus-database
//! matching, batched and sequential.

use std::io::{self, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval::{PcnScorer, Scorer};
use crate::parallel::with_threads;
use crate::plane::Plane;

pub const WARMUPS: usize = 3;
pub const MIN_REPS: usize = 5;
pub const DEFAULT_REPS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub scorer: String,
    pub p: usize,
    pub db_size: usize,
    pub threads: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
}

impl BenchResult {
    pub fn write_csv_header(out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "scorer,P,db_size,threads,median_ms,iqr_ms")
    }

    pub fn write_csv_row(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            self.scorer, self.p, self.db_size, self.threads, self.median_ms, self.iqr_ms
        )
    }
}

pub fn write_csv(results: &[BenchResult], out: &mut impl Write) -> io::Result<()> {
    BenchResult::write_csv_header(out)?;
    results.iter().try_for_each(|r| r.write_csv_row(out))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(median, interquartile range)` in milliseconds.
pub fn summarize(samples_ms: &[f64]) -> (f64, f64) {
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

/// Run `f` `WARMUPS` times untimed, then `reps` timed times.
fn time_reps<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<Vec<f64>> {
    for _ in 0..WARMUPS {
        f()?;
    }
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            let out = f()?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            drop(out);
            Ok(ms.max(1e-9))
        })
        .collect()
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < MIN_REPS {
        return Err(Error::config(format!("need at least {MIN_REPS} repetitions, got {reps}")));
    }
    Ok(())
}

/// Random `P x P` planes, generated before any timing starts.
pub fn random_inputs(p: usize, count: usize, seed: u64) -> Vec<Plane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Plane::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Latency of scoring one residual/fingerprint pair.
pub fn bench_single(scorer: &dyn Scorer, p: usize, reps: usize) -> Result<BenchResult> {
    check_reps(reps)?;
    let inputs = random_inputs(p, 2, 0xbe4c);
    let samples = time_reps(reps, || scorer.score(&inputs[0], &inputs[1]))?;
    let (median_ms, iqr_ms) = summarize(&samples);
    Ok(BenchResult { scorer: scorer.tag().to_string(), p, db_size: 1, threads: 1, reps, median_ms, iqr_ms })
}

/// Batched and sequential timings of one residual against `db_size`
/// fingerprints, with the largest score disagreement between the two.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchComparison {
    pub batched: BenchResult,
    pub sequential: BenchResult,
    pub max_abs_diff: f64,
}

impl BatchComparison {
    pub fn ratio(&self) -> f64 {
        self.batched.median_ms / self.sequential.median_ms
    }
}

pub fn bench_batch(scorer: &PcnScorer, p: usize, db_size: usize, threads: usize, reps: usize) -> Result<BatchComparison> {
    check_reps(reps)?;
    if db_size == 0 {
        return Err(Error::config("database size must be at least 1"));
    }
    let inputs = random_inputs(p, db_size + 1, 0xba7c);
    let (w, db) = inputs.split_first().expect("at least two planes");
    let refs: Vec<&Plane> = db.iter().collect();

    let (batched_samples, batched_scores) = with_threads(threads, || -> Result<_> {
        let samples = time_reps(reps, || scorer.score_row(w, &refs))?;
        Ok((samples, scorer.score_row(w, &refs)?))
    })??;
    let sequential_samples = time_reps(reps, || scorer.score_row_sequential(w, &refs))?;
    let sequential_scores = scorer.score_row_sequential(w, &refs)?;
    let max_abs_diff =
        batched_scores.iter().zip(&sequential_scores).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let result = |tag: &str, threads: usize, samples: &[f64]| {
        let (median_ms, iqr_ms) = summarize(samples);
        BenchResult { scorer: format!("{}/{tag}", scorer.tag()), p, db_size, threads, reps, median_ms, iqr_ms }
    };
    Ok(BatchComparison {
        batched: result("batch", threads, &batched_samples),
        sequential: result("sequential", 1, &sequential_samples),
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::PceScorer;
    use crate::pcn::{ArchDescriptor, PcnModel};

    #[test]
    fn summary_statistics() {
        let (m, iqr) = summarize(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(m, 3.0);
        assert_eq!(iqr, 2.0);
    }

    #[test]
    fn too_few_reps() {
        assert!(matches!(bench_single(&PceScorer::default(), 32, 1), Err(Error::Config(_))));
    }

    #[test]
    fn single_and_batch_run() {
        let r = bench_single(&PceScorer::default(), 32, MIN_REPS).unwrap();
        assert!(r.median_ms > 0.0 && r.iqr_ms >= 0.0);
        let scorer = PcnScorer::new(PcnModel::init(ArchDescriptor::default(), 3).unwrap());
        let cmp = bench_batch(&scorer, 32, 4, 2, MIN_REPS).unwrap();
        assert!(cmp.max_abs_diff <= 1e-6);
        assert_eq!(cmp.batched.db_size, 4);
        let mut buf = Vec::new();
        write_csv(&[cmp.batched, cmp.sequential], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
