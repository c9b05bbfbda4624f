//! λ_u selection by validation perplexity.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_u: f64,
    pub seed: u64,
    /// `+∞` for diverged runs.
    pub val_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// `(λ_u, seed-mean validation perplexity)` in candidate order.
    pub means: Vec<(f64, f64)>,
    pub selected: f64,
}

/// Picks the candidate with the lowest seed-mean perplexity; ties go to
/// the smaller λ_u.
pub fn select_lambda_u(rows: &[SweepRow]) -> Result<SweepResult> {
    if rows.is_empty() {
        return Err(TrainError::Config("sweep has no results".into()));
    }
    let mut candidates: Vec<f64> = rows.iter().map(|r| r.lambda_u).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let means: Vec<(f64, f64)> = candidates
        .iter()
        .map(|&c| {
            let ps: Vec<f64> = rows.iter().filter(|r| r.lambda_u == c).map(|r| r.val_perplexity).collect();
            (c, ps.iter().sum::<f64>() / ps.len() as f64)
        })
        .collect();
    let mut best = means[0];
    for &(c, m) in &means[1..] {
        if m < best.1 || (best.1.is_nan() && !m.is_nan()) {
            best = (c, m);
        }
    }
    Ok(SweepResult {
        rows: rows.to_vec(),
        means,
        selected: best.0,
    })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda_u,seed,val_perplexity\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.lambda_u, r.seed, r.val_perplexity));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("lambda_u,seed,val_perplexity") {
            return Err(TrainError::Config("sweep table header must be lambda_u,seed,val_perplexity".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || TrainError::Config(format!("sweep table line {}: {line:?}", i + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            rows.push(SweepRow {
                lambda_u: f[0].parse().map_err(|_| bad())?,
                seed: f[1].parse().map_err(|_| bad())?,
                val_perplexity: f[2].parse().map_err(|_| bad())?,
            });
        }
        select_lambda_u(&rows)
    }
}

/// Runs `run(λ_u, seed)` for every pair on up to `threads` workers and
/// selects λ_u. Diverged runs count as `+∞`; other errors abort.
pub fn sweep_lambda_u<F>(candidates: &[f64], seeds: &[u64], threads: usize, run: F) -> Result<SweepResult>
where
    F: Fn(f64, u64) -> Result<f64> + Sync,
{
    if candidates.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("sweep needs at least one λ_u and one seed".into()));
    }
    let jobs: Vec<(f64, u64)> = candidates.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(c, s)) = jobs.get(i) else { break };
        let r = match run(c, s) {
            Err(TrainError::Diverged { step, detail, .. }) => {
                log::warn!("λ_u={c} seed={s} diverged at step {step}: {detail}");
                Ok(f64::INFINITY)
            }
            other => other,
        };
        results.lock().expect("sweep results lock")[i] = Some(r);
    };
    let threads = threads.clamp(1, jobs.len());
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    let mut rows = Vec::with_capacity(jobs.len());
    for ((c, s), r) in jobs.into_iter().zip(results.into_inner().expect("sweep results lock")) {
        rows.push(SweepRow {
            lambda_u: c,
            seed: s,
            val_perplexity: r.expect("every job ran")?,
        });
    }
    select_lambda_u(&rows)
}
