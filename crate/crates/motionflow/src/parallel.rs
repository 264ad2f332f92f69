//! Thread-pool execution of the rearrangement pipeline.
//!
//! Propagation chains and compensated midpoints are independent units of
//! work. Each unit runs sequentially on one worker and results are merged in
//! plan order, so the output does not depend on the number of threads.

use motionflow_core::cycle_compensator::CompensatorConfig;
use motionflow_core::flow_estimator::EstimatorConfig;
use motionflow_core::propagation::{
    assemble, compensate_between, plan_propagation, run_propagation, PropagatedPair, SparseSequence, TrainingSet,
};
use motionflow_core::Result;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{CliError, CliResult};

pub const THREADS_ENV: &str = "MOTIONFLOW_THREADS";

/// Worker count from the flag, then the environment; 0 lets rayon pick.
pub fn thread_count(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::input(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

pub fn pool(threads: usize) -> CliResult<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::input(format!("cannot start {threads} worker threads: {e}")))
}

/// Runs `f` over `items` on the pool and returns the results in input
/// order; the first failure in that order wins.
fn ordered<T: Sync, R: Send>(pool: &ThreadPool, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let results: Vec<Result<R>> = pool.install(|| items.par_iter().map(&f).collect());
    results.into_iter().collect()
}

/// D_R only: every unlabeled frame propagated from its nearest anchor.
pub fn relabel(
    pool: &ThreadPool,
    seq: &SparseSequence,
    cfg: &EstimatorConfig,
    k_max: usize,
) -> Result<(Vec<PropagatedPair>, Vec<PropagatedPair>)> {
    cfg.validate()?;
    let jobs = plan_propagation(seq, k_max)?;
    let outputs = ordered(pool, &jobs, |job| run_propagation(seq, job, cfg))?;
    assemble(seq, outputs)
}

/// The parallel counterpart of `rearrange_dataset_with_limit`, with
/// identical output.
pub fn rearrange(
    pool: &ThreadPool,
    seq: &SparseSequence,
    cfg: &EstimatorConfig,
    ccfg: &CompensatorConfig,
    k_max: usize,
) -> Result<TrainingSet> {
    ccfg.validate()?;
    let (labeled, relabeled) = relabel(pool, seq, cfg, k_max)?;
    let mut set = TrainingSet { labeled, relabeled, compensated: Vec::new() };
    let compensated = {
        let timeline = set.timeline();
        let pairs: Vec<(&PropagatedPair, &PropagatedPair)> = timeline.windows(2).map(|w| (w[0], w[1])).collect();
        ordered(pool, &pairs, |(a, b)| compensate_between(a, b, seq.num_classes(), cfg, ccfg))?
    };
    set.compensated = compensated;
    Ok(set)
}
