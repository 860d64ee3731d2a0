use std::path::{Path, PathBuf};
use std::sync::Arc;

use ctxlens::decoding::DecodingStrategy;
use ctxlens::oracle::Oracle;
use rayon::prelude::*;

use crate::args::{parse_list, Knobs};
use crate::backend;
use crate::error::{CliError, CliResult};

const DEFAULT_PARALLEL: usize = 4;
const DEFAULT_OUT: &str = "ctxlens-out";

/// Settings shared by every command.
pub struct Run {
    pub knobs: Knobs,
    pub seed: u64,
    pub out: PathBuf,
    pub parallel: usize,
    pool: rayon::ThreadPool,
}

impl Run {
    pub fn new(knobs: Knobs) -> CliResult<Self> {
        let parallel = knobs.parallel.unwrap_or(DEFAULT_PARALLEL);
        if parallel == 0 {
            return Err(CliError::usage("--parallel must be >= 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(Self {
            seed: knobs.seed.unwrap_or(0),
            out: knobs.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            parallel,
            pool,
            knobs,
        })
    }

    pub fn backend(&self) -> CliResult<Arc<dyn Oracle>> {
        backend::build(&self.knobs, self.parallel, true)
    }

    pub fn backend_uncached(&self) -> CliResult<Arc<dyn Oracle>> {
        backend::build(&self.knobs, self.parallel, false)
    }

    pub fn backend_label(&self) -> String {
        backend::backend_spec(&self.knobs).unwrap_or_default()
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn ensure_out(&self) -> CliResult<&Path> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }

    pub fn strategies(&self) -> CliResult<Vec<DecodingStrategy>> {
        match &self.knobs.strategy {
            Some(s) => parse_list(s, "strategy"),
            None => Ok(vec![DecodingStrategy::default()]),
        }
    }

    pub fn strategy(&self) -> CliResult<DecodingStrategy> {
        let all = self.strategies()?;
        if all.len() > 1 {
            return Err(CliError::usage("this command takes a single --strategy"));
        }
        Ok(all[0])
    }

    /// Applies `f` to every item with bounded parallelism and hands results
    /// to `sink` in input order, one chunk at a time, so an interrupted run
    /// has written a prefix of the final output.
    pub fn for_each_ordered<T, R, F, S>(&self, items: &[T], f: F, mut sink: S) -> CliResult<()>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
        S: FnMut(&T, R) -> CliResult<()>,
    {
        for chunk in items.chunks(self.parallel) {
            let results: Vec<R> = self.pool.install(|| chunk.par_iter().map(&f).collect());
            for (item, r) in chunk.iter().zip(results) {
                sink(item, r)?;
            }
        }
        Ok(())
    }
}
