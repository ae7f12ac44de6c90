//! Item-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature and `jobs > 1`, work runs on a dedicated rayon
//! pool; otherwise items are processed in order on the calling thread. Results
//! always come back in input order, so reductions over them are deterministic.

#[derive(Debug)]
pub struct Executor {
    jobs: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    pub fn new(jobs: usize) -> Self {
        let jobs = jobs.max(1);
        #[cfg(feature = "parallel")]
        {
            let pool = (jobs > 1)
                .then(|| {
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(jobs)
                        .build()
                        .ok()
                })
                .flatten();
            Executor { jobs, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Executor { jobs }
        }
    }

    pub fn sequential() -> Self {
        Self::new(1)
    }

    pub fn jobs(&self) -> usize {
        self.jobs
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    pub fn map<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}
