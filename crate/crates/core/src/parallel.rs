//! Order-preserving map over a worker pool, or sequentially when the
//! `parallel` feature is off or one worker is requested.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Clone, Default)]
pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers()).finish()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self::default()
    }

    /// `workers == 0` uses every available core; `1` runs inline.
    pub fn new(workers: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if workers == 1 {
                return Self::sequential();
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool");
            Self {
                pool: Some(Arc::new(pool)),
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = workers;
            Self::sequential()
        }
    }

    pub fn workers(&self) -> usize {
        #[cfg(feature = "parallel")]
        if let Some(p) = &self.pool {
            return p.current_num_threads();
        }
        1
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(p) = &self.pool {
            use rayon::prelude::*;
            return p.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    /// [`Executor::map`] that stops at the first error in item order.
    pub fn try_map<T, R, E, F>(&self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}
