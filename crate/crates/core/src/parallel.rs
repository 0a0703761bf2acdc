//! Order-preserving map over samples.
//!
//! With the `parallel` feature and `parallelism > 1` the work runs on a
//! dedicated rayon pool of that many threads; otherwise it runs inline.
//! Output order always matches input order.

use crate::error::{Error, Result};

pub fn map_ordered<T, R, F>(items: &[T], parallelism: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallelism > 1 && items.len() > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::Backend(format!("cannot start worker pool: {e}")))?;
        return Ok(pool.install(|| items.par_iter().map(&f).collect()));
    }
    if parallelism == 0 {
        return Err(Error::InvalidParameter("parallelism must be >= 1".into()));
    }
    Ok(items.iter().map(f).collect())
}
