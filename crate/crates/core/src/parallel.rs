//! Replica fan-out. Results are collected in replica order, so any
//! reduction over them is independent of the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `f` on a dedicated pool with `workers` threads (0 = rayon default).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Evaluates replicas `0..n`. Blow-ups are counted as censored; any other
/// error aborts the whole batch.
pub(crate) fn fan_out<T: Send>(n: usize, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<(Vec<T>, usize)> {
    let results: Vec<Result<T>> = (0..n as u64).into_par_iter().map(&f).collect();
    let mut out = Vec::with_capacity(n);
    let mut censored = 0;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(Error::BlowUp { .. }) => censored += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, censored))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_censoring() {
        let (v, c) = fan_out(6, |r| {
            if r == 2 {
                Err(Error::BlowUp {
                    step: 1,
                    time: 0.0,
                    norm: 1.0,
                    guard: 0.5,
                })
            } else {
                Ok(r * 10)
            }
        })
        .unwrap();
        assert_eq!(v, vec![0, 10, 30, 40, 50]);
        assert_eq!(c, 1);
        assert!(fan_out(3, |_| -> Result<u8> { Err(Error::InvalidArgument("x".into())) }).is_err());
        let a = with_workers(1, || fan_out(50, |r| Ok(r as f64 * 0.1)).unwrap());
        let b = with_workers(3, || fan_out(50, |r| Ok(r as f64 * 0.1)).unwrap());
        assert_eq!(a, b);
    }
}
