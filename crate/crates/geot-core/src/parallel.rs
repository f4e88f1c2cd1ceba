//! Execution-width control.
//!
//! Every parallel section in this crate maps independent slots and merges
//! them in slot order, so thread count never changes numeric results.
//! The `GEOT_THREADS` environment variable still matters for two things:
//! a positive value caps the worker pool, and `0` selects the sequential
//! reference mode, which also suppresses wall-clock fields in logs so
//! that repeated runs produce byte-identical output.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Environment variable naming the execution width.
pub const THREADS_VAR: &str = "GEOT_THREADS";

/// Parses a thread spec: 0 means sequential reference mode.
pub fn parse_thread_spec(raw: &str) -> Result<usize> {
    raw.trim()
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("{THREADS_VAR}={raw:?} is not a thread count")))
}

fn configured() -> Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(raw) => parse_thread_spec(&raw).map(Some),
        Err(_) => Ok(None),
    }
}

/// True when `GEOT_THREADS=0` pins execution to one thread.
pub fn reference_mode() -> bool {
    matches!(configured(), Ok(Some(0)))
}

/// Applies the configured width to the global worker pool. Call once at
/// startup; a pool that already exists is left as is.
pub fn install_thread_limit() -> Result<()> {
    if let Some(n) = configured()? {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    Ok(())
}

/// Maps `f` over `0..n`, in parallel unless reference mode is active.
/// Results arrive in slot order either way.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if reference_mode() {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_specs_parse_or_fail_loudly() {
        assert_eq!(parse_thread_spec("0").unwrap(), 0);
        assert_eq!(parse_thread_spec("4").unwrap(), 4);
        assert_eq!(parse_thread_spec(" 2 ").unwrap(), 2);
        assert!(parse_thread_spec("").is_err());
        assert!(parse_thread_spec("-1").is_err());
        assert!(parse_thread_spec("many").is_err());
        assert!(parse_thread_spec("1.5").is_err());
    }

    #[test]
    fn mapped_slots_keep_their_order() {
        let out = map_indexed(1000, |i| i * i);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }
}
