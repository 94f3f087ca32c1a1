//! Per-document fan-out. Results always come back in input order, so every
//! reduction downstream is deterministic regardless of the strategy.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool; identical to `Sequential` without the `parallel`
    /// feature.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// Like [`Exec::map`] with per-worker scratch state built by `init`.
    pub fn map_init<T, S, R, I, F>(self, items: &[T], init: I, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        I: Fn() -> S + Sync + Send,
        F: Fn(&mut S, &T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map_init(init, f).collect(),
            _ => {
                let mut state = init();
                items.iter().map(|t| f(&mut state, t)).collect()
            }
        }
    }
}

impl std::str::FromStr for Exec {
    type Err = crate::error::HmtError;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "sequential" => Ok(Exec::Sequential),
            "parallel" => Ok(Exec::Parallel),
            other => Err(crate::error::HmtError::Config(format!("unknown exec {other:?}"))),
        }
    }
}
