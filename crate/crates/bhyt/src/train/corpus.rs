//! Byte-level toy corpus with a fixed 95/5 train/eval split.
//!
//! Tokenization is the identity on bytes (vocab 256). Train windows are
//! sampled from the region before the split boundary, eval windows from the
//! region after it, so the two never share a window.

use crate::error::{BhytError, Result};
use crate::numerics::RngStream;
use std::path::{Path, PathBuf};

pub const TRAIN_FRACTION: f64 = 0.95;

/// Path of the corpus bundled with the crate.
pub fn bundled_corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/corpus.txt")
}

#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    /// First index of the eval region.
    split: usize,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(BhytError::Io)?;
        if bytes.len() < 1024 {
            return Err(BhytError::param(
                "Corpus::load",
                format!("corpus too small ({} bytes)", bytes.len()),
            ));
        }
        let split = (bytes.len() as f64 * TRAIN_FRACTION) as usize;
        Ok(Corpus { bytes, split })
    }

    pub fn load_bundled() -> Result<Self> {
        Self::load(&bundled_corpus_path())
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn split_boundary(&self) -> usize {
        self.split
    }

    fn window_at(&self, start: usize, t: usize) -> (Vec<usize>, Vec<usize>) {
        let w = &self.bytes[start..start + t + 1];
        let tokens = w[..t].iter().map(|&b| b as usize).collect();
        let targets = w[1..].iter().map(|&b| b as usize).collect();
        (tokens, targets)
    }

    /// One random training window of `t` tokens (plus shifted targets).
    /// Windows end strictly before the split boundary.
    pub fn sample_train_window(&self, t: usize, rng: &mut RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
        if t + 1 > self.split {
            return Err(BhytError::param(
                "Corpus::sample_train_window",
                format!("window {t}+1 exceeds train region {}", self.split),
            ));
        }
        let start = rng.below(self.split - t);
        // clamp so the window (t+1 bytes) never crosses into the eval region
        let start = start.min(self.split - t - 1);
        Ok(self.window_at(start, t))
    }

    /// Deterministic evaluation windows, evenly spaced inside the eval region.
    pub fn eval_windows(&self, t: usize, count: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let region = self.bytes.len() - self.split;
        if region < t + 1 {
            return Err(BhytError::param(
                "Corpus::eval_windows",
                format!("eval region {region} too small for windows of {t}+1"),
            ));
        }
        let usable = region - (t + 1);
        let count = count.max(1);
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let offset = if count == 1 { 0 } else { usable * i / (count - 1) };
            out.push(self.window_at(self.split + offset, t));
        }
        Ok(out)
    }

    /// Largest end index a train window may reach and smallest start index an
    /// eval window may use; disjointness means max_train_end ≤ min_eval_start.
    pub fn window_bounds(&self, t: usize) -> (usize, usize) {
        ((self.split - t - 1) + t + 1, self.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_corpus_loads_and_is_byte_level() {
        let corpus = Corpus::load_bundled().unwrap();
        assert!(corpus.len() > 1_000_000, "corpus {} bytes", corpus.len());
        let mut rng = RngStream::new(1);
        let (tokens, targets) = corpus.sample_train_window(64, &mut rng).unwrap();
        assert_eq!(tokens.len(), 64);
        assert_eq!(targets.len(), 64);
        assert!(tokens.iter().all(|&t| t < 256));
        // targets are the tokens shifted by one
        assert_eq!(&tokens[1..], &targets[..63]);
    }

    #[test]
    fn same_seed_same_batches() {
        let corpus = Corpus::load_bundled().unwrap();
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        for _ in 0..10 {
            let wa = corpus.sample_train_window(32, &mut a).unwrap();
            let wb = corpus.sample_train_window(32, &mut b).unwrap();
            assert_eq!(wa, wb);
        }
    }

    #[test]
    fn train_and_eval_windows_are_disjoint() {
        let corpus = Corpus::load_bundled().unwrap();
        let t = 48;
        let (max_train_end, min_eval_start) = corpus.window_bounds(t);
        assert!(max_train_end <= min_eval_start);

        // Window-overlap checker: empirically no train window index reaches
        // into any eval window.
        let mut rng = RngStream::new(3);
        let mut max_seen_end = 0usize;
        for _ in 0..2000 {
            let start = {
                // reproduce the sampling bound
                let s = rng.below(corpus.split_boundary() - t);
                s.min(corpus.split_boundary() - t - 1)
            };
            max_seen_end = max_seen_end.max(start + t + 1);
        }
        assert!(max_seen_end <= corpus.split_boundary());
        let evals = corpus.eval_windows(t, 8).unwrap();
        assert_eq!(evals.len(), 8);
    }

    #[test]
    fn missing_corpus_is_io_error() {
        let err = Corpus::load(Path::new("/nonexistent/corpus.txt")).unwrap_err();
        assert!(matches!(err, BhytError::Io(_)));
    }
}
