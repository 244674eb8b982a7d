//! Fixed-length training segments.

/// A window `[start, start + len)` of an utterance; samples past the end of
/// the utterance are zero-padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub start: usize,
    pub len: usize,
    /// Whether the window runs past the end of the utterance.
    pub padded: bool,
}

impl Chunk {
    /// Samples of `signal` inside the window, zero-padded to `len`.
    pub fn extract(&self, signal: &[f64]) -> Vec<f64> {
        let end = (self.start + self.len).min(signal.len());
        let mut out = signal[self.start.min(end)..end].to_vec();
        out.resize(self.len, 0.0);
        out
    }
}

/// Windows of `len` samples every `hop` samples, stopping after the first
/// window that reaches the end. Only that last window can be padded.
pub fn chunk(total: usize, len: usize, hop: usize) -> Vec<Chunk> {
    assert!(len > 0 && hop > 0, "chunk length and hop must be positive");
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let padded = start + len > total;
        out.push(Chunk { start, len, padded });
        if start + len >= total {
            return out;
        }
        start += hop;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_seconds_in_four_second_chunks() {
        let c = chunk(160_000, 64_000, 64_000);
        assert_eq!(c.iter().map(|c| c.start).collect::<Vec<_>>(), [0, 64_000, 128_000]);
        assert_eq!(c.iter().map(|c| c.padded).collect::<Vec<_>>(), [false, false, true]);
        let tail = c[2].extract(&vec![1.0; 160_000]);
        assert_eq!(tail.len(), 64_000);
        assert_eq!(tail.iter().sum::<f64>(), 32_000.0);
    }

    #[test]
    fn exact_fit_is_not_padded() {
        assert_eq!(chunk(8, 4, 4), [Chunk { start: 0, len: 4, padded: false }, Chunk { start: 4, len: 4, padded: false }]);
        assert_eq!(chunk(3, 4, 4), [Chunk { start: 0, len: 4, padded: true }]);
    }

    proptest! {
        #[test]
        fn chunks_cover_the_signal(total in 1usize..5000, len in 1usize..800, hop_frac in 0.1f64..1.0) {
            let hop = ((len as f64 * hop_frac) as usize).max(1);
            let c = chunk(total, len, hop);
            prop_assert_eq!(c[0].start, 0);
            prop_assert!(c.last().unwrap().start + len >= total);
            for w in c.windows(2) {
                prop_assert_eq!(w[1].start, w[0].start + hop);
                prop_assert!(w[0].start + len < total);
                prop_assert!(!w[0].padded);
            }
        }
    }
}
