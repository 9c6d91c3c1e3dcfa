//! Chunk-wise delta debugging for differential probe inputs.

use serde::{Deserialize, Serialize};

/// Outcome metadata for one minimization run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimizeStats {
    pub evals: usize,
    /// False when the eval budget ran out before 1-minimality was confirmed.
    pub minimal: bool,
}

struct Budget {
    used: usize,
    max: usize,
}

impl Budget {
    fn spend(&mut self) -> bool {
        if self.used >= self.max {
            return false;
        }
        self.used += 1;
        true
    }
}

fn split_points(len: usize, n: usize) -> Vec<(usize, usize)> {
    let n = n.min(len).max(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * len / n;
        let end = (i + 1) * len / n;
        if end > start {
            out.push((start, end));
        }
    }
    out
}

fn without(data: &[u8], (start, end): (usize, usize)) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() - (end - start));
    out.extend_from_slice(&data[..start]);
    out.extend_from_slice(&data[end..]);
    out
}

/// ddmin over a byte buffer. `pred` must be true on `data`. Halving
/// granularity stops at `min_chunk` bytes; the result is 1-minimal at that
/// granularity unless the budget ran out first.
pub fn ddmin_bytes<F>(data: &[u8], mut pred: F, min_chunk: usize, max_evals: usize) -> (Vec<u8>, MinimizeStats)
where
    F: FnMut(&[u8]) -> bool,
{
    let mut current = data.to_vec();
    let mut budget = Budget { used: 0, max: max_evals };
    let mut n = 2usize;
    let mut exhausted = false;

    'outer: loop {
        if current.len() <= min_chunk {
            break;
        }
        let chunks = split_points(current.len(), n);
        // Try each chunk alone.
        for &c in &chunks {
            if !budget.spend() {
                exhausted = true;
                break 'outer;
            }
            let candidate = current[c.0..c.1].to_vec();
            if pred(&candidate) {
                current = candidate;
                n = 2;
                continue 'outer;
            }
        }
        // Try each complement.
        if chunks.len() > 2 {
            for &c in &chunks {
                if !budget.spend() {
                    exhausted = true;
                    break 'outer;
                }
                let candidate = without(&current, c);
                if pred(&candidate) {
                    current = candidate;
                    n = (n - 1).max(2);
                    continue 'outer;
                }
            }
        }
        // Refine granularity until chunks hit the floor.
        let max_parts = current.len().div_ceil(min_chunk);
        if n >= max_parts {
            break;
        }
        n = (n * 2).min(max_parts);
    }

    // Final 1-minimality pass at min_chunk granularity.
    if !exhausted {
        let mut changed = true;
        while changed && current.len() > min_chunk {
            changed = false;
            let parts = current.len().div_ceil(min_chunk);
            for c in split_points(current.len(), parts) {
                if !budget.spend() {
                    exhausted = true;
                    break;
                }
                let candidate = without(&current, c);
                if pred(&candidate) {
                    current = candidate;
                    changed = true;
                    break;
                }
            }
            if exhausted {
                break;
            }
        }
    }

    (current, MinimizeStats { evals: budget.used, minimal: !exhausted })
}
