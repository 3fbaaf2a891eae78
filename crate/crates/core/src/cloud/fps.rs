use super::{dist2, Point3};
use crate::error::{Error, Result};

/// Greedy farthest point sampling. Starts at `start`; each subsequent pick
/// maximizes the distance to the already-selected set, ties to the lower
/// index. The result for `n` is a prefix of the result for `n + 1`.
pub fn fps(coords: &[Point3], n: usize, start: usize) -> Result<Vec<usize>> {
    if n == 0 || n > coords.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} of {} points",
            coords.len()
        )));
    }
    if start >= coords.len() {
        return Err(Error::IndexOutOfRange {
            index: start,
            len: coords.len(),
        });
    }
    let mut min_d = vec![f64::INFINITY; coords.len()];
    let mut picked = vec![false; coords.len()];
    let mut out = Vec::with_capacity(n);
    let mut cur = start;
    for _ in 0..n {
        out.push(cur);
        picked[cur] = true;
        let c = coords[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (j, p) in coords.iter().enumerate() {
            let d = dist2(&c, p);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if !picked[j] && min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        cur = best;
    }
    Ok(out)
}
