use std::time::Instant;

use rand::Rng;

use crate::cloud::{ball_windows, dist2, knn_query, Point3};
use crate::error::Result;
use crate::model::SearchMethod;

pub const BENCH_CSV_HEADER: &str = "method,N,M,median_us,correct";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: SearchMethod,
    pub n: usize,
    pub m: usize,
    pub median_us: f64,
    /// Every checked query agreed with the brute-force oracle.
    pub correct: bool,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.1},{}", self.method.name(), self.n, self.m, self.median_us, self.correct)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn in_radius(coords: &[Point3], q: usize, radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    (0..coords.len()).filter(|&j| dist2(&coords[q], &coords[j]) <= r2).collect()
}

fn brute_knn(coords: &[Point3], q: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    idx.sort_by(|&a, &b| {
        dist2(&coords[q], &coords[a])
            .total_cmp(&dist2(&coords[q], &coords[b]))
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Checks `checks` random queries. Voxel query windows must lie inside the
/// radius, hold `min(count, M)` points, equal the in-radius set when it
/// fits, and then also lie inside the `M` nearest neighbors. kNN windows
/// must equal the brute-force `min(M, N)` nearest set.
pub fn check_search<R: Rng + ?Sized>(
    coords: &[Point3],
    m: usize,
    radius: f64,
    method: SearchMethod,
    checks: usize,
    rng: &mut R,
) -> Result<bool> {
    let n = coords.len();
    if n == 0 {
        return Ok(true);
    }
    let qs: Vec<usize> = (0..checks.min(n)).map(|_| rng.random_range(0..n)).collect();
    let k = m.min(n);
    let knn = knn_query(coords, &qs, k)?;
    match method {
        SearchMethod::Knn => Ok(qs.iter().enumerate().all(|(t, &q)| knn.window(t) == brute_knn(coords, q, k).as_slice())),
        SearchMethod::Voxel => {
            let vq = crate::cloud::voxel_query(
                &crate::cloud::VoxelGrid::build(coords, radius)?,
                coords,
                &qs,
                radius,
                m,
            )?;
            Ok(qs.iter().enumerate().all(|(t, &q)| {
                let s = in_radius(coords, q, radius);
                let w = vq.window(t);
                let subset = w.iter().all(|j| s.binary_search(j).is_ok());
                let sized = w.len() == s.len().min(m);
                let fits = s.len() > m || (w == s.as_slice() && w.iter().all(|j| knn.window(t).contains(j)));
                subset && sized && fits
            }))
        }
    }
}

/// Times neighbor search for every point of `coords`, `reps` times, and
/// checks correctness on sampled queries.
pub fn bench_search<R: Rng + ?Sized>(
    coords: &[Point3],
    m: usize,
    radius: f64,
    method: SearchMethod,
    reps: usize,
    checks: usize,
    rng: &mut R,
) -> Result<BenchRow> {
    let all: Vec<usize> = (0..coords.len()).collect();
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        let w = match method {
            SearchMethod::Voxel => ball_windows(coords, radius, m)?,
            SearchMethod::Knn => knn_query(coords, &all, m.min(coords.len()))?,
        };
        times.push(t0.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(w);
    }
    let correct = check_search(coords, m, radius, method, checks, rng)?;
    Ok(BenchRow {
        method,
        n: coords.len(),
        m,
        median_us: median(times),
        correct,
    })
}

/// Uniform points in a slab sized for roughly `density` points per cubic
/// meter, 2 m tall.
pub fn bench_cloud<R: Rng + ?Sized>(n: usize, density: f64, rng: &mut R) -> Vec<Point3> {
    let side = (n as f64 / (2.0 * density)).sqrt().max(1.0);
    (0..n)
        .map(|_| [rng.random_range(0.0..side), rng.random_range(0.0..side), rng.random_range(0.0..2.0)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = bench_cloud(10, 5.0, &mut rng);
        for method in [SearchMethod::Voxel, SearchMethod::Knn] {
            let r = bench_search(&c, 4, 1.0, method, 1, 10, &mut rng).unwrap();
            assert_eq!(r.n, 10);
            assert!(r.correct);
            assert_eq!(r.csv_row().split(',').count(), BENCH_CSV_HEADER.split(',').count());
        }
    }
}
