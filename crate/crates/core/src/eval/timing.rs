//! Brute-force search cost as a function of embedding width.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::{Error, Result};

/// Queries scanned together against each pool row.
const QUERY_BLOCK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub dim: usize,
    pub seconds: f64,
    pub mean_query_seconds: f64,
    /// Time relative to the widest dimension measured.
    pub ratio_to_largest: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingTable {
    pub pool_size: usize,
    pub n_queries: usize,
    pub rows: Vec<TimingRow>,
    /// Sum of best-match indices; keeps the scan observable.
    pub checksum: u64,
}

fn random_unit_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let start = out.len();
        out.extend((0..dim).map(|_| -> f64 { StandardNormal.sample(rng) }));
        let row = &mut out[start..];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Index of the best pool row for every query, scanning the pool once per
/// block of queries.
pub fn scan(pool: &[f64], queries: &[f64], dim: usize) -> Vec<usize> {
    let n_pool = pool.len() / dim;
    let n_q = queries.len() / dim;
    let mut best = vec![(f64::NEG_INFINITY, 0usize); n_q];
    for q0 in (0..n_q).step_by(QUERY_BLOCK) {
        let q1 = (q0 + QUERY_BLOCK).min(n_q);
        for p in 0..n_pool {
            let row = &pool[p * dim..(p + 1) * dim];
            for q in q0..q1 {
                let s = dot(&queries[q * dim..(q + 1) * dim], row);
                if s > best[q].0 {
                    best[q] = (s, p);
                }
            }
        }
    }
    best.into_iter().map(|(_, p)| p).collect()
}

/// Time a single-threaded brute-force cosine scan over random unit vectors
/// at every width in `dims`.
pub fn timing_benchmark(
    dims: &[usize],
    pool_size: usize,
    n_queries: usize,
    seed: u64,
) -> Result<TimingTable> {
    if dims.is_empty() || dims.contains(&0) || pool_size == 0 || n_queries == 0 {
        return Err(Error::Config(
            "timing needs non-empty positive dims, pool size and query count".into(),
        ));
    }
    let mut rows = Vec::with_capacity(dims.len());
    let mut checksum = 0u64;
    for &dim in dims {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ dim as u64);
        let pool = random_unit_rows(pool_size, dim, &mut rng);
        let queries = random_unit_rows(n_queries, dim, &mut rng);
        let start = Instant::now();
        let best = scan(&pool, &queries, dim);
        let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        checksum = best.iter().fold(checksum, |c, &b| c.wrapping_add(b as u64));
        rows.push(TimingRow {
            dim,
            seconds,
            mean_query_seconds: seconds / n_queries as f64,
            ratio_to_largest: 0.0,
        });
    }
    let widest = rows
        .iter()
        .max_by_key(|r| r.dim)
        .map(|r| r.seconds)
        .expect("non-empty");
    for r in &mut rows {
        r.ratio_to_largest = r.seconds / widest;
    }
    Ok(TimingTable {
        pool_size,
        n_queries,
        rows,
        checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_finds_exact_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = random_unit_rows(50, 12, &mut rng);
        let queries: Vec<f64> = [7usize, 31, 0]
            .iter()
            .flat_map(|&i| pool[i * 12..(i + 1) * 12].to_vec())
            .collect();
        assert_eq!(scan(&pool, &queries, 12), vec![7, 31, 0]);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..21).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..21).map(|i| (i as f64).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn single_query_records_positive_time() {
        let t = timing_benchmark(&[8], 10, 1, 0).unwrap();
        assert!(t.rows[0].seconds > 0.0);
        assert_eq!(t.rows[0].ratio_to_largest, 1.0);
        assert!(timing_benchmark(&[], 10, 1, 0).is_err());
    }
}
