//! Seeded random instances.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::flp::{FlpInstance, Metric};
use super::mcp::McpInstance;
use super::tsp::TspInstance;
use crate::error::{Error, Result};

/// Smallest and largest number of items a generated set covers.
pub const MCP_SET_SIZE: (usize, usize) = (3, 15);
/// Range of generated item values (integers).
pub const MCP_VALUE_RANGE: (u32, u32) = (1, 100);
const MCP_RETRIES: usize = 100;

fn unit_square(rng: &mut ChaCha8Rng, m: usize) -> Vec<[f64; 2]> {
    (0..m).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect()
}

/// `m` uniform points in the unit square. The capacitated variant uses unit
/// demand everywhere and capacity `ceil(2m / k)`.
pub fn gen_flp(m: usize, k: usize, seed: u64, metric: Metric, capacitated: bool) -> Result<FlpInstance> {
    if m == 0 || k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= m, got m = {m}, k = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = FlpInstance::from_coords(unit_square(&mut rng, m), k, metric)?;
    if capacitated {
        let capacity = (2 * m).div_ceil(k) as f64;
        inst.with_capacity(capacity, vec![1.0; m])
    } else {
        Ok(inst)
    }
}

/// `m` sets over `n` items; every set covers a uniform number of distinct
/// items in 3..=15 (capped at `n`), values are uniform integers in 1..=100.
/// Redraws up to 100 times until every item is covered, then attaches any
/// item still uncovered to a random set.
pub fn gen_mcp(m: usize, n: usize, k: usize, seed: u64) -> Result<McpInstance> {
    if m == 0 || n == 0 || k == 0 || k > m {
        return Err(Error::InvalidArgument(format!(
            "need m, n >= 1 and 1 <= k <= m, got m = {m}, n = {n}, k = {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(MCP_VALUE_RANGE.0..=MCP_VALUE_RANGE.1) as f64)
        .collect();
    let (lo, hi) = (MCP_SET_SIZE.0.min(n), MCP_SET_SIZE.1.min(n));
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for _ in 0..MCP_RETRIES {
        sets = (0..m)
            .map(|_| {
                let size = rng.gen_range(lo..=hi);
                let mut s = sample(&mut rng, n, size).into_vec();
                s.sort_unstable();
                s
            })
            .collect();
        if covers_all(&sets, n) {
            break;
        }
    }
    let mut covered = vec![false; n];
    for s in &sets {
        for &j in s {
            covered[j] = true;
        }
    }
    for (j, c) in covered.iter().enumerate() {
        if !c {
            let i = rng.gen_range(0..m);
            sets[i].push(j);
            sets[i].sort_unstable();
        }
    }
    McpInstance::new(n, k, sets, values)
}

fn covers_all(sets: &[Vec<usize>], n: usize) -> bool {
    let mut covered = vec![false; n];
    for s in sets {
        for &j in s {
            covered[j] = true;
        }
    }
    covered.iter().all(|&c| c)
}

/// `m` uniform cities in the unit square with Euclidean distances.
pub fn gen_tsp(m: usize, seed: u64) -> Result<TspInstance> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one city".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TspInstance::from_coords(unit_square(&mut rng, m))
}
