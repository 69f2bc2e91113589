//! Brute-force oracles shared by the integration tests. Everything here works
//! from raw permutations of the doses and never calls the library's
//! enumeration code.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dosesens_core::design::{MatchedDesign, MatchedSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        out.push(perm.clone());
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else { break };
        let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    out
}

/// Bit-exact key of a sorted dose vector.
pub type TableKey = Vec<u64>;

pub fn key(s1: &[f64]) -> TableKey {
    s1.iter().map(|v| v.to_bits()).collect()
}

pub fn unkey(k: &TableKey) -> Vec<f64> {
    k.iter().map(|&b| f64::from_bits(b)).collect()
}

/// Law of the sorted doses of the outcome-1 units when arrangement `π`
/// (unit `j` receives dose `z[π(j)]`) has probability `∝ exp(γ Σ z[π(j)] u_j)`.
pub fn table_law(set: &MatchedSet, u: &[f64], gamma: f64) -> BTreeMap<TableKey, f64> {
    let perms = permutations(set.len());
    let expo: Vec<f64> =
        perms.iter().map(|p| gamma * p.iter().enumerate().map(|(j, &d)| set.doses[d] * u[j]).sum::<f64>()).collect();
    let max = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = expo.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut law = BTreeMap::new();
    for (p, wt) in perms.iter().zip(&w) {
        let mut s1: Vec<f64> =
            p.iter().enumerate().filter(|(j, _)| set.outcomes[*j] == 1).map(|(_, &d)| set.doses[d]).collect();
        s1.sort_by(f64::total_cmp);
        *law.entry(key(&s1)).or_insert(0.0) += wt / total;
    }
    law
}

/// All outcome-1 dose tables of a set with `m` events.
pub fn all_tables(doses: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = doses.len();
    let mut sorted = doses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == m {
            out.push((0..n).filter(|&j| mask >> j & 1 == 1).map(|j| sorted[j]).collect());
        }
    }
    out
}

pub fn join(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.max(*y)).collect()
}

pub fn meet(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).collect()
}

pub fn leq(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// A design with distinct doses in `(0, 1)` and random binary outcomes.
pub fn random_design(rng: &mut ChaCha8Rng, max_sets: usize, max_n: usize, max_units: usize) -> MatchedDesign {
    loop {
        let num = rng.random_range(1..=max_sets);
        let sizes: Vec<usize> = (0..num).map(|_| rng.random_range(2..=max_n)).collect();
        if sizes.iter().sum::<usize>() > max_units {
            continue;
        }
        let sets = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let doses = (0..n).map(|_| (rng.random_range(1..1000) as f64) / 1000.0).collect::<Vec<_>>();
                let outcomes = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
                (format!("s{i}"), doses, outcomes)
            })
            .collect::<Vec<_>>();
        if sets.iter().any(|(_, d, _)| {
            let mut s = d.clone();
            s.sort_by(f64::total_cmp);
            s.windows(2).any(|w| w[0] == w[1])
        }) {
            continue;
        }
        return MatchedDesign::new(
            sets.into_iter().map(|(id, d, o)| MatchedSet::new(id, d, o).unwrap()).collect(),
        )
        .unwrap();
    }
}

/// Statistic oracles written directly in terms of the outcome-1 table.
#[derive(Debug, Clone, Copy)]
pub enum TableStat {
    Sum,
    Count(f64),
    WithinRank,
}

impl TableStat {
    pub fn eval(&self, doses: &[f64], s1: &[f64]) -> f64 {
        match *self {
            TableStat::Sum => s1.iter().sum(),
            TableStat::Count(c) => s1.iter().filter(|&&z| z > c).count() as f64,
            TableStat::WithinRank => s1.iter().map(|&z| doses.iter().filter(|&&d| d <= z).count() as f64).sum(),
        }
    }
}

/// Law of `T = Σ_i stat(table_i)` from per-set table laws.
pub fn stat_law(
    design: &MatchedDesign,
    laws: &[&BTreeMap<TableKey, f64>],
    stat: TableStat,
) -> Vec<(f64, f64)> {
    let mut acc: Vec<(f64, f64)> = vec![(0.0, 1.0)];
    for (set, law) in design.sets.iter().zip(laws) {
        let mut next = Vec::with_capacity(acc.len() * law.len());
        for (v, p) in &acc {
            for (k, q) in law.iter() {
                next.push((v + stat.eval(&set.doses, &unkey(k)), p * q));
            }
        }
        acc = next;
    }
    acc
}

/// `pr(T ≥ t)` with a relative slack for rounding in summed scores.
pub fn tail(law: &[(f64, f64)], t: f64) -> f64 {
    let cut = t - 1e-9 * t.abs().max(1.0);
    law.iter().filter(|(v, _)| *v >= cut).map(|(_, p)| p).sum()
}

/// Every vector over `grid` of length `n`, in odometer order.
pub fn grid_points(grid: &[f64], n: usize) -> Vec<Vec<f64>> {
    let total = grid.len().pow(n as u32);
    (0..total).map(|c| (0..n).map(|j| grid[(c / grid.len().pow(j as u32)) % grid.len()]).collect()).collect()
}
