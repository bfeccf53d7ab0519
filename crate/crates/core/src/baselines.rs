//! Reference solvers: nearest neighbor, Clarke–Wright savings and an
//! exhaustive optimum for small instances, plus gap reporting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::instances::Instance;
use crate::routes::Solution;

/// Customer-count limit of [`exact_oracle`] used when no other is given.
pub const ORACLE_LIMIT: usize = 8;

/// Greedy construction: always drive to the nearest unvisited customer
/// that still fits, returning to the depot when none does.
pub fn nearest_neighbor(inst: &Instance) -> Solution {
    let n = inst.n();
    let mut visited = vec![false; n + 1];
    let mut visits = vec![0];
    let (mut cur, mut load, mut left) = (0usize, 0u32, n);
    while left > 0 {
        let mut best: Option<(f64, usize)> = None;
        for v in 1..=n {
            if visited[v] || load + inst.demand(v) > inst.capacity {
                continue;
            }
            let d = inst.dist(cur, v);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, v));
            }
        }
        match best {
            Some((_, v)) => {
                visited[v] = true;
                visits.push(v);
                load += inst.demand(v);
                cur = v;
                left -= 1;
            }
            None => {
                visits.push(0);
                cur = 0;
                load = 0;
            }
        }
    }
    visits.push(0);
    Solution::from_visits(visits, inst).expect("nearest neighbor builds a well-formed tour")
}

/// Parallel savings algorithm.
pub fn clarke_wright(inst: &Instance) -> Solution {
    let n = inst.n();
    let mut savings = Vec::new();
    for i in 1..=n {
        for j in i + 1..=n {
            let s = inst.dist(0, i) + inst.dist(0, j) - inst.dist(i, j);
            if s > 0.0 {
                savings.push((s, i, j));
            }
        }
    }
    // descending saving, then ascending (i, j); the sort is stable
    savings.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut routes: Vec<Option<Vec<usize>>> = (0..=n).map(|v| (v > 0).then(|| vec![v])).collect();
    let mut owner: Vec<usize> = (0..=n).collect();
    let mut load: Vec<u32> = (0..=n).map(|v| inst.demand(v)).collect();

    for (_, i, j) in savings {
        let (ri, rj) = (owner[i], owner[j]);
        if ri == rj || load[ri] + load[rj] > inst.capacity {
            continue;
        }
        let a = routes[ri].as_ref().unwrap();
        let b = routes[rj].as_ref().unwrap();
        let i_end = *a.last().unwrap() == i;
        let i_start = a[0] == i;
        let j_end = *b.last().unwrap() == j;
        let j_start = b[0] == j;
        if !(i_end || i_start) || !(j_end || j_start) {
            continue;
        }
        let mut a = routes[ri].take().unwrap();
        let mut b = routes[rj].take().unwrap();
        if !i_end {
            a.reverse();
        }
        if !j_start {
            b.reverse();
        }
        for &v in &b {
            owner[v] = ri;
        }
        a.extend(b);
        load[ri] += load[rj];
        routes[ri] = Some(a);
    }
    let routes: Vec<Vec<usize>> = routes.into_iter().flatten().collect();
    Solution::from_routes(routes, inst).expect("savings routes are well formed")
}

fn route_cost(inst: &Instance, order: &[usize]) -> f64 {
    let mut cost = inst.dist(0, order[0]) + inst.dist(*order.last().unwrap(), 0);
    for w in order.windows(2) {
        cost += inst.dist(w[0], w[1]);
    }
    cost
}

/// Advances `v` to the next lexicographic permutation.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn best_order(inst: &Instance, members: &[usize]) -> (f64, Vec<usize>) {
    let mut perm = members.to_vec();
    let mut best = (route_cost(inst, &perm), perm.clone());
    while next_permutation(&mut perm) {
        let c = route_cost(inst, &perm);
        if c < best.0 {
            best = (c, perm.clone());
        }
    }
    best
}

/// Minimum-cost solution by exhaustive search: every capacity-feasible
/// customer subset gets its best route order by permutation enumeration,
/// then subsets are combined into an optimal partition by dynamic
/// programming over bitmasks.
pub fn exact_oracle(inst: &Instance, limit: usize) -> Result<Solution> {
    let n = inst.n();
    if n > limit {
        return Err(Error::TooLarge { n, limit });
    }
    if n > 20 {
        return Err(Error::TooLarge { n, limit: 20 });
    }
    let full = (1usize << n) - 1;
    let mut route: Vec<Option<(f64, Vec<usize>)>> = vec![None; full + 1];
    for (mask, slot) in route.iter_mut().enumerate().skip(1) {
        let members: Vec<usize> = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect();
        let demand: u64 = members.iter().map(|&v| inst.demand(v) as u64).sum();
        if demand <= inst.capacity as u64 {
            *slot = Some(best_order(inst, &members));
        }
    }
    let mut best = vec![f64::INFINITY; full + 1];
    let mut choice = vec![0usize; full + 1];
    best[0] = 0.0;
    for mask in 1..=full {
        let low = mask & mask.wrapping_neg();
        let rest = mask ^ low;
        // subsets of `rest`, each joined with the lowest customer
        let mut sub = rest;
        loop {
            let part = sub | low;
            if let Some((c, _)) = &route[part] {
                let total = best[mask ^ part] + c;
                if total < best[mask] {
                    best[mask] = total;
                    choice[mask] = part;
                }
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    let mut routes = Vec::new();
    let mut mask = full;
    while mask != 0 {
        let part = choice[mask];
        routes.push(route[part].as_ref().unwrap().1.clone());
        mask ^= part;
    }
    Solution::from_routes(routes, inst)
}

/// One method's result on one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub instance_id: String,
    pub method: String,
    pub cost: f64,
    pub time_ms: f64,
    pub feasible: bool,
}

/// What gaps are measured against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BestKnown {
    /// The named method's cost (typically the oracle).
    Method(String),
    /// The lowest cost any method reached on that instance.
    BestInRun,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapRow {
    pub instance_id: String,
    pub method: String,
    pub cost: f64,
    pub gap_pct: f64,
    pub time_ms: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub mean_cost: f64,
    pub mean_gap_pct: f64,
    pub feasible_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    pub summary: Vec<MethodSummary>,
}

pub fn gap(cost: f64, best_known: f64) -> f64 {
    (cost - best_known) / best_known
}

/// Gap of every `(instance, method)` cell. Rows follow `instances` then
/// `methods` order.
pub fn gap_table(
    instances: &[String],
    methods: &[String],
    results: &[MethodResult],
    best_known: &BestKnown,
) -> Result<GapReport> {
    let find = |i: &str, m: &str| results.iter().find(|r| r.instance_id == i && r.method == m);
    let mut rows = Vec::with_capacity(instances.len() * methods.len());
    for id in instances {
        let cells = methods
            .iter()
            .map(|m| find(id, m).ok_or_else(|| Error::InvalidArgument(format!("no `{m}` cost for instance `{id}`"))))
            .collect::<Result<Vec<_>>>()?;
        let reference = match best_known {
            BestKnown::Method(m) => find(id, m)
                .ok_or_else(|| Error::InvalidArgument(format!("no best-known `{m}` cost for instance `{id}`")))?
                .cost,
            BestKnown::BestInRun => cells.iter().map(|c| c.cost).fold(f64::INFINITY, f64::min),
        };
        for c in cells {
            rows.push(GapRow {
                instance_id: id.clone(),
                method: c.method.clone(),
                cost: c.cost,
                gap_pct: 100.0 * gap(c.cost, reference),
                time_ms: c.time_ms,
                feasible: c.feasible,
            });
        }
    }
    let summary = methods
        .iter()
        .map(|m| {
            let mine: Vec<&GapRow> = rows.iter().filter(|r| &r.method == m).collect();
            let k = mine.len().max(1) as f64;
            MethodSummary {
                method: m.clone(),
                mean_cost: mine.iter().map(|r| r.cost).sum::<f64>() / k,
                mean_gap_pct: mine.iter().map(|r| r.gap_pct).sum::<f64>() / k,
                feasible_pct: 100.0 * mine.iter().filter(|r| r.feasible).count() as f64 / k,
            }
        })
        .collect();
    Ok(GapReport { rows, summary })
}

impl GapReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance_id,method,cost,gap_pct,time_ms,feasible\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.6},{:.4},{:.3},{}",
                r.instance_id, r.method, r.cost, r.gap_pct, r.time_ms, r.feasible
            )
            .unwrap();
        }
        s
    }
}
