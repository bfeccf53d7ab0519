//! Solutions as depot-separated visit sequences, with cost, reward and
//! feasibility checks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::instances::Instance;

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    /// Node sequence starting and ending at the depot (index 0).
    pub visits: Vec<usize>,
    pub routes: Vec<Vec<usize>>,
    pub cost: f64,
    pub feasible: bool,
}

impl Solution {
    /// Builds a solution from a visit sequence, computing cost and
    /// feasibility against `inst`.
    pub fn from_visits(visits: Vec<usize>, inst: &Instance) -> Result<Self> {
        let routes = routes_from_visits(&visits)?;
        let cost = visits_cost(&visits, inst)?;
        let mut sol = Solution {
            visits,
            routes,
            cost,
            feasible: false,
        };
        sol.feasible = validate_solution(&sol, inst).feasible();
        Ok(sol)
    }

    /// Joins routes with depot separators.
    pub fn from_routes(routes: Vec<Vec<usize>>, inst: &Instance) -> Result<Self> {
        let mut visits = vec![0];
        for r in &routes {
            visits.extend_from_slice(r);
            visits.push(0);
        }
        Self::from_visits(visits, inst)
    }

    pub fn route_count(&self) -> usize {
        self.routes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub each_customer_once: bool,
    pub capacity_respected: bool,
    /// `(route index, description)`; route index is `usize::MAX` for
    /// problems not tied to one route.
    pub violations: Vec<(usize, String)>,
    pub route_count: usize,
}

impl ValidationReport {
    pub fn feasible(&self) -> bool {
        self.each_customer_once && self.capacity_respected && self.violations.is_empty()
    }
}

fn visits_cost(visits: &[usize], inst: &Instance) -> Result<f64> {
    if let Some(&bad) = visits.iter().find(|&&v| v >= inst.num_nodes()) {
        return Err(Error::InvalidArgument(format!(
            "node {bad} out of range for {} nodes",
            inst.num_nodes()
        )));
    }
    let mut legs: Vec<f64> = visits.windows(2).map(|w| inst.dist(w[0], w[1])).collect();
    // summing in sorted order makes the total depend only on the multiset of
    // legs, so reversing or reordering routes gives bit-identical costs
    legs.sort_by(f64::total_cmp);
    Ok(legs.iter().sum())
}

/// Total Euclidean length of the visit sequence.
pub fn solution_cost(sol: &Solution, inst: &Instance) -> Result<f64> {
    visits_cost(&sol.visits, inst)
}

pub fn reward(sol: &Solution) -> f64 {
    -sol.cost
}

pub fn validate_solution(sol: &Solution, inst: &Instance) -> ValidationReport {
    let mut violations = Vec::new();
    let n = inst.n();
    if sol.visits.first() != Some(&0) || sol.visits.last() != Some(&0) {
        violations.push((usize::MAX, "visit sequence must start and end at the depot".to_string()));
    }
    if sol.visits.windows(2).any(|w| w[0] == 0 && w[1] == 0) {
        violations.push((usize::MAX, "empty route between consecutive depot visits".to_string()));
    }
    let mut count = vec![0usize; n + 1];
    let mut capacity_respected = true;
    for (ri, route) in sol.routes.iter().enumerate() {
        let mut load: u64 = 0;
        for &v in route {
            if v == 0 || v > n {
                violations.push((ri, format!("node {v} is not a customer")));
                continue;
            }
            count[v] += 1;
            load += inst.demand(v) as u64;
        }
        if load > inst.capacity as u64 {
            capacity_respected = false;
            violations.push((ri, format!("load {load} exceeds capacity {}", inst.capacity)));
        }
    }
    let mut each_customer_once = true;
    for (v, &c) in count.iter().enumerate().skip(1) {
        if c != 1 {
            each_customer_once = false;
            let what = if c == 0 { "never visited" } else { "visited more than once" };
            violations.push((usize::MAX, format!("customer {v} {what} ({c} times)")));
        }
    }
    ValidationReport {
        each_customer_once,
        capacity_respected,
        violations,
        route_count: sol.routes.len(),
    }
}

/// Splits a depot-delimited sequence into depot-free routes.
pub fn routes_from_visits(visits: &[usize]) -> Result<Vec<Vec<usize>>> {
    if visits.len() < 2 || visits[0] != 0 || visits[visits.len() - 1] != 0 {
        return Err(Error::MalformedSolution(
            "visit sequence must start and end at the depot".into(),
        ));
    }
    let mut routes = Vec::new();
    let mut current = Vec::new();
    for &v in &visits[1..] {
        if v == 0 {
            if current.is_empty() {
                return Err(Error::MalformedSolution("empty route".into()));
            }
            routes.push(std::mem::take(&mut current));
        } else {
            current.push(v);
        }
    }
    Ok(routes)
}

/// One line per route with 1-based customer ids, then `# cost <float>`.
pub fn write_solution(sol: &Solution) -> String {
    let mut s = String::new();
    for r in &sol.routes {
        let ids: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", ids.join(" ")).unwrap();
    }
    writeln!(s, "# cost {:?}", sol.cost).unwrap();
    s
}

pub fn parse_solution(text: &str, inst: &Instance) -> Result<Solution> {
    let mut routes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let route = line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("bad customer id `{t}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        routes.push(route);
    }
    Solution::from_routes(routes, inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_instance, Point};
    use proptest::prelude::*;

    fn square() -> Instance {
        Instance::new(
            "sq",
            Point::new(0.0, 0.0),
            vec![Point::new(0.0, 1.0), Point::new(1.0, 1.0), Point::new(1.0, 0.0)],
            vec![1, 1, 1],
            30,
        )
        .unwrap()
    }

    #[test]
    fn unit_square_cost() {
        let inst = square();
        let sol = Solution::from_visits(vec![0, 1, 2, 3, 0], &inst).unwrap();
        assert_eq!(sol.cost, 4.0);
        assert_eq!(solution_cost(&sol, &inst).unwrap(), 4.0);
        assert_eq!(reward(&sol), -4.0);
        assert!(sol.feasible);
    }

    #[test]
    fn out_and_back() {
        let inst = Instance::new("o", Point::new(0.0, 0.0), vec![Point::new(0.0, 1.0)], vec![1], 30).unwrap();
        assert_eq!(Solution::from_visits(vec![0, 1, 0], &inst).unwrap().cost, 2.0);
    }

    #[test]
    fn out_of_range_index() {
        let inst = square();
        let sol = Solution {
            visits: vec![0, 7, 0],
            routes: vec![vec![7]],
            cost: 0.0,
            feasible: false,
        };
        assert!(matches!(solution_cost(&sol, &inst), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn duplicate_customer_reported() {
        let inst = square();
        let sol = Solution::from_visits(vec![0, 1, 3, 0, 2, 3, 0], &inst).unwrap();
        let rep = validate_solution(&sol, &inst);
        assert!(!rep.each_customer_once);
        assert_eq!(rep.violations.len(), 1);
        assert!(rep.violations[0].1.contains("customer 3"));
        assert!(!sol.feasible);
    }

    #[test]
    fn capacity_overflow_reported() {
        let pts = (0..4).map(|i| Point::new(0.1 * i as f64, 0.5)).collect();
        let inst = Instance::new("c", Point::new(0.0, 0.0), pts, vec![9, 9, 9, 9], 30).unwrap();
        let sol = Solution::from_visits(vec![0, 1, 2, 3, 4, 0], &inst).unwrap();
        let rep = validate_solution(&sol, &inst);
        assert!(!rep.capacity_respected);
        assert!(rep.violations[0].1.contains("36"));
        assert_eq!(rep.route_count, 1);
    }

    #[test]
    fn split_visits() {
        assert_eq!(routes_from_visits(&[0, 1, 2, 0, 3, 0]).unwrap(), vec![vec![1, 2], vec![3]]);
        assert_eq!(routes_from_visits(&[0, 1, 0]).unwrap(), vec![vec![1]]);
        assert!(matches!(routes_from_visits(&[0, 1, 0, 0, 2, 0]), Err(Error::MalformedSolution(_))));
        assert!(matches!(routes_from_visits(&[1, 0]), Err(Error::MalformedSolution(_))));
    }

    #[test]
    fn serialization_roundtrip() {
        let inst = square();
        let sol = Solution::from_visits(vec![0, 2, 0, 1, 3, 0], &inst).unwrap();
        let text = write_solution(&sol);
        assert!(text.starts_with("2\n1 3\n# cost "));
        let back = parse_solution(&text, &inst).unwrap();
        assert_eq!(back, sol);
    }

    proptest! {
        #[test]
        fn cost_invariant_under_route_reversal_and_reordering(seed in any::<u64>(), n in 2usize..15, rot in 0usize..5, flip in 0usize..5) {
            let inst = generate_instance(n, 30, seed).unwrap();
            let mut routes: Vec<Vec<usize>> = (1..=n).collect::<Vec<_>>().chunks(3).map(<[usize]>::to_vec).collect();
            let base = Solution::from_routes(routes.clone(), &inst).unwrap();
            let k = flip % routes.len();
            routes[k].reverse();
            let reversed = Solution::from_routes(routes.clone(), &inst).unwrap();
            prop_assert_eq!(reversed.cost, base.cost);
            let r = rot % routes.len();
            routes.rotate_left(r);
            let rotated = Solution::from_routes(routes, &inst).unwrap();
            prop_assert_eq!(rotated.cost, base.cost);
            prop_assert_eq!(reward(&base) + base.cost, 0.0);
        }
    }
}
