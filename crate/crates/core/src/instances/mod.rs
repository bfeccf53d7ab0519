//! CVRP instances: the problem datum, seeded random generation, the
//! TSPLIB-style file format and node feature construction.

mod features;
mod tsplib;

pub use features::{augment_features, node_features, polar_transform, AugmentedFeatures, FeatureMode};
pub use tsplib::{parse_instance_file, parse_instance_file_with, write_instance_file, Normalize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest demand drawn by [`generate_instance`].
pub const MAX_GENERATED_DEMAND: u32 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Affine map applied to parsed coordinates: `stored = (raw - offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: Point,
    pub scale: f64,
}

/// A CVRP instance. Node 0 is the depot; node `i >= 1` is `customers[i - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub name: String,
    pub depot: Point,
    pub customers: Vec<Point>,
    pub demands: Vec<u32>,
    pub capacity: u32,
    pub normalization: Option<Normalization>,
}

impl Instance {
    pub fn new(
        name: impl Into<String>,
        depot: Point,
        customers: Vec<Point>,
        demands: Vec<u32>,
        capacity: u32,
    ) -> Result<Self> {
        let inst = Instance {
            name: name.into(),
            depot,
            customers,
            demands,
            capacity,
            normalization: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.customers.is_empty() {
            return Err(Error::InvalidArgument("instance has no customers".into()));
        }
        if self.customers.len() != self.demands.len() {
            return Err(Error::InvalidArgument(format!(
                "{} customers but {} demands",
                self.customers.len(),
                self.demands.len()
            )));
        }
        if self.capacity == 0 {
            return Err(Error::InvalidArgument("capacity must be positive".into()));
        }
        if let Some((i, q)) = self
            .demands
            .iter()
            .enumerate()
            .find(|(_, &q)| q == 0 || q > self.capacity)
        {
            return Err(Error::InvalidArgument(format!(
                "customer {} has demand {q} outside 1..={}",
                i + 1,
                self.capacity
            )));
        }
        Ok(())
    }

    /// Number of customers.
    pub fn n(&self) -> usize {
        self.customers.len()
    }

    /// Customers plus depot.
    pub fn num_nodes(&self) -> usize {
        self.customers.len() + 1
    }

    pub fn coord(&self, node: usize) -> Point {
        if node == 0 {
            self.depot
        } else {
            self.customers[node - 1]
        }
    }

    /// Demand of a node; the depot has none.
    pub fn demand(&self, node: usize) -> u32 {
        if node == 0 {
            0
        } else {
            self.demands[node - 1]
        }
    }

    pub fn dist(&self, a: usize, b: usize) -> f64 {
        self.coord(a).dist(self.coord(b))
    }

    pub fn total_demand(&self) -> u64 {
        self.demands.iter().map(|&q| q as u64).sum()
    }

    /// Same instance with customers reordered: new customer `k` is old
    /// customer `order[k]` (both 0-based over customers).
    pub fn permuted(&self, order: &[usize]) -> Result<Instance> {
        let mut seen = vec![false; self.n()];
        if order.len() != self.n() || order.iter().any(|&i| i >= self.n() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument("not a permutation of the customers".into()));
        }
        Ok(Instance {
            customers: order.iter().map(|&i| self.customers[i]).collect(),
            demands: order.iter().map(|&i| self.demands[i]).collect(),
            ..self.clone()
        })
    }
}

/// Random instance: depot and customers i.i.d. uniform on the unit square,
/// demands i.i.d. uniform on `1..=9`.
///
/// Draw order from a ChaCha8 stream seeded with `seed` (via
/// `seed_from_u64`): depot `x, y`, then each customer's `x, y`, then every
/// demand.
pub fn generate_instance(n: usize, capacity: u32, seed: u64) -> Result<Instance> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one customer".into()));
    }
    if capacity < MAX_GENERATED_DEMAND {
        return Err(Error::InvalidArgument(format!(
            "capacity {capacity} below the largest generated demand {MAX_GENERATED_DEMAND}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(generate_with(&mut rng, n, capacity, format!("rand-n{n}-q{capacity}-s{seed}")))
}

/// Draws an instance from an existing generator (used by the trainer's
/// per-step instance stream).
pub(crate) fn generate_with<R: Rng>(rng: &mut R, n: usize, capacity: u32, name: String) -> Instance {
    let point = |rng: &mut R| Point::new(rng.random::<f64>(), rng.random::<f64>());
    let depot = point(rng);
    let customers: Vec<Point> = (0..n).map(|_| point(rng)).collect();
    let demands = (0..n).map(|_| rng.random_range(1..=MAX_GENERATED_DEMAND)).collect();
    Instance {
        name,
        depot,
        customers,
        demands,
        capacity,
        normalization: None,
    }
}
