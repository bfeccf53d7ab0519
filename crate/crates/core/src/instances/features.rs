use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Instance, Point};

/// Which node features feed the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// `(x, y)`, flipped `(1-x, 1-y)` and depot-relative polar `(ρ, α)`.
    #[default]
    Augmented,
    /// Plain coordinates only.
    Raw,
}

impl FeatureMode {
    pub fn depot_width(self) -> usize {
        match self {
            FeatureMode::Augmented => 6,
            FeatureMode::Raw => 2,
        }
    }

    /// Customer rows carry one extra column, the normalized demand.
    pub fn customer_width(self) -> usize {
        self.depot_width() + 1
    }
}

/// Per-node feature rows: the depot row first, then one row per customer
/// with `q / Q` appended.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedFeatures {
    pub depot: Vec<f64>,
    pub customers: Vec<Vec<f64>>,
}

impl AugmentedFeatures {
    pub fn rows(&self) -> usize {
        self.customers.len() + 1
    }
}

/// Distance and direction of `point` seen from `depot`. The angle lies in
/// `(-π, π]`; the depot itself maps to `(0, 0)`.
pub fn polar_transform(point: Point, depot: Point) -> (f64, f64) {
    let (dx, dy) = (point.x - depot.x, point.y - depot.y);
    if dx == 0.0 && dy == 0.0 {
        return (0.0, 0.0);
    }
    let mut alpha = dy.atan2(dx);
    if alpha <= -PI {
        alpha = PI;
    }
    (dx.hypot(dy), alpha)
}

fn coord_features(p: Point, depot: Point, mode: FeatureMode) -> Vec<f64> {
    match mode {
        FeatureMode::Raw => vec![p.x, p.y],
        FeatureMode::Augmented => {
            let (rho, alpha) = polar_transform(p, depot);
            vec![p.x, p.y, 1.0 - p.x, 1.0 - p.y, rho, alpha]
        }
    }
}

pub fn node_features(inst: &Instance, mode: FeatureMode) -> AugmentedFeatures {
    let q = inst.capacity as f64;
    AugmentedFeatures {
        depot: coord_features(inst.depot, inst.depot, mode),
        customers: inst
            .customers
            .iter()
            .zip(&inst.demands)
            .map(|(&p, &d)| {
                let mut row = coord_features(p, inst.depot, mode);
                row.push(d as f64 / q);
                row
            })
            .collect(),
    }
}

pub fn augment_features(inst: &Instance) -> AugmentedFeatures {
    node_features(inst, FeatureMode::Augmented)
}
