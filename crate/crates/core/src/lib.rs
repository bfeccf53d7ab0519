//! Neural construction heuristic for the capacitated vehicle routing
//! problem: a constraint-aware hypergraph encoder, a dual-pointer decoder
//! and a REINFORCE trainer with a greedy rollout baseline, on a small
//! reverse-mode tensor engine.

pub mod baselines;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod instances;
pub mod io;
pub mod model;
pub mod routes;
pub mod tensor;
pub mod trainer;

pub use baselines::{clarke_wright, exact_oracle, nearest_neighbor, GapReport};
pub use decoder::DecodePolicy;
pub use encoder::{encode, BnMode, EncodedGraph};
pub use error::{Error, Result};
pub use instances::{generate_instance, Instance, Point};
pub use model::{Ablation, Constraint, Model, ModelConfig};
pub use routes::{solution_cost, validate_solution, Solution};
pub use trainer::{train, EpochStats, TrainConfig, Trainer};
