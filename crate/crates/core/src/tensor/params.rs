use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Update schedule a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Stepped every batch from the policy-gradient loss.
    Rl,
    /// Stepped once per epoch from the hypergraph loss.
    Hg,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Rl => "rl",
            Group::Hg => "hg",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        match s {
            "rl" => Some(Group::Rl),
            "hg" => Some(Group::Hg),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    group: Group,
    value: Tensor,
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, group, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn group(&self, name: &str) -> Option<Group> {
        self.index.get(name).map(|&i| self.entries[i].group)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(name, group, value)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Group, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.group, &e.value))
    }

    pub fn names_in(&self, group: Group) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Xavier/Glorot uniform initialization.
///
/// 2-D shapes are `(fan_in, fan_out)`; a 1-D shape is treated as a single
/// row `(1, len)`.
pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    let (fan_in, fan_out) = match shape {
        [n] => (1, *n),
        [a, b] => (*a, *b),
        _ => {
            return Err(Error::shape(
                "xavier_init",
                format!("expected a 1-D or 2-D shape, got {shape:?}"),
            ))
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(shape.to_vec(), data)
}
