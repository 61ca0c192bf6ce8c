//! Named parameter storage shared by the model, optimizer, and checkpoints.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, ParamId};

/// Ordered, name-addressed parameter matrices. Ids are stable indices into the
/// insertion order, so optimizer state can be kept positionally.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> &Mat {
        let id = self.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.get(id)
    }

    pub fn by_name_mut(&mut self, name: &str) -> &mut Mat {
        let id = self.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.get_mut(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(id, (name, value))| (id, name.as_str(), value))
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }
}

/// Uniform init over `[-scale*sqrt(3), scale*sqrt(3)]`, i.e. variance scale^2.
pub fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let bound = scale * 3.0f64.sqrt();
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
}
