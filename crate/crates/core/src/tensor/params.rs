//! Named, ordered parameter storage.
//!
//! Parameters live outside any tape as plain [`Array`] values keyed by a
//! stable dotted name (`"mpt.v.block0.w_q"`). Iteration order is the sorted
//! name order, which makes optimizer updates and checkpoint layout
//! deterministic.

use super::Array;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    /// Register a parameter. Duplicate names are a programming error and are
    /// rejected so two modules can never silently share weights.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name: {name}"
            )));
        }
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Parameters in sorted-name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Array::numel).sum()
    }
}

impl FromIterator<(String, Array)> for ParamSet {
    fn from_iter<T: IntoIterator<Item = (String, Array)>>(iter: T) -> Self {
        ParamSet {
            map: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut p = ParamSet::new();
        p.insert("a.w", Array::zeros(&[2, 2])).unwrap();
        assert!(p.insert("a.w", Array::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn iterates_in_sorted_order() {
        let mut p = ParamSet::new();
        p.insert("z", Array::scalar(1.0)).unwrap();
        p.insert("a", Array::scalar(2.0)).unwrap();
        p.insert("m", Array::scalar(3.0)).unwrap();
        let names: Vec<&String> = p.names().collect();
        assert_eq!(names, ["a", "m", "z"]);
        assert_eq!(p.numel(), 3);
    }
}
