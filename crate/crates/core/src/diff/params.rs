use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat parameter vector partitioned into named blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    names: Vec<String>,
    values: Vec<f64>,
    offsets: Vec<usize>,
}

impl ParamVector {
    pub fn new(blocks: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(blocks.len());
        let mut values = Vec::new();
        let mut offsets = vec![0];
        for (name, block) in blocks {
            if block.is_empty() {
                return Err(Error::Shape(format!("parameter block '{name}' is empty")));
            }
            if names.contains(&name) {
                return Err(Error::Shape(format!("duplicate parameter block '{name}'")));
            }
            names.push(name);
            values.extend(block);
            offsets.push(values.len());
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter entry {i}")));
        }
        Ok(ParamVector {
            names,
            values,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter entry {i}")));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(self.offsets[i]..self.offsets[i + 1])
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.range(name).map(|r| &self.values[r])
    }

    /// Iterates `(name, values)` in storage order.
    pub fn blocks(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names.iter().enumerate().map(move |(i, n)| {
            (
                n.as_str(),
                &self.values[self.offsets[i]..self.offsets[i + 1]],
            )
        })
    }

    /// Block name owning flat index `idx`.
    pub fn owner(&self, idx: usize) -> Option<&str> {
        if idx >= self.values.len() {
            return None;
        }
        let i = self.offsets.partition_point(|&o| o <= idx) - 1;
        Some(&self.names[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_are_addressable_by_name() {
        let p = ParamVector::new(vec![
            ("a".into(), vec![1.0]),
            ("b".into(), vec![2.0, 3.0]),
        ])
        .unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.block("b"), Some(&[2.0, 3.0][..]));
        assert_eq!(p.range("a"), Some(0..1));
        assert_eq!(p.owner(2), Some("b"));
        assert_eq!(p.owner(0), Some("a"));
        assert_eq!(p.owner(3), None);
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(ParamVector::new(vec![("a".into(), vec![])]).is_err());
        assert!(ParamVector::new(vec![("a".into(), vec![f64::NAN])]).is_err());
        let mut p = ParamVector::new(vec![("a".into(), vec![1.0])]).unwrap();
        assert!(p.set_values(&[1.0, 2.0]).is_err());
        assert!(p.set_values(&[f64::INFINITY]).is_err());
        p.set_values(&[4.0]).unwrap();
        assert_eq!(p.values(), &[4.0]);
    }
}
