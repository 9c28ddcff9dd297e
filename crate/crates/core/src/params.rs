//! Flat unconstrained parameter vectors with named, transformed entries.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// Positive values stored as their logarithm.
    Log,
    /// A probability vector stored as logits.
    Softmax,
    /// Lower-triangular `m×m` factor stored row by row, with the diagonal on
    /// log scale.
    LowerFactor(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub transform: Transform,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

/// Index pairs `(i, j)`, `i ≥ j`, of an `m×m` lower triangle in storage order.
pub fn lower_positions(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (0..=i).map(move |j| (i, j))).collect()
}

/// Shell-style match supporting `*` only.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 {
            match rest.strip_prefix(part) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == parts.len() - 1 {
            return rest.ends_with(part);
        } else {
            match rest.find(part) {
                Some(k) => rest = &rest[k + part.len()..],
                None => return false,
            }
        }
    }
    true
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Appends an entry given its constrained value.
    pub fn push(&mut self, name: impl Into<String>, constrained: &[f64], transform: Transform) {
        let raw: Vec<f64> = match transform {
            Transform::Identity => constrained.to_vec(),
            Transform::Log => constrained.iter().map(|v| v.ln()).collect(),
            Transform::Softmax => constrained.iter().map(|v| v.ln()).collect(),
            Transform::LowerFactor(m) => {
                assert_eq!(constrained.len(), m * (m + 1) / 2);
                lower_positions(m)
                    .iter()
                    .zip(constrained)
                    .map(|(&(i, j), &v)| if i == j { v.ln() } else { v })
                    .collect()
            }
        };
        let name = name.into();
        debug_assert!(self.index(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, offset: self.values.len(), len: raw.len(), transform });
        self.values.extend(raw);
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.index(name)
            .map(|i| &self.entries[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn raw(&self, name: &str) -> Result<&[f64]> {
        let e = self.entry(name)?;
        Ok(&self.values[e.offset..e.offset + e.len])
    }

    /// Constrained value of an entry.
    pub fn get(&self, name: &str) -> Result<Vec<f64>> {
        let e = self.entry(name)?;
        Ok(constrain(e.transform, &self.values[e.offset..e.offset + e.len]))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name)?[0])
    }

    /// Entries whose names match any of the `*`-patterns, as a per-value mask.
    /// Every pattern must match at least one entry.
    pub fn mask(&self, patterns: &[String]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.values.len()];
        for p in patterns {
            let mut hit = false;
            for e in &self.entries {
                if glob_match(p, &e.name) {
                    hit = true;
                    mask[e.offset..e.offset + e.len].iter_mut().for_each(|m| *m = true);
                }
            }
            if !hit {
                return Err(Error::invalid(format!("mask pattern {p:?} matches no parameter")));
            }
        }
        Ok(mask)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries
            .iter()
            .flat_map(|e| {
                (0..e.len).map(move |k| if e.len == 1 { e.name.clone() } else { format!("{}[{k}]", e.name) })
            })
            .collect()
    }
}

pub fn constrain(t: Transform, raw: &[f64]) -> Vec<f64> {
    match t {
        Transform::Identity => raw.to_vec(),
        Transform::Log => raw.iter().map(|v| v.exp()).collect(),
        Transform::Softmax => {
            let mx = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = raw.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        Transform::LowerFactor(m) => lower_positions(m)
            .iter()
            .zip(raw)
            .map(|(&(i, j), &v)| if i == j { v.exp() } else { v })
            .collect(),
    }
}
