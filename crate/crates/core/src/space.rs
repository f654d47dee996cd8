//! State and action representations.
//!
//! Tabular problems index states and actions with `usize`; continuous problems
//! use flat `Vec<f64>` vectors. Both flatten to CSV the same way.

use std::fmt::Debug;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub trait Space: Clone + Debug + PartialEq + Send + Sync + Serialize + DeserializeOwned + 'static {
    /// Number of scalar columns this value occupies when flattened.
    fn flat_dim(&self) -> usize;

    fn is_finite(&self) -> bool;

    fn write_fields(&self, out: &mut Vec<String>);

    fn parse_fields(fields: &[&str]) -> Result<Self>;

    /// Dense feature vector used as network input.
    fn features(&self) -> Vec<f64>;
}

impl Space for usize {
    fn flat_dim(&self) -> usize {
        1
    }

    fn is_finite(&self) -> bool {
        true
    }

    fn write_fields(&self, out: &mut Vec<String>) {
        out.push(self.to_string());
    }

    fn parse_fields(fields: &[&str]) -> Result<Self> {
        match fields {
            [f] => f
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("bad index {f:?}: {e}"))),
            _ => Err(Error::Parse(format!("expected 1 field, got {}", fields.len()))),
        }
    }

    fn features(&self) -> Vec<f64> {
        vec![*self as f64]
    }
}

impl Space for Vec<f64> {
    fn flat_dim(&self) -> usize {
        self.len()
    }

    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    fn write_fields(&self, out: &mut Vec<String>) {
        out.extend(self.iter().map(|v| fmt_f64(*v)));
    }

    fn parse_fields(fields: &[&str]) -> Result<Self> {
        fields
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad number {f:?}: {e}")))
            })
            .collect()
    }

    fn features(&self) -> Vec<f64> {
        self.clone()
    }
}
