use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::space::fmt_f64;

/// Named block of a flat parameter vector with its logical shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameters plus the manifest that explains their layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub manifest: Vec<ParamBlock>,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(manifest: Vec<ParamBlock>, values: Vec<f64>) -> Result<Self> {
        let pv = Self { manifest, values };
        pv.validate()?;
        Ok(pv)
    }

    pub fn validate(&self) -> Result<()> {
        let expected: usize = self.manifest.iter().map(ParamBlock::len).sum();
        if expected != self.values.len() {
            return arg(format!(
                "manifest describes {expected} parameters but {} are present",
                self.values.len()
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: None,
                what: "parameter vector contains a non-finite entry".into(),
            });
        }
        Ok(())
    }

    /// Checkpoint text: a `# manifest` header line followed by one value per line.
    pub fn to_csv(&self) -> String {
        let blocks: Vec<String> = self
            .manifest
            .iter()
            .map(|b| {
                let dims: Vec<String> = b.shape.iter().map(usize::to_string).collect();
                format!("{}:{}", b.name, dims.join("x"))
            })
            .collect();
        let mut out = format!("# manifest {}\nvalue\n", blocks.join(" "));
        for v in &self.values {
            out.push_str(&fmt_f64(*v));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# manifest"))
            .ok_or_else(|| Error::Parse("missing manifest header".into()))?;
        let mut manifest = Vec::new();
        for block in header.split_whitespace() {
            let (name, dims) = block
                .rsplit_once(':')
                .ok_or_else(|| Error::Parse(format!("bad manifest entry {block:?}")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            manifest.push(ParamBlock::new(name, shape));
        }
        let values = lines
            .filter(|l| !l.trim().is_empty() && l.trim() != "value")
            .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
