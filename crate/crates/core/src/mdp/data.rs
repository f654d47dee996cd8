use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::space::Space;
use crate::Rng;

/// One `(x, u, x')` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Transition<S: Space, A: Space> {
    pub x: S,
    pub u: A,
    pub x_next: S,
}

impl<S: Space, A: Space> Transition<S, A> {
    pub fn new(x: S, u: A, x_next: S) -> Self {
        Self { x, u, x_next }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.u.is_finite() && self.x_next.is_finite()
    }
}

/// A chained sequence of transitions from one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Trajectory<S: Space, A: Space> {
    pub transitions: Vec<Transition<S, A>>,
}

impl<S: Space, A: Space> Trajectory<S, A> {
    pub fn horizon(&self) -> usize {
        self.transitions.len()
    }

    /// True when every `x_next` equals the following `x`.
    pub fn is_chained(&self) -> bool {
        self.transitions.windows(2).all(|w| w[0].x_next == w[1].x)
    }
}

/// Which of the three datasets a buffer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BufferRole {
    /// Expert demonstrations in the real environment.
    Expert,
    /// Learner's own policy in the real environment.
    RealLearner,
    /// Learner's policy in its learned model.
    Simulated,
}

/// Replay buffer with optional FIFO capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TransitionBuffer<S: Space, A: Space> {
    role: BufferRole,
    entries: VecDeque<Transition<S, A>>,
    capacity: Option<usize>,
}

impl<S: Space, A: Space> TransitionBuffer<S, A> {
    pub fn new(role: BufferRole) -> Self {
        Self {
            role,
            entries: VecDeque::new(),
            capacity: None,
        }
    }

    pub fn with_capacity(role: BufferRole, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return arg("buffer capacity must be positive");
        }
        Ok(Self {
            role,
            entries: VecDeque::new(),
            capacity: Some(capacity),
        })
    }

    pub fn from_transitions(
        role: BufferRole,
        transitions: impl IntoIterator<Item = Transition<S, A>>,
    ) -> Result<Self> {
        let mut buf = Self::new(role);
        for t in transitions {
            buf.push(t)?;
        }
        Ok(buf)
    }

    pub fn role(&self) -> BufferRole {
        self.role
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition<S, A>> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition<S, A>> {
        self.entries.get(i)
    }

    pub fn push(&mut self, t: Transition<S, A>) -> Result<()> {
        if !t.is_finite() {
            return arg("refusing to store a non-finite transition");
        }
        if let Some(cap) = self.capacity {
            while self.entries.len() >= cap {
                self.entries.pop_front();
            }
        }
        self.entries.push_back(t);
        Ok(())
    }

    /// `n` uniform draws with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<Transition<S, A>>> {
        sample_union(&[self], n, rng)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// CSV with columns `x, u, x_next`; vector components are spread over
    /// `x_0, x_1, ...` columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.entries.front() else {
            out.push_str("x,u,x_next\n");
            return out;
        };
        let mut header = Vec::new();
        push_names(&mut header, "x", first.x.flat_dim());
        push_names(&mut header, "u", first.u.flat_dim());
        push_names(&mut header, "x_next", first.x_next.flat_dim());
        out.push_str(&header.join(","));
        out.push('\n');
        let mut fields = Vec::new();
        for t in &self.entries {
            fields.clear();
            t.x.write_fields(&mut fields);
            t.u.write_fields(&mut fields);
            t.x_next.write_fields(&mut fields);
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    pub fn from_csv(role: BufferRole, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        let count = |base: &str| {
            names
                .iter()
                .filter(|n| {
                    **n == base
                        || n.strip_prefix(base)
                            .and_then(|rest| rest.strip_prefix('_'))
                            .is_some_and(|d| d.parse::<usize>().is_ok())
                })
                .count()
        };
        let (dx, du, dn) = (count("x"), count("u"), count("x_next"));
        if dx == 0 || du == 0 || dn == 0 || dx + du + dn != names.len() {
            return Err(Error::Parse(format!("unrecognized header {header:?}")));
        }
        let mut buf = Self::new(role);
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != names.len() {
                return Err(Error::Parse(format!("row {} has {} fields", i + 1, fields.len())));
            }
            buf.push(Transition::new(
                S::parse_fields(&fields[..dx])?,
                A::parse_fields(&fields[dx..dx + du])?,
                S::parse_fields(&fields[dx + du..])?,
            ))?;
        }
        Ok(buf)
    }

    pub fn read_csv(role: BufferRole, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(role, &std::fs::read_to_string(path)?)
    }
}

fn push_names(header: &mut Vec<String>, base: &str, dim: usize) {
    if dim == 1 {
        header.push(base.to_string());
    } else {
        header.extend((0..dim).map(|i| format!("{base}_{i}")));
    }
}

/// Uniform draws with replacement from the concatenation of several buffers.
pub fn sample_union<S: Space, A: Space>(
    buffers: &[&TransitionBuffer<S, A>],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Transition<S, A>>> {
    let total: usize = buffers.iter().map(|b| b.len()).sum();
    if total == 0 {
        return Err(Error::State("cannot sample from an empty buffer".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut i = rng.gen_range(0..total);
        for b in buffers {
            if i < b.len() {
                out.push(b.entries[i].clone());
                break;
            }
            i -= b.len();
        }
    }
    Ok(out)
}
