use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)` (He uniform).
    HeUniform { fan_in: usize },
    /// `U(-b, b)` with `b = 1 / sqrt(fan_in)`.
    LecunUniform { fan_in: usize },
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Vec<T>,
}

/// Flat, name-addressed parameter storage shared by every layer of a model.
///
/// Initial values depend only on `(seed, name)`, so two models that share
/// parameter names also share the initial values of those parameters no
/// matter which other parameters they own.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    seed: u64,
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, usize>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind, init: Init) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let len: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let mut uniform = |b: f64| -> Vec<T> {
            (0..len)
                .map(|_| T::from_f64_lossy(rng.gen_range(-b..b)))
                .collect()
        };
        let value = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            Init::HeUniform { fan_in } => uniform((6.0 / fan_in.max(1) as f64).sqrt()),
            Init::LecunUniform { fan_in } => uniform(1.0 / (fan_in.max(1) as f64).sqrt()),
        };
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            kind,
            value,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copy every value from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "parameter count {} != {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.value.clone_from(&src.value);
        }
        Ok(())
    }

    /// Overwrite the named entry, checking its element count.
    pub fn set_by_name(&mut self, name: &str, value: Vec<T>) -> Result<()> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let entry = &mut self.entries[idx];
        if entry.value.len() != value.len() {
            return Err(Error::Shape(format!(
                "parameter {name} expects {} values, got {}",
                entry.value.len(),
                value.len()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            values: self
                .entries
                .iter()
                .map(|e| match e.kind {
                    ParamKind::Learnable => vec![T::zero(); e.value.len()],
                    ParamKind::Buffer => Vec::new(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`]; buffers get empty slots.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        let dst = &mut self.values[id.0];
        debug_assert_eq!(dst.len(), g.len());
        for (a, &b) in dst.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
}
