use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, resolved by [`Init::with_fan_in`].
    Default,
    Uniform(f64),
    Zeros,
    Ones,
    Constant(f64),
}

impl Init {
    pub fn with_fan_in(self, fan_in: usize) -> Init {
        match self {
            Init::Default => Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt()),
            other => other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named slices of the flat parameter vector plus how to initialize them.
#[derive(Clone, Debug, Default)]
pub struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
}

impl LayoutBuilder {
    pub fn alloc(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let offset = self.total;
        let entry = ParamEntry {
            name: name.to_string(),
            offset,
            shape: shape.to_vec(),
        };
        self.total += entry.len();
        self.entries.push(entry);
        self.inits.push(init);
        offset
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Draws initial values in allocation order.
    pub fn build(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.total);
        for (entry, init) in self.entries.iter().zip(&self.inits) {
            for _ in 0..entry.len() {
                values.push(match *init {
                    Init::Uniform(b) => rng.random_range(-b..=b),
                    Init::Default => rng.random_range(-1.0..=1.0),
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    Init::Constant(c) => c,
                });
            }
        }
        values
    }
}
