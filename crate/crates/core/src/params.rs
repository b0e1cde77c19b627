//! Named parameter storage shared by every layer of a model.

use rand::Rng;

use crate::autodiff::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Array,
    /// Learnable weights receive gradients; buffers (running statistics) do not.
    pub trainable: bool,
    /// Bias added right before a batch-norm layer. In train mode the batch mean
    /// cancels it, so its gradient is identically zero.
    pub before_norm: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, param: Param) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != param.name),
            "duplicate parameter name {}",
            param.name
        );
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn add_trainable(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        self.push(Param {
            name: name.into(),
            value,
            trainable: true,
            before_norm: false,
        })
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        self.push(Param {
            name: name.into(),
            value,
            trainable: false,
            before_norm: false,
        })
    }

    /// Weight drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let value = Array::new(shape.to_vec(), data).expect("shape and data agree");
        self.add_trainable(name, value)
    }

    pub fn mark_before_norm(&mut self, id: ParamId) {
        self.params[id.0].before_norm = true;
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar values, buffers included.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces every value with the one stored under the same name in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {}", p.name)))?;
            let src = &other.get(id).value;
            if src.shape() != p.value.shape() {
                return Err(Error::dim(
                    "load_from",
                    format!(
                        "{}: stored {:?}, model {:?}",
                        p.name,
                        src.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Sets every trainable value to zero (buffers are left alone).
    pub fn zero_trainable(&mut self, filter: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut().filter(|p| p.trainable && filter(&p.name)) {
            p.value.data_mut().fill(0.0);
        }
    }
}
