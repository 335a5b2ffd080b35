use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::config::Config;
use crate::contrast::KeyQueue;
use crate::model::Model;
use crate::numerics::{Sgd, Tensor};
use crate::{Error, Result};

/// Everything needed to continue a pretraining run. Random streams are
/// keyed by `(seed, epoch, …)`, so the epoch counter is the generator state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Sgd,
    pub queue: KeyQueue,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
}

/// Raw values of one named record.
#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Values {
    pub fn len(&self) -> usize {
        match self {
            Values::F64(v) => v.len(),
            Values::U64(v) => v.len(),
            Values::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Values,
}

impl Record {
    pub fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Record {
            name: name.into(),
            dims: t.shape().to_vec(),
            values: Values::F64(t.data().to_vec()),
        }
    }

    pub fn u64s(name: impl Into<String>, v: Vec<u64>) -> Self {
        Record {
            name: name.into(),
            dims: vec![v.len()],
            values: Values::U64(v),
        }
    }

    pub fn bytes(name: impl Into<String>, v: Vec<u8>) -> Self {
        Record {
            name: name.into(),
            dims: vec![v.len()],
            values: Values::U8(v),
        }
    }
}

const SEED: &str = "state.seed";
const EPOCH: &str = "state.epoch";
const QUEUE_KEYS: &str = "queue.keys";
const QUEUE_POSITION: &str = "queue.position";
const VELOCITY: &str = "optim.velocity.";

impl TrainState {
    /// Fresh state for `cfg`: initialized model, empty queue, no velocity.
    pub fn new(cfg: &Config) -> Result<Self> {
        let model = Model::new(&cfg.model, cfg.train.seed)?;
        Ok(TrainState {
            model,
            optimizer: Sgd::new(cfg.numerics.sgd_momentum, cfg.numerics.weight_decay)?,
            queue: KeyQueue::new(cfg.contrast.queue_size, cfg.model.embed_dim)?,
            seed: cfg.train.seed,
            epoch: 0,
        })
    }

    /// Named records in a fixed order. Velocities are written as zeros
    /// before the first optimizer step.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = vec![
            Record::u64s(SEED, vec![self.seed]),
            Record::u64s(EPOCH, vec![self.epoch as u64]),
        ];
        for (name, t) in self.model.named_tensors() {
            out.push(Record::tensor(name, t));
        }
        let names = self.model.query_param_names();
        let velocities = self.optimizer.velocities();
        let shapes: Vec<Vec<usize>> = self
            .model
            .encoder
            .params()
            .chain(self.model.heads.params())
            .map(|p| p.value.shape().to_vec())
            .collect();
        for (i, name) in names.iter().enumerate() {
            let rec = match velocities.get(i) {
                Some(v) => Record::tensor(format!("{VELOCITY}{name}"), v),
                None => Record::tensor(format!("{VELOCITY}{name}"), &Tensor::zeros(shapes[i].clone())),
            };
            out.push(rec);
        }
        let q = &self.queue;
        out.push(Record {
            name: QUEUE_KEYS.to_string(),
            dims: vec![q.capacity(), q.dim()],
            values: Values::F64(q.storage().to_vec()),
        });
        out.push(Record::u64s(QUEUE_POSITION, vec![q.cursor() as u64, q.len() as u64]));
        out
    }

    /// Rebuilds a state whose architecture follows `cfg`. Every expected
    /// record must be present with the right shape; unknown names are
    /// rejected.
    pub fn from_records(records: Vec<Record>, cfg: &Config) -> Result<Self> {
        let mut by_name: BTreeMap<String, Record> = BTreeMap::new();
        for r in records {
            if r.dims.iter().product::<usize>() != r.values.len() {
                return Err(Error::Checkpoint(format!("record {} has inconsistent dims", r.name)));
            }
            if let Some(old) = by_name.insert(r.name.clone(), r) {
                return Err(Error::Checkpoint(format!("duplicate record {}", old.name)));
            }
        }
        let mut take = |name: &str| {
            by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
        };
        let scalar = |r: Record| match r.values {
            Values::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Checkpoint(format!("{} is not a u64 scalar", r.name))),
        };
        let f64s = |r: Record, shape: &[usize]| match r.values {
            Values::F64(v) if r.dims == shape => Tensor::new(shape.to_vec(), v),
            _ => Err(Error::Checkpoint(format!(
                "{} has dims {:?}, expected f64 {:?}",
                r.name, r.dims, shape
            ))),
        };

        let seed = scalar(take(SEED)?)?;
        let epoch = scalar(take(EPOCH)?)? as usize;
        let mut model = Model::new(&cfg.model, seed)?;
        for (name, t) in model.named_tensors_mut() {
            let shape = t.shape().to_vec();
            *t = f64s(take(&name)?, &shape)?;
        }
        let mut velocities = Vec::new();
        let shapes: Vec<Vec<usize>> = model
            .encoder
            .params()
            .chain(model.heads.params())
            .map(|p| p.value.shape().to_vec())
            .collect();
        for (name, shape) in model.query_param_names().iter().zip(&shapes) {
            velocities.push(f64s(take(&format!("{VELOCITY}{name}"))?, shape)?);
        }
        let optimizer = Sgd::new(cfg.numerics.sgd_momentum, cfg.numerics.weight_decay)?.with_velocities(velocities);

        let keys = take(QUEUE_KEYS)?;
        let [capacity, dim] = keys.dims[..] else {
            return Err(Error::Checkpoint(format!("{QUEUE_KEYS} must be two-dimensional")));
        };
        if (capacity, dim) != (cfg.contrast.queue_size, cfg.model.embed_dim) {
            return Err(Error::Checkpoint(format!(
                "queue is {capacity}x{dim}, configuration expects {}x{}",
                cfg.contrast.queue_size, cfg.model.embed_dim
            )));
        }
        let storage = f64s(keys, &[capacity, dim])?.into_data();
        let position = take(QUEUE_POSITION)?;
        let (cursor, fill) = match &position.values {
            Values::U64(v) if v.len() == 2 => (v[0] as usize, v[1] as usize),
            _ => return Err(Error::Checkpoint(format!("{QUEUE_POSITION} must hold two u64"))),
        };
        let queue = KeyQueue::from_parts(capacity, dim, storage, cursor, fill)
            .map_err(|e| Error::Checkpoint(format!("queue: {e}")))?;

        if let Some(name) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unknown record {name}")));
        }
        Ok(TrainState {
            model,
            optimizer,
            queue,
            seed,
            epoch,
        })
    }
}
