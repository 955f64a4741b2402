//! Named parameter tensors with gradients and Adam moments.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor4;
use crate::real::Real;
use crate::rng::RngStream;

pub type ParamId = usize;

/// What an entry is for; decides its initialization and whether it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution kernel with the given fan-in (`in_per_group * kh * kw`).
    Weight { fan_in: usize },
    Bias,
    NormScale,
    NormShift,
    /// Batch-norm running statistics: stored and checkpointed, never trained.
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub adam_m: Tensor4<T>,
    pub adam_v: Tensor4<T>,
    /// Set once a backward pass has written into `grad` since the last `zero_grad`.
    pub has_grad: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, ParamId>,
    pub step_count: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new(), step_count: 0 }
    }

    /// Adds a zero-valued entry; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: [usize; 4], kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("parameter {name}: zero-sized shape {shape:?}")));
        }
        let id = self.entries.len();
        let value = match kind {
            ParamKind::NormScale | ParamKind::RunningVar => Tensor4::filled(shape, T::one()),
            _ => Tensor4::zeros(shape),
        };
        self.entries.push(ParamEntry {
            name: name.clone(),
            kind,
            grad: Tensor4::zeros(shape),
            adam_m: Tensor4::zeros(shape),
            adam_v: Tensor4::zeros(shape),
            value,
            has_grad: false,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id]
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.id(name).map(|id| &self.entries[id])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.id(name).map(|id| &mut self.entries[id])
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.entries[id].value
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
            e.has_grad = false;
        }
    }

    /// Fan-in-scaled uniform weights `U(-b, b)`, `b = sqrt(6 / fan_in)`; biases and
    /// shifts 0, scales 1, running statistics reset. Entry `i` draws from `rng.split(i)`.
    pub fn init_random(&mut self, rng: &RngStream) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            match e.kind {
                ParamKind::Weight { fan_in } => {
                    let bound = libm::sqrt(6.0 / fan_in.max(1) as f64);
                    let mut s = rng.split(i as u64);
                    for v in e.value.data_mut() {
                        *v = T::lit(s.uniform(-bound, bound));
                    }
                }
                ParamKind::Bias | ParamKind::NormShift | ParamKind::RunningMean => e.value.fill(T::zero()),
                ParamKind::NormScale | ParamKind::RunningVar => e.value.fill(T::one()),
            }
            e.grad.fill(T::zero());
            e.has_grad = false;
            e.adam_m.fill(T::zero());
            e.adam_v.fill(T::zero());
        }
        self.step_count = 0;
    }

    /// Same entries in another precision; gradients and moments reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::<U>::new();
        for e in &self.entries {
            let id = out.add(e.name.clone(), e.value.shape(), e.kind).expect("names already unique");
            out.entries[id].value = e.value.cast();
        }
        out
    }

    /// Copies values (not moments) from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Checkpoint(format!(
                "layout differs: {} vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!("entry {} does not match {}", a.name, b.name)));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    /// Snapshot of `(name, value)` pairs, the unit of checkpointing.
    pub fn snapshot(&self) -> Vec<(String, Tensor4<T>)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmstartReport {
    pub loaded: Vec<String>,
    /// Store entries the checkpoint did not provide (kept as initialized).
    pub skipped: Vec<String>,
    /// Checkpoint entries with no compatible store entry.
    pub unused: Vec<String>,
}

/// Copies checkpoint tensors whose name and shape match a store entry.
///
/// In strict mode every store entry must be provided with the right shape and
/// every checkpoint entry must be consumed.
pub fn load_named<T: Real>(
    store: &mut ParamStore<T>,
    tensors: &[(String, Tensor4<T>)],
    strict: bool,
) -> Result<WarmstartReport> {
    let mut report = WarmstartReport::default();
    let mut provided: BTreeMap<&str, &Tensor4<T>> = BTreeMap::new();
    for (name, t) in tensors {
        if provided.insert(name.as_str(), t).is_some() {
            return Err(Error::Checkpoint(format!("checkpoint repeats parameter {name}")));
        }
    }
    for (name, t) in tensors {
        match store.get(name) {
            Some(e) if e.value.shape() == t.shape() => {}
            Some(e) => {
                if strict {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                        t.shape(),
                        e.value.shape()
                    )));
                }
                report.unused.push(name.clone());
            }
            None => {
                if strict {
                    return Err(Error::Checkpoint(format!("parameter {name} not present in model")));
                }
                report.unused.push(name.clone());
            }
        }
    }
    for e in store.iter_mut() {
        match provided.get(e.name.as_str()) {
            Some(t) if t.shape() == e.value.shape() => {
                e.value = (*t).clone();
                report.loaded.push(e.name.clone());
            }
            _ => {
                if strict {
                    return Err(Error::Checkpoint(format!("parameter {} missing from checkpoint", e.name)));
                }
                report.skipped.push(e.name.clone());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("conv.weight", [8, 1, 3, 3], ParamKind::Weight { fan_in: 9 }).unwrap();
        s.add("conv.bias", [1, 8, 1, 1], ParamKind::Bias).unwrap();
        s
    }

    #[test]
    fn counts() {
        assert_eq!(ParamStore::<f64>::new().count_params(), 0);
        assert_eq!(conv_store().count_params(), 80);
        let mut s = conv_store();
        s.add("bn.running_mean", [1, 8, 1, 1], ParamKind::RunningMean).unwrap();
        assert_eq!(s.count_params(), 80);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = conv_store();
        assert!(s.add("conv.bias", [1, 1, 1, 1], ParamKind::Bias).is_err());
    }

    #[test]
    fn init_bounds_and_determinism() {
        let mut a = ParamStore::<f64>::new();
        a.add("w", [4, 16, 3, 3], ParamKind::Weight { fan_in: 144 }).unwrap();
        a.add("b", [1, 4, 1, 1], ParamKind::Bias).unwrap();
        a.add("g", [1, 4, 1, 1], ParamKind::NormScale).unwrap();
        let mut b = a.clone();
        a.init_random(&RngStream::new(3));
        b.init_random(&RngStream::new(3));
        assert_eq!(a, b);
        let bound = (6.0f64 / 144.0).sqrt();
        assert!((bound - 0.2041).abs() < 1e-4);
        assert!(a.get("w").unwrap().value.data().iter().all(|v| v.abs() <= bound));
        assert!(a.get("b").unwrap().value.data().iter().all(|&v| v == 0.0));
        assert!(a.get("g").unwrap().value.data().iter().all(|&v| v == 1.0));
        b.init_random(&RngStream::new(4));
        assert_ne!(a, b);
    }

    #[test]
    fn named_loading() {
        let mut src = conv_store();
        src.init_random(&RngStream::new(1));
        src.get_mut("conv.bias").unwrap().value.fill(0.5);
        let mut dst = conv_store();
        dst.add("decoder.weight", [2, 8, 1, 1], ParamKind::Weight { fan_in: 8 }).unwrap();

        let report = load_named(&mut dst, &src.snapshot(), false).unwrap();
        assert_eq!(report.loaded, ["conv.weight", "conv.bias"]);
        assert_eq!(report.skipped, ["decoder.weight"]);
        assert_eq!(dst.get("conv.weight").unwrap().value, src.get("conv.weight").unwrap().value);
        assert!(load_named(&mut dst, &src.snapshot(), true).is_err());

        let mut wrong = src.snapshot();
        wrong[1].1 = Tensor4::zeros([1, 4, 1, 1]);
        let err = load_named(&mut conv_store(), &wrong, true).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("conv.bias")));
        let report = load_named(&mut conv_store(), &wrong, false).unwrap();
        assert_eq!(report.unused, ["conv.bias"]);
        assert_eq!(report.skipped, ["conv.bias"]);
    }

    #[test]
    fn cast_keeps_layout() {
        let mut s = conv_store();
        s.init_random(&RngStream::new(2));
        let wide: ParamStore<f64> = s.cast::<f32>().cast();
        assert_eq!(wide.len(), s.len());
        assert_eq!(wide.entry(0).name, "conv.weight");
    }
}
