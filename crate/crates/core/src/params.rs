//! Named parameter storage and its on-disk form.
//!
//! A weights directory holds one `VOL1` file per parameter and a
//! `manifest.cfg` mapping each parameter name to its file.

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vol;
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST: &str = "manifest.cfg";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Conv kernel `out × in × k…` (LeCun-uniform) plus zero bias.
    pub fn init_conv<R: Rng>(&mut self, name: &str, out: usize, inp: usize, k: [usize; 3], rng: &mut R) {
        let fan_in = (inp * k.iter().product::<usize>()) as f64;
        let bound = (3.0 / fan_in).sqrt();
        self.insert(format!("{name}.w"), Tensor::uniform(&[out, inp, k[0], k[1], k[2]], bound, rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    }

    /// Transposed-conv kernel `in × out × k…`; `fan_in` follows the adjoint layout.
    pub fn init_deconv<R: Rng>(&mut self, name: &str, inp: usize, out: usize, k: [usize; 3], stride: usize, rng: &mut R) {
        let taps = k.iter().product::<usize>() / stride.pow(3).max(1);
        let fan_in = (inp * taps.max(1)) as f64;
        let bound = (3.0 / fan_in).sqrt();
        self.insert(format!("{name}.w"), Tensor::uniform(&[inp, out, k[0], k[1], k[2]], bound, rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    }

    /// Dense `out × in` matrix plus zero bias.
    pub fn init_linear<R: Rng>(&mut self, name: &str, out: usize, inp: usize, rng: &mut R) {
        let bound = (3.0 / inp as f64).sqrt();
        self.insert(format!("{name}.w"), Tensor::uniform(&[out, inp], bound, rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[out]));
    }

    pub fn zero_all(&mut self) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Record every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Record every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = KvConfig::default();
        for (name, t) in &self.map {
            let file = format!("{name}.vol");
            vol::write(dir.join(&file), t)?;
            manifest.set(name, &file);
        }
        std::fs::write(dir.join(MANIFEST), manifest.to_text())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = KvConfig::load(dir.join(MANIFEST))?;
        let mut store = Self::new();
        for (name, file) in manifest.iter() {
            store.insert(name, vol::read(dir.join(file))?);
        }
        Ok(store)
    }

    /// Every parameter of `other` must exist here with the same shape.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (k, v) in &self.map {
            match other.map.get(k) {
                Some(o) if o.shape() == v.shape() => {}
                Some(o) => {
                    return Err(Error::Shape(format!(
                        "parameter {k}: {:?} vs {:?}",
                        v.shape(),
                        o.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {k}"))),
            }
        }
        if other.map.len() != self.map.len() {
            return Err(Error::Format("weight set has unexpected extra parameters".into()));
        }
        Ok(())
    }
}

/// Parameters recorded on a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
