//! Named, seeded parameter storage.
//!
//! Candle's CPU RNG cannot be seeded, so initial values are drawn from a
//! ChaCha stream here and wrapped as [`Var`]s.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use changen_core::rng::{rng, StageRng};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<StageRng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(rng(seed)),
            dtype,
            device: device.clone(),
        }
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.borrow().values().cloned().collect()
    }

    pub fn named(&self) -> BTreeMap<String, Var> {
        self.vars.borrow().clone()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    fn insert(&self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let previous = self.vars.borrow_mut().insert(name.clone(), var);
        assert!(previous.is_none(), "parameter {name} registered twice");
        Ok(out)
    }

    /// Overwrites every parameter with a fresh standard-normal draw scaled by `std`.
    pub fn randomize(&self, seed: u64, std: f64) -> Result<()> {
        let mut r = rng(seed);
        for var in self.vars.borrow().values() {
            let values: Vec<f64> = (0..var.elem_count())
                .map(|_| StandardNormal.sample(&mut r))
                .map(|v: f64| v * std)
                .collect();
            let t = Tensor::from_vec(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: &str) -> Params<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.store.insert(self.full(name), vec![value; n], shape)
    }

    pub fn zeros(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = {
            let mut r = self.store.rng.borrow_mut();
            (0..n).map(|_| r.random_range(-bound..=bound)).collect()
        };
        self.store.insert(self.full(name), values, shape)
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = {
            let mut r = self.store.rng.borrow_mut();
            (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut *r);
                    v * std
                })
                .collect()
        };
        self.store.insert(self.full(name), values, shape)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
