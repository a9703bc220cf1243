//! Named parameter storage and the basic layers built on it.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Conv2dSpec, Element, RunningStats, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    /// Trainable parameter.
    Param,
    /// Persistent state that is not trained (running statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Normal truncated to ±2σ.
    TruncNormal { std: f64 },
}

struct Entry<T: Element> {
    name: String,
    tensor: Tensor<T>,
    kind: VarKind,
}

struct Inner<T: Element> {
    vars: RefCell<Vec<Entry<T>>>,
    rng: RefCell<ChaCha8Rng>,
}

/// Registry of every named tensor in a model, in creation order.
#[derive(Clone)]
pub struct VarStore<T: Element = f32>(Rc<Inner<T>>);

/// A prefix into a [`VarStore`], used while building layers.
#[derive(Clone)]
pub struct VarPath<T: Element = f32> {
    store: VarStore<T>,
    prefix: String,
}

impl<T: Element> VarStore<T> {
    pub fn new(seed: u64) -> Self {
        VarStore(Rc::new(Inner {
            vars: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }))
    }

    pub fn root(&self) -> VarPath<T> {
        VarPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn path(&self, name: &str) -> VarPath<T> {
        self.root().pp(name)
    }

    fn register(&self, name: String, tensor: Tensor<T>, kind: VarKind) {
        let mut vars = self.0.vars.borrow_mut();
        assert!(
            vars.iter().all(|e| e.name != name),
            "duplicate variable name {name}"
        );
        vars.push(Entry { name, tensor, kind });
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>, VarKind)> {
        self.0
            .vars
            .borrow()
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone(), e.kind))
            .collect()
    }

    pub fn trainable(&self) -> Vec<Tensor<T>> {
        self.0
            .vars
            .borrow()
            .iter()
            .filter(|e| e.kind == VarKind::Param)
            .map(|e| e.tensor.clone())
            .collect()
    }

    pub fn trainable_named(&self) -> Vec<(String, Tensor<T>)> {
        self.0
            .vars
            .borrow()
            .iter()
            .filter(|e| e.kind == VarKind::Param)
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.0
            .vars
            .borrow()
            .iter()
            .filter(|e| e.kind == VarKind::Param && e.name.starts_with(prefix))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&self) {
        self.0.vars.borrow().iter().for_each(|e| e.tensor.zero_grad());
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for e in self.0.vars.borrow().iter() {
            let data = e.tensor.data().iter().map(|v| v.wide() as f32).collect();
            ck.push(e.name.clone(), e.tensor.shape(), data);
        }
        ck
    }

    /// Copies every tensor from `ck`. The checkpoint must hold exactly the
    /// store's names and shapes; the first mismatch is reported.
    pub fn load_checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        let vars = self.0.vars.borrow();
        for e in vars.iter() {
            match ck.get(&e.name) {
                Some(entry) if entry.shape == e.tensor.shape() => {}
                Some(entry) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {:?} in checkpoint, model expects {:?}",
                        e.name,
                        entry.shape,
                        e.tensor.shape()
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} missing from checkpoint",
                        e.name
                    )))
                }
            }
        }
        if let Some(extra) = ck
            .entries
            .iter()
            .find(|c| vars.iter().all(|e| e.name != c.name))
        {
            return Err(Error::Checkpoint(format!(
                "tensor {} in checkpoint is unknown to the model",
                extra.name
            )));
        }
        for e in vars.iter() {
            let entry = ck.get(&e.name).expect("checked above");
            e.tensor
                .set_data(entry.data.iter().map(|&v| T::cast(v as f64)).collect())?;
        }
        Ok(())
    }

    fn sample(&self, n: usize, init: Init) -> Vec<T> {
        let mut rng = self.0.rng.borrow_mut();
        match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::cast(dist.sample(&mut *rng))).collect()
            }
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(&mut *rng);
                        if v.abs() <= 2.0 * std {
                            break T::cast(v);
                        }
                    })
                    .collect()
            }
        }
    }

    /// Draws a seed from the store's generator, for components that need
    /// their own stream.
    pub fn fork_seed(&self) -> u64 {
        self.0.rng.borrow_mut().random()
    }
}

impl<T: Element> VarPath<T> {
    pub fn pp(&self, name: &str) -> VarPath<T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        VarPath {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
        let data = self.store.sample(shape.iter().product(), init);
        let t = Tensor::param(data, shape).expect("layer shapes are positive");
        self.store.register(self.full_name(name), t.clone(), VarKind::Param);
        t
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
        let data = self.store.sample(shape.iter().product(), init);
        let t = Tensor::new(data, shape).expect("layer shapes are positive");
        self.store.register(self.full_name(name), t.clone(), VarKind::Buffer);
        t
    }
}

/// Fully connected layer over the last axis.
pub struct Linear<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new(vp: &VarPath<T>, cin: usize, cout: usize, bias: bool) -> Self {
        Linear {
            weight: vp.param("weight", &[cout, cin], Init::TruncNormal { std: 0.02 }),
            bias: bias.then(|| vp.param("bias", &[cout], Init::Zeros)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, self.bias.as_ref())
    }
}

pub struct Conv2d<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Element> Conv2d<T> {
    /// Weights drawn from `N(0, 2 / fan_out)` with `fan_out = k²·C_out /
    /// groups`.
    pub fn new(
        vp: &VarPath<T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let fan_out = (kernel * kernel * cout / spec.groups.max(1)).max(1);
        let std = (2.0 / fan_out as f64).sqrt();
        Conv2d {
            weight: vp.param(
                "weight",
                &[cout, cin / spec.groups.max(1), kernel, kernel],
                Init::Normal { std },
            ),
            bias: bias.then(|| vp.param("bias", &[cout], Init::Zeros)),
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.spec)
    }
}

/// Learned ×`factor` up-convolution (kernel = stride = factor).
pub struct ConvTranspose2d<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub factor: usize,
}

impl<T: Element> ConvTranspose2d<T> {
    pub fn new(vp: &VarPath<T>, cin: usize, cout: usize, factor: usize) -> Self {
        let std = (2.0 / (factor * factor * cout) as f64).sqrt();
        ConvTranspose2d {
            weight: vp.param("weight", &[cin, cout, factor, factor], Init::Normal { std }),
            bias: Some(vp.param("bias", &[cout], Init::Zeros)),
            factor,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv_transpose2d(&self.weight, self.bias.as_ref(), self.factor)
    }
}

pub struct BatchNorm2d<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(vp: &VarPath<T>, channels: usize) -> Self {
        BatchNorm2d {
            gamma: vp.param("weight", &[channels], Init::Ones),
            beta: vp.param("bias", &[channels], Init::Zeros),
            running_mean: vp.buffer("running_mean", &[channels], Init::Zeros),
            running_var: vp.buffer("running_var", &[channels], Init::Ones),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        x.batchnorm2d(
            &self.gamma,
            &self.beta,
            RunningStats {
                mean: &self.running_mean,
                var: &self.running_var,
            },
            training,
        )
    }
}

pub struct LayerNorm<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(vp: &VarPath<T>, channels: usize) -> Self {
        LayerNorm {
            gamma: vp.param("weight", &[channels], Init::Ones),
            beta: vp.param("bias", &[channels], Init::Zeros),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layernorm(&self.gamma, &self.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_of_single_layers() {
        let vs = VarStore::<f32>::new(0);
        Conv2d::new(&vs.path("conv"), 1, 1, 3, Conv2dSpec::default(), true);
        assert_eq!(vs.count_params("conv"), 10);
        Linear::new(&vs.path("fc"), 4, 8, true);
        assert_eq!(vs.count_params("fc"), 40);
        BatchNorm2d::new(&vs.path("bn"), 5);
        // running statistics are buffers, not parameters
        assert_eq!(vs.count_params("bn"), 10);
        assert_eq!(vs.count_params(""), 60);
    }

    #[test]
    fn checkpoint_load_reports_first_mismatch() {
        let vs = VarStore::<f32>::new(0);
        Linear::new(&vs.path("a"), 2, 2, true);
        Linear::new(&vs.path("b"), 2, 3, true);
        let mut ck = vs.to_checkpoint();
        let fresh = VarStore::<f32>::new(1);
        Linear::new(&fresh.path("a"), 2, 2, true);
        Linear::new(&fresh.path("b"), 2, 3, true);
        fresh.load_checkpoint(&ck).unwrap();
        assert_eq!(fresh.to_checkpoint(), ck);

        ck.entries[2].shape = vec![3, 3];
        ck.entries[2].data = vec![0.0; 9];
        let err = fresh.load_checkpoint(&ck).unwrap_err().to_string();
        assert!(err.contains("b.weight"), "{err}");
    }

    #[test]
    fn truncated_normal_stays_in_bounds() {
        let vs = VarStore::<f64>::new(3);
        let t = vs.root().param("w", &[1000], Init::TruncNormal { std: 0.02 });
        assert!(t.to_vec().iter().all(|v| v.abs() <= 0.04));
    }
}
