//! Named parameter tensors, weight lifting and pretrained import.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamKind {
    /// Convolution kernel drawn from `U(-bound, bound)`.
    Kernel { bound: f64 },
    BnScale,
    BnShift,
    BnMean,
    BnVar,
    /// Output bias: `first` for class 0, zero elsewhere.
    Bias { first: f64 },
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// All tensors of one network instance, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> NetworkParams<T> {
    pub(crate) fn initialize(specs: Vec<ParamSpec>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| match s.kind {
                ParamKind::Kernel { bound } => {
                    let n = s.shape.iter().product();
                    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
                    Tensor::from_vec(&s.shape, data).expect("spec shape")
                }
                ParamKind::BnScale | ParamKind::BnVar => Tensor::full(&s.shape, T::one()),
                ParamKind::BnShift | ParamKind::BnMean => Tensor::zeros(&s.shape),
                ParamKind::Bias { first } => {
                    let mut t = Tensor::zeros(&s.shape);
                    t.data_mut()[0] = T::from_f64(first);
                    t
                }
            })
            .collect();
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        NetworkParams { specs, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    /// Total scalar count over every tensor, running statistics included.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalars in trainable tensors only.
    pub fn trainable_count(&self) -> usize {
        self.specs.iter().zip(&self.tensors).filter(|(s, _)| s.kind.trainable()).map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor against its declared shape.
    pub fn audit(&self) -> Result<()> {
        for (s, t) in self.specs.iter().zip(&self.tensors) {
            if t.shape() != s.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Installs batch-norm running statistics produced by a train-mode pass.
    pub fn apply_running_stats(&mut self, updates: &[(usize, Vec<T>)]) {
        for (id, values) in updates {
            self.tensors[*id].data_mut().copy_from_slice(values);
        }
    }

    /// Full parameter set as a float32 store (3D kernel shapes).
    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new();
        for (s, t) in self.specs.iter().zip(&self.tensors) {
            let data = t.data().iter().map(|v| (*v).as_f64() as f32).collect();
            store.insert(s.name.clone(), &s.shape, data).expect("unique parameter names");
        }
        store
    }

    /// Replaces every tensor from `store`; names and shapes must match exactly.
    pub fn load_store(&mut self, store: &WeightStore) -> Result<()> {
        for (s, t) in self.specs.iter().zip(self.tensors.iter_mut()) {
            let stored = store.get(&s.name)?;
            if stored.shape != s.shape {
                return Err(Error::TensorShape {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    actual: stored.shape.clone(),
                });
            }
            *t = Tensor::from_vec(&s.shape, stored.data.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        }
        Ok(())
    }

    /// Encoder tensors in 2D form: 5D kernels lose their unit depth axis.
    pub fn export_encoder_2d(&self) -> Result<WeightStore> {
        let mut store = WeightStore::new();
        for (s, t) in self.specs.iter().zip(&self.tensors) {
            if !s.name.starts_with("enc.") {
                continue;
            }
            let data: Vec<f32> = t.data().iter().map(|v| (*v).as_f64() as f32).collect();
            let shape = if s.shape.len() == 5 { squeeze_shape(&s.name, &s.shape)? } else { s.shape.clone() };
            store.insert(s.name.clone(), &shape, data)?;
        }
        Ok(store)
    }

    /// Replaces encoder tensors by their lifted 2D counterparts from `store`.
    ///
    /// Decoder and classifier tensors are never touched. With `strict`, a
    /// missing encoder tensor is an error; otherwise it keeps its current
    /// value. Returns the names that were loaded.
    pub fn load_pretrained(&mut self, store: &WeightStore, strict: bool) -> Result<Vec<String>> {
        let mut staged = Vec::new();
        for (i, s) in self.specs.iter().enumerate() {
            if !s.name.starts_with("enc.") {
                continue;
            }
            let Ok(stored) = store.get(&s.name) else {
                if strict {
                    return Err(Error::MissingTensor(s.name.clone()));
                }
                continue;
            };
            let lifted_shape = if stored.shape.len() == 4 { lift_shape(&stored.shape) } else { stored.shape.clone() };
            if lifted_shape != s.shape {
                return Err(Error::TensorShape {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    actual: lifted_shape,
                });
            }
            let data = stored.data.iter().map(|&v| T::from_f64(v as f64)).collect();
            staged.push((i, Tensor::from_vec(&s.shape, data)?));
        }
        let mut loaded = Vec::with_capacity(staged.len());
        for (i, t) in staged {
            self.tensors[i] = t;
            loaded.push(self.specs[i].name.clone());
        }
        Ok(loaded)
    }
}

fn lift_shape(shape: &[usize]) -> Vec<usize> {
    vec![shape[0], shape[1], 1, shape[2], shape[3]]
}

fn squeeze_shape(name: &str, shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() != 5 || shape[2] != 1 {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: vec![shape[0], shape[1], 1, shape[3], shape[4]],
            actual: shape.to_vec(),
        });
    }
    Ok(vec![shape[0], shape[1], shape[3], shape[4]])
}

/// `(C_out, C_in, k, k)` → `(C_out, C_in, 1, k, k)` with identical values.
pub fn lift_kernel_2d_to_3d<T: Real>(k2d: &Tensor<T>) -> Result<Tensor<T>> {
    if k2d.shape().len() != 4 {
        return Err(Error::Shape(format!("expected a 4D kernel, got {:?}", k2d.shape())));
    }
    k2d.clone().reshape(&lift_shape(k2d.shape()))
}

/// Inverse of [`lift_kernel_2d_to_3d`].
pub fn squeeze_kernel_3d_to_2d<T: Real>(k3d: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = squeeze_shape("kernel", k3d.shape())?;
    k3d.clone().reshape(&shape)
}
