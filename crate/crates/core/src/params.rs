//! Named parameter storage, initialisation and graph binding.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Result, TgqnError};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order, addressable by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TgqnError::contract(format!(
                "duplicate parameter name {name}"
            )));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors.iter_mut().collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Registers parameters under a dotted scope and draws their initial values.
///
/// Weights are LeCun-uniform, `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`,
/// drawn in `f64` and rounded to `T`.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> ParamBuilder<'b, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (3.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let full = self.full_name(name);
        self.store.insert(full, Tensor::from_f64(shape, &data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store
            .insert(full, Tensor::full(shape, T::from_f64_lossy(value)))
    }
}

/// Seeded generator used for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A graph plus lazily bound parameters.
pub struct Session<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Real> Session<'a, T> {
    /// Parameters become gradient-tracking leaves.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Parameters become constants; no gradients are tracked.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Session {
            trainable: false,
            ..Session::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph node for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Gradients of `root` for every parameter, in store order. Unused
    /// parameters get `None`.
    pub fn param_grads(&self, root: Var) -> Vec<Option<Tensor<T>>> {
        let mut grads = self.graph.backward(root);
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.uniform("w", &[c_out, c_in, kernel, kernel], c_in * kernel * kernel)?;
        let b = s.constant("b", &[c_out], 0.0)?;
        Ok(Conv2dLayer { w, b, stride, pad })
    }

    /// Same shape as [`Conv2dLayer::new`] with every weight set to zero.
    pub fn zeroed<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.constant("w", &[c_out, c_in, kernel, kernel], 0.0)?;
        let b = s.constant("b", &[c_out], 0.0)?;
        Ok(Conv2dLayer { w, b, stride, pad })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed convolution with kernel equal to stride (exact upsampling).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvT2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvT2dLayer {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.uniform("w", &[c_in, c_out, stride, stride], c_in)?;
        let b = s.constant("b", &[c_out], 0.0)?;
        Ok(ConvT2dLayer { w, b, stride })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.graph.conv_transpose2d(x, w, Some(b), self.stride, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.uniform("w", &[d_out, d_in], d_in)?;
        let b = s.constant("b", &[d_out], 0.0)?;
        Ok(LinearLayer { w, b })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.graph.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormLayer {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let gain = s.constant("gain", &[d], 1.0)?;
        let bias = s.constant("bias", &[d], 0.0)?;
        Ok(LayerNormLayer { gain, bias })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.graph.layer_norm(x, g, b, T::from_f64_lossy(Self::EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_scoped_and_unique() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = init_rng(1);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let mut enc = pb.scope("enc");
        let l = LinearLayer::new(&mut enc, "fc", 3, 2).unwrap();
        assert!(LinearLayer::new(&mut enc, "fc", 3, 2).is_err());
        assert_eq!(store.name(l.w), "enc.fc.w");
        assert_eq!(store.id("enc.fc.b"), Some(l.b));
        assert_eq!(store.get(l.w).shape(), &[2, 3]);
    }

    #[test]
    fn uniform_respects_bound_and_seed() {
        let draw = |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = init_rng(seed);
            ParamBuilder::new(&mut store, &mut rng)
                .uniform("w", &[100], 12)
                .unwrap();
            store
        };
        let a = draw(3);
        assert!(a.bit_eq(&draw(3)));
        assert!(!a.bit_eq(&draw(4)));
        let bound = 0.5;
        assert!(a.get(ParamId(0)).data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .insert("x", Tensor::from_f64(&[2], &[1.0, 2.0]))
            .unwrap();
        store.insert("unused", Tensor::zeros(&[1])).unwrap();
        let mut s = Session::new(&store);
        let a = s.p(id);
        assert_eq!(a, s.p(id));
        let sq = s.graph.mul(a, a);
        let root = s.graph.sum_all(sq);
        let grads = s.param_grads(root);
        assert_eq!(grads[0].as_ref().unwrap().data(), &[2.0, 4.0]);
        assert!(grads[1].is_none());
    }
}
