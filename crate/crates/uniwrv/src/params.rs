//! Named parameter store. Layers hold [`ParamId`]s; each forward pass pulls
//! live handles, and the optimizer swaps in updated tensors after the step.
//! Insertion order is stable and defines the checkpoint payload order.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    tensor: RefCell<Tensor>,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor: RefCell::new(Tensor::param(shape, data)),
        });
        id
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![1.0; n])
    }

    /// Uniform init in `[-bound, bound]`, rounded to f32 so checkpoints are
    /// bit-exact round trips.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (rng.gen_range(-bound..bound) as f32) as f64)
            .collect();
        self.add(name, shape, data)
    }

    /// Torch-style fan-in init for a conv kernel `[k,k,cin,cout]`.
    pub fn add_conv_kernel(
        &mut self,
        name: impl Into<String>,
        k: usize,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / ((k * k * cin) as f64).sqrt();
        self.add_uniform(name, &[k, k, cin, cout], bound, rng)
    }

    /// Live handle; clones of it share the same gradient slot.
    pub fn get(&self, id: ParamId) -> Tensor {
        self.entries[id.0].tensor.borrow().clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Install an externally built handle (gradcheck wires trial tensors
    /// straight into the store). Shape must match.
    pub fn replace_tensor(&self, id: ParamId, tensor: Tensor) {
        let shape = self.entries[id.0].tensor.borrow().shape().to_vec();
        assert_eq!(shape, tensor.shape(), "param {} shape mismatch", self.entries[id.0].name);
        *self.entries[id.0].tensor.borrow_mut() = tensor;
    }

    /// Replace the value buffer (shape must match). Drops any stored grad.
    pub fn set_data(&self, id: ParamId, data: Vec<f64>) {
        let shape = self.entries[id.0].tensor.borrow().shape().to_vec();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {} shape mismatch on update",
            self.entries[id.0].name
        );
        *self.entries[id.0].tensor.borrow_mut() = Tensor::param(&shape, data);
    }

    pub fn total_values(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.tensor.borrow().numel())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn handles_share_gradient_slot() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[2], vec![1.0, 2.0]);
        let a = store.get(id);
        let b = store.get(id);
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn set_data_swaps_the_tensor() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[2], vec![1.0, 2.0]);
        let before = store.get(id);
        store.set_data(id, vec![3.0, 4.0]);
        let after = store.get(id);
        assert_ne!(before.id(), after.id());
        assert_eq!(after.data(), &[3.0, 4.0]);
    }

    #[test]
    fn uniform_init_is_f32_representable() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = store.add_uniform("w", &[16], 0.5, &mut rng);
        for &v in store.get(id).data() {
            assert_eq!(v, v as f32 as f64);
        }
    }
}
