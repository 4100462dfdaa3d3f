use super::{NnError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// AdamW first and second moments.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named trainable tensors with gradient buffers and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let n = value.len();
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Clears moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        for p in &mut self.params {
            p.m.fill(0.0);
            p.v.fill(0.0);
        }
        self.step = 0;
    }

    /// A zeroed gradient buffer shaped like this store.
    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self
                .params
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
        }
    }

    /// `grad = scale * buffer` for every parameter.
    pub fn set_grads(&mut self, buf: &GradBuffer, scale: f64) -> Result<(), NnError> {
        if buf.grads.len() != self.params.len() {
            return Err(NnError::Shape(
                "gradient buffer does not match the store".into(),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(&buf.grads) {
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst = scale * src;
            }
        }
        Ok(())
    }

    /// Copies values (not optimizer state) from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if other.params.len() != self.params.len() {
            return Err(NnError::Shape("parameter layouts differ".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(NnError::Shape(format!(
                    "parameter '{}' does not match '{}'",
                    a.name, b.name
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// Gradients for every parameter of a store, laid out in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    /// Disjoint mutable views of several gradients. Panics on duplicate ids.
    pub fn many_mut<const K: usize>(&mut self, ids: [ParamId; K]) -> [&mut [f64]; K] {
        let mut slots: Vec<Option<&mut Vec<f64>>> = self.grads.iter_mut().map(Some).collect();
        ids.map(|id| {
            slots[id.0]
                .take()
                .unwrap_or_else(|| panic!("parameter {} requested twice", id.0))
                .as_mut_slice()
        })
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(Vec::as_slice)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

/// Sums buffers in slice order (deterministic regardless of how they were
/// produced).
pub fn reduce_grads(bufs: Vec<GradBuffer>) -> Option<GradBuffer> {
    let mut it = bufs.into_iter();
    let mut acc = it.next()?;
    for b in it {
        acc.add_assign(&b);
    }
    Some(acc)
}
