use flowsr_tensor::{Adam, Graph, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named learnable tensors, kept in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids().filter(|&id| prefixes.iter().any(|p| self.name(id).starts_with(p))).collect()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// One optimizer step on `ids` (ascending, as returned by the store).
    pub fn adam_step(&mut self, opt: &mut Adam<F>, ids: &[ParamId], grads: &[Tensor<F>]) -> crate::Result<()> {
        debug_assert!(ids.windows(2).all(|w| w[0].0 < w[1].0));
        let mut want = ids.iter().peekable();
        let mut params = Vec::with_capacity(ids.len());
        for (k, v) in self.values.iter_mut().enumerate() {
            if want.peek().map(|id| id.0) == Some(k) {
                want.next();
                params.push(v);
            }
        }
        let grads: Vec<&Tensor<F>> = grads.iter().collect();
        Ok(opt.step(&mut params, &grads)?)
    }

    /// Places every parameter on `g`; only those in `trainable` get gradients.
    pub fn bind(&self, g: &mut Graph<F>, trainable: &[ParamId]) -> Bound {
        let mut mask = vec![false; self.values.len()];
        trainable.iter().for_each(|id| mask[id.0] = true);
        Bound(self.values.iter().zip(mask).map(|(t, rg)| g.leaf(t.clone(), rg)).collect())
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in store order, e.g. leaves created by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

pub(crate) fn uniform<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Glorot-uniform initialisation for a weight with the given fans.
pub(crate) fn glorot<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}
