use std::collections::HashMap;

use pirt_tensor::{Mode, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// State of one forward pass: the tape, the parameters it reads, and the
/// dropout stream.
///
/// Parameters enter the tape lazily as gradient-tracked leaves the first time a
/// layer asks for them. Batch-norm layers in train mode write their running
/// statistics straight back into the store.
pub struct Forward<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    mode: Mode,
    rng: ChaCha8Rng,
    vars: HashMap<ParamId, Var>,
    track_grads: bool,
}

/// Gradients by parameter, `None` where the loss did not reach the parameter.
pub type Gradients<T> = Vec<Option<Tensor<T>>>;

impl<'s, T: Real> Forward<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: HashMap::new(),
            track_grads: true,
        }
    }

    /// A pass whose parameters enter as constants (no backward possible).
    pub fn inference(store: &'s mut ParamStore<T>) -> Self {
        let mut f = Forward::new(store, Mode::Eval, 0);
        f.track_grads = false;
        f
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let entry = self.store.entry(id);
        let v = self.tape.leaf(entry.value.clone(), self.track_grads && entry.trainable);
        self.vars.insert(id, v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Inverted dropout driven by this pass's stream; identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        Ok(self.tape.dropout(x, p, self.mode, &mut self.rng)?)
    }

    /// Runs backward from `loss` and collects per-parameter gradients.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        self.tape.backward(loss)?;
        let mut grads = vec![None; self.store.len()];
        for (id, var) in &self.vars {
            grads[id.index()] = self.tape.grad(*var);
        }
        Ok(grads)
    }
}
