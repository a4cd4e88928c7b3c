use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Init, ParameterStore, Tape, Tensor, Value};

enum StoreRef<'a> {
    Training(&'a mut ParameterStore),
    Frozen(&'a ParameterStore),
}

/// One forward/backward pass bound to a [`ParameterStore`].
///
/// In training mode parameters are created on first use and enter the tape
/// as tracked leaves; in frozen mode they must already exist and enter as
/// constants, so inference never touches gradient machinery.
pub struct Graph<'a> {
    pub tape: Tape,
    store: StoreRef<'a>,
    bindings: Vec<(String, Value)>,
    by_name: HashMap<String, Value>,
}

impl<'a> Graph<'a> {
    pub fn training(store: &'a mut ParameterStore) -> Self {
        Graph {
            tape: Tape::new(),
            store: StoreRef::Training(store),
            bindings: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn frozen(store: &'a ParameterStore) -> Self {
        Graph {
            tape: Tape::new(),
            store: StoreRef::Frozen(store),
            bindings: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self.store, StoreRef::Training(_))
    }

    /// The tape leaf for a named parameter, creating the parameter on
    /// first use in training mode.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Value> {
        if let Some(v) = self.by_name.get(name) {
            return Ok(*v);
        }
        let (tensor, tracked) = match &mut self.store {
            StoreRef::Training(store) => (store.get_or_init(name, shape, init)?.clone(), true),
            StoreRef::Frozen(store) => {
                let t = store.get(name).ok_or_else(|| {
                    Error::Incompatible(format!("checkpoint lacks parameter {name}"))
                })?;
                if t.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        op: "param",
                        lhs: t.shape().to_vec(),
                        rhs: shape.to_vec(),
                    });
                }
                (t.clone(), false)
            }
        };
        let v = if tracked {
            self.tape.leaf(tensor)
        } else {
            self.tape.constant(tensor)
        };
        self.bindings.push((name.to_string(), v));
        self.by_name.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Value {
        self.tape.constant(t)
    }

    pub fn backward(&mut self, loss: Value) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every parameter bound on this graph, by name.
    /// Parameters untouched by backward map to zero tensors.
    pub fn collect_grads(&self) -> Vec<(String, Tensor)> {
        self.bindings
            .iter()
            .map(|(name, v)| {
                let g = self
                    .tape
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(*v)));
                (name.clone(), g)
            })
            .collect()
    }

    /// Push this graph's gradients into the store, consuming the graph.
    pub fn apply_grads(self) -> Result<()> {
        let grads = self.collect_grads();
        match self.store {
            StoreRef::Training(store) => {
                for (name, g) in grads {
                    store.accumulate_grad(&name, &g)?;
                }
                Ok(())
            }
            StoreRef::Frozen(_) => Err(Error::Contract(
                "apply_grads on a frozen graph".into(),
            )),
        }
    }
}
