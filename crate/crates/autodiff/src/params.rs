use std::collections::HashMap;

use crate::{Float, ShapeError, Tensor};

/// Index of a parameter inside its [`ParamSet`]; stable for the set's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    /// Component the parameter belongs to, e.g. `text_encoder` or `cct`.
    pub component: String,
    pub tensor: Tensor<F>,
    pub frozen: bool,
}

/// Named parameter tensors grouped into components, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Float> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        component: impl Into<String>,
        tensor: Tensor<F>,
    ) -> Result<ParamId, ShapeError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(ShapeError::DuplicateParam(name));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            component: component.into(),
            tensor,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Component names in first-seen order.
    pub fn components(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.component) {
                out.push(e.component.clone());
            }
        }
        out
    }

    pub fn set_component_frozen(&mut self, component: &str, frozen: bool) {
        for e in self.entries.iter_mut().filter(|e| e.component == component) {
            e.frozen = frozen;
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Replace a tensor by name, checking that the shape is unchanged.
    pub fn assign(&mut self, name: &str, tensor: Tensor<F>) -> Result<(), ShapeError> {
        let id = self
            .id(name)
            .ok_or_else(|| ShapeError::UnknownParam(name.to_string()))?;
        let current = &mut self.entries[id.0].tensor;
        if current.shape() != tensor.shape() {
            return Err(ShapeError::ParamShape {
                name: name.to_string(),
                expected: current.shape().to_vec(),
                actual: tensor.shape().to_vec(),
            });
        }
        *current = tensor;
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    component: e.component.clone(),
                    tensor: e.tensor.cast(),
                    frozen: e.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// L2 norm of every parameter tensor, by name.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.l2_norm().to_f64_lossy()))
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}
