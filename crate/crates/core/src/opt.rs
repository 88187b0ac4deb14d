//! Named parameter collections and the Adam ascent rule.
//!
//! Parameters live in a [`ParamStore`]: an ordered map from stable string
//! names to tensor [`Value`]s. The deterministic (B-tree) ordering matters —
//! parameter binding, gradient application, and checkpoint serialization all
//! iterate it, so identical stores behave identically across runs and across
//! save/load cycles.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, Value};
use crate::F;

/// Ordered collection of named tensor parameters.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamStore {
    map: BTreeMap<String, Value<F>>,
}

impl ParamStore {
    /// Empty store.
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Fails on duplicate names or non-finite entries.
    pub fn insert(&mut self, name: &str, value: Value<F>) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter '{name}'")));
        }
        if self.map.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        self.map.insert(name.to_string(), value);
        Ok(())
    }

    /// Looks up a parameter by name.
    pub fn get(&self, name: &str) -> Result<&Value<F>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    /// Replaces the value of an existing parameter (shape must match).
    pub fn set(&mut self, name: &str, value: Value<F>) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::DimensionMismatch(format!(
                "parameter '{name}' has shape {}, got {}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Parameter names in deterministic order.
    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    /// Iterates `(name, value)` pairs in deterministic order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value<F>)> {
        self.map.iter()
    }

    /// Number of parameters (tensors, not coordinates).
    pub fn len(&self) -> usize {
        self.map.len()
    }

    /// True when the store holds no parameters.
    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_coords(&self) -> usize {
        self.map.values().map(Value::len).sum()
    }

    /// Adds `delta` to one flat coordinate of one parameter.
    pub fn nudge(&mut self, name: &str, coord: usize, delta: F) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if coord >= slot.len() {
            return Err(Error::InvalidArgument(format!(
                "coordinate {coord} out of range for parameter '{name}'"
            )));
        }
        let x = slot.coord(coord);
        slot.set_coord(coord, x + delta);
        Ok(())
    }

    /// Euclidean norm over every coordinate of every parameter.
    pub fn global_norm(&self) -> F {
        let ss: F = self
            .map
            .values()
            .map(|v| {
                let mut s = 0.0;
                for i in 0..v.len() {
                    let x = v.coord(i);
                    s += x * x;
                }
                s
            })
            .sum();
        ss.sqrt()
    }
}

/// Gradients keyed by the same names as a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore {
    map: BTreeMap<String, Value<F>>,
}

impl GradStore {
    /// Zero gradients matching the shapes of `params`.
    pub fn zeros_like(params: &ParamStore) -> Self {
        let map = params
            .iter()
            .map(|(k, v)| (k.clone(), v.zeros_like()))
            .collect();
        GradStore { map }
    }

    /// Gradient for one parameter.
    pub fn get(&self, name: &str) -> Result<&Value<F>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradient '{name}'")))
    }

    /// Overwrites the gradient for one parameter (shape must match).
    pub fn set(&mut self, name: &str, value: Value<F>) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradient '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::DimensionMismatch(format!(
                "gradient '{name}' has shape {}, got {}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Iterates `(name, gradient)` pairs in deterministic order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value<F>)> {
        self.map.iter()
    }

    /// True when every gradient coordinate is finite.
    pub fn is_finite(&self) -> bool {
        self.map.values().all(Value::is_finite)
    }

    /// Euclidean norm over every coordinate.
    pub fn global_norm(&self) -> F {
        let ss: F = self
            .map
            .values()
            .map(|v| {
                let mut s = 0.0;
                for i in 0..v.len() {
                    let x = v.coord(i);
                    s += x * x;
                }
                s
            })
            .sum();
        ss.sqrt()
    }
}

/// Parameter leaves bound onto a tape, addressable by name.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Creates one parameter leaf per store entry, in deterministic order.
    pub fn bind(tape: &mut Tape<F>, params: &ParamStore) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for (name, value) in params.iter() {
            let id = tape.param(value.clone())?;
            ids.insert(name.clone(), id);
        }
        Ok(BoundParams { ids })
    }

    /// Node id of a bound parameter.
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unbound parameter '{name}'")))
    }

    /// Iterates `(name, node id)` pairs in deterministic order.
    pub fn ids(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Adam optimizer in gradient-ascent form, with serializable state.
///
/// The bias-corrected update `θ ← θ + lr·m̂ / (√v̂ + ε)` is applied per
/// coordinate; moments are keyed by parameter name so the state survives a
/// checkpoint round-trip exactly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    /// Step size.
    pub learning_rate: F,
    /// First-moment decay.
    pub beta1: F,
    /// Second-moment decay.
    pub beta2: F,
    /// Denominator guard.
    pub epsilon: F,
    steps: u64,
    first_moment: BTreeMap<String, Value<F>>,
    second_moment: BTreeMap<String, Value<F>>,
}

impl Adam {
    /// Adam with the conventional defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
    pub fn new(learning_rate: F) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one ascent step in place.
    ///
    /// Fails — leaving `params` untouched — when any gradient coordinate is
    /// non-finite, so a diverged objective can never corrupt the parameters.
    pub fn ascend(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for name in params.names() {
            let g = grads.get(&name)?.clone();
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| g.zeros_like());
            *m = m.zip(&g, |mi, gi| self.beta1 * mi + (1.0 - self.beta1) * gi)?;
            let m = m.clone();
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| g.zeros_like());
            *v = v.zip(&g, |vi, gi| self.beta2 * vi + (1.0 - self.beta2) * gi * gi)?;
            let v = v.clone();

            let mut theta = params.get(&name)?.clone();
            for i in 0..theta.len() {
                let m_hat = m.coord(i) / bc1;
                let v_hat = v.coord(i) / bc2;
                let step = self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                theta.set_coord(i, theta.coord(i) + step);
            }
            params.set(&name, theta)?;
        }
        Ok(())
    }
}
