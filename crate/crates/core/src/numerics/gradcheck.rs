//! Whole-graph evaluation helpers and the finite-difference oracle.

use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named inputs bound into a graph as constants. Looking up an undeclared
/// name is an error rather than a panic.
pub struct Bindings<'a> {
    pub params: &'a ParamStore,
    inputs: &'a BTreeMap<String, Tensor>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Bindings<'a> {
    pub fn new(params: &'a ParamStore, inputs: &'a BTreeMap<String, Tensor>) -> Self {
        Self {
            params,
            inputs,
            bound: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .inputs
            .get(name)
            .ok_or_else(|| Error::invalid(format!("undeclared input `{name}`")))?;
        let v = g.constant(t.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(self.params, name)
    }
}

/// Builds the graph with `build`, which must return a scalar node, and
/// returns the loss and its gradient for every parameter.
pub fn forward_backward<F>(
    params: &ParamStore,
    inputs: &BTreeMap<String, Tensor>,
    build: F,
) -> Result<(f64, ParamStore)>
where
    F: FnOnce(&mut Graph, &mut Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut b = Bindings::new(params, inputs);
    let loss = build(&mut g, &mut b)?;
    let grads = g.backward(loss)?;
    Ok((g.item(loss), g.param_grads(&grads, params)))
}

/// Central-difference estimate of the gradient of `f` at `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamStore, h: f64) -> Result<ParamStore>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    finite_diff_coords(&mut f, params, h, |_, _| true)
}

/// Like [`finite_diff_grad`] but only probes coordinates where
/// `select(name, index)` holds; the rest are left at zero.
pub fn finite_diff_coords<F>(
    f: &mut F,
    params: &ParamStore,
    h: f64,
    select: impl Fn(&str, usize) -> bool,
) -> Result<ParamStore>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut out = ParamStore::new();
    for (name, t) in params.iter() {
        let mut g = Tensor::zeros(t.shape());
        for i in 0..t.len() {
            if !select(name, i) {
                continue;
            }
            let x = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x + h;
            let up = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x - h;
            let down = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite objective while probing `{name}`[{i}]"
                )));
            }
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// `|a − n| / max(1, |a|)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest [`rel_error`] over coordinates where `select` holds.
pub fn max_rel_error(
    analytic: &ParamStore,
    numeric: &ParamStore,
    select: impl Fn(&str, usize) -> bool,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (name, a) in analytic.iter() {
        let Some(n) = numeric.get(name) else { continue };
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            if !select(name, i) {
                continue;
            }
            let e = rel_error(x, y);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]"));
            }
        }
    }
    worst
}
