use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// A scalar loss plus the named sub-terms it was built from.
pub struct LossTerms {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
}

impl LossTerms {
    pub fn single(name: &'static str, v: Var) -> Self {
        Self {
            total: v,
            parts: vec![(name, v)],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradOutput<F: Scalar> {
    pub loss: F,
    pub parts: Vec<(&'static str, F)>,
    pub grads: ParamStore<F>,
}

/// Build the loss with `build`, then differentiate it with respect to every
/// parameter accepted by `trainable`.
///
/// A non-finite sub-term is reported by name before the total is checked.
pub fn compute_gradients<F, B>(store: &ParamStore<F>, trainable: impl Fn(&str) -> bool, build: B) -> Result<GradOutput<F>>
where
    F: Scalar,
    B: FnOnce(&mut Graph<F>, &Bound<F>) -> Result<LossTerms>,
{
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, store, trainable);
    let terms = build(&mut g, &bound)?;
    if g.shape(terms.total).iter().product::<usize>() != 1 {
        return Err(Error::shape(format!("loss must be scalar, got {:?}", g.shape(terms.total))));
    }
    let mut parts = Vec::with_capacity(terms.parts.len());
    for &(name, v) in &terms.parts {
        let value = g.scalar(v);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                step: None,
            });
        }
        parts.push((name, value));
    }
    let loss = g.scalar(terms.total);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            term: "total".into(),
            step: None,
        });
    }
    let mut grads = g.backward(terms.total);
    Ok(GradOutput {
        loss,
        parts,
        grads: bound.collect(&mut grads),
    })
}
