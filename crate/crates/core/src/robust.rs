//! Decision outputs read off κ: most reasonable parameter and posterior,
//! reasonable sets, and the data-driven robust expectation.

use crate::error::{Error, Result};
use crate::hmm::{logistic, SimplexState};
use crate::value::{GridValue, QuadraticValue, TransformedDynamics};

/// A value-function snapshot in either representation.
#[derive(Debug, Clone, Copy)]
pub enum ValueRef<'a> {
    Quadratic(&'a QuadraticValue),
    Grid(&'a GridValue),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustEstimate {
    pub t: f64,
    /// Most reasonable chart coordinate.
    pub a_star: Vec<f64>,
    /// The chart parameter (`λ` or `α`) at `a_star`.
    pub parameter: f64,
    pub x_star: SimplexState,
    /// Minimum of κ as held by the snapshot.
    pub kappa_min: f64,
}

/// Minimizer of κ mapped back through the log-odds and chart coordinates.
/// Grid ties go to the lowest `(q, γ)` index.
pub fn most_reasonable(v: ValueRef<'_>, dynamics: &TransformedDynamics, t: f64) -> Result<RobustEstimate> {
    let (q, g, kappa_min) = match v {
        ValueRef::Quadratic(v) => (v.z_hat[0], v.z_hat[1], v.c),
        ValueRef::Grid(gv) => {
            let (iq, ig) = gv.argmin().ok_or(Error::NoPlausiblePosterior)?;
            let (q, g) = gv.node(iq, ig);
            (q, g, gv.min_value())
        }
    };
    Ok(RobustEstimate {
        t,
        a_star: vec![g],
        parameter: dynamics.parameter(g),
        x_star: SimplexState::from_log_odds(q),
        kappa_min,
    })
}

/// γ-indices of a grid whose column holds some node with κ below the level.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasonableSet {
    pub indices: Vec<usize>,
    pub coordinates: Vec<f64>,
}

impl ReasonableSet {
    /// Smallest and largest member coordinate.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        Some((*self.coordinates.first()?, *self.coordinates.last()?))
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `{a : κ(q, a) < level for some q}`, with κ measured from its minimum.
pub fn reasonable_set(v: &GridValue, level: f64) -> Result<ReasonableSet> {
    if !(level > 0.0) {
        return Err(Error::domain(format!("reasonable-set level must be positive, got {level}")));
    }
    let base = v.min_value();
    if !base.is_finite() {
        return Err(Error::NoPlausiblePosterior);
    }
    let (nq, ng) = (v.q_axis().n, v.g_axis().n);
    let mut indices = Vec::new();
    for ig in 0..ng {
        if (0..nq).any(|iq| v.value(iq, ig) - base < level) {
            indices.push(ig);
        }
    }
    let coordinates = indices.iter().map(|&ig| v.g_axis().point(ig)).collect();
    Ok(ReasonableSet { indices, coordinates })
}

/// `sup_x { Σ_j x_j φ(e_j) − (κ(x) / k₁)^{k₂} }` over the grid nodes, with κ
/// shifted so that its minimum is zero.
pub fn dr_expectation(v: &GridValue, phi: &[f64], k1: f64, k2: f64) -> Result<f64> {
    if !(k1 > 0.0) || !(k2 >= 1.0) {
        return Err(Error::domain(format!("need k1 > 0 and k2 >= 1, got {k1}, {k2}")));
    }
    if phi.len() != 2 {
        return Err(Error::domain("grid values describe a two-state posterior"));
    }
    let base = v.min_value();
    if !base.is_finite() {
        return Err(Error::NoPlausiblePosterior);
    }
    let (nq, ng) = (v.q_axis().n, v.g_axis().n);
    let mut best = f64::NEG_INFINITY;
    for iq in 0..nq {
        for ig in 0..ng {
            // x·φ written as φ₀ + x₂(φ₁ − φ₀) so that constant φ is reproduced exactly.
            let mean = phi[0] + logistic(v.node(iq, ig).0) * (phi[1] - phi[0]);
            let k = v.value(iq, ig);
            if k.is_finite() {
                best = best.max(mean - ((k - base) / k1).powf(k2));
            }
        }
    }
    Ok(best)
}
