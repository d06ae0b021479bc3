//! Exact population-level check of the identification result: in a finite
//! world, a site's ITT minus the mean ITT of the sites sharing its observable
//! conditions `Φ*` (site covariate means and the full control-outcome
//! distribution) recovers its LRE whenever sites matched on `Φ*` are also
//! matched on their true ecological conditions.
//!
//! Generic over the number type so tests can run it in exact rationals.

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSite<T> {
    /// Observed site-level covariate means.
    pub phi_x: Vec<T>,
    /// Discrete control-outcome distribution as `(value, probability)`.
    pub y0_dist: Vec<(T, T)>,
    /// Label of the true ecological condition (the joint law of X and U).
    pub ecology: usize,
    /// Mean treated outcome implied by the ecological condition alone.
    pub mu1_base: T,
    /// The site's LRE.
    pub theta: T,
    /// Shift of the treated mean that is not part of the LRE, i.e. a
    /// violation of site comparability. Zero in a well-formed world.
    pub mu1_shift: T,
}

impl<T: Num + Clone> WorldSite<T> {
    pub fn mu0(&self) -> T {
        self.y0_dist
            .iter()
            .fold(T::zero(), |acc, (v, p)| acc + v.clone() * p.clone())
    }

    pub fn mu1(&self) -> T {
        self.mu1_base.clone() + self.theta.clone() + self.mu1_shift.clone()
    }

    pub fn itt(&self) -> T {
        self.mu1() - self.mu0()
    }
}

/// Per-site residual `[ITT_j − mean(ITT | Φ*_j)] − θ_j`.
pub fn oracle_identification_check<T>(world: &[WorldSite<T>]) -> Result<Vec<T>>
where
    T: Num + Clone + PartialEq + FromPrimitive + Debug,
{
    validate(world)?;
    world
        .iter()
        .map(|site| {
            let matched: Vec<&WorldSite<T>> = world.iter().filter(|o| same_observables(o, site)).collect();
            let n = T::from_usize(matched.len()).ok_or_else(|| Error::Specification("group too large".into()))?;
            let mean = matched.iter().fold(T::zero(), |acc, o| acc + o.itt()) / n;
            Ok(site.itt() - mean - site.theta.clone())
        })
        .collect()
}

fn same_observables<T: PartialEq>(a: &WorldSite<T>, b: &WorldSite<T>) -> bool {
    a.phi_x == b.phi_x && a.y0_dist == b.y0_dist
}

fn validate<T>(world: &[WorldSite<T>]) -> Result<()>
where
    T: Num + Clone + PartialEq + Debug,
{
    if world.is_empty() {
        return Err(Error::Specification("world has no sites".into()));
    }
    for (j, site) in world.iter().enumerate() {
        let total = site.y0_dist.iter().fold(T::zero(), |acc, (_, p)| acc + p.clone());
        if total != T::one() {
            return Err(Error::Specification(format!("site {j}: control-outcome probabilities sum to {total:?}")));
        }
    }
    let mut labels: Vec<usize> = world.iter().map(|s| s.ecology).collect();
    labels.sort_unstable();
    labels.dedup();
    for label in labels {
        let group: Vec<&WorldSite<T>> = world.iter().filter(|s| s.ecology == label).collect();
        if group.iter().any(|s| s.mu1_base != group[0].mu1_base) {
            return Err(Error::Specification(format!("ecology {label}: sites disagree on the base treated mean")));
        }
        let sum = group.iter().fold(T::zero(), |acc, s| acc + s.theta.clone());
        if sum != T::zero() {
            return Err(Error::Specification(format!("ecology {label}: LREs sum to {sum:?}, not 0")));
        }
    }
    Ok(())
}
