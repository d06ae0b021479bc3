//! Marginal Gaussian likelihood of two-level models evaluated from per-site
//! sufficient statistics.
//!
//! Within a site, an orthogonal (Helmert) rotation of each arm separates the
//! arm mean from `n − 1` contrasts that are iid `N(0, σ²)` and free of the
//! random effects. The contrasts contribute `−½[(n−1) ln 2πσ² + ss/σ²]`; the
//! arm means `(ȳ0, ȳ1 − ȳ0)` are jointly normal with covariance `T + V_j`,
//!
//! ```text
//! V_j = [ σ0²/n0      −σ0²/n0        ]
//!       [ −σ0²/n0     σ1²/n1 + σ0²/n0 ]
//! ```
//!
//! and the change of variables from scaled to raw means adds `−½ Σ ln n`.
//! The random-intercept model is the one-dimensional case on the control arm.

use crate::data::SiteSufficientStats;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, Sym2};
use crate::scalar::{ln_two_pi, Scalar};

/// Random-effects structure of a two-level model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    /// Control arm only, random intercept `η0j ~ N(0, ω00)`.
    Intercept,
    /// Both arms, `(v0j, v1j) ~ N(0, T)`, arm-specific residual variances.
    InterceptSlope,
}

impl Structure {
    pub fn dim(self) -> usize {
        match self {
            Structure::Intercept => 1,
            Structure::InterceptSlope => 2,
        }
    }

    /// Length of the unconstrained parameter vector.
    pub fn num_params(self) -> usize {
        match self {
            Structure::Intercept => 2,
            Structure::InterceptSlope => 5,
        }
    }
}

/// Site-level covariate matrix with named columns (no constant column).
#[derive(Debug, Clone, PartialEq)]
pub struct SiteCovariateMatrix<F> {
    pub names: Vec<String>,
    /// Row-major `J × names.len()`.
    pub values: Vec<F>,
}

impl<F: Scalar> SiteCovariateMatrix<F> {
    pub fn empty() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<F>]) -> Result<Self> {
        let m = names.len();
        let mut values = Vec::with_capacity(rows.len() * m);
        for (j, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(Error::Schema(format!(
                    "site {j} has {} covariates, expected {m}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Ok(Self { names, values })
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, j: usize) -> &[F] {
        let m = self.width();
        &self.values[j * m..(j + 1) * m]
    }

    /// Appends one column.
    pub fn with_column(&self, name: &str, column: &[F]) -> Self {
        let m = self.width();
        let j_total = column.len();
        let mut values = Vec::with_capacity(j_total * (m + 1));
        for (j, &c) in column.iter().enumerate() {
            if m > 0 {
                values.extend_from_slice(self.row(j));
            }
            values.push(c);
        }
        let mut names = self.names.clone();
        names.push(name.to_string());
        Self { names, values }
    }

    pub fn rows(&self, sites: usize) -> usize {
        if self.width() == 0 {
            sites
        } else {
            self.values.len() / self.width()
        }
    }
}

/// Variance components on their natural scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents<F: Scalar> {
    pub sigma0_sq: F,
    /// Ignored by [`Structure::Intercept`].
    pub sigma1_sq: F,
    /// Random-effects covariance; only `a00` is used by the intercept model.
    pub t: Sym2<F>,
}

impl<F: Scalar> VarianceComponents<F> {
    pub fn validate(&self, structure: Structure) -> Result<()> {
        if !(self.sigma0_sq > F::zero()) {
            return Err(Error::Domain(format!("sigma0_sq = {} must be > 0", self.sigma0_sq)));
        }
        match structure {
            Structure::Intercept => {
                if !(self.t.a00 >= F::zero()) {
                    return Err(Error::Domain(format!("omega00 = {} must be >= 0", self.t.a00)));
                }
            }
            Structure::InterceptSlope => {
                if !(self.sigma1_sq > F::zero()) {
                    return Err(Error::Domain(format!("sigma1_sq = {} must be > 0", self.sigma1_sq)));
                }
                if !self.t.is_psd() {
                    return Err(Error::Domain(format!("T = {:?} is not positive semidefinite", self.t)));
                }
            }
        }
        Ok(())
    }

    /// Maps the unconstrained vector: logs of the residual variances and the
    /// log-Cholesky factor of `T` (log diagonal, free off-diagonal).
    pub fn from_unconstrained(structure: Structure, theta: &[F]) -> Self {
        match structure {
            Structure::Intercept => {
                let l00 = theta[1].exp();
                Self {
                    sigma0_sq: theta[0].exp(),
                    sigma1_sq: F::nan(),
                    t: Sym2::new(l00 * l00, F::zero(), F::zero()),
                }
            }
            Structure::InterceptSlope => {
                let l00 = theta[2].exp();
                let l10 = theta[3];
                let l11 = theta[4].exp();
                Self {
                    sigma0_sq: theta[0].exp(),
                    sigma1_sq: theta[1].exp(),
                    t: Sym2::new(l00 * l00, l00 * l10, l10 * l10 + l11 * l11),
                }
            }
        }
    }

    /// Inverse of [`Self::from_unconstrained`]; zero variances are floored
    /// so the logs stay finite.
    pub fn to_unconstrained(&self, structure: Structure) -> Vec<F> {
        let floor = F::lit(1e-12) * self.sigma0_sq;
        match structure {
            Structure::Intercept => vec![self.sigma0_sq.ln(), self.t.a00.max(floor).sqrt().ln()],
            Structure::InterceptSlope => {
                let l00 = self.t.a00.max(floor).sqrt();
                let l10 = self.t.a01 / l00;
                let l11 = (self.t.a11 - l10 * l10).max(floor).sqrt();
                vec![self.sigma0_sq.ln(), self.sigma1_sq.ln(), l00.ln(), l10, l11.ln()]
            }
        }
    }
}

/// Prepared per-site data and fixed-effect design for one model.
#[derive(Debug, Clone)]
pub struct ModelData<F: Scalar> {
    pub structure: Structure,
    /// Fixed-effect column names, intercept equation first.
    pub columns: Vec<String>,
    n0: Vec<F>,
    n1: Vec<F>,
    ybar0: Vec<F>,
    itt: Vec<F>,
    ss0: Vec<F>,
    ss1: Vec<F>,
    /// Row-major `J × p` design of the control-mean equation.
    x0: Vec<F>,
    /// Row-major `J × p` design of the ITT equation (empty for intercept models).
    x1: Vec<F>,
    /// Σ ln n over all arm means entering the likelihood.
    log_n_sum: F,
}

impl<F: Scalar> ModelData<F> {
    /// Random-intercept model on the control arm with covariates `covs`
    /// (a constant column is added).
    pub fn intercept(stats: &[SiteSufficientStats<F>], covs: &SiteCovariateMatrix<F>) -> Result<Self> {
        let j_total = stats.len();
        check_rows(covs, j_total)?;
        let q = covs.width() + 1;
        let mut x0 = Vec::with_capacity(j_total * q);
        for j in 0..j_total {
            x0.push(F::one());
            x0.extend_from_slice(covs.row(j));
        }
        let mut columns = vec!["(intercept)".to_string()];
        columns.extend(covs.names.iter().cloned());
        Self::assemble(Structure::Intercept, stats, columns, x0, Vec::new())
    }

    /// Random intercept-and-slope model. The control-mean equation uses
    /// `1 + intercept_covs`, the ITT equation `1 + slope_covs`.
    pub fn intercept_slope(
        stats: &[SiteSufficientStats<F>],
        intercept_covs: &SiteCovariateMatrix<F>,
        slope_covs: &SiteCovariateMatrix<F>,
    ) -> Result<Self> {
        let j_total = stats.len();
        check_rows(intercept_covs, j_total)?;
        check_rows(slope_covs, j_total)?;
        let q0 = intercept_covs.width() + 1;
        let q1 = slope_covs.width() + 1;
        let p = q0 + q1;
        let mut x0 = vec![F::zero(); j_total * p];
        let mut x1 = vec![F::zero(); j_total * p];
        for j in 0..j_total {
            x0[j * p] = F::one();
            x0[j * p + 1..j * p + q0].copy_from_slice(intercept_covs.row(j));
            x1[j * p + q0] = F::one();
            x1[j * p + q0 + 1..(j + 1) * p].copy_from_slice(slope_covs.row(j));
        }
        let mut columns = vec!["(intercept)".to_string()];
        columns.extend(intercept_covs.names.iter().cloned());
        columns.push("z".into());
        columns.extend(slope_covs.names.iter().map(|n| format!("z:{n}")));
        Self::assemble(Structure::InterceptSlope, stats, columns, x0, x1)
    }

    fn assemble(
        structure: Structure,
        stats: &[SiteSufficientStats<F>],
        columns: Vec<String>,
        x0: Vec<F>,
        x1: Vec<F>,
    ) -> Result<Self> {
        let both = structure == Structure::InterceptSlope;
        for s in stats {
            if s.n0 == 0 || (both && s.n1 == 0) {
                return Err(Error::MissingArm {
                    site: s.site_id.clone(),
                    arm: if s.n0 == 0 { "control" } else { "treated" },
                });
            }
        }
        let n0: Vec<F> = stats.iter().map(|s| F::from_count(s.n0)).collect();
        let n1: Vec<F> = stats.iter().map(|s| F::from_count(s.n1)).collect();
        let mut log_n_sum: F = n0.iter().map(|n| n.ln()).sum();
        if both {
            log_n_sum += n1.iter().map(|n| n.ln()).sum::<F>();
        }
        Ok(Self {
            structure,
            columns,
            n0,
            n1,
            ybar0: stats.iter().map(|s| s.ybar0).collect(),
            itt: stats.iter().map(|s| s.itt()).collect(),
            ss0: stats.iter().map(|s| s.ss0).collect(),
            ss1: stats.iter().map(|s| s.ss1).collect(),
            x0,
            x1,
            log_n_sum,
        })
    }

    pub fn num_sites(&self) -> usize {
        self.n0.len()
    }

    pub fn num_fixed(&self) -> usize {
        self.columns.len()
    }

    pub fn x0(&self, j: usize) -> &[F] {
        let p = self.num_fixed();
        &self.x0[j * p..(j + 1) * p]
    }

    pub fn x1(&self, j: usize) -> &[F] {
        let p = self.num_fixed();
        &self.x1[j * p..(j + 1) * p]
    }

    pub fn ybar0(&self) -> &[F] {
        &self.ybar0
    }

    pub fn itt(&self) -> &[F] {
        &self.itt
    }

    pub fn n0(&self) -> &[F] {
        &self.n0
    }

    pub fn n1(&self) -> &[F] {
        &self.n1
    }

    pub(crate) fn ss(&self) -> (&[F], &[F]) {
        (&self.ss0, &self.ss1)
    }

    fn within(&self, vc: &VarianceComponents<F>) -> F {
        let two_pi = ln_two_pi::<F>();
        let arm = |n: F, ss: F, s2: F| (n - F::one()) * (two_pi + s2.ln()) + ss / s2;
        let mut acc = F::zero();
        for j in 0..self.num_sites() {
            acc += arm(self.n0[j], self.ss0[j], vc.sigma0_sq);
            if self.structure == Structure::InterceptSlope {
                acc += arm(self.n1[j], self.ss1[j], vc.sigma1_sq);
            }
        }
        acc * F::lit(-0.5)
    }

    /// Marginal covariance `T + V_j` of site `j`'s mean vector.
    pub fn site_cov(&self, j: usize, vc: &VarianceComponents<F>) -> Sym2<F> {
        let a = vc.sigma0_sq / self.n0[j];
        match self.structure {
            Structure::Intercept => Sym2::new(vc.t.a00 + a, F::zero(), F::one()),
            Structure::InterceptSlope => {
                let b = vc.sigma1_sq / self.n1[j];
                Sym2::new(vc.t.a00 + a, vc.t.a01 - a, vc.t.a11 + a + b)
            }
        }
    }

    /// Residual of the site mean vector at fixed effects `beta`.
    pub fn residual(&self, j: usize, beta: &[F]) -> [F; 2] {
        let r0 = self.ybar0[j] - dot(self.x0(j), beta);
        match self.structure {
            Structure::Intercept => [r0, F::zero()],
            Structure::InterceptSlope => [r0, self.itt[j] - dot(self.x1(j), beta)],
        }
    }

    fn site_inverse(&self, j: usize, vc: &VarianceComponents<F>) -> Result<(Sym2<F>, F)> {
        let s = self.site_cov(j, vc);
        match self.structure {
            Structure::Intercept => {
                if !(s.a00 > F::zero()) {
                    return Err(Error::Domain("site variance is not positive".into()));
                }
                Ok((Sym2::new(F::one() / s.a00, F::zero(), F::zero()), s.a00.ln()))
            }
            Structure::InterceptSlope => {
                let inv = s
                    .inverse()
                    .ok_or_else(|| Error::Domain("T + V_j is singular".into()))?;
                Ok((inv, s.det().ln()))
            }
        }
    }

    /// GLS fixed effects `(Σ Xᵀ S⁻¹ X)⁻¹ Σ Xᵀ S⁻¹ m` at the given variance
    /// components.
    pub fn gls(&self, vc: &VarianceComponents<F>) -> Result<Vec<F>> {
        let p = self.num_fixed();
        let mut a = vec![F::zero(); p * p];
        let mut b = vec![F::zero(); p];
        for j in 0..self.num_sites() {
            let (w, _) = self.site_inverse(j, vc)?;
            self.accumulate_gls(j, &w, &mut a, &mut b);
        }
        symmetrize(&mut a, p);
        let l = cholesky(&a, p).map_err(|c| Error::RankDeficient {
            columns: vec![self.columns[c].clone()],
        })?;
        Ok(cholesky_solve(&l, p, &b))
    }

    fn accumulate_gls(&self, j: usize, w: &Sym2<F>, a: &mut [F], b: &mut [F]) {
        let p = self.num_fixed();
        let x0 = self.x0(j);
        match self.structure {
            Structure::Intercept => {
                let m = w.a00 * self.ybar0[j];
                for r in 0..p {
                    b[r] += x0[r] * m;
                    for c in 0..=r {
                        a[r * p + c] += w.a00 * x0[r] * x0[c];
                    }
                }
            }
            Structure::InterceptSlope => {
                let x1 = self.x1(j);
                let m = [self.ybar0[j], self.itt[j]];
                let wm = w.mul_vec(m);
                for r in 0..p {
                    b[r] += x0[r] * wm[0] + x1[r] * wm[1];
                    for c in 0..=r {
                        a[r * p + c] += w.a00 * x0[r] * x0[c]
                            + w.a01 * (x0[r] * x1[c] + x1[r] * x0[c])
                            + w.a11 * x1[r] * x1[c];
                    }
                }
            }
        }
    }

    /// Marginal log-likelihood at explicit variance components and fixed
    /// effects.
    pub fn loglik(&self, vc: &VarianceComponents<F>, beta: &[F]) -> Result<F> {
        vc.validate(self.structure)?;
        if beta.len() != self.num_fixed() {
            return Err(Error::Domain(format!(
                "expected {} fixed effects, got {}",
                self.num_fixed(),
                beta.len()
            )));
        }
        Ok(self.eval(vc, beta, false)?.0)
    }

    /// Value and gradient (with respect to the natural variance components:
    /// σ0², σ1², t00, t01, t11) at fixed `beta`.
    fn eval(&self, vc: &VarianceComponents<F>, beta: &[F], with_grad: bool) -> Result<(F, [F; 5])> {
        let k = F::from_count(self.structure.dim());
        let half = F::lit(0.5);
        let two = F::lit(2.0);
        let mut value = self.within(vc) - half * self.log_n_sum;
        let mut g = [F::zero(); 5];
        let both = self.structure == Structure::InterceptSlope;
        let two_pi = ln_two_pi::<F>();
        for j in 0..self.num_sites() {
            let (w, logdet) = self.site_inverse(j, vc)?;
            let r = self.residual(j, beta);
            let (quad, u) = if both {
                (w.quad(r), w.mul_vec(r))
            } else {
                (w.a00 * r[0] * r[0], [w.a00 * r[0], F::zero()])
            };
            value -= half * (k * two_pi + logdet + quad);
            if with_grad {
                // dℓ/dS = −½ (S⁻¹ − u uᵀ)
                let g00 = -half * (w.a00 - u[0] * u[0]);
                let n0 = self.n0[j];
                if both {
                    let g01 = -half * (w.a01 - u[0] * u[1]);
                    let g11 = -half * (w.a11 - u[1] * u[1]);
                    g[0] += (g00 - two * g01 + g11) / n0;
                    g[1] += g11 / self.n1[j];
                    g[2] += g00;
                    g[3] += two * g01;
                    g[4] += g11;
                } else {
                    g[0] += g00 / n0;
                    g[2] += g00;
                }
            }
        }
        if with_grad {
            let arm = |n: F, ss: F, s2: F| -half * ((n - F::one()) / s2 - ss / (s2 * s2));
            for j in 0..self.num_sites() {
                g[0] += arm(self.n0[j], self.ss0[j], vc.sigma0_sq);
                if both {
                    g[1] += arm(self.n1[j], self.ss1[j], vc.sigma1_sq);
                }
            }
        }
        Ok((value, g))
    }

    /// Log-likelihood with fixed effects profiled out by GLS, together with
    /// its gradient in the unconstrained parameterization and the GLS
    /// solution. The gradient at fixed `beta` is exact for the profile since
    /// `beta` is the stationary point in the fixed effects.
    pub fn profiled(&self, theta: &[F]) -> Result<Profiled<F>> {
        let vc = VarianceComponents::from_unconstrained(self.structure, theta);
        let beta = self.gls(&vc)?;
        let (value, g) = self.eval(&vc, &beta, true)?;
        let grad = chain_rule(self.structure, theta, &vc, &g);
        Ok(Profiled { value, grad, beta, vc })
    }
}

/// Profiled log-likelihood evaluation.
#[derive(Debug, Clone)]
pub struct Profiled<F: Scalar> {
    pub value: F,
    pub grad: Vec<F>,
    pub beta: Vec<F>,
    pub vc: VarianceComponents<F>,
}

fn chain_rule<F: Scalar>(structure: Structure, theta: &[F], vc: &VarianceComponents<F>, g: &[F; 5]) -> Vec<F> {
    let two = F::lit(2.0);
    match structure {
        Structure::Intercept => {
            let l00 = theta[1].exp();
            vec![vc.sigma0_sq * g[0], l00 * two * l00 * g[2]]
        }
        Structure::InterceptSlope => {
            let l00 = theta[2].exp();
            let l10 = theta[3];
            let l11 = theta[4].exp();
            // t00 = l00², t01 = l00 l10, t11 = l10² + l11²
            let d_l00 = two * l00 * g[2] + l10 * g[3];
            let d_l10 = l00 * g[3] + two * l10 * g[4];
            let d_l11 = two * l11 * g[4];
            vec![
                vc.sigma0_sq * g[0],
                vc.sigma1_sq * g[1],
                l00 * d_l00,
                d_l10,
                l11 * d_l11,
            ]
        }
    }
}

fn check_rows<F: Scalar>(covs: &SiteCovariateMatrix<F>, sites: usize) -> Result<()> {
    if covs.width() > 0 && covs.values.len() != covs.width() * sites {
        return Err(Error::Schema(format!(
            "site covariate matrix has {} rows, expected {sites}",
            covs.values.len() / covs.width()
        )));
    }
    Ok(())
}

pub(crate) fn symmetrize<F: Scalar>(a: &mut [F], p: usize) {
    for r in 0..p {
        for c in 0..r {
            a[c * p + r] = a[r * p + c];
        }
    }
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Marginal log-likelihood of a two-level model from sufficient statistics.
///
/// `beta` follows [`ModelData::columns`].
pub fn marginal_loglik<F: Scalar>(model: &ModelData<F>, vc: &VarianceComponents<F>, beta: &[F]) -> Result<F> {
    model.loglik(vc, beta)
}
