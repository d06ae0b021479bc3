#![allow(dead_code)]

use lre_core::data::{ArmAccumulator, SiteSufficientStats};
use lre_core::lmm::{SiteCovariateMatrix, VarianceComponents};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Individual outcomes of one site, by arm.
pub struct Site {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

pub fn stats(sites: &[Site]) -> Vec<SiteSufficientStats<f64>> {
    sites
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let mut a = [ArmAccumulator::new(); 2];
            s.y0.iter().for_each(|&y| a[0].push(y));
            s.y1.iter().for_each(|&y| a[1].push(y));
            SiteSufficientStats::from_arms(format!("s{j}"), a[0], a[1])
        })
        .collect()
}

pub fn random_sites(rng: &mut ChaCha8Rng, j_total: usize, n_max: usize) -> Vec<Site> {
    (0..j_total)
        .map(|_| {
            let n0 = rng.random_range(1..=n_max);
            let n1 = rng.random_range(1..=n_max);
            let mu: f64 = rng.random_range(-2.0..2.0);
            let mut draw = |n, shift: f64| -> Vec<f64> {
                (0..n).map(|_| mu + shift + rng.sample::<f64, _>(StandardNormal)).collect()
            };
            let y0 = draw(n0, 0.0);
            let y1 = draw(n1, 0.7);
            Site { y0, y1 }
        })
        .collect()
}

pub fn covs(rng: &mut ChaCha8Rng, j_total: usize, width: usize) -> SiteCovariateMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..j_total)
        .map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    SiteCovariateMatrix::from_rows((0..width).map(|c| format!("w{c}")).collect(), &rows).unwrap()
}

/// Log density of a multivariate normal by dense Cholesky.
pub fn dense_mvn_logpdf(cov: &[Vec<f64>], r: &[f64]) -> f64 {
    let n = r.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = cov[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        z[i] = (r[i] - (0..i).map(|k| l[i][k] * z[k]).sum::<f64>()) / l[i][i];
    }
    let logdet: f64 = (0..n).map(|i| 2.0 * l[i][i].ln()).sum();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + z.iter().map(|v| v * v).sum::<f64>())
}

/// Individual-level marginal log-likelihood with dense per-site covariance
/// `Z T Zᵀ + diag(σ²_z)`.
pub fn dense_loglik(sites: &[Site], w: &SiteCovariateMatrix<f64>, vc: &VarianceComponents<f64>, beta: &[f64]) -> f64 {
    let q = w.width() + 1;
    let mut total = 0.0;
    for (j, s) in sites.iter().enumerate() {
        let mut x = vec![1.0];
        x.extend_from_slice(w.row(j));
        let m0: f64 = x.iter().zip(&beta[..q]).map(|(a, b)| a * b).sum();
        let m1: f64 = x.iter().zip(&beta[q..]).map(|(a, b)| a * b).sum();
        let obs: Vec<(f64, f64)> = s.y0.iter().map(|&y| (0.0, y)).chain(s.y1.iter().map(|&y| (1.0, y))).collect();
        let n = obs.len();
        let mut cov = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                let (za, zb) = (obs[a].0, obs[b].0);
                cov[a][b] = vc.t.a00 + (za + zb) * vc.t.a01 + za * zb * vc.t.a11;
            }
            cov[a][a] += if obs[a].0 == 0.0 { vc.sigma0_sq } else { vc.sigma1_sq };
        }
        let r: Vec<f64> = obs.iter().map(|&(z, y)| y - m0 - z * m1).collect();
        total += dense_mvn_logpdf(&cov, &r);
    }
    total
}
