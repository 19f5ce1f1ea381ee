//! Linear-Gaussian remote-regression model used as a ground-truth oracle.
//!
//! Generation (collider on the spurious feature):
//!
//! ```text
//! u_c ~ N(0, var_causal)
//! y   = u_c + n,    n   ~ N(0, var_label)
//! u_s = y + n_s,    n_s ~ N(0, var_spurious)
//! ```
//!
//! Features reach the regressor through an AWGN channel of variance
//! `var_channel`, independently per feature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemParams {
    pub var_causal: f64,
    pub var_spurious: f64,
    pub var_label: f64,
    pub var_channel: f64,
}

impl SemParams {
    pub fn new(var_causal: f64, var_spurious: f64, var_label: f64, var_channel: f64) -> Result<Self> {
        let p = Self {
            var_causal,
            var_spurious,
            var_label,
            var_channel,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("var_causal", self.var_causal),
            ("var_spurious", self.var_spurious),
            ("var_label", self.var_label),
            ("var_channel", self.var_channel),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(format!(
                    "{name} must be a finite non-negative variance, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemSample {
    pub u_c: f64,
    pub u_s: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionWeights {
    pub w1: f64,
    pub w2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSet {
    CausalOnly,
    Both,
}

pub fn generate_sem_samples(params: &SemParams, n: usize, seed: u64) -> Result<Vec<SemSample>> {
    params.validate()?;
    if n == 0 {
        return Err(Error::param("need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_into(params, n, &mut rng))
}

fn sample_into<R: Rng>(p: &SemParams, n: usize, rng: &mut R) -> Vec<SemSample> {
    let (sc, sl, ss) = (p.var_causal.sqrt(), p.var_label.sqrt(), p.var_spurious.sqrt());
    (0..n)
        .map(|_| {
            let g = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
            let u_c = sc * g(rng);
            let y = u_c + sl * g(rng);
            let u_s = y + ss * g(rng);
            SemSample { u_c, u_s, y }
        })
        .collect()
}

/// Draw `n_per_domain` samples from each domain's parameters, tagged with the
/// domain index.
pub fn generate_domain_samples(
    domains: &[SemParams],
    n_per_domain: usize,
    seed: u64,
) -> Result<Vec<(usize, SemSample)>> {
    if domains.is_empty() || n_per_domain == 0 {
        return Err(Error::param("need at least one domain and one sample per domain"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(domains.len() * n_per_domain);
    for (d, p) in domains.iter().enumerate() {
        p.validate()?;
        out.extend(sample_into(p, n_per_domain, &mut rng).into_iter().map(|s| (d, s)));
    }
    Ok(out)
}

/// Least-squares weight on the received causal feature alone:
/// `var_causal / (var_causal + var_channel)`.
pub fn analytic_weights_causal_only(params: &SemParams) -> Result<RegressionWeights> {
    params.validate()?;
    let den = params.var_causal + params.var_channel;
    if den <= 0.0 {
        return Err(Error::param("var_causal + var_channel must be positive"));
    }
    Ok(RegressionWeights {
        w1: params.var_causal / den,
        w2: 0.0,
    })
}

/// Population least-squares weights on both received features.
///
/// With `a, b, s, c` the causal, spurious, label and channel variances the
/// mean-squared error is
/// `(1-w1-w2)^2 a + w2^2 b + (w1^2+w2^2) c + (w2-1)^2 s`, whose stationary
/// point solves
///
/// ```text
/// [a+c   a      ] [w1]   [a  ]
/// [a     a+b+c+s] [w2] = [a+s]
/// ```
pub fn analytic_weights_both(params: &SemParams) -> Result<RegressionWeights> {
    params.validate()?;
    let SemParams {
        var_causal: a,
        var_spurious: b,
        var_label: s,
        var_channel: c,
    } = *params;
    let det = a * (b + c + s) + c * (a + b + c + s);
    if det <= 0.0 {
        return Err(Error::param(
            "normal equations are singular for these variances (determinant is zero)",
        ));
    }
    Ok(RegressionWeights {
        w1: a * (b + c) / det,
        w2: (a * s + c * (a + s)) / det,
    })
}

/// Empirical least squares (no intercept) of `y` on channel-corrupted features.
pub fn fit_ols_remote(
    samples: &[SemSample],
    var_channel: f64,
    feature_set: FeatureSet,
    seed: u64,
) -> Result<RegressionWeights> {
    if samples.len() < 2 {
        return Err(Error::param("need at least two samples"));
    }
    if !(var_channel >= 0.0) {
        return Err(Error::param(format!(
            "var_channel must be non-negative, got {var_channel}"
        )));
    }
    let sd = var_channel.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for smp in samples {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let x1 = smp.u_c + sd * e1;
        let x2 = smp.u_s + sd * e2;
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        s1y += x1 * smp.y;
        s2y += x2 * smp.y;
    }
    match feature_set {
        FeatureSet::CausalOnly => {
            if s11 <= f64::EPSILON * samples.len() as f64 {
                return Err(Error::numeric(
                    "singular normal equations: received causal feature has zero energy",
                ));
            }
            Ok(RegressionWeights { w1: s1y / s11, w2: 0.0 })
        }
        FeatureSet::Both => {
            let det = s11 * s22 - s12 * s12;
            let scale = s11 * s22;
            if !(det > 1e-12 * scale) {
                return Err(Error::numeric(
                    "singular normal equations: received features are collinear or degenerate",
                ));
            }
            Ok(RegressionWeights {
                w1: (s22 * s1y - s12 * s2y) / det,
                w2: (s11 * s2y - s12 * s1y) / det,
            })
        }
    }
}

/// Observation for [`conditional_mi`]: domain index, target, conditioning value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiSample {
    pub domain: usize,
    pub y: f64,
    pub cond: f64,
}

/// Plug-in estimate of `I(D; Y | C)` in nats.
///
/// `Y` and `C` are discretized into `bins` equal-frequency bins (rank based,
/// so the estimate is invariant under strictly monotone maps of either), `D`
/// is already discrete.
pub fn conditional_mi(samples: &[MiSample], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::param("bins must be at least 2"));
    }
    let n_domains = samples.iter().map(|s| s.domain).max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; n_domains];
        samples.iter().for_each(|s| seen[s.domain] = true);
        seen.iter().filter(|&&b| b).count()
    };
    if distinct < 2 {
        return Err(Error::param(
            "conditional MI over domains is undefined with fewer than two distinct domains",
        ));
    }
    let yb = equal_frequency_bins(samples.iter().map(|s| s.y), bins);
    let cb = equal_frequency_bins(samples.iter().map(|s| s.cond), bins);

    // joint counts indexed [c][d][y]
    let mut joint = vec![0usize; bins * n_domains * bins];
    let idx = |c: usize, d: usize, y: usize| (c * n_domains + d) * bins + y;
    for (i, s) in samples.iter().enumerate() {
        joint[idx(cb[i], s.domain, yb[i])] += 1;
    }
    let n = samples.len() as f64;
    let mut mi = 0.0;
    for c in 0..bins {
        let mut n_cd = vec![0usize; n_domains];
        let mut n_cy = vec![0usize; bins];
        let mut n_c = 0usize;
        for d in 0..n_domains {
            for y in 0..bins {
                let k = joint[idx(c, d, y)];
                n_cd[d] += k;
                n_cy[y] += k;
                n_c += k;
            }
        }
        for d in 0..n_domains {
            for y in 0..bins {
                let k = joint[idx(c, d, y)];
                if k == 0 {
                    continue;
                }
                let k = k as f64;
                mi += k / n * ((k * n_c as f64) / (n_cd[d] as f64 * n_cy[y] as f64)).ln();
            }
        }
    }
    // Rounding can leave a tiny negative residue when the estimate is ~0.
    Ok(mi.max(0.0))
}

fn equal_frequency_bins(values: impl Iterator<Item = f64>, bins: usize) -> Vec<usize> {
    let vals: Vec<f64> = values.collect();
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]).then(i.cmp(&j)));
    let n = vals.len();
    let mut out = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p(a: f64, b: f64, s: f64, c: f64) -> SemParams {
        SemParams::new(a, b, s, c).unwrap()
    }

    fn sample_var(xs: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn degenerate_generation_is_all_zero() {
        let s = generate_sem_samples(&p(0.0, 0.0, 0.0, 0.0), 3, 1).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x.u_c == 0.0 && x.u_s == 0.0 && x.y == 0.0));
    }

    #[test]
    fn negative_variance_rejected() {
        assert!(SemParams::new(1.0, -0.1, 0.0, 0.0).is_err());
        let bad = SemParams {
            var_causal: 1.0,
            var_spurious: 0.0,
            var_label: -1.0,
            var_channel: 0.0,
        };
        assert!(generate_sem_samples(&bad, 5, 0).is_err());
    }

    #[test]
    fn generation_variances() {
        let s = generate_sem_samples(&p(1.0, 0.0, 0.0, 0.0), 1_000_000, 11).unwrap();
        assert!((sample_var(s.iter().map(|x| x.u_c)) - 1.0).abs() < 0.01);

        let s = generate_sem_samples(&p(1.0, 1.0, 1.0, 0.0), 1_000_000, 12).unwrap();
        // u_s = u_c + n + n_s
        assert!((sample_var(s.iter().map(|x| x.u_s)) - 3.0).abs() < 0.03);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_sem_samples(&p(1.0, 2.0, 0.5, 0.0), 100, 9).unwrap();
        let b = generate_sem_samples(&p(1.0, 2.0, 0.5, 0.0), 100, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_only_examples() {
        assert_relative_eq!(analytic_weights_causal_only(&p(4.0, 0.0, 0.0, 1.0)).unwrap().w1, 0.8);
        assert_eq!(analytic_weights_causal_only(&p(3.0, 1.0, 1.0, 0.0)).unwrap().w1, 1.0);
        assert_eq!(analytic_weights_causal_only(&p(2.0, 7.0, 1.0, 2.0)).unwrap().w1, 0.5);
        assert_eq!(analytic_weights_causal_only(&p(2.0, 7.0, 1.0, 2.0)).unwrap().w2, 0.0);
        assert!(analytic_weights_causal_only(&p(0.0, 1.0, 1.0, 0.0)).is_err());
    }

    /// Minimizes the closed-form MSE by brute-force grid refinement; an
    /// oracle independent of the normal-equation algebra.
    fn grid_minimize(q: &SemParams) -> (f64, f64) {
        let mse = |w1: f64, w2: f64| {
            (1.0 - w1 - w2).powi(2) * q.var_causal
                + w2 * w2 * q.var_spurious
                + (w1 * w1 + w2 * w2) * q.var_channel
                + (w2 - 1.0).powi(2) * q.var_label
        };
        let (mut c1, mut c2, mut h) = (0.5, 0.5, 0.5);
        for _ in 0..60 {
            let mut best = (f64::INFINITY, c1, c2);
            for i in -10..=10 {
                for j in -10..=10 {
                    let (a, b) = (c1 + h * i as f64 / 10.0, c2 + h * j as f64 / 10.0);
                    let v = mse(a, b);
                    if v < best.0 {
                        best = (v, a, b);
                    }
                }
            }
            c1 = best.1;
            c2 = best.2;
            h *= 0.5;
        }
        (c1, c2)
    }

    #[test]
    fn both_matches_mse_grid_oracle() {
        for q in [
            p(1.0, 1.0, 1.0, 1.0),
            p(1.0, 2.0, 1.0, 0.0),
            p(0.3, 4.0, 2.0, 0.7),
            p(5.0, 0.1, 0.2, 0.05),
        ] {
            let w = analytic_weights_both(&q).unwrap();
            let (g1, g2) = grid_minimize(&q);
            assert!(
                (w.w1 - g1).abs() < 1e-6 && (w.w2 - g2).abs() < 1e-6,
                "{q:?}: {w:?} vs ({g1},{g2})"
            );
        }
    }

    #[test]
    fn both_examples() {
        let w = analytic_weights_both(&p(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(w.w1, 2.0 / 7.0, max_relative = 1e-14);
        assert_relative_eq!(w.w2, 3.0 / 7.0, max_relative = 1e-14);

        let w = analytic_weights_both(&p(1.0, 2.0, 1.0, 0.0)).unwrap();
        assert_relative_eq!(w.w1, 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(w.w2, 1.0 / 3.0, max_relative = 1e-14);

        // small-channel-noise limit: (b/(b+s), s/(b+s)) regardless of var_causal
        for (a, b, s) in [(1.0, 2.0, 1.0), (3.0, 0.5, 2.0), (0.2, 1.0, 4.0)] {
            let w = analytic_weights_both(&p(a, b, s, 1e-12)).unwrap();
            assert!((w.w1 - b / (b + s)).abs() < 1e-9);
            assert!((w.w2 - s / (b + s)).abs() < 1e-9);
        }
        assert!(analytic_weights_both(&p(1.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn spurious_variance_moves_both_weights_but_not_causal_only() {
        let base = p(1.0, 1.0, 0.5, 0.2);
        let bumped = p(1.0, 3.0, 0.5, 0.2);
        let (w, wb) = (
            analytic_weights_both(&base).unwrap(),
            analytic_weights_both(&bumped).unwrap(),
        );
        assert!((w.w1 - wb.w1).abs() > 1e-3 && (w.w2 - wb.w2).abs() > 1e-3);
        assert_eq!(
            analytic_weights_causal_only(&base).unwrap(),
            analytic_weights_causal_only(&bumped).unwrap()
        );
    }

    #[test]
    fn ols_exact_linear_relation() {
        let samples: Vec<SemSample> = (0..50)
            .map(|i| {
                let u = (i as f64 - 25.0) / 7.0;
                SemSample {
                    u_c: u,
                    u_s: 0.3 * u,
                    y: u,
                }
            })
            .collect();
        let w = fit_ols_remote(&samples, 0.0, FeatureSet::CausalOnly, 0).unwrap();
        assert!((w.w1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ols_singular_is_numeric_error() {
        let samples = vec![
            SemSample {
                u_c: 0.0,
                u_s: 0.0,
                y: 1.0
            };
            4
        ];
        assert!(matches!(
            fit_ols_remote(&samples, 0.0, FeatureSet::Both, 0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            fit_ols_remote(&samples, 0.0, FeatureSet::CausalOnly, 0),
            Err(Error::Numeric(_))
        ));
        assert!(fit_ols_remote(&samples[..1], 0.0, FeatureSet::Both, 0).is_err());
    }

    #[test]
    fn ols_noiseless_channel_within_three_standard_errors() {
        for (i, q) in [p(1.0, 2.0, 0.5, 0.0), p(0.5, 0.1, 3.0, 0.0)].iter().enumerate() {
            let n = 100_000;
            let s = generate_sem_samples(q, n, 100 + i as u64).unwrap();
            let w = fit_ols_remote(&s, 0.0, FeatureSet::CausalOnly, 7).unwrap();
            let se = (q.var_label / (n as f64 * q.var_causal)).sqrt();
            assert!((w.w1 - 1.0).abs() < 3.0 * se, "{} vs se {}", w.w1, se);
        }
    }

    #[test]
    fn ols_matches_closed_forms() {
        let q = p(1.0, 1.0, 1.0, 1.0);
        let s = generate_sem_samples(&q, 1_000_000, 5).unwrap();
        let w = fit_ols_remote(&s, q.var_channel, FeatureSet::Both, 6).unwrap();
        let a = analytic_weights_both(&q).unwrap();
        assert!(
            (w.w1 - a.w1).abs() < 0.01 && (w.w2 - a.w2).abs() < 0.01,
            "{w:?} vs {a:?}"
        );
        let w = fit_ols_remote(&s, q.var_channel, FeatureSet::CausalOnly, 6).unwrap();
        assert!((w.w1 - analytic_weights_causal_only(&q).unwrap().w1).abs() < 0.01);
    }

    #[test]
    fn ols_error_shrinks_with_n() {
        let q = p(1.0, 0.7, 0.8, 0.3);
        let a = analytic_weights_both(&q).unwrap();
        let mut errs = Vec::new();
        for (k, n) in [10_000usize, 100_000, 1_000_000].into_iter().enumerate() {
            // average absolute error over a few replications to tame noise
            let mut e = 0.0;
            for r in 0..4u64 {
                let s = generate_sem_samples(&q, n, 1000 + 10 * k as u64 + r).unwrap();
                let w = fit_ols_remote(&s, q.var_channel, FeatureSet::Both, 2000 + r).unwrap();
                e += ((w.w1 - a.w1).powi(2) + (w.w2 - a.w2).powi(2)).sqrt();
            }
            errs.push(e / 4.0);
        }
        // O(1/sqrt(n)): each decade shrinks error by ~3.16; allow slack
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
        assert!(errs[2] < 0.01);
    }

    fn mi_samples(s: &[(usize, SemSample)], causal: bool) -> Vec<MiSample> {
        s.iter()
            .map(|(d, x)| MiSample {
                domain: *d,
                y: x.y,
                cond: if causal { x.u_c } else { x.u_s },
            })
            .collect()
    }

    #[test]
    fn mi_independent_domain_is_near_zero() {
        let s = generate_domain_samples(&[p(1.0, 1.0, 1.0, 0.0), p(1.0, 1.0, 1.0, 0.0)], 50_000, 3).unwrap();
        let mi = conditional_mi(&mi_samples(&s, false), 16).unwrap();
        assert!(mi < 0.01, "{mi}");
    }

    #[test]
    fn mi_requires_two_domains_and_bins() {
        let s = generate_domain_samples(&[p(1.0, 1.0, 1.0, 0.0)], 100, 3).unwrap();
        assert!(conditional_mi(&mi_samples(&s, true), 16).is_err());
        let s = generate_domain_samples(&[p(1.0, 1.0, 1.0, 0.0); 2], 100, 3).unwrap();
        assert!(conditional_mi(&mi_samples(&s, true), 1).is_err());
    }

    #[test]
    fn mi_separates_causal_from_spurious_conditioning() {
        let doms = [p(1.0, 0.1, 1.0, 0.0), p(1.0, 4.0, 1.0, 0.0)];
        let s = generate_domain_samples(&doms, 50_000, 4).unwrap();
        let mi_c = conditional_mi(&mi_samples(&s, true), 16).unwrap();
        let mi_s = conditional_mi(&mi_samples(&s, false), 16).unwrap();
        assert!(mi_c < 0.01, "{mi_c}");
        assert!(mi_s >= mi_c + 0.02, "{mi_s} vs {mi_c}");
    }

    #[test]
    fn mi_invariant_under_monotone_reparameterization() {
        let doms = [p(1.0, 0.1, 1.0, 0.0), p(1.0, 4.0, 1.0, 0.0)];
        let s = generate_domain_samples(&doms, 5_000, 8).unwrap();
        let base = mi_samples(&s, false);
        let warped: Vec<MiSample> = base
            .iter()
            .map(|m| MiSample {
                cond: m.cond.powi(3) + 2.0 * m.cond,
                y: m.y.exp(),
                ..*m
            })
            .collect();
        let a = conditional_mi(&base, 8).unwrap();
        let b = conditional_mi(&warped, 8).unwrap();
        assert!(a >= 0.0);
        assert_eq!(a, b);
    }
}
