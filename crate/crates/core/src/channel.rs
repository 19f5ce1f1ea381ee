//! AWGN channel with a per-dimension peak power constraint.
//!
//! Every latent coordinate is one real channel use. The transmitter clamps
//! each coordinate into `[-sqrt(p_max), sqrt(p_max)]` and the channel adds
//! i.i.d. Gaussian noise of variance `noise_var`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel uses per second.
pub const SYMBOL_RATE_BAUD: f64 = 9600.0;

/// Real latent dimensions carried by one channel symbol. Set to 2 to model
/// complex-valued signalling, which halves the reported latency.
pub const REAL_DIMS_PER_SYMBOL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub p_max: f64,
    pub noise_var: f64,
}

/// Result of [`psnr_db`]; a noiseless channel has no finite PSNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn value(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl ChannelConfig {
    pub fn new(p_max: f64, noise_var: f64) -> Result<Self> {
        if !(p_max > 0.0) || !p_max.is_finite() {
            return Err(Error::param(format!("p_max must be positive, got {p_max}")));
        }
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::param(format!("noise_var must be non-negative, got {noise_var}")));
        }
        Ok(Self { p_max, noise_var })
    }

    /// Channel with unit peak power at the given PSNR.
    pub fn from_psnr(p_max: f64, psnr_db: f64) -> Result<Self> {
        Self::new(p_max, noise_var_for_psnr(p_max, psnr_db)?)
    }

    pub fn amplitude(&self) -> f64 {
        self.p_max.sqrt()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_var.sqrt()
    }
}

/// `10 log10(p_max / noise_var)`.
pub fn psnr_db(cfg: &ChannelConfig) -> Psnr {
    if cfg.noise_var == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (cfg.p_max / cfg.noise_var).log10())
    }
}

pub fn noise_var_for_psnr(p_max: f64, psnr_db: f64) -> Result<f64> {
    if !(p_max > 0.0) {
        return Err(Error::param(format!("p_max must be positive, got {p_max}")));
    }
    Ok(p_max * 10f64.powf(-psnr_db / 10.0))
}

/// Clamp every coordinate to the feasible amplitude range.
pub fn power_project(z: &[f64], p_max: f64) -> Vec<f64> {
    let mut out = z.to_vec();
    power_project_in_place(&mut out, p_max);
    out
}

pub fn power_project_in_place(z: &mut [f64], p_max: f64) {
    let a = p_max.sqrt();
    for v in z.iter_mut() {
        *v = v.clamp(-a, a);
    }
}

/// `project(z) + eps`, `eps ~ N(0, noise_var I)`.
pub fn transmit<R: Rng + ?Sized>(z: &[f64], cfg: &ChannelConfig, rng: &mut R) -> Vec<f64> {
    let mut out = power_project(z, cfg.p_max);
    add_noise(&mut out, cfg.noise_std(), rng);
    out
}

pub(crate) fn add_noise<R: Rng + ?Sized>(z: &mut [f64], std: f64, rng: &mut R) {
    if std == 0.0 {
        return;
    }
    for v in z.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += std * e;
    }
}

/// Transmission latency of a `latent_dim`-dimensional feature at 9600 Baud.
pub fn latency_ms(latent_dim: usize) -> Result<f64> {
    if latent_dim == 0 {
        return Err(Error::param("latent dimension must be at least 1"));
    }
    let symbols = latent_dim.div_ceil(REAL_DIMS_PER_SYMBOL) as f64;
    Ok(symbols / SYMBOL_RATE_BAUD * 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_examples() {
        let c = |p, n| ChannelConfig::new(p, n).unwrap();
        assert_relative_eq!(psnr_db(&c(1.0, 0.1)).value(), 10.0, epsilon = 1e-12);
        assert_relative_eq!(psnr_db(&c(1.0, 0.01)).value(), 20.0, epsilon = 1e-12);
        assert_eq!(psnr_db(&c(0.3, 0.3)).value(), 0.0);
        assert_eq!(psnr_db(&c(1.0, 0.0)), Psnr::Infinite);
    }

    #[test]
    fn noise_var_examples() {
        assert_relative_eq!(noise_var_for_psnr(1.0, 10.0).unwrap(), 0.1, max_relative = 1e-12);
        assert_eq!(noise_var_for_psnr(1.0, 0.0).unwrap(), 1.0);
        let v = noise_var_for_psnr(4.0, 13.0).unwrap();
        assert_relative_eq!(v, 0.200_474_893, max_relative = 1e-8);
        let back = psnr_db(&ChannelConfig::new(4.0, v).unwrap()).value();
        assert!((back - 13.0).abs() < 1e-9);
        assert!(noise_var_for_psnr(0.0, 3.0).is_err());
    }

    #[test]
    fn projection_examples() {
        assert_eq!(power_project(&[0.5, -0.5], 1.0), vec![0.5, -0.5]);
        assert_eq!(power_project(&[2.0, -3.0], 1.0), vec![1.0, -1.0]);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ChannelConfig::new(0.0, 1.0).is_err());
        assert!(ChannelConfig::new(1.0, -1.0).is_err());
        assert!(ChannelConfig::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn noiseless_transmit_is_projection() {
        let cfg = ChannelConfig::new(1.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(transmit(&[0.2, 5.0], &cfg, &mut rng), vec![0.2, 1.0]);
    }

    #[test]
    fn transmit_noise_variance() {
        let cfg = ChannelConfig::new(1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let (mut s, mut s2) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n / 2 {
            let out = transmit(&[0.0, 0.0], &cfg, &mut rng);
            for d in 0..2 {
                s[d] += out[d];
                s2[d] += out[d] * out[d];
            }
        }
        let m = (n / 2) as f64;
        for d in 0..2 {
            let var = s2[d] / m - (s[d] / m).powi(2);
            assert!((var - 1.0).abs() < 0.01, "dim {d}: {var}");
        }
    }

    #[test]
    fn transmit_preserves_mean() {
        let cfg = ChannelConfig::new(1.0, 0.5).unwrap();
        let z = [0.3, -0.7, 0.9];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let out = transmit(&z, &cfg, &mut rng);
            for d in 0..3 {
                acc[d] += out[d];
            }
        }
        let band = 4.0 * cfg.noise_std() / (n as f64).sqrt();
        for d in 0..3 {
            assert!((acc[d] / n as f64 - z[d]).abs() < band);
        }
    }

    #[test]
    fn latency_examples() {
        assert_relative_eq!(latency_ms(96).unwrap(), 10.0, epsilon = 1e-12);
        assert_relative_eq!(latency_ms(48).unwrap(), 5.0, epsilon = 1e-12);
        assert!((latency_ms(16).unwrap() - 1.667).abs() < 1e-3);
        assert!(latency_ms(0).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn psnr_roundtrip(p in 1e-3f64..1e3, db in -30.0f64..40.0) {
                let v = noise_var_for_psnr(p, db).unwrap();
                let back = psnr_db(&ChannelConfig::new(p, v).unwrap()).value();
                prop_assert!((back - db).abs() < 1e-9);
            }

            #[test]
            fn projection_idempotent_nonexpansive(
                z in proptest::collection::vec(-10.0f64..10.0, 1..16),
                w in proptest::collection::vec(-10.0f64..10.0, 16),
                p in 0.01f64..4.0,
            ) {
                let once = power_project(&z, p);
                prop_assert_eq!(power_project(&once, p), once.clone());
                for v in &once {
                    prop_assert!(v * v <= p * (1.0 + 1e-12));
                }
                let w = &w[..z.len()];
                let pw = power_project(w, p);
                for i in 0..z.len() {
                    prop_assert!((once[i] - pw[i]).abs() <= (z[i] - w[i]).abs() + 1e-15);
                }
            }
        }
    }
}
