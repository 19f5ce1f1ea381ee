//! Two-color environments with a tunable spurious correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::idx::RawImageSet;
use crate::error::{Error, Result};

/// Number of color channels in every constructed example.
pub const COLOR_CHANNELS: usize = 2;

/// Label assigned to semantic-shift samples; never a valid in-distribution class.
pub const OUT_OF_VOCABULARY: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
}

/// Which target the environment exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// `digit >= 5`, two classes.
    #[default]
    Binary,
    /// The digit itself, ten classes. Color still follows the binary group
    /// of the (noisy) digit label.
    Digit,
}

impl LabelMode {
    pub fn num_classes(self) -> usize {
        match self {
            LabelMode::Binary => 2,
            LabelMode::Digit => 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    /// Probability that the color channel agrees with the (noisy) label group.
    pub bias_ratio: f64,
    /// Probability that the label is corrupted.
    pub label_noise: f64,
    pub domain_index: usize,
    pub role: Role,
    #[serde(default)]
    pub labels: LabelMode,
}

impl EnvironmentSpec {
    pub fn new(bias_ratio: f64, label_noise: f64, domain_index: usize, role: Role) -> Result<Self> {
        let s = Self {
            bias_ratio,
            label_noise,
            domain_index,
            role,
            labels: LabelMode::Binary,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_labels(mut self, labels: LabelMode) -> Self {
        self.labels = labels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("bias_ratio", self.bias_ratio), ("label_noise", self.label_noise)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(format!("{name} must be a probability, got {v}")));
            }
        }
        Ok(())
    }
}

/// One colored image with its (possibly noisy) label and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// `2 x rows x cols`, channel-major, values in `[0, 1]`.
    pub x: Vec<f32>,
    pub y: usize,
    pub d: usize,
    /// Label before corruption; kept so oracle bounds can be measured.
    pub y_clean: usize,
    /// Channel that carries the digit pixels.
    pub color: usize,
}

fn colorize(image: &[u8], channel: usize) -> Vec<f32> {
    let per = image.len();
    let mut x = vec![0f32; COLOR_CHANNELS * per];
    let dst = &mut x[channel * per..(channel + 1) * per];
    for (o, &p) in dst.iter_mut().zip(image) {
        *o = p as f32 / 255.0;
    }
    x
}

/// Build one environment: label the digits, corrupt the labels, then pick the
/// color channel from the corrupted label with agreement probability
/// `bias_ratio`.
pub fn build_colored_environment(raw: &RawImageSet, spec: &EnvironmentSpec, seed: u64) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    if raw.is_empty() {
        return Err(Error::param("raw image set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(raw.len());
    for i in 0..raw.len() {
        let digit = raw.labels[i] as usize;
        let (clean, noisy, group) = match spec.labels {
            LabelMode::Binary => {
                let clean = usize::from(digit >= 5);
                let noisy = if rng.gen_bool(spec.label_noise) {
                    1 - clean
                } else {
                    clean
                };
                (clean, noisy, noisy)
            }
            LabelMode::Digit => {
                let noisy = if rng.gen_bool(spec.label_noise) {
                    // uniformly among the other nine digits
                    let r = rng.gen_range(0..9);
                    if r >= digit {
                        r + 1
                    } else {
                        r
                    }
                } else {
                    digit
                };
                (digit, noisy, usize::from(noisy >= 5))
            }
        };
        let color = if rng.gen_bool(spec.bias_ratio) {
            group
        } else {
            1 - group
        };
        out.push(LabeledExample {
            x: colorize(raw.image(i), color),
            y: noisy,
            d: spec.domain_index,
            y_clean: clean,
            color,
        });
    }
    Ok(out)
}

/// Color semantic-shift images with a fair coin per image and mark them
/// out-of-vocabulary.
pub fn load_semantic_shift_set(
    raw: &RawImageSet,
    coloring: &EnvironmentSpec,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    coloring.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..raw.len())
        .map(|i| {
            let color = usize::from(rng.gen_bool(0.5));
            LabeledExample {
                x: colorize(raw.image(i), color),
                y: OUT_OF_VOCABULARY,
                d: coloring.domain_index,
                y_clean: OUT_OF_VOCABULARY,
                color,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1x2 images whose first pixel encodes the digit.
    fn toy_raw(n: usize) -> RawImageSet {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let pixels: Vec<u8> = labels.iter().flat_map(|&l| [10 + l, 0]).collect();
        RawImageSet::new(1, 2, pixels, labels).unwrap()
    }

    fn frac(xs: impl Iterator<Item = bool>) -> f64 {
        let (mut k, mut n) = (0usize, 0usize);
        for b in xs {
            k += b as usize;
            n += 1;
        }
        k as f64 / n as f64
    }

    #[test]
    fn perfect_bias_colors_by_label() {
        let spec = EnvironmentSpec::new(1.0, 0.0, 0, Role::Train).unwrap();
        let env = build_colored_environment(&toy_raw(100), &spec, 1).unwrap();
        for e in &env {
            assert_eq!(e.color, e.y);
            assert_eq!(e.y, e.y_clean);
            // digit pixels live in exactly one channel
            let other = 1 - e.color;
            assert!(e.x[other * 2..other * 2 + 2].iter().all(|&v| v == 0.0));
            assert!(e.x[e.color * 2] > 0.0);
        }
    }

    #[test]
    fn empirical_rates_match_spec() {
        let spec = EnvironmentSpec::new(0.9, 0.25, 0, Role::Train).unwrap();
        let env = build_colored_environment(&toy_raw(50_000), &spec, 2).unwrap();
        let agree = frac(env.iter().map(|e| e.color == e.y));
        let flip = frac(env.iter().map(|e| e.y != e.y_clean));
        assert!((agree - 0.9).abs() < 0.005, "{agree}");
        assert!((flip - 0.25).abs() < 0.005, "{flip}");
    }

    #[test]
    fn test_role_anticorrelates() {
        let spec = EnvironmentSpec::new(0.1, 0.25, 2, Role::Test).unwrap();
        let env = build_colored_environment(&toy_raw(20_000), &spec, 3).unwrap();
        let agree = frac(env.iter().map(|e| e.color == e.y));
        assert!((agree - 0.1).abs() < 0.01, "{agree}");
        assert!(env.iter().all(|e| e.d == 2));
    }

    #[test]
    fn label_balance_follows_binary_symmetric_channel() {
        let rho = 0.25;
        let raw = toy_raw(40_000);
        let p1_clean = frac(raw.labels.iter().map(|&l| l >= 5));
        let spec = EnvironmentSpec::new(0.8, rho, 0, Role::Train).unwrap();
        let env = build_colored_environment(&raw, &spec, 4).unwrap();
        let p1 = frac(env.iter().map(|e| e.y == 1));
        let expect = (1.0 - rho) * p1_clean + rho * (1.0 - p1_clean);
        assert!((p1 - expect).abs() < 0.01);
    }

    #[test]
    fn clean_label_oracle_scores_one_minus_rho() {
        let spec = EnvironmentSpec::new(0.9, 0.25, 0, Role::Train).unwrap();
        let env = build_colored_environment(&toy_raw(50_000), &spec, 5).unwrap();
        let acc = frac(env.iter().map(|e| e.y_clean == e.y));
        assert!((acc - 0.75).abs() < 0.01);
    }

    #[test]
    fn digit_mode_noise_never_keeps_label() {
        let spec = EnvironmentSpec::new(1.0, 1.0, 0, Role::Train)
            .unwrap()
            .with_labels(LabelMode::Digit);
        let env = build_colored_environment(&toy_raw(1000), &spec, 6).unwrap();
        assert!(env.iter().all(|e| e.y != e.y_clean && e.y < 10));
        assert!(env.iter().all(|e| e.color == usize::from(e.y >= 5)));
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = EnvironmentSpec::new(0.8, 0.25, 1, Role::Train).unwrap();
        let a = build_colored_environment(&toy_raw(300), &spec, 9).unwrap();
        let b = build_colored_environment(&toy_raw(300), &spec, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_checks() {
        assert!(EnvironmentSpec::new(1.2, 0.0, 0, Role::Train).is_err());
        assert!(EnvironmentSpec::new(0.5, -0.1, 0, Role::Train).is_err());
        let spec = EnvironmentSpec::new(0.5, 0.0, 0, Role::Train).unwrap();
        let empty = RawImageSet::new(28, 28, vec![], vec![]).unwrap();
        assert!(build_colored_environment(&empty, &spec, 0).is_err());
    }

    #[test]
    fn semantic_shift_set() {
        let spec = EnvironmentSpec::new(0.5, 0.0, 0, Role::Test).unwrap();
        let empty = RawImageSet::new(28, 28, vec![], vec![]).unwrap();
        assert!(load_semantic_shift_set(&empty, &spec, 0).unwrap().is_empty());

        let ood = load_semantic_shift_set(&toy_raw(10_000), &spec, 7).unwrap();
        assert_eq!(ood.len(), 10_000);
        assert!(ood.iter().all(|e| e.y == OUT_OF_VOCABULARY && e.x.len() == 4));
        let red = frac(ood.iter().map(|e| e.color == 0));
        assert!((red - 0.5).abs() < 0.02);
    }
}
