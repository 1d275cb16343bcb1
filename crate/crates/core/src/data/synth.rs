use serde::{Deserialize, Serialize};

use super::{DomainDataset, DomainKey};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Rotation angle (radians) per unit of domain shift, per plane.
const ROTATION_PER_SHIFT: f64 = 0.5;
/// Per-axis translation standard deviation per unit of domain shift.
const TRANSLATION_PER_SHIFT: f64 = 0.5;
/// Per-axis log-scale range per unit of domain shift.
const LOG_SCALE_PER_SHIFT: f64 = 0.3;

/// Gaussian class clusters seen through a random affine map per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Sources plus one target; the last domain is the target.
    pub num_domains: usize,
    pub classes: usize,
    pub feature_dim: usize,
    /// Distance between any two class means.
    pub class_separation: f64,
    /// Strength of each domain's rotation, translation and axis scaling.
    pub domain_shift: f64,
    pub samples_per_class_per_domain: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The fixed benchmark: 4 sources and 1 target, 3 classes in 20 dimensions.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            num_domains: 5,
            classes: 3,
            feature_dim: 20,
            class_separation: 4.0,
            domain_shift: 1.0,
            samples_per_class_per_domain: 200,
            noise_sigma: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::Config("num_domains must be at least 2 (sources plus target)".into()));
        }
        if self.classes < 2 || self.classes > self.feature_dim {
            return Err(Error::Config(format!(
                "classes must be in [2, feature_dim={}], got {}",
                self.feature_dim, self.classes
            )));
        }
        if !(self.class_separation > 0.0) {
            return Err(Error::Config("class_separation must be > 0".into()));
        }
        if !(self.domain_shift >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("domain_shift and noise_sigma must be >= 0".into()));
        }
        if self.samples_per_class_per_domain == 0 {
            return Err(Error::Config("samples_per_class_per_domain must be positive".into()));
        }
        Ok(())
    }
}

/// Random affine map `x -> R diag(s) x + t` whose deviation from identity
/// grows linearly with `shift`. The underlying draws do not depend on
/// `shift`, so a larger shift moves the same domain further.
struct DomainMap {
    planes: Vec<(usize, usize, f64)>,
    scale: Vec<f64>,
    translation: Vec<f64>,
}

impl DomainMap {
    fn draw(dim: usize, shift: f64, rng: &mut Rng) -> Self {
        let mut planes = Vec::with_capacity(dim);
        for _ in 0..dim {
            let i = (rng.next_u64() % dim as u64) as usize;
            let mut j = (rng.next_u64() % (dim as u64 - 1)) as usize;
            if j >= i {
                j += 1;
            }
            planes.push((i, j, shift * ROTATION_PER_SHIFT * rng.uniform(-1.0, 1.0)));
        }
        let scale = (0..dim)
            .map(|_| (shift * LOG_SCALE_PER_SHIFT * rng.uniform(-1.0, 1.0)).exp())
            .collect();
        let translation = (0..dim)
            .map(|_| shift * TRANSLATION_PER_SHIFT * rng.normal())
            .collect();
        Self {
            planes,
            scale,
            translation,
        }
    }

    fn apply(&self, x: &mut [f64]) {
        for (v, s) in x.iter_mut().zip(&self.scale) {
            *v *= s;
        }
        for &(i, j, theta) in &self.planes {
            let (c, s) = (theta.cos(), theta.sin());
            let (a, b) = (x[i], x[j]);
            x[i] = c * a - s * b;
            x[j] = s * a + c * b;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

/// Generates `num_domains` labeled domains keyed `(subject d+1, session 1)`.
pub fn generate_synth(spec: &SynthSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let d = spec.feature_dim;
    let root = Rng::new(spec.seed);
    let mean_scale = spec.class_separation / std::f64::consts::SQRT_2;
    let mut out = Vec::with_capacity(spec.num_domains);
    for dom in 0..spec.num_domains {
        let mut map_rng = root.split(2 * dom as u64);
        let mut noise_rng = root.split(2 * dom as u64 + 1);
        let map = DomainMap::draw(d, spec.domain_shift, &mut map_rng);
        let n = spec.classes * spec.samples_per_class_per_domain;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for c in 0..spec.classes {
            for _ in 0..spec.samples_per_class_per_domain {
                let mut x: Vec<f64> = (0..d).map(|_| spec.noise_sigma * noise_rng.normal()).collect();
                x[c] += mean_scale;
                map.apply(&mut x);
                data.extend_from_slice(&x);
                labels.push(c);
            }
        }
        let key = DomainKey::new(dom as u32 + 1, 1);
        out.push(DomainDataset::new(key, Tensor::from_vec(n, d, data)?, Some(labels), spec.classes)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::squared_dist;

    fn class_means(ds: &DomainDataset) -> Vec<Vec<f64>> {
        let labels = ds.labels.as_ref().unwrap();
        let mut sums = vec![vec![0.0; ds.feature_dim()]; ds.class_count];
        let mut counts = vec![0.0; ds.class_count];
        for (row, &y) in ds.features.iter_rows().zip(labels) {
            counts[y] += 1.0;
            for (s, v) in sums[y].iter_mut().zip(row) {
                *s += v;
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, n)| s.into_iter().map(|v| v / n).collect())
            .collect()
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::benchmark(9);
        assert_eq!(generate_synth(&spec).unwrap(), generate_synth(&spec).unwrap());
        let other = generate_synth(&SynthSpec::benchmark(10)).unwrap();
        assert_ne!(generate_synth(&spec).unwrap()[0].features, other[0].features);
    }

    #[test]
    fn nearest_mean_is_near_perfect_when_separable() {
        let spec = SynthSpec {
            class_separation: 10.0,
            noise_sigma: 0.1,
            domain_shift: 0.0,
            ..SynthSpec::benchmark(3)
        };
        for ds in generate_synth(&spec).unwrap() {
            let means = class_means(&ds);
            let labels = ds.labels.as_ref().unwrap();
            let correct = ds
                .features
                .iter_rows()
                .zip(labels)
                .filter(|(row, &y)| {
                    let best = (0..means.len())
                        .min_by(|&a, &b| squared_dist(row, &means[a]).total_cmp(&squared_dist(row, &means[b])))
                        .unwrap();
                    best == y
                })
                .count();
            assert!(correct as f64 / ds.len() as f64 >= 0.99);
        }
    }

    #[test]
    fn zero_shift_domains_share_means() {
        let spec = SynthSpec {
            domain_shift: 0.0,
            ..SynthSpec::benchmark(5)
        };
        let sets = generate_synth(&spec).unwrap();
        let m0 = class_means(&sets[0]);
        for ds in &sets[1..] {
            for (a, b) in m0.iter().zip(class_means(ds)) {
                // Standard error of a 200-sample mean is 0.5/sqrt(200) per axis.
                assert!(squared_dist(a, &b).sqrt() < 0.5, "{}", squared_dist(a, &b));
            }
        }
    }

    #[test]
    fn class_means_are_separated() {
        let spec = SynthSpec {
            domain_shift: 0.0,
            noise_sigma: 0.0,
            ..SynthSpec::benchmark(1)
        };
        let m = class_means(&generate_synth(&spec).unwrap()[0]);
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            assert!((squared_dist(&m[a], &m[b]).sqrt() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = SynthSpec::benchmark(0);
        s.class_separation = 0.0;
        assert!(generate_synth(&s).is_err());
        let mut s = SynthSpec::benchmark(0);
        s.domain_shift = -1.0;
        assert!(generate_synth(&s).is_err());
        let mut s = SynthSpec::benchmark(0);
        s.feature_dim = 2;
        assert!(generate_synth(&s).is_err());
    }
}
