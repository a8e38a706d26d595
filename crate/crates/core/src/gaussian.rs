//! Diagonal Gaussians, Gaussian mixtures and Gumbel-softmax relaxation.
//!
//! Everything here is pure given explicit noise, so callers own their random
//! streams. The differentiable counterparts used during training live on the
//! autograd graph (see [`crate::interest`] and [`crate::sequence`]); these
//! scalar versions double as reference implementations in tests.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SigmaError};
use crate::scalar::Scalar;

/// Networks emit log-std, clamped to this interval before exponentiation.
pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Uniform noise is kept this far from 0 and 1 before the double log.
pub const GUMBEL_CLIP: f64 = 1e-10;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<T> {
    mean: Vec<T>,
    std: Vec<T>,
}

impl<T: Scalar> DiagGaussian<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(SigmaError::Shape(format!(
                "mean has {} entries, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(bad) = std.iter().find(|s| !(**s > T::zero()) || !s.is_finite()) {
            return Err(SigmaError::Domain(format!(
                "standard deviation must be positive and finite, got {bad}"
            )));
        }
        Ok(DiagGaussian { mean, std })
    }

    /// Builds from unconstrained log-std, clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn from_log_std(mean: Vec<T>, log_std: &[T]) -> Result<Self> {
        let std = log_std.iter().map(|&l| clamp_log_std(l).exp()).collect();
        Self::new(mean, std)
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![T::zero(); dim],
            std: vec![T::one(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> &[T] {
        &self.std
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let noise = standard_normal_vec(self.dim(), rng);
        reparameterize(self, &noise).expect("noise sized to the distribution")
    }
}

pub fn clamp_log_std<T: Scalar>(log_std: T) -> T {
    log_std.max(T::of(LOG_STD_MIN)).min(T::of(LOG_STD_MAX))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture<T> {
    weights: Vec<T>,
    components: Vec<DiagGaussian<T>>,
}

impl<T: Scalar> GaussianMixture<T> {
    pub fn new(weights: Vec<T>, components: Vec<DiagGaussian<T>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(SigmaError::Shape(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= T::zero())) {
            return Err(SigmaError::Domain(format!(
                "mixture weight must be nonnegative, got {w}"
            )));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-6) {
            return Err(SigmaError::Domain(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(SigmaError::Shape("mixture components differ in dimension".into()));
        }
        Ok(GaussianMixture { weights, components })
    }

    pub fn single(component: DiagGaussian<T>) -> Self {
        GaussianMixture {
            weights: vec![T::one()],
            components: vec![component],
        }
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn components(&self) -> &[DiagGaussian<T>] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
}

/// `KL(q ‖ N(0, I)) = ½ Σ_j (σ_j² + μ_j² − 1 − log σ_j²)`.
pub fn kl_to_standard<T: Scalar>(q: &DiagGaussian<T>) -> T {
    let half = T::of(0.5);
    q.mean
        .iter()
        .zip(&q.std)
        .map(|(&m, &s)| {
            let v = s * s;
            half * (v + m * m - T::one() - v.ln())
        })
        .sum()
}

/// Closed-form KL between two diagonal Gaussians.
pub fn kl_between<T: Scalar>(q: &DiagGaussian<T>, p: &DiagGaussian<T>) -> Result<T> {
    check_dim(q.dim(), p.dim())?;
    let half = T::of(0.5);
    Ok((0..q.dim())
        .map(|j| {
            let (mq, sq, mp, sp) = (q.mean[j], q.std[j], p.mean[j], p.std[j]);
            let d = mq - mp;
            (sp / sq).ln() + (sq * sq + d * d) / (T::of(2.0) * sp * sp) - half
        })
        .sum())
}

fn check_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(SigmaError::Shape(format!("dimension {a} vs {b}")));
    }
    Ok(())
}

pub fn log_density<T: Scalar>(x: &[T], q: &DiagGaussian<T>) -> Result<T> {
    check_dim(x.len(), q.dim())?;
    let c = T::of(HALF_LN_2PI);
    let half = T::of(0.5);
    Ok(x.iter()
        .zip(&q.mean)
        .zip(&q.std)
        .map(|((&x, &m), &s)| {
            let z = (x - m) / s;
            -c - s.ln() - half * z * z
        })
        .sum())
}

/// `log Σ_i w_i N(x | m_i, s_i² I)` via log-sum-exp.
pub fn log_density_mixture<T: Scalar>(x: &[T], p: &GaussianMixture<T>) -> Result<T> {
    let mut terms = Vec::with_capacity(p.weights.len());
    for (&w, comp) in p.weights.iter().zip(&p.components) {
        terms.push(w.ln() + log_density(x, comp)?);
    }
    Ok(log_sum_exp(&terms))
}

pub fn log_sum_exp<T: Scalar>(terms: &[T]) -> T {
    let max = terms.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        return max;
    }
    max + terms.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// `mean + std ⊙ noise`.
pub fn reparameterize<T: Scalar>(q: &DiagGaussian<T>, noise: &[T]) -> Result<Vec<T>> {
    check_dim(noise.len(), q.dim())?;
    Ok(q.mean
        .iter()
        .zip(&q.std)
        .zip(noise)
        .map(|((&m, &s), &e)| m + s * e)
        .collect())
}

pub fn standard_normal_vec<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        })
        .collect()
}

/// `−log(−log u)` with `u` clipped into `[GUMBEL_CLIP, 1 − GUMBEL_CLIP]`
/// (or the type's epsilon, if coarser).
pub fn gumbel_from_uniform<T: Scalar>(u: T) -> T {
    let eps = T::of(GUMBEL_CLIP).max(T::epsilon());
    let u = u.max(eps).min(T::one() - eps);
    -(-u.ln()).ln()
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| (l - lse).exp()).collect()
}

/// Relaxed categorical sample `softmax((logits + g) / temperature)`.
pub fn gumbel_softmax<T: Scalar>(logits: &[T], temperature: T, uniform: &[T]) -> Result<Vec<T>> {
    if !(temperature > T::zero()) {
        return Err(SigmaError::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_dim(logits.len(), uniform.len())?;
    let perturbed: Vec<T> = logits
        .iter()
        .zip(uniform)
        .map(|(&l, &u)| (l + gumbel_from_uniform(u)) / temperature)
        .collect();
    Ok(softmax(&perturbed))
}

/// Straight-through sample: the one-hot argmax (forward) and the relaxed
/// sample it stands in for (backward).
#[derive(Clone, Debug, PartialEq)]
pub struct HardSample<T> {
    pub one_hot: Vec<T>,
    pub relaxed: Vec<T>,
    pub index: usize,
}

pub fn gumbel_softmax_hard<T: Scalar>(logits: &[T], temperature: T, uniform: &[T]) -> Result<HardSample<T>> {
    let relaxed = gumbel_softmax(logits, temperature, uniform)?;
    let index = argmax(&relaxed);
    let mut one_hot = vec![T::zero(); relaxed.len()];
    one_hot[index] = T::one();
    Ok(HardSample {
        one_hot,
        relaxed,
        index,
    })
}

/// First index of the maximum entry.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Monte-Carlo estimate of `KL(q ‖ p)` from `n` reparameterized samples of `q`.
pub fn mc_kl<T: Scalar, R: Rng + ?Sized>(
    q: &DiagGaussian<T>,
    p: &GaussianMixture<T>,
    n: usize,
    rng: &mut R,
) -> Result<T> {
    check_dim(q.dim(), p.dim())?;
    let mut total = 0.0f64;
    for _ in 0..n.max(1) {
        let z = q.sample(rng);
        total += (log_density(&z, q)? - log_density_mixture(&z, p)?).as_f64();
    }
    Ok(T::of(total / n.max(1) as f64))
}
