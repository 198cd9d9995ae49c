//! Two-component Gamma mixture over point heights, fitted by
//! expectation / conditional maximization.
//!
//! Components use the shape / rate parameterization:
//! `pdf(z) = rate^shape z^(shape-1) exp(-rate z) / Gamma(shape)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Value substituted for heights of exactly zero before fitting.
pub const ZERO_ELEVATION: f64 = 1e-4;
/// Mixture weights below this end the fit with [`Error::Degenerate`].
pub const MIN_WEIGHT: f64 = 1e-6;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the Gamma function for `x > 0`.
pub fn ln_gamma<F: Scalar>(x: F) -> F {
    let xf = x.as_f64();
    if xf < 0.5 {
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return F::of((pi / (pi * xf).sin()).ln()) - ln_gamma(F::one() - x);
    }
    let x = xf - 1.0;
    let mut acc = LANCZOS[0];
    for (k, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + k as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    F::of(0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln())
}

fn check_positive<F: Scalar>(x: F, what: &str) -> Result<()> {
    if x.is_finite() && x > F::zero() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} requires x > 0, got {x}")))
    }
}

/// Shifts `x` up by the recurrence until it reaches 6, returning the shifted
/// argument and the accumulated `sum 1/(x+k)^power`.
fn shift_up<F: Scalar>(mut x: F, power: i32) -> (F, F) {
    let six = F::of(6.0);
    let mut acc = F::zero();
    while x < six {
        acc += x.powi(power).recip();
        x += F::one();
    }
    (x, acc)
}

/// Digamma function: recurrence up to `x >= 6` then the asymptotic series.
pub fn digamma<F: Scalar>(x: F) -> Result<F> {
    check_positive(x, "digamma")?;
    let (x, shift) = shift_up(x, 1);
    let inv2 = (x * x).recip();
    // Bernoulli terms B_2k / (2k x^2k), k = 1..7.
    let series = inv2
        * (F::of(1.0 / 12.0)
            - inv2
                * (F::of(1.0 / 120.0)
                    - inv2
                        * (F::of(1.0 / 252.0)
                            - inv2
                                * (F::of(1.0 / 240.0)
                                    - inv2
                                        * (F::of(1.0 / 132.0)
                                            - inv2 * (F::of(691.0 / 32760.0) - inv2 * F::of(1.0 / 12.0)))))));
    Ok(x.ln() - F::of(0.5) / x - series - shift)
}

/// Trigamma function, used by the Newton steps of [`solve_shape`].
pub fn trigamma<F: Scalar>(x: F) -> Result<F> {
    check_positive(x, "trigamma")?;
    let (x, shift) = shift_up(x, 2);
    let inv = x.recip();
    let inv2 = inv * inv;
    let series = inv
        + F::of(0.5) * inv2
        + inv2 * inv
            * (F::of(1.0 / 6.0)
                - inv2
                    * (F::of(1.0 / 30.0)
                        - inv2
                            * (F::of(1.0 / 42.0)
                                - inv2
                                    * (F::of(1.0 / 30.0)
                                        - inv2
                                            * (F::of(5.0 / 66.0)
                                                - inv2 * (F::of(691.0 / 2730.0) - inv2 * F::of(7.0 / 6.0)))))));
    Ok(series + shift)
}

/// `ln(x) - digamma(x)`, evaluated without cancellation for large `x`.
fn ln_minus_digamma<F: Scalar>(x: F) -> F {
    if x >= F::of(6.0) {
        let inv = x.recip();
        let inv2 = inv * inv;
        F::of(0.5) * inv
            + inv2
                * (F::of(1.0 / 12.0)
                    - inv2
                        * (F::of(1.0 / 120.0)
                            - inv2
                                * (F::of(1.0 / 252.0)
                                    - inv2
                                        * (F::of(1.0 / 240.0)
                                            - inv2 * (F::of(1.0 / 132.0) - inv2 * F::of(691.0 / 32760.0))))))
    } else {
        x.ln() - digamma(x).expect("positive argument")
    }
}

/// Maximum-likelihood shape of a weighted Gamma sample.
///
/// Substituting the rate update `rate = shape / mean` into the likelihood
/// leaves `ln(shape) - digamma(shape) = ln(mean) - mean_log`, whose left side
/// decreases monotonically from infinity to zero. Solved by Newton steps kept
/// inside a shrinking bracket.
pub fn solve_shape<F: Scalar>(weighted_log_mean: F, weighted_mean: F, weight_sum: F) -> Result<F> {
    if !(weight_sum > F::zero()) {
        return Err(Error::Contract(format!("weight sum must be > 0, got {weight_sum}")));
    }
    if !(weighted_mean > F::zero() && weighted_mean.is_finite()) {
        return Err(Error::Contract(format!("weighted mean must be > 0, got {weighted_mean}")));
    }
    let target = weighted_mean.ln() - weighted_log_mean;
    if !(target > F::zero()) || !target.is_finite() {
        return Err(Error::Degenerate(format!(
            "all weight sits on a single value (ln(mean) - mean(ln) = {target})"
        )));
    }
    const MAX_ITER: usize = 200;
    const MAX_SHAPE: f64 = 1e12;
    let tol = F::of(1e-10).max(F::of(16.0) * F::epsilon() * target.max(F::one()));

    // Closed-form approximation as the starting point.
    let s = target;
    let three = F::of(3.0);
    let mut shape = (three - s + ((s - three) * (s - three) + F::of(24.0) * s).sqrt()) / (F::of(12.0) * s);
    let mut lo = F::zero();
    let mut hi = F::infinity();
    for _ in 0..MAX_ITER {
        if !(shape <= F::of(MAX_SHAPE)) {
            break;
        }
        let residual = ln_minus_digamma(shape) - target;
        if residual.abs() <= tol {
            return Ok(shape);
        }
        if residual > F::zero() {
            lo = shape;
        } else {
            hi = shape;
        }
        let slope = shape.recip() - trigamma(shape)?;
        let mut next = shape - residual / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() {
                (lo + hi) * F::of(0.5)
            } else {
                shape * F::of(2.0)
            };
        }
        if hi.is_finite() && hi - lo <= F::epsilon() * hi {
            // Bracket exhausted at working precision.
            return Ok(next);
        }
        shape = next;
    }
    Err(Error::MaxIterations {
        what: "gamma shape solver",
        iterations: MAX_ITER,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaComponent<F> {
    pub shape: F,
    pub rate: F,
}

impl<F: Scalar> GammaComponent<F> {
    pub fn new(shape: F, rate: F) -> Result<Self> {
        if !(shape > F::zero() && shape.is_finite() && rate > F::zero() && rate.is_finite()) {
            return Err(Error::Validation(format!(
                "gamma parameters must be positive, got shape {shape}, rate {rate}"
            )));
        }
        Ok(GammaComponent { shape, rate })
    }

    /// Log density for `z > 0`.
    #[inline]
    pub fn ln_pdf(&self, z: F) -> F {
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - F::one()) * z.ln() - self.rate * z
    }

    pub fn pdf(&self, z: F) -> Result<F> {
        if !(z >= F::zero()) {
            return Err(Error::Domain(format!("gamma density needs z >= 0, got {z}")));
        }
        if z == F::zero() {
            return Ok(match self.shape.partial_cmp(&F::one()) {
                Some(std::cmp::Ordering::Greater) => F::zero(),
                Some(std::cmp::Ordering::Equal) => self.rate,
                _ => F::infinity(),
            });
        }
        Ok(self.ln_pdf(z).exp())
    }

    pub fn mean(&self) -> F {
        self.shape / self.rate
    }

    pub fn cast<G: Scalar>(&self) -> GammaComponent<G> {
        GammaComponent {
            shape: G::of(self.shape.as_f64()),
            rate: G::of(self.rate.as_f64()),
        }
    }
}

pub fn gamma_pdf<F: Scalar>(z: F, component: &GammaComponent<F>) -> Result<F> {
    component.pdf(z)
}

/// Ground / non-ground mixture of point heights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaMixture<F> {
    pub ground: GammaComponent<F>,
    pub nonground: GammaComponent<F>,
    /// `[ground, nonground]` weights, summing to one.
    pub weights: [F; 2],
}

#[derive(Serialize, Deserialize)]
struct ComponentFile {
    shape: f64,
    rate: f64,
}

#[derive(Serialize, Deserialize)]
struct MixtureFile {
    ground: ComponentFile,
    nonground: ComponentFile,
    weights: [f64; 2],
}

impl<F: Scalar> GammaMixture<F> {
    pub fn new(ground: GammaComponent<F>, nonground: GammaComponent<F>, ground_weight: F) -> Result<Self> {
        if !(ground_weight > F::zero() && ground_weight < F::one()) {
            return Err(Error::Validation(format!(
                "mixture weight must lie in (0, 1), got {ground_weight}"
            )));
        }
        Ok(GammaMixture {
            ground,
            nonground,
            weights: [ground_weight, F::one() - ground_weight],
        })
    }

    pub fn components(&self) -> [&GammaComponent<F>; 2] {
        [&self.ground, &self.nonground]
    }

    /// Log of the weighted component densities at `z > 0`.
    #[inline]
    pub fn ln_joint(&self, z: F) -> [F; 2] {
        [
            self.weights[0].ln() + self.ground.ln_pdf(z),
            self.weights[1].ln() + self.nonground.ln_pdf(z),
        ]
    }

    /// Posterior probability of each component given `z > 0`.
    pub fn responsibilities(&self, z: F) -> [F; 2] {
        let [a, b] = self.ln_joint(z);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s = ea + eb;
        [ea / s, eb / s]
    }

    pub fn ln_density(&self, z: F) -> F {
        let [a, b] = self.ln_joint(z);
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }

    /// Log-likelihood of heights, zeros replaced by [`ZERO_ELEVATION`].
    pub fn log_likelihood(&self, elevations: &[F]) -> F {
        elevations
            .iter()
            .map(|&z| self.ln_density(clamp_zero(z)))
            .fold(F::zero(), |a, b| a + b)
    }

    pub fn cast<G: Scalar>(&self) -> GammaMixture<G> {
        GammaMixture {
            ground: self.ground.cast(),
            nonground: self.nonground.cast(),
            weights: [G::of(self.weights[0].as_f64()), G::of(self.weights[1].as_f64())],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MixtureFile {
            ground: ComponentFile {
                shape: self.ground.shape.as_f64(),
                rate: self.ground.rate.as_f64(),
            },
            nonground: ComponentFile {
                shape: self.nonground.shape.as_f64(),
                rate: self.nonground.rate.as_f64(),
            },
            weights: [self.weights[0].as_f64(), self.weights[1].as_f64()],
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MixtureFile = serde_json::from_str(text)?;
        let [wg, wng] = file.weights;
        if ((wg + wng) - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("mixture weights sum to {}", wg + wng)));
        }
        GammaMixture::new(
            GammaComponent::new(F::of(file.ground.shape), F::of(file.ground.rate))?,
            GammaComponent::new(F::of(file.nonground.shape), F::of(file.nonground.rate))?,
            F::of(wg),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[inline]
fn clamp_zero<F: Scalar>(z: F) -> F {
    if z == F::zero() {
        F::of(ZERO_ELEVATION)
    } else {
        z
    }
}

fn prepare<F: Scalar>(elevations: &[F]) -> Result<Vec<F>> {
    let mut out = Vec::with_capacity(elevations.len());
    for (i, &z) in elevations.iter().enumerate() {
        if !(z >= F::zero()) || !z.is_finite() {
            return Err(Error::Domain(format!("elevation {i} is {z}, expected >= 0")));
        }
        out.push(clamp_zero(z));
    }
    let first = out.first().copied();
    if out.len() < 2 || out.iter().all(|&z| Some(z) == first) {
        return Err(Error::Degenerate("need at least two distinct elevations".into()));
    }
    Ok(out)
}

/// Moment-matched starting point: the sample is split at its median, each
/// half gives one component, weights start at one half.
pub fn moment_init<F: Scalar>(elevations: &[F]) -> Result<GammaMixture<F>> {
    moment_init_at(elevations, 0.5)
}

/// Like [`moment_init`] with the split at the given quantile of the sample.
pub fn moment_init_at<F: Scalar>(elevations: &[F], quantile: f64) -> Result<GammaMixture<F>> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Domain(format!("split quantile {quantile} outside (0, 1)")));
    }
    let mut z = prepare(elevations)?;
    z.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mid = ((z.len() as f64 * quantile) as usize).clamp(1, z.len() - 1);
    let fit = |part: &[F]| -> Result<GammaComponent<F>> {
        let n = F::of(part.len() as f64);
        let mean = part.iter().copied().sum::<F>() / n;
        let var = part.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        if var > F::zero() {
            GammaComponent::new(mean * mean / var, mean / var)
        } else {
            GammaComponent::new(F::one(), mean.recip())
        }
    };
    GammaMixture::new(fit(&z[..mid])?, fit(&z[mid..])?, F::of(0.5))
}

/// Split quantiles tried by [`ecm_fit_multistart`].
pub const START_QUANTILES: [f64; 5] = [0.2, 0.35, 0.5, 0.65, 0.8];

#[derive(Clone, Copy, Debug)]
pub struct EcmOptions {
    pub max_iter: usize,
    /// Relative change of the log-likelihood below which the fit stops.
    pub tol: f64,
}

impl Default for EcmOptions {
    fn default() -> Self {
        EcmOptions {
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EcmFit<F> {
    pub mixture: GammaMixture<F>,
    /// Log-likelihood of every visited parameter set, starting with `init`.
    pub log_likelihood: Vec<F>,
    pub iterations: usize,
    pub converged: bool,
}

struct Sufficient<F> {
    weight: F,
    sum_z: F,
    sum_ln_z: F,
}

/// One E-step: log-likelihood under `mixture` and the responsibility
/// weighted statistics of both components.
fn expectation<F: Scalar>(z: &[F], ln_z: &[F], mixture: &GammaMixture<F>) -> (F, [Sufficient<F>; 2]) {
    let consts: Vec<(F, F, F)> = mixture
        .components()
        .iter()
        .zip(mixture.weights)
        .map(|(c, w)| (w.ln() + c.shape * c.rate.ln() - ln_gamma(c.shape), c.shape - F::one(), c.rate))
        .collect();
    let mut ll = F::zero();
    let mut stats = [0, 1].map(|_| Sufficient {
        weight: F::zero(),
        sum_z: F::zero(),
        sum_ln_z: F::zero(),
    });
    for (&zi, &lzi) in z.iter().zip(ln_z) {
        let a = consts[0].0 + consts[0].1 * lzi - consts[0].2 * zi;
        let b = consts[1].0 + consts[1].1 * lzi - consts[1].2 * zi;
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s = ea + eb;
        ll += m + s.ln();
        for (st, e) in stats.iter_mut().zip([ea / s, eb / s]) {
            st.weight += e;
            st.sum_z += e * zi;
            st.sum_ln_z += e * lzi;
        }
    }
    (ll, stats)
}

/// Fits the mixture by ECM starting from `init`.
///
/// Each iteration computes responsibilities, then updates the weights, each
/// shape through [`solve_shape`] and each rate as `shape * weight / sum(e z)`.
/// Deterministic: sums run in input order.
pub fn ecm_fit<F: Scalar>(elevations: &[F], init: &GammaMixture<F>, options: EcmOptions) -> Result<EcmFit<F>> {
    let z = prepare(elevations)?;
    let ln_z: Vec<F> = z.iter().map(|v| v.ln()).collect();
    let n = F::of(z.len() as f64);
    let tol = F::of(options.tol);

    let mut mixture = *init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (ll, stats) = expectation(&z, &ln_z, &mixture);
        if let Some(&prev) = trace.last() {
            if (ll - prev).abs() <= tol * prev.abs().max(F::min_positive_value()) {
                converged = true;
            }
        }
        trace.push(ll);
        if converged || iterations == options.max_iter {
            break;
        }
        let mut comps = [mixture.ground, mixture.nonground];
        for (k, (st, comp)) in stats.iter().zip(comps.iter_mut()).enumerate() {
            let weight = st.weight / n;
            if !(weight >= F::of(MIN_WEIGHT)) {
                let name = if k == 0 { "ground" } else { "nonground" };
                return Err(Error::Degenerate(format!(
                    "{name} component weight collapsed to {weight}"
                )));
            }
            let shape = solve_shape(st.sum_ln_z / st.weight, st.sum_z / st.weight, st.weight)?;
            *comp = GammaComponent::new(shape, shape * st.weight / st.sum_z)?;
        }
        let ground_weight = stats[0].weight / (stats[0].weight + stats[1].weight);
        mixture = GammaMixture {
            ground: comps[0],
            nonground: comps[1],
            weights: [ground_weight, F::one() - ground_weight],
        };
        iterations += 1;
    }
    Ok(EcmFit {
        mixture,
        log_likelihood: trace,
        iterations,
        converged,
    })
}

/// Runs [`ecm_fit`] from the moment-matched splits at [`START_QUANTILES`]
/// and keeps the fit with the highest final log-likelihood. Starts that
/// fail are skipped; if all fail, the error of the median start is returned.
pub fn ecm_fit_multistart<F: Scalar>(elevations: &[F], options: EcmOptions) -> Result<EcmFit<F>> {
    let mut best: Option<EcmFit<F>> = None;
    let mut median_error = None;
    for q in START_QUANTILES {
        match moment_init_at(elevations, q).and_then(|init| ecm_fit(elevations, &init, options)) {
            Ok(fit) => {
                let ll = *fit.log_likelihood.last().expect("trace holds the start");
                if best.as_ref().is_none_or(|b| ll > *b.log_likelihood.last().expect("non-empty")) {
                    best = Some(fit);
                }
            }
            Err(e) if q == 0.5 => median_error = Some(e),
            Err(_) => {}
        }
    }
    best.ok_or_else(|| median_error.unwrap_or_else(|| Error::Degenerate("no ECM start succeeded".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma};

    const EULER: f64 = 0.577_215_664_901_532_9;

    fn sample_gamma(shape: f64, rate: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Gamma::new(shape, 1.0 / rate).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    /// Composite Simpson rule on [a, b] with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn pdf_special_values() {
        let exp1 = GammaComponent::new(1.0, 1.0).unwrap();
        assert_relative_eq!(exp1.pdf(1.0).unwrap(), (-1.0f64).exp(), max_relative = 1e-14);
        assert_eq!(GammaComponent::new(2.0, 1.0).unwrap().pdf(0.0).unwrap(), 0.0);
        assert!(matches!(exp1.pdf(-1.0), Err(Error::Domain(_))));
        assert!(GammaComponent::new(0.0, 1.0).is_err());
    }

    #[test]
    fn pdf_integrates_to_one() {
        for &shape in &[0.2f64, 2.2] {
            for &rate in &[0.5f64, 2.5] {
                let c = GammaComponent::new(shape, rate).unwrap();
                // Below shape 1 the density is singular at 0; substitute
                // z = u^(1/shape), under which pdf(z) dz becomes
                // rate^shape exp(-rate z) / (shape Gamma(shape)) du.
                let f = |u: f64| {
                    let z = u.powf(1.0 / shape);
                    (shape * rate.ln() - ln_gamma(shape) - rate * z).exp() / shape
                };
                let total = if shape < 1.0 {
                    simpson(f, 0.0, (80.0 / rate).powf(shape), 200_000)
                } else {
                    simpson(|z| c.pdf(z).unwrap(), 0.0, 80.0 / rate, 200_000)
                };
                assert!((total - 1.0).abs() < 1e-6, "shape {shape} rate {rate}: {total}");
                // The density itself agrees with the substituted integrand.
                let z = 0.7;
                assert_relative_eq!(
                    c.pdf(z).unwrap(),
                    f(z.powf(shape)) * shape * z.powf(shape - 1.0),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn ln_pdf_is_finite_on_its_range() {
        for &shape in &[0.05, 0.3, 1.0, 7.0, 50.0] {
            for &rate in &[0.05, 1.0, 50.0] {
                let c = GammaComponent::new(shape, rate).unwrap();
                for &z in &[1e-6f64, 1e-3, 0.5, 10.0, 1e3] {
                    assert!(!c.ln_pdf(z).is_nan(), "shape {shape} rate {rate} z {z}");
                }
            }
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert_relative_eq!(ln_gamma(1.0f64), 0.0, epsilon = 1e-14);
        assert_relative_eq!(ln_gamma(0.5f64), std::f64::consts::PI.sqrt().ln(), max_relative = 1e-13);
        assert_relative_eq!(ln_gamma(10.0f64), 362_880.0f64.ln(), max_relative = 1e-13);
        assert_relative_eq!(ln_gamma(0.2f64), 1.524_063_822_430_784, max_relative = 1e-12);
    }

    #[test]
    fn digamma_special_values() {
        assert_relative_eq!(digamma(1.0f64).unwrap(), -EULER, max_relative = 1e-10);
        assert_relative_eq!(digamma(2.0f64).unwrap(), 1.0 - EULER, max_relative = 1e-10);
        assert_relative_eq!(
            digamma(0.5f64).unwrap(),
            -EULER - 2.0 * 2.0f64.ln(),
            max_relative = 1e-10
        );
        assert_relative_eq!(digamma(20.0f64).unwrap(), 2.970_523_992_242_149, max_relative = 1e-10);
        assert_relative_eq!(digamma(0.2f64).unwrap(), -5.289_039_896_592_188, max_relative = 1e-10);
        assert!(matches!(digamma(0.0f64), Err(Error::Domain(_))));
        assert!(digamma(-1.0f64).is_err());
    }

    #[test]
    fn digamma_recurrence_and_trigamma() {
        for &x in &[0.01, 0.3, 1.7, 4.2, 9.5, 130.0] {
            let lhs = digamma(x + 1.0).unwrap();
            assert_relative_eq!(lhs, digamma(x).unwrap() + 1.0 / x, max_relative = 1e-12);
            // Trigamma against a central difference of digamma.
            let h = 1e-5 * x;
            let fd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(trigamma(x).unwrap(), fd, max_relative = 1e-6);
        }
        assert_relative_eq!(
            trigamma(1.0f64).unwrap(),
            std::f64::consts::PI.powi(2) / 6.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn shape_of_exponential_data_is_one() {
        // For Exp(rate): ln(mean) - E[ln z] = -ln(rate) + euler + ln(rate).
        let rate: f64 = 3.0;
        let mean = 1.0 / rate;
        let mean_log = -EULER - rate.ln();
        let shape = solve_shape(mean_log, mean, 1.0).unwrap();
        assert_relative_eq!(shape, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn shape_solution_satisfies_the_profile_equation() {
        for &target in &[1e-6, 1e-3, 0.05, 0.5772, 2.0, 8.0, 30.0] {
            let shape: f64 = solve_shape(-target, 1.0, 1.0).unwrap();
            let residual = shape.ln() - digamma(shape).unwrap() - target;
            assert!(shape > 0.0);
            assert!(residual.abs() <= 1e-10 * target.max(1.0), "target {target}: {residual}");
        }
    }

    #[test]
    fn shape_recovered_from_a_large_sample() {
        let z = sample_gamma(2.0, 1.3, 1_000_000, 17);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let mean_log = z.iter().map(|v| v.ln()).sum::<f64>() / n;
        let shape = solve_shape(mean_log, mean, n).unwrap();
        assert!((shape - 2.0).abs() < 0.02, "{shape}");
    }

    #[test]
    fn shape_solver_degenerate_inputs() {
        assert!(matches!(solve_shape(0.0f64, 1.0, 1.0), Err(Error::Degenerate(_))));
        assert!(matches!(
            solve_shape(-1e-300f64, 1.0, 1.0),
            Err(Error::MaxIterations { .. })
        ));
        assert!(solve_shape(0.0f64, 1.0, 0.0).is_err());
        assert!(solve_shape(0.0f64, -1.0, 1.0).is_err());
    }

    fn mixture(wg: f64, g: (f64, f64), ng: (f64, f64)) -> GammaMixture<f64> {
        GammaMixture::new(
            GammaComponent::new(g.0, g.1).unwrap(),
            GammaComponent::new(ng.0, ng.1).unwrap(),
            wg,
        )
        .unwrap()
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let m = mixture(0.55, (0.2, 0.5), (2.2, 2.5));
        for &z in &[1e-4, 0.01, 0.3, 1.0, 4.0, 30.0] {
            let [a, b] = m.responsibilities(z);
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_ecm_step_does_not_decrease_likelihood() {
        let truth = mixture(0.55, (0.2, 0.5), (2.2, 2.5));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Gamma::new(0.2, 1.0 / 0.5).unwrap();
        let ng = Gamma::new(2.2, 1.0 / 2.5).unwrap();
        let z: Vec<f64> = (0..5000)
            .map(|i| if i % 20 < 11 { g.sample(&mut rng) } else { ng.sample(&mut rng) })
            .collect();
        let fit = ecm_fit(&z, &truth, EcmOptions { max_iter: 1, tol: 0.0 }).unwrap();
        assert_eq!(fit.log_likelihood.len(), 2);
        assert!(fit.log_likelihood[1] >= fit.log_likelihood[0] - 1e-9);
    }

    #[test]
    fn multistart_keeps_the_most_likely_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = Gamma::new(0.2, 1.0 / 0.5).unwrap();
        let ng = Gamma::new(2.2, 1.0 / 2.5).unwrap();
        let z: Vec<f64> = (0..20_000)
            .map(|i| if i % 20 < 11 { g.sample(&mut rng) } else { ng.sample(&mut rng) })
            .collect();
        let best = ecm_fit_multistart(&z, EcmOptions::default()).unwrap();
        let ll = *best.log_likelihood.last().unwrap();
        for q in START_QUANTILES {
            let fit = ecm_fit(&z, &moment_init_at(&z, q).unwrap(), EcmOptions::default()).unwrap();
            assert!(ll >= *fit.log_likelihood.last().unwrap());
        }
        let m = best.mixture;
        assert!((m.weights[0] - 0.55).abs() < 0.03, "{m:?}");
        assert!((m.nonground.shape / 2.2 - 1.0).abs() < 0.15, "{m:?}");
        assert!(moment_init_at(&z, 1.0).is_err());
        assert_eq!(moment_init_at(&z, 0.5).unwrap(), moment_init(&z).unwrap());
    }

    #[test]
    fn single_component_data_matches_its_mle() {
        let z = sample_gamma(3.0, 2.0, 20_000, 23);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let mean_log = z.iter().map(|v| v.ln()).sum::<f64>() / n;
        let mle_shape = solve_shape(mean_log, mean, n).unwrap();
        let mle_rate = mle_shape / mean;

        let init = mixture(0.5, (2.0, 2.0), (2.0, 1.0));
        let fit = ecm_fit(&z, &init, EcmOptions::default()).unwrap();
        // The mixture family contains the single MLE, so a converged fit
        // cannot be much worse than it.
        let single = GammaComponent::new(mle_shape, mle_rate).unwrap();
        let single_ll: f64 = z.iter().map(|&v| single.ln_pdf(v)).sum();
        assert!(*fit.log_likelihood.last().unwrap() >= single_ll - 1e-3 * z.len() as f64);
        let w = fit.mixture.weights;
        let pooled_mean = w[0] * fit.mixture.ground.mean() + w[1] * fit.mixture.nonground.mean();
        assert!((pooled_mean - mean).abs() / mean < 0.05);
    }

    #[test]
    fn ecm_rejects_bad_input() {
        let init = mixture(0.5, (1.0, 1.0), (2.0, 1.0));
        assert!(matches!(
            ecm_fit(&[1.0, 1.0, 1.0], &init, EcmOptions::default()),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            ecm_fit(&[1.0, -2.0], &init, EcmOptions::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn collapsing_component_is_reported() {
        // Everything sits far in the ground component's territory.
        let init = mixture(0.5, (1.0, 1.0), (400.0, 1.0));
        let z: Vec<f64> = (1..200).map(|i| i as f64 * 0.01).collect();
        match ecm_fit(&z, &init, EcmOptions::default()) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("nonground"), "{msg}"),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn mixture_json_round_trip() {
        let m = mixture(0.55, (0.2, 0.5), (2.2, 2.5));
        let text = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["ground"]["shape"], 0.2);
        assert_eq!(v["nonground"]["rate"], 2.5);
        assert_eq!(v["weights"][0], 0.55);
        assert_eq!(GammaMixture::<f64>::from_json(&text).unwrap(), m);
        assert!(GammaMixture::<f64>::from_json(
            r#"{"ground":{"shape":1,"rate":1},"nonground":{"shape":1,"rate":1},"weights":[0.7,0.7]}"#
        )
        .is_err());
    }

    #[test]
    fn zero_elevations_are_clamped() {
        let m = mixture(0.5, (0.5, 1.0), (2.0, 1.0));
        assert_eq!(m.log_likelihood(&[0.0]), m.ln_density(ZERO_ELEVATION));
    }
}
