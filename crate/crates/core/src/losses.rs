//! Loss terms on one plot and their gradients with respect to the per-point
//! class probabilities.
//!
//! * data: smooth L1 distance between predicted and annotated occupancies,
//! * elevation: mean negative log-likelihood of point heights under the
//!   ground / non-ground Gamma mixture, weighted by the predicted groups,
//! * entropy: mean binary entropy of in-disk pixels, summed over strata.

use ndarray::{Array2, ArrayView2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::GammaMixture;
use crate::raster::{rasterize_backward, PixelIndexMap, StratumRasterSet};
use crate::scalar::Scalar;

/// Smoothing constant inside the square root of [`phi`].
pub const PHI_SMOOTHING: f64 = 1e-4;
/// Pixel probabilities are kept in `[c, 1 - c]` for the entropy, with `c`
/// this constant or the machine epsilon of the scalar, whichever is larger.
pub const PROB_CLAMP: f64 = 1e-8;
pub const DENSITY_FLOOR: f64 = 1e-30;
/// Heights below this are raised to it before evaluating densities.
pub const ELEVATION_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the elevation term.
    pub elevation: f64,
    /// Weight of the entropy term.
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            elevation: 1.0,
            entropy: 0.2,
        }
    }
}

impl LossWeights {
    pub fn new(elevation: f64, entropy: f64) -> Result<Self> {
        if !(elevation >= 0.0 && entropy >= 0.0) {
            return Err(Error::Validation(format!(
                "loss weights must be >= 0, got {elevation}, {entropy}"
            )));
        }
        Ok(LossWeights { elevation, entropy })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<F> {
    pub data: F,
    pub elevation: F,
    pub entropy: F,
    pub total: F,
}

impl<F: Scalar> LossBreakdown<F> {
    pub fn new(data: F, elevation: F, entropy: F, weights: LossWeights) -> Self {
        LossBreakdown {
            data,
            elevation,
            entropy,
            total: data + F::of(weights.elevation) * elevation + F::of(weights.entropy) * entropy,
        }
    }

    /// Term-wise mean over plots.
    pub fn mean(items: &[LossBreakdown<F>]) -> Self {
        let n = F::of(items.len().max(1) as f64);
        let sum = |f: fn(&LossBreakdown<F>) -> F| items.iter().map(f).fold(F::zero(), |a, b| a + b) / n;
        LossBreakdown {
            data: sum(|l| l.data),
            elevation: sum(|l| l.elevation),
            entropy: sum(|l| l.entropy),
            total: sum(|l| l.total),
        }
    }
}

/// Differentiable surrogate of `|x|`.
#[inline]
pub fn phi<F: Scalar>(x: F) -> F {
    (x * x + F::of(PHI_SMOOTHING)).sqrt()
}

#[inline]
pub fn phi_grad<F: Scalar>(x: F) -> F {
    x / phi(x)
}

pub fn data_loss<F: Scalar>(pred: [F; 3], truth: [F; 3]) -> F {
    (0..3).map(|s| phi(pred[s] - truth[s])).fold(F::zero(), |a, b| a + b)
}

pub fn data_loss_grad<F: Scalar>(pred: [F; 3], truth: [F; 3]) -> [F; 3] {
    [0, 1, 2].map(|s| phi_grad(pred[s] - truth[s]))
}

/// Ground and non-ground densities of every point of a plot. They depend only
/// on the heights, so they are computed once per plot.
#[derive(Clone, Debug)]
pub struct ElevationDensities<F> {
    pub ground: Vec<F>,
    pub nonground: Vec<F>,
}

impl<F: Scalar> ElevationDensities<F> {
    pub fn new(elevations: &[f64], mixture: &GammaMixture<F>) -> Result<Self> {
        let mut ground = Vec::with_capacity(elevations.len());
        let mut nonground = Vec::with_capacity(elevations.len());
        for (i, &z) in elevations.iter().enumerate() {
            if !z.is_finite() {
                return Err(Error::Domain(format!("elevation {i} is {z}")));
            }
            let z = F::of(z.max(ELEVATION_FLOOR));
            ground.push(mixture.ground.ln_pdf(z).exp());
            nonground.push(mixture.nonground.ln_pdf(z).exp());
        }
        Ok(ElevationDensities { ground, nonground })
    }

    pub fn len(&self) -> usize {
        self.ground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground.is_empty()
    }
}

fn check_probabilities<F: Scalar>(probs: ArrayView2<'_, F>) -> Result<()> {
    if probs.ncols() != 4 {
        return Err(Error::Contract(format!("expected 4 classes, got {}", probs.ncols())));
    }
    let tol = F::of(1e-6).max(F::of(100.0) * F::epsilon());
    for (n, row) in probs.rows().into_iter().enumerate() {
        let sum = row.iter().fold(F::zero(), |a, &b| a + b);
        if (sum - F::one()).abs() > tol || row.iter().any(|&p| p < -tol || p.is_nan()) {
            return Err(Error::Contract(format!("row {n} is not a probability vector")));
        }
    }
    Ok(())
}

/// Mean elevation negative log-likelihood and its gradient.
pub fn elevation_loss_grad<F: Scalar>(
    probs: ArrayView2<'_, F>,
    densities: &ElevationDensities<F>,
) -> Result<(F, Array2<F>)> {
    check_probabilities(probs)?;
    if probs.nrows() != densities.len() || probs.nrows() == 0 {
        return Err(Error::Contract(format!(
            "{} probability rows for {} elevations",
            probs.nrows(),
            densities.len()
        )));
    }
    let n = F::of(probs.nrows() as f64);
    let floor = F::of(DENSITY_FLOOR);
    let mut grad = Array2::<F>::zeros(probs.raw_dim());
    let mut loss = F::zero();
    for (i, (row, mut g)) in probs.rows().into_iter().zip(grad.rows_mut()).enumerate() {
        let (dg, dng) = (densities.ground[i], densities.nonground[i]);
        let inner = (row[0] + row[1]) * dg + (row[2] + row[3]) * dng;
        if inner > floor {
            loss -= inner.ln();
            let scale = -(inner * n).recip();
            g[0] = scale * dg;
            g[1] = scale * dg;
            g[2] = scale * dng;
            g[3] = scale * dng;
        } else {
            loss -= floor.ln();
        }
    }
    Ok((loss / n, grad))
}

pub fn elevation_loss<F: Scalar>(
    probs: ArrayView2<'_, F>,
    elevations: &[f64],
    mixture: &GammaMixture<F>,
) -> Result<F> {
    let densities = ElevationDensities::new(elevations, mixture)?;
    Ok(elevation_loss_grad(probs, &densities)?.0)
}

fn prob_clamp<F: Scalar>() -> F {
    F::of(PROB_CLAMP).max(F::epsilon())
}

#[inline]
fn binary_entropy<F: Scalar>(p: F) -> F {
    let lo = prob_clamp::<F>();
    let p = p.max(lo).min(F::one() - lo);
    -(p * p.ln() + (F::one() - p) * (F::one() - p).ln())
}

/// Entropy penalty and its gradient with respect to every pixel.
pub fn entropy_loss_grad<F: Scalar>(rasters: &StratumRasterSet<F>) -> (F, [Array2<F>; 3]) {
    let k = rasters.k();
    let d = F::of(rasters.disk_pixels as f64);
    let lo = prob_clamp::<F>();
    let hi = F::one() - lo;
    let mut total = F::zero();
    let grads = [0, 1, 2].map(|s| {
        let map = &rasters.maps[s];
        let mut g = Array2::<F>::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                if !rasters.in_disk(i, j) {
                    continue;
                }
                let p = map[[i, j]];
                total += binary_entropy(p);
                if p > lo && p < hi {
                    g[[i, j]] = ((F::one() - p) / p).ln() / d;
                }
            }
        }
        g
    });
    (total / d, grads)
}

pub fn entropy_loss<F: Scalar>(rasters: &StratumRasterSet<F>) -> F {
    entropy_loss_grad(rasters).0
}

/// Everything the loss of one plot depends on.
pub struct PlotLossInputs<'a, F> {
    /// `N x 4` probabilities of the plot's original points.
    pub probs: ArrayView2<'a, F>,
    pub rasters: &'a StratumRasterSet<F>,
    pub index: &'a PixelIndexMap,
    pub densities: &'a ElevationDensities<F>,
    pub truth: [F; 3],
}

/// Weighted loss of one plot.
pub fn global_loss<F: Scalar>(inputs: &PlotLossInputs<'_, F>, weights: LossWeights) -> Result<LossBreakdown<F>> {
    let data = data_loss(inputs.rasters.occupancy, inputs.truth);
    let elevation = if weights.elevation > 0.0 {
        elevation_loss_grad(inputs.probs, inputs.densities)?.0
    } else {
        F::zero()
    };
    let entropy = entropy_loss(inputs.rasters);
    Ok(LossBreakdown::new(data, elevation, entropy, weights))
}

/// Weighted loss of one plot and the gradient of `scale * total` with respect
/// to the `N x 4` probabilities.
pub fn global_loss_grad<F: Scalar>(
    inputs: &PlotLossInputs<'_, F>,
    weights: LossWeights,
    scale: F,
) -> Result<(LossBreakdown<F>, Array2<F>)> {
    let occ = inputs.rasters.occupancy;
    let data = data_loss(occ, inputs.truth);
    let d_occ = data_loss_grad(occ, inputs.truth).map(|g| g * scale);

    let (entropy, mut d_maps) = entropy_loss_grad(inputs.rasters);
    let mu = F::of(weights.entropy) * scale;
    for m in d_maps.iter_mut() {
        m.mapv_inplace(|g| g * mu);
    }
    let mut grad = rasterize_backward(inputs.rasters, inputs.index, Some(&d_maps), d_occ)?;

    let elevation = if weights.elevation > 0.0 {
        let (value, g) = elevation_loss_grad(inputs.probs, inputs.densities)?;
        grad.scaled_add(F::of(weights.elevation) * scale, &g);
        value
    } else {
        F::zero()
    };
    Ok((LossBreakdown::new(data, elevation, entropy, weights), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamma::GammaComponent;
    use crate::raster::{build_index, rasterize};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mixture() -> GammaMixture<f64> {
        GammaMixture::new(
            GammaComponent::new(1.2, 10.0).unwrap(),
            GammaComponent::new(3.0, 0.8).unwrap(),
            0.55,
        )
        .unwrap()
    }

    #[test]
    fn data_loss_values() {
        assert_relative_eq!(data_loss([0.2, 0.4, 0.6], [0.2, 0.4, 0.6]), 0.03, max_relative = 1e-12);
        assert_relative_eq!(
            data_loss([1.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
            1.0001f64.sqrt() + 0.02,
            max_relative = 1e-12
        );
        assert_eq!(phi_grad(0.0f64), 0.0);
        let h = 1e-6;
        let fd = (phi(0.5 + h) - phi(0.5 - h)) / (2.0 * h);
        assert!((phi_grad(0.5f64) - fd).abs() < 1e-8);
        assert_relative_eq!(phi_grad(0.5f64), 0.5 / 0.2501f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn elevation_loss_special_cases() {
        let m = mixture();
        let z = 0.8;
        let ground_only = array![[0.3, 0.7, 0.0, 0.0]];
        let v = elevation_loss(ground_only.view(), &[z], &m).unwrap();
        assert_relative_eq!(v, -m.ground.pdf(z).unwrap().ln(), max_relative = 1e-12);

        let uniform = array![[0.25, 0.25, 0.25, 0.25]];
        let v = elevation_loss(uniform.view(), &[z], &m).unwrap();
        let expected = -(0.5 * m.ground.pdf(z).unwrap() + 0.5 * m.nonground.pdf(z).unwrap()).ln();
        assert_relative_eq!(v, expected, max_relative = 1e-12);

        let bad = array![[0.5, 0.5, 0.5, 0.0]];
        assert!(matches!(elevation_loss(bad.view(), &[z], &m), Err(Error::Contract(_))));
    }

    #[test]
    fn high_points_prefer_the_nonground_group() {
        let m = mixture();
        let ground = elevation_loss(array![[0.5, 0.5, 0.0, 0.0]].view(), &[5.0], &m).unwrap();
        let nonground = elevation_loss(array![[0.0, 0.0, 0.5, 0.5]].view(), &[5.0], &m).unwrap();
        assert!(nonground < ground);
        // Moving mass toward the denser component lowers the loss.
        for &z in &[0.01, 0.2, 1.0, 3.0] {
            let a = elevation_loss(array![[0.4, 0.2, 0.2, 0.2]].view(), &[z], &m).unwrap();
            let b = elevation_loss(array![[0.5, 0.2, 0.1, 0.2]].view(), &[z], &m).unwrap();
            let ground_denser = m.ground.pdf(z).unwrap() > m.nonground.pdf(z).unwrap();
            assert_eq!(b < a, ground_denser, "z = {z}");
        }
    }

    #[test]
    fn elevation_gradient_matches_finite_differences() {
        let m = mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..4.0)).collect();
        let probs = Array2::from_shape_fn((20, 4), |_| rng.random_range(0.05..1.0));
        let dens = ElevationDensities::new(&z, &m).unwrap();
        let (_, g) = {
            // The gradient formula does not use normalization, so evaluate
            // on normalized rows and perturb freely.
            let mut p = probs.clone();
            for mut r in p.rows_mut() {
                let s = r.sum();
                r /= s;
            }
            let out = elevation_loss_grad(p.view(), &dens).unwrap();
            (p, out.1)
        };
        let mut p = probs.clone();
        for mut r in p.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        let value = |q: &Array2<f64>| {
            let n = q.nrows() as f64;
            -(0..q.nrows())
                .map(|i| ((q[[i, 0]] + q[[i, 1]]) * dens.ground[i] + (q[[i, 2]] + q[[i, 3]]) * dens.nonground[i]).ln())
                .sum::<f64>()
                / n
        };
        let h = 1e-6;
        for i in 0..20 {
            for c in 0..4 {
                let mut a = p.clone();
                a[[i, c]] += h;
                let mut b = p.clone();
                b[[i, c]] -= h;
                let fd = (value(&a) - value(&b)) / (2.0 * h);
                assert!((fd - g[[i, c]]).abs() < 1e-7, "{fd} vs {}", g[[i, c]]);
            }
        }
    }

    fn rasters_with_values(values: &[f64], k: usize) -> (StratumRasterSet<f64>, PixelIndexMap) {
        // One point per in-disk pixel; all three strata read `values`.
        let mut xy = Vec::new();
        for i in 0..k {
            for j in 0..k {
                if crate::raster::pixel_center_in_disk(i, j, k) {
                    let c = |a: usize| -1.0 + (a as f64 + 0.5) * 2.0 / k as f64;
                    xy.push([c(i), c(j)]);
                }
            }
        }
        let idx = build_index(&xy, k).unwrap();
        let probs = Array2::from_shape_fn((xy.len(), 4), |(n, c)| {
            if c == 0 {
                0.0
            } else {
                values[n % values.len()]
            }
        });
        (rasterize(probs.view(), &idx).unwrap(), idx)
    }

    #[test]
    fn entropy_of_crisp_and_fuzzy_maps() {
        let (crisp, _) = rasters_with_values(&[0.0, 1.0], 16);
        assert!(entropy_loss(&crisp) < 1e-6);
        let (fuzzy, _) = rasters_with_values(&[0.5], 16);
        assert_relative_eq!(entropy_loss(&fuzzy), 3.0 * 2.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn saturated_single_precision_pixels_stay_finite() {
        let (_, idx) = rasters_with_values(&[0.0], 16);
        let probs = Array2::from_shape_fn((idx.n_points(), 4), |(n, c)| match (c, n % 2) {
            (0, _) => 0.0f32,
            (_, 0) => 1.0,
            _ => 0.0,
        });
        let crisp = rasterize(probs.view(), &idx).unwrap();
        let (e, g) = entropy_loss_grad(&crisp);
        assert!(e.is_finite() && e < 1e-4, "{e}");
        assert!(g.iter().all(|m| m.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn entropy_gradient_at_a_pixel() {
        let (r, _) = rasters_with_values(&[0.3], 8);
        let (_, g) = entropy_loss_grad(&r);
        let d = r.disk_pixels as f64;
        let (i, j) = (4, 4);
        assert_relative_eq!(g[1][[i, j]], -(0.3f64 / 0.7).ln() / d, max_relative = 1e-14);
        let h = 1e-6;
        let fd = (binary_entropy(0.3 + h) - binary_entropy(0.3 - h)) / (2.0 * h) / d;
        assert!((fd - g[1][[i, j]]).abs() < 1e-8);
    }

    #[test]
    fn weighted_sum_and_reductions() {
        let w = LossWeights::default();
        let l = LossBreakdown::new(0.1, 2.0, 0.5, w);
        assert_eq!(l.total, 0.1 + 1.0 * 2.0 + 0.2 * 0.5);
        let l = LossBreakdown::new(0.1, 2.0, 0.5, LossWeights::new(0.0, 0.0).unwrap());
        assert_eq!(l.total, 0.1);
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        let mean = LossBreakdown::mean(&[LossBreakdown::new(1.0, 0.0, 0.0, w), LossBreakdown::new(3.0, 0.0, 0.0, w)]);
        assert_eq!(mean.data, 2.0);
    }

    #[test]
    fn global_gradient_matches_finite_differences() {
        let m = mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 40;
        let xy: Vec<[f64; 2]> = (0..n)
            .map(|_| loop {
                let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                if p[0] * p[0] + p[1] * p[1] <= 0.9 {
                    break p;
                }
            })
            .collect();
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let idx = build_index(&xy, 4).unwrap();
        let mut probs = Array2::from_shape_fn((n, 4), |_| rng.random_range(0.05..1.0));
        for mut r in probs.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        let dens = ElevationDensities::new(&z, &m).unwrap();
        let truth = [0.3, 0.5, 0.2];
        let w = LossWeights::default();
        let total = |p: &Array2<f64>| {
            let r = rasterize(p.view(), &idx).unwrap();
            let data = data_loss(r.occupancy, truth);
            let ent = entropy_loss(&r);
            let elev = -(0..n)
                .map(|i| ((p[[i, 0]] + p[[i, 1]]) * dens.ground[i] + (p[[i, 2]] + p[[i, 3]]) * dens.nonground[i]).ln())
                .sum::<f64>()
                / n as f64;
            data + w.elevation * elev + w.entropy * ent
        };
        let r = rasterize(probs.view(), &idx).unwrap();
        let inputs = PlotLossInputs {
            probs: probs.view(),
            rasters: &r,
            index: &idx,
            densities: &dens,
            truth,
        };
        let (loss, g) = global_loss_grad(&inputs, w, 1.0).unwrap();
        assert_relative_eq!(loss.total, total(&probs), max_relative = 1e-12);
        assert_relative_eq!(global_loss(&inputs, w).unwrap().total, loss.total, max_relative = 1e-14);
        let h = 1e-7;
        for i in 0..n {
            for c in 0..4 {
                let mut a = probs.clone();
                a[[i, c]] += h;
                let mut b = probs.clone();
                b[[i, c]] -= h;
                let fd = (total(&a) - total(&b)) / (2.0 * h);
                assert!((fd - g[[i, c]]).abs() < 1e-6, "({i},{c}) {fd} vs {}", g[[i, c]]);
            }
        }
    }
}
