//! Plot point clouds: validation, normalization, sampling to a fixed size and
//! nearest-neighbour upsampling of per-point predictions.

mod grid;
pub mod io;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
pub(crate) use grid::HorizontalGrid;
pub use io::{load_plot, read_labels, read_plots, write_labels, write_plots};

pub const NUM_FEATURES: usize = 9;
pub const DEFAULT_RADIUS: f64 = 10.0;
/// Horizontal radius of the neighbourhood whose lowest point defines the
/// local ground.
pub const LOCAL_GROUND_RADIUS: f64 = 0.5;
/// Slack allowed when checking that points lie inside the plot disk.
pub const RADIUS_TOLERANCE: f64 = 1e-6;

/// Column indices of [`NormalizedPlot::features`].
pub mod feature {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const Z: usize = 2;
    pub const R: usize = 3;
    pub const G: usize = 4;
    pub const B: usize = 5;
    pub const NIR: usize = 6;
    pub const INTENSITY: usize = 7;
    pub const RETURN_NUMBER: usize = 8;
    /// The six non-geometric features.
    pub const RADIOMETRIC: [usize; 6] = [R, G, B, NIR, INTENSITY, RETURN_NUMBER];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    pub nir: f64,
    pub intensity: f64,
    pub return_number: u32,
}

impl RawPoint {
    fn validate(&self) -> Result<(), String> {
        let all = [self.x, self.y, self.z, self.r, self.g, self.b, self.nir, self.intensity];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("non-finite feature".into());
        }
        for (name, v) in [("r", self.r), ("g", self.g), ("b", self.b), ("nir", self.nir)] {
            if !(0.0..=255.0).contains(&v) {
                return Err(format!("{name}={v} outside [0, 255]"));
            }
        }
        if self.intensity < 0.0 {
            return Err(format!("negative intensity {}", self.intensity));
        }
        if self.return_number < 1 {
            return Err("return number must be >= 1".into());
        }
        Ok(())
    }
}

/// Occupancy ratios of the lower, medium and higher strata.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

impl Occupancy {
    pub fn new(low: f64, medium: f64, high: f64) -> Self {
        Occupancy { low, medium, high }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Occupancy::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.low, self.medium, self.high]
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in crate::STRATUM_NAMES.iter().zip(self.to_array()) {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} occupancy {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// One cylindrical acquisition in absolute coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub id: String,
    pub points: Vec<RawPoint>,
    pub radius: f64,
    /// Center of the smallest disk enclosing the points.
    pub center: [f64; 2],
    pub labels: Option<Occupancy>,
}

impl Plot {
    /// Validates the points and locates the plot center.
    pub fn new(
        id: impl Into<String>,
        points: Vec<RawPoint>,
        radius: f64,
        labels: Option<Occupancy>,
    ) -> Result<Self> {
        let id = id.into();
        if points.is_empty() {
            return Err(Error::Validation(format!("plot `{id}` has no points")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Validation(format!("plot `{id}`: bad radius {radius}")));
        }
        for (i, p) in points.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::Validation(format!("plot `{id}`, point {i}: {e}")))?;
        }
        if let Some(l) = &labels {
            l.validate()
                .map_err(|e| Error::Validation(format!("plot `{id}`: {e}")))?;
        }
        let xy: Vec<[f64; 2]> = points.iter().map(|p| [p.x, p.y]).collect();
        let (center, enclosing) = enclosing_circle(&xy);
        if enclosing > radius + RADIUS_TOLERANCE {
            let far = xy
                .iter()
                .map(|p| (p[0] - center[0]).hypot(p[1] - center[1]))
                .fold(0.0, f64::max);
            return Err(Error::Validation(format!(
                "plot `{id}`: points spread over a disk of radius {far:.6} m, larger than the plot radius {radius} m"
            )));
        }
        Ok(Plot {
            id,
            points,
            radius,
            center,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Smallest enclosing circle (Welzl, iterative form) over a fixed
/// pseudo-random order, so the result is reproducible.
fn enclosing_circle(points: &[[f64; 2]]) -> ([f64; 2], f64) {
    const EPS: f64 = 1e-9;
    let mut pts = points.to_vec();
    pts.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed));
    let inside = |c: ([f64; 2], f64), p: [f64; 2]| (p[0] - c.0[0]).hypot(p[1] - c.0[1]) <= c.1 + EPS;
    let two = |a: [f64; 2], b: [f64; 2]| {
        let c = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        (c, (a[0] - c[0]).hypot(a[1] - c[1]))
    };
    let three = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| {
        let (bx, by) = (b[0] - a[0], b[1] - a[1]);
        let (cx, cy) = (c[0] - a[0], c[1] - a[1]);
        let d = 2.0 * (bx * cy - by * cx);
        if d.abs() < 1e-14 {
            // Collinear: the widest pair spans the circle.
            let candidates = [two(a, b), two(a, c), two(b, c)];
            return candidates
                .into_iter()
                .fold(candidates[0], |m, x| if x.1 > m.1 { x } else { m });
        }
        let b2 = bx * bx + by * by;
        let c2 = cx * cx + cy * cy;
        let ux = (cy * b2 - by * c2) / d;
        let uy = (bx * c2 - cx * b2) / d;
        ([a[0] + ux, a[1] + uy], ux.hypot(uy))
    };

    let mut circle = (pts[0], 0.0);
    for i in 1..pts.len() {
        if inside(circle, pts[i]) {
            continue;
        }
        circle = (pts[i], 0.0);
        for j in 0..i {
            if inside(circle, pts[j]) {
                continue;
            }
            circle = two(pts[i], pts[j]);
            for k in 0..j {
                if !inside(circle, pts[k]) {
                    circle = three(pts[i], pts[j], pts[k]);
                }
            }
        }
    }
    circle
}

/// A plot mapped to the network's input space.
///
/// Feature columns follow [`feature`]: `x`, `y` in the unit disk (center and
/// scale by the plot radius), height above local ground in meters, `r g b nir`
/// divided by 255, intensity min-max scaled over the plot and return number
/// divided by the plot's largest return number.
#[derive(Clone, Debug)]
pub struct NormalizedPlot {
    pub id: String,
    pub features: Array2<f64>,
    /// Heights above local ground in meters, kept apart from the feature
    /// matrix for the elevation model.
    pub elevations: Vec<f64>,
    pub radius: f64,
    pub labels: Option<Occupancy>,
}

impl NormalizedPlot {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// `x, y, z` columns, the space used for nearest-neighbour upsampling.
    pub fn coordinates(&self) -> ArrayView2<'_, f64> {
        self.features.slice(s![.., 0..3])
    }

    /// Horizontal positions in the unit disk.
    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.features
            .rows()
            .into_iter()
            .map(|r| [r[feature::X], r[feature::Y]])
            .collect()
    }
}

/// Height of every point above the lowest point within `radius` horizontally.
pub fn local_heights(xy: &[[f64; 2]], z: &[f64], radius: f64) -> Vec<f64> {
    let ids: Vec<usize> = (0..xy.len()).collect();
    let grid = HorizontalGrid::build(xy, &ids, radius);
    let r2 = radius * radius;
    (0..xy.len())
        .map(|i| {
            let mut lowest = z[i];
            grid.for_each_candidate(xy[i], radius, |j| {
                let dx = xy[j][0] - xy[i][0];
                let dy = xy[j][1] - xy[i][1];
                if dx * dx + dy * dy <= r2 && z[j] < lowest {
                    lowest = z[j];
                }
            });
            z[i] - lowest
        })
        .collect()
}

pub fn normalize(plot: &Plot) -> NormalizedPlot {
    let n = plot.points.len();
    let xy: Vec<[f64; 2]> = plot.points.iter().map(|p| [p.x, p.y]).collect();
    let z: Vec<f64> = plot.points.iter().map(|p| p.z).collect();
    let heights = local_heights(&xy, &z, LOCAL_GROUND_RADIUS);

    let (i_min, i_max) = plot
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.intensity), hi.max(p.intensity))
        });
    let i_span = i_max - i_min;
    let max_return = plot.points.iter().map(|p| p.return_number).max().unwrap_or(1) as f64;

    let mut features = Array2::<f64>::zeros((n, NUM_FEATURES));
    for (i, (p, mut row)) in plot.points.iter().zip(features.rows_mut()).enumerate() {
        row[feature::X] = ((p.x - plot.center[0]) / plot.radius).clamp(-1.0, 1.0);
        row[feature::Y] = ((p.y - plot.center[1]) / plot.radius).clamp(-1.0, 1.0);
        row[feature::Z] = heights[i];
        row[feature::R] = p.r / 255.0;
        row[feature::G] = p.g / 255.0;
        row[feature::B] = p.b / 255.0;
        row[feature::NIR] = p.nir / 255.0;
        row[feature::INTENSITY] = if i_span > 0.0 {
            (p.intensity - i_min) / i_span
        } else {
            0.0
        };
        row[feature::RETURN_NUMBER] = p.return_number as f64 / max_return;
    }
    NormalizedPlot {
        id: plot.id.clone(),
        features,
        elevations: heights,
        radius: plot.radius,
        labels: plot.labels,
    }
}

/// Indices of `m` points drawn from `n`: a uniform subset when `n >= m`,
/// otherwise every index once plus `m - n` random duplicates, shuffled.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    if n >= m {
        rand::seq::index::sample(rng, n, m).into_vec()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.extend((0..m - n).map(|_| rng.random_range(0..n)));
        idx.shuffle(rng);
        idx
    }
}

#[derive(Clone, Debug)]
pub struct SampledPoints {
    pub features: Array2<f64>,
    pub source_index: Vec<usize>,
}

pub fn sample_points(plot: &NormalizedPlot, m: usize, seed: u64) -> Result<SampledPoints> {
    if m == 0 {
        return Err(Error::Contract("sample size must be >= 1".into()));
    }
    if plot.is_empty() {
        return Err(Error::Contract(format!("plot `{}` has no points", plot.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_index = sample_indices(plot.len(), m, &mut rng);
    let features = plot.features.select(ndarray::Axis(0), &source_index);
    Ok(SampledPoints {
        features,
        source_index,
    })
}

/// Maps each original point to the sampled row whose prediction it takes:
/// its own first sampled copy, or else its nearest sampled neighbour in
/// `(x, y, z)` space.
#[derive(Clone, Debug)]
pub struct Upsampler {
    assignment: Vec<usize>,
    sampled: usize,
}

impl Upsampler {
    /// `coords` holds the `N x 3` positions of the original points.
    pub fn new(coords: ArrayView2<'_, f64>, source_index: &[usize]) -> Result<Self> {
        let n = coords.nrows();
        if n == 0 {
            return Err(Error::Contract("cannot upsample onto zero points".into()));
        }
        if source_index.is_empty() {
            return Err(Error::Contract("no sampled points".into()));
        }
        let mut assignment = vec![usize::MAX; n];
        for (row, &src) in source_index.iter().enumerate() {
            if src >= n {
                return Err(Error::Contract(format!(
                    "source index {src} out of range for {n} points"
                )));
            }
            if assignment[src] == usize::MAX {
                assignment[src] = row;
            }
        }
        let missing: Vec<usize> = (0..n).filter(|&i| assignment[i] == usize::MAX).collect();
        if !missing.is_empty() {
            // Distinct sampled points, each represented by its first row.
            let mut reps: Vec<usize> = source_index
                .iter()
                .enumerate()
                .filter(|&(row, &src)| assignment[src] == row)
                .map(|(_, &src)| src)
                .collect();
            reps.sort_unstable_by_key(|&src| assignment[src]);
            let xy: Vec<[f64; 2]> = (0..n).map(|i| [coords[[i, 0]], coords[[i, 1]]]).collect();
            let cells = ((reps.len() as f64 / 2.0).sqrt().ceil()).max(1.0);
            let (lo, hi) = reps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(xy[i][0]).min(xy[i][1]), hi.max(xy[i][0]).max(xy[i][1]))
            });
            let cell = ((hi - lo) / cells).max(1e-9);
            // Bucket sampled rows, keyed by their position.
            let mut rows_xy = Vec::with_capacity(reps.len());
            for &src in &reps {
                rows_xy.push(xy[src]);
            }
            let ids: Vec<usize> = (0..reps.len()).collect();
            let grid = HorizontalGrid::build(&rows_xy, &ids, cell);
            for &i in &missing {
                let q = [coords[[i, 0]], coords[[i, 1]], coords[[i, 2]]];
                let k = grid
                    .nearest([q[0], q[1]], |k| {
                        let src = reps[k];
                        let d: f64 = (0..3).map(|a| (coords[[src, a]] - q[a]).powi(2)).sum();
                        d
                    })
                    .expect("non-empty grid");
                assignment[i] = assignment[reps[k]];
            }
        }
        Ok(Upsampler {
            assignment,
            sampled: source_index.len(),
        })
    }

    /// Sampled row feeding each original point.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn apply<F: Scalar>(&self, probs: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if probs.nrows() != self.sampled {
            return Err(Error::Contract(format!(
                "expected {} sampled rows, got {}",
                self.sampled,
                probs.nrows()
            )));
        }
        Ok(probs.select(ndarray::Axis(0), &self.assignment))
    }

    /// Adjoint of [`Upsampler::apply`]: sums the gradients of the original
    /// points onto the sampled rows they copied.
    pub fn scatter_back<F: Scalar>(&self, grad: ArrayView2<'_, F>) -> Array2<F> {
        let mut out = Array2::<F>::zeros((self.sampled, grad.ncols()));
        for (row, &src) in grad.rows().into_iter().zip(&self.assignment) {
            let mut dst = out.row_mut(src);
            dst += &row;
        }
        out
    }
}

pub fn upsample_predictions<F: Scalar>(
    probs_m: ArrayView2<'_, F>,
    source_index: &[usize],
    coords: ArrayView2<'_, f64>,
) -> Result<Array2<F>> {
    Upsampler::new(coords, source_index)?.apply(probs_m)
}
