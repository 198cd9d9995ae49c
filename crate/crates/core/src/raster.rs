//! Projection of per-point class probabilities onto `K x K` stratum rasters
//! and their aggregation into plot occupancies.
//!
//! Pixel `(i, j)` covers `x` bin `i` and `y` bin `j` of the unit square,
//! `i = floor((x + 1) K / 2)`. Only pixels whose center lies in the unit disk
//! count; `D` is their number.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::STRATUM_NAMES;

pub const DEFAULT_K: usize = 32;
const NONE: u32 = u32::MAX;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Whether the center of pixel `(i, j)` of a `k`-grid lies in the unit disk.
pub fn pixel_center_in_disk(i: usize, j: usize, k: usize) -> bool {
    let c = |a: usize| -1.0 + (a as f64 + 0.5) * 2.0 / k as f64;
    let (cx, cy) = (c(i), c(j));
    cx * cx + cy * cy <= 1.0
}

/// Pixel bin of a normalized coordinate.
#[inline]
pub fn bin(v: f64, k: usize) -> usize {
    (((v + 1.0) * k as f64 / 2.0).floor() as isize).clamp(0, k as isize - 1) as usize
}

/// Which points fall in which pixel.
#[derive(Clone, Debug)]
pub struct PixelIndexMap {
    k: usize,
    id: u64,
    pixel_of_point: Vec<usize>,
    in_disk: Vec<bool>,
    starts: Vec<usize>,
    members: Vec<usize>,
    disk_pixels: usize,
}

impl PixelIndexMap {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_points(&self) -> usize {
        self.pixel_of_point.len()
    }

    /// Number of pixels inside the disk, `D`.
    pub fn disk_pixels(&self) -> usize {
        self.disk_pixels
    }

    pub fn pixel_of(&self, point: usize) -> (usize, usize) {
        let p = self.pixel_of_point[point];
        (p / self.k, p % self.k)
    }

    pub fn in_disk(&self, i: usize, j: usize) -> bool {
        self.in_disk[i * self.k + j]
    }

    /// Points projecting into pixel `(i, j)`, ascending.
    pub fn points_in(&self, i: usize, j: usize) -> &[usize] {
        let p = i * self.k + j;
        &self.members[self.starts[p]..self.starts[p + 1]]
    }
}

pub fn build_index(xy: &[[f64; 2]], k: usize) -> Result<PixelIndexMap> {
    if k < 2 {
        return Err(Error::Contract(format!("raster size must be >= 2, got {k}")));
    }
    let mut in_disk = vec![false; k * k];
    for i in 0..k {
        for j in 0..k {
            in_disk[i * k + j] = pixel_center_in_disk(i, j, k);
        }
    }
    let pixel_of_point: Vec<usize> = xy.iter().map(|p| bin(p[0], k) * k + bin(p[1], k)).collect();
    let mut starts = vec![0usize; k * k + 1];
    for &p in &pixel_of_point {
        starts[p + 1] += 1;
    }
    for p in 0..k * k {
        starts[p + 1] += starts[p];
    }
    let mut fill = starts.clone();
    let mut members = vec![0usize; xy.len()];
    for (n, &p) in pixel_of_point.iter().enumerate() {
        members[fill[p]] = n;
        fill[p] += 1;
    }
    Ok(PixelIndexMap {
        k,
        id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        disk_pixels: in_disk.iter().filter(|&&b| b).count(),
        pixel_of_point,
        in_disk,
        starts,
        members,
    })
}

/// Occupancy maps of the lower, medium and higher strata for one plot.
#[derive(Clone, Debug)]
pub struct StratumRasterSet<F> {
    /// `[low, medium, high]`, indexed `[i, j]`. Out-of-disk pixels are zero.
    pub maps: [Array2<F>; 3],
    /// Plot occupancies `o_s = sum(in-disk O_s) / D`.
    pub occupancy: [F; 3],
    pub disk_pixels: usize,
    in_disk: Vec<bool>,
    argmax: Vec<[u32; 3]>,
    index_id: u64,
}

impl<F: Scalar> StratumRasterSet<F> {
    pub fn k(&self) -> usize {
        self.maps[0].nrows()
    }

    pub fn in_disk(&self, i: usize, j: usize) -> bool {
        self.in_disk[i * self.k() + j]
    }

    /// Point whose probability sets pixel `(i, j)` of stratum `s`.
    pub fn argmax(&self, s: usize, i: usize, j: usize) -> Option<usize> {
        let a = self.argmax[i * self.k() + j][s];
        (a != NONE).then_some(a as usize)
    }
}

/// Per-pixel maximum of the low, medium and high vegetation probabilities
/// (class columns 1, 2, 3). Ties keep the lowest point index.
pub fn rasterize<F: Scalar>(probs: ArrayView2<'_, F>, index: &PixelIndexMap) -> Result<StratumRasterSet<F>> {
    if probs.nrows() != index.n_points() || probs.ncols() != 4 {
        return Err(Error::Contract(format!(
            "probabilities are {}x{}, index has {} points",
            probs.nrows(),
            probs.ncols(),
            index.n_points()
        )));
    }
    let k = index.k;
    let mut maps = [0, 1, 2].map(|_| Array2::<F>::zeros((k, k)));
    let mut argmax = vec![[NONE; 3]; k * k];
    let mut sums = [F::zero(); 3];
    for i in 0..k {
        for j in 0..k {
            let p = i * k + j;
            if !index.in_disk[p] {
                continue;
            }
            for s in 0..3 {
                let mut best = NONE;
                let mut value = F::zero();
                for &n in index.points_in(i, j) {
                    let v = probs[[n, s + 1]];
                    if best == NONE || v > value {
                        best = n as u32;
                        value = v;
                    }
                }
                argmax[p][s] = best;
                maps[s][[i, j]] = value;
                sums[s] += value;
            }
        }
    }
    let d = F::of(index.disk_pixels as f64);
    Ok(StratumRasterSet {
        maps,
        occupancy: sums.map(|v| v / d),
        disk_pixels: index.disk_pixels,
        in_disk: index.in_disk.clone(),
        argmax,
        index_id: index.id,
    })
}

/// Gradient with respect to the `N x 4` probabilities, given gradients on the
/// pixel maps (optional) and on the three occupancies.
pub fn rasterize_backward<F: Scalar>(
    rasters: &StratumRasterSet<F>,
    index: &PixelIndexMap,
    grad_maps: Option<&[Array2<F>; 3]>,
    grad_occupancy: [F; 3],
) -> Result<Array2<F>> {
    if rasters.index_id != index.id {
        return Err(Error::Contract("rasters were built from a different pixel index".into()));
    }
    let k = index.k;
    let d = F::of(index.disk_pixels as f64);
    let mut grad = Array2::<F>::zeros((index.n_points(), 4));
    for i in 0..k {
        for j in 0..k {
            let p = i * k + j;
            for s in 0..3 {
                let n = rasters.argmax[p][s];
                if n == NONE {
                    continue;
                }
                let mut g = grad_occupancy[s] / d;
                if let Some(maps) = grad_maps {
                    g += maps[s][[i, j]];
                }
                grad[[n as usize, s + 1]] += g;
            }
        }
    }
    Ok(grad)
}

/// Raster rows run from the top (`j = K-1`) down; columns follow `i`.
fn rows_top_down<T>(k: usize, mut cell: impl FnMut(usize, usize) -> T) -> Vec<Vec<T>> {
    (0..k).rev().map(|j| (0..k).map(|i| cell(i, j)).collect()).collect()
}

/// Writes one raster as CSV, out-of-disk cells as `-1`.
pub fn write_raster_csv<F: Scalar>(path: impl AsRef<Path>, map: &Array2<F>, index: &PixelIndexMap) -> Result<()> {
    let k = index.k;
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows_top_down(k, |i, j| {
        if index.in_disk(i, j) {
            map[[i, j]].as_f64().to_string()
        } else {
            "-1".to_string()
        }
    }) {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a raster CSV back into `[i, j]` layout; out-of-disk cells stay `-1`.
pub fn read_raster_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(r, line)| {
            line.split(',')
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| Error::Parse {
                        row: r + 1,
                        column: "raster".into(),
                        message: format!("`{c}` is not a number"),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let k = rows.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Format("raster CSV is not square".into()));
    }
    Ok(Array2::from_shape_fn((k, k), |(i, j)| rows[k - 1 - j][i]))
}

/// Writes one raster as a binary 8-bit PGM, `round(255 * value)`,
/// out-of-disk pixels black.
pub fn write_pgm<F: Scalar>(path: impl AsRef<Path>, map: &Array2<F>, index: &PixelIndexMap) -> Result<()> {
    let k = index.k;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{k} {k}\n255\n")?;
    for row in rows_top_down(k, |i, j| {
        if index.in_disk(i, j) {
            (255.0 * map[[i, j]].as_f64().clamp(0.0, 1.0)).round() as u8
        } else {
            0
        }
    }) {
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `<plot_id>_<stratum>.csv` and `.pgm` for the three strata.
pub fn export_rasters<F: Scalar>(
    dir: impl AsRef<Path>,
    plot_id: &str,
    rasters: &StratumRasterSet<F>,
    index: &PixelIndexMap,
) -> Result<()> {
    let dir = dir.as_ref();
    for (s, name) in STRATUM_NAMES.iter().enumerate() {
        write_raster_csv(dir.join(format!("{plot_id}_{name}.csv")), &rasters.maps[s], index)?;
        write_pgm(dir.join(format!("{plot_id}_{name}.pgm")), &rasters.maps[s], index)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let mut p = Array2::from_shape_fn((n, 4), |_| rng.random::<f64>() + 1e-3);
        for mut row in p.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        p
    }

    fn random_disk_points(n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| loop {
                let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                if p[0] * p[0] + p[1] * p[1] <= 1.0 {
                    break p;
                }
            })
            .collect()
    }

    #[test]
    fn corner_and_center_bins() {
        let eps = 1e-9;
        let idx = build_index(&[[-1.0 + eps, -1.0 + eps], [0.0, 0.0], [1.0, 1.0]], 32).unwrap();
        assert_eq!(idx.pixel_of(0), (0, 0));
        assert_eq!(idx.pixel_of(1), (16, 16));
        assert_eq!(idx.pixel_of(2), (31, 31));
        assert!(matches!(build_index(&[], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn disk_pixel_count_for_k32() {
        let idx = build_index(&[], 32).unwrap();
        let mut count = 0;
        for i in 0..32 {
            for j in 0..32 {
                let (x, y) = (i as f64 + 0.5 - 16.0, j as f64 + 0.5 - 16.0);
                if x * x + y * y <= 256.0 {
                    count += 1;
                }
            }
        }
        assert_eq!(idx.disk_pixels(), count);
        let approx = std::f64::consts::PI / 4.0 * 1024.0;
        assert!((count as f64 - approx).abs() / approx < 0.05);
    }

    #[test]
    fn pixel_takes_the_highest_probability() {
        let xy = [[0.01, 0.01], [0.02, 0.02]];
        let idx = build_index(&xy, 4).unwrap();
        let probs = ndarray::array![[0.1, 0.2, 0.3, 0.4], [0.05, 0.9, 0.05, 0.0]];
        let r = rasterize(probs.view(), &idx).unwrap();
        let (i, j) = idx.pixel_of(0);
        assert_eq!(r.maps[0][[i, j]], 0.9);
        assert_eq!(r.maps[1][[i, j]], 0.3);
        assert_eq!(r.maps[2][[i, j]], 0.4);
        assert_eq!(r.argmax(0, i, j), Some(1));
        // Every other in-disk pixel is empty and reads zero.
        let nonzero = r.maps[0].iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn full_coverage_gives_unit_occupancy() {
        let k = 8;
        let mut xy = Vec::new();
        for i in 0..k {
            for j in 0..k {
                if pixel_center_in_disk(i, j, k) {
                    let c = |a: usize| -1.0 + (a as f64 + 0.5) * 2.0 / k as f64;
                    xy.push([c(i), c(j)]);
                }
            }
        }
        let idx = build_index(&xy, k).unwrap();
        let mut probs = Array2::<f64>::zeros((xy.len(), 4));
        probs.column_mut(1).fill(1.0);
        let r = rasterize(probs.view(), &idx).unwrap();
        assert_eq!(r.occupancy, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_route_gradient_to_lowest_index() {
        let xy = [[0.1, 0.1], [0.11, 0.12], [0.12, 0.1]];
        let idx = build_index(&xy, 4).unwrap();
        let probs = ndarray::array![[0.5, 0.2, 0.2, 0.1], [0.1, 0.7, 0.1, 0.1], [0.1, 0.7, 0.1, 0.1]];
        let r = rasterize(probs.view(), &idx).unwrap();
        let g = rasterize_backward(&r, &idx, None, [1.0, 0.0, 0.0]).unwrap();
        let d = idx.disk_pixels() as f64;
        assert_eq!(g[[1, 1]], 1.0 / d);
        assert_eq!(g[[2, 1]], 0.0);
        // Medium and high ties resolve to point 0.
        let g = rasterize_backward(&r, &idx, None, [0.0, 1.0, 1.0]).unwrap();
        assert_eq!(g[[0, 2]], 1.0 / d);
        assert_eq!(g[[0, 3]], 1.0 / d);
    }

    #[test]
    fn one_point_per_pixel_passes_map_gradients_through() {
        let xy = [[-0.3, -0.3], [0.3, 0.3]];
        let idx = build_index(&xy, 4).unwrap();
        let probs = ndarray::array![[0.25, 0.25, 0.25, 0.25], [0.1, 0.2, 0.3, 0.4]];
        let r = rasterize(probs.view(), &idx).unwrap();
        let mut gm = [0, 1, 2].map(|_| Array2::<f64>::zeros((4, 4)));
        let (i, j) = idx.pixel_of(1);
        gm[2][[i, j]] = 3.0;
        let g = rasterize_backward(&r, &idx, Some(&gm), [0.0; 3]).unwrap();
        assert_eq!(g[[1, 3]], 3.0);
        assert_eq!(g.sum(), 3.0);
    }

    #[test]
    fn stale_index_is_rejected() {
        let xy = [[0.0, 0.0]];
        let a = build_index(&xy, 4).unwrap();
        let b = build_index(&xy, 4).unwrap();
        let probs = ndarray::array![[0.25, 0.25, 0.25, 0.25]];
        let r = rasterize(probs.view(), &a).unwrap();
        assert!(matches!(
            rasterize_backward(&r, &b, None, [1.0; 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn occupancy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xy = random_disk_points(10, &mut rng);
        let idx = build_index(&xy, 4).unwrap();
        let probs = random_probs(10, &mut rng);
        let w = [0.7, -1.3, 2.1];
        let objective = |p: &Array2<f64>| {
            let r = rasterize(p.view(), &idx).unwrap();
            (0..3).map(|s| w[s] * r.occupancy[s]).sum::<f64>()
        };
        let r = rasterize(probs.view(), &idx).unwrap();
        let g = rasterize_backward(&r, &idx, None, w).unwrap();
        let h = 1e-7;
        for n in 0..10 {
            for c in 0..4 {
                let mut plus = probs.clone();
                plus[[n, c]] += h;
                let mut minus = probs.clone();
                minus[[n, c]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!((fd - g[[n, c]]).abs() < 1e-6, "point {n} class {c}: {fd} vs {}", g[[n, c]]);
            }
        }
    }

    #[test]
    fn raster_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xy = random_disk_points(200, &mut rng);
        let idx = build_index(&xy, 8).unwrap();
        let probs = random_probs(200, &mut rng);
        let r = rasterize(probs.view(), &idx).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_rasters(dir.path(), "p7", &r, &idx).unwrap();
        let back = read_raster_csv(dir.path().join("p7_medium.csv")).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if idx.in_disk(i, j) {
                    assert_eq!(back[[i, j]], r.maps[1][[i, j]]);
                } else {
                    assert_eq!(back[[i, j]], -1.0);
                }
            }
        }
        let pgm = std::fs::read(dir.path().join("p7_high.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);
    }

    proptest! {
        #[test]
        fn aggregation_matches_brute_force(seed in any::<u64>(), n in 1usize..300, k in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xy = random_disk_points(n, &mut rng);
            let idx = build_index(&xy, k).unwrap();
            let probs = random_probs(n, &mut rng);
            let r = rasterize(probs.view(), &idx).unwrap();
            for s in 0..3 {
                let mut total = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        if !pixel_center_in_disk(i, j, k) { continue; }
                        let best = (0..n)
                            .filter(|&m| bin(xy[m][0], k) == i && bin(xy[m][1], k) == j)
                            .map(|m| probs[[m, s + 1]])
                            .fold(0.0, f64::max);
                        prop_assert_eq!(r.maps[s][[i, j]], best);
                        total += best;
                    }
                }
                prop_assert_eq!(r.occupancy[s], total / idx.disk_pixels() as f64);
                prop_assert!((0.0..=1.0).contains(&r.occupancy[s]));
            }
        }

        #[test]
        fn raising_a_probability_never_lowers_occupancy(seed in any::<u64>(), bump in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xy = random_disk_points(50, &mut rng);
            let idx = build_index(&xy, 6).unwrap();
            let probs = random_probs(50, &mut rng);
            let before = rasterize(probs.view(), &idx).unwrap();
            let mut raised = probs.clone();
            let n = rng.random_range(0..50);
            let s = rng.random_range(0..3);
            raised[[n, s + 1]] += bump;
            let after = rasterize(raised.view(), &idx).unwrap();
            prop_assert!(after.occupancy[s] >= before.occupancy[s]);
        }
    }
}
