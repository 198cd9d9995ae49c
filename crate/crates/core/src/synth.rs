//! Synthetic plots with exactly known stratum occupancies.
//!
//! A scene is a set of grass patches, bushes and trees over flat or tilted
//! ground. One pulse is fired per sub-cell of every raster pixel; each pulse
//! returns top-down from every surface it crosses, ending on the ground.
//! Within pixels whose center lies in the disk, the vegetation a pulse sees is
//! decided by the pixel center, so the reference rasters are exactly the
//! pixel-center footprints. Labels are footprint areas integrated on a fine
//! grid.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{write_labels, write_plots, Occupancy, Plot, RawPoint, DEFAULT_RADIUS};
use crate::raster::{bin, build_index, pixel_center_in_disk, write_raster_csv, DEFAULT_K};
use crate::STRATUM_NAMES;

/// Cells per side of the grid used to integrate footprint areas.
const FINE_GRID: usize = 1024;
const INTENSITY_SCALE: f64 = 1000.0;
/// Keeps pulses away from pixel edges so that re-centering the plot cannot
/// move them to a neighbouring pixel.
const EDGE_MARGIN: f64 = 1e-6;
/// Chance that a pulse inside a trunk records a bark return.
const TRUNK_RETURN: f64 = 0.15;

/// Mean normalized `(r, g, b, nir, intensity)` of a surface and the standard
/// deviation of the per-point noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub mean: [f64; 5],
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Materials {
    pub soil: Material,
    pub grass: Material,
    pub bush: Material,
    pub leaf: Material,
    pub bark: Material,
}

impl Default for Materials {
    fn default() -> Self {
        let m = |mean| Material { mean, sigma: 0.05 };
        Materials {
            soil: m([0.55, 0.45, 0.35, 0.35, 0.45]),
            grass: m([0.30, 0.55, 0.25, 0.70, 0.60]),
            bush: m([0.25, 0.45, 0.20, 0.60, 0.50]),
            leaf: m([0.20, 0.40, 0.20, 0.75, 0.55]),
            bark: m([0.40, 0.30, 0.25, 0.35, 0.30]),
        }
    }
}

/// Coordinates are relative to the plot center, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrassPatch {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bush {
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
}

/// Crown ellipsoid with horizontal radii `radii[0..2]` and vertical radius
/// `radii[2]`, resting on `base`; the trunk rises from the ground to it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub center: [f64; 2],
    pub radii: [f64; 3],
    pub base: f64,
    pub trunk_radius: f64,
}

impl Tree {
    fn footprint(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        dx * dx + dy * dy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub seed: u64,
    pub radius: f64,
    /// Pulses per square meter.
    pub density: f64,
    pub raster_k: usize,
    /// World coordinates of the plot center and ground height there.
    pub origin: [f64; 3],
    /// Ground slope along x and y.
    pub tilt: [f64; 2],
    pub grass: Vec<GrassPatch>,
    pub bushes: Vec<Bush>,
    pub trees: Vec<Tree>,
    pub materials: Materials,
}

impl SceneSpec {
    /// Bare soil only.
    pub fn empty(id: impl Into<String>, seed: u64) -> Self {
        SceneSpec {
            id: id.into(),
            seed,
            radius: DEFAULT_RADIUS,
            density: 10.0,
            raster_k: DEFAULT_K,
            origin: [0.0, 0.0, 0.0],
            tilt: [0.0, 0.0],
            grass: Vec::new(),
            bushes: Vec::new(),
            trees: Vec::new(),
            materials: Materials::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("scene `{}`: {m}", self.id)));
        if !(self.radius > 0.0 && self.density > 0.0 && self.raster_k >= 2) {
            return fail("radius, density and raster size must be positive".into());
        }
        let inside = |c: [f64; 2], r: f64| r > 0.0 && c[0].hypot(c[1]) + r <= self.radius + 1e-9;
        for g in &self.grass {
            if !inside(g.center, g.radius) {
                return fail(format!("grass patch {g:?} leaves the plot"));
            }
        }
        for b in &self.bushes {
            if !inside(b.center, b.radius) {
                return fail(format!("bush {b:?} leaves the plot"));
            }
            if !(0.5..1.5).contains(&b.height) {
                return fail(format!("bush height {} outside [0.5, 1.5)", b.height));
            }
        }
        for t in &self.trees {
            if !inside(t.center, t.radii[0].max(t.radii[1])) || t.radii[2] <= 0.0 {
                return fail(format!("tree {t:?} leaves the plot"));
            }
            if t.base < 1.5 {
                return fail(format!("crown base {} below 1.5 m", t.base));
            }
            if !(t.trunk_radius > 0.0) {
                return fail(format!("tree {t:?} has no trunk"));
            }
        }
        let all = self.materials;
        for m in [all.soil, all.grass, all.bush, all.leaf, all.bark] {
            if m.mean.iter().any(|v| !(0.0..=1.0).contains(v)) || !(m.sigma >= 0.0) {
                return fail(format!("bad material {m:?}"));
            }
        }
        Ok(())
    }

    fn in_grass(&self, x: f64, y: f64) -> bool {
        self.grass
            .iter()
            .any(|g| (x - g.center[0]).powi(2) + (y - g.center[1]).powi(2) <= g.radius * g.radius)
    }

    /// Height of the tallest bush covering `(x, y)`.
    fn bush_height(&self, x: f64, y: f64) -> Option<f64> {
        self.bushes
            .iter()
            .filter(|b| (x - b.center[0]).powi(2) + (y - b.center[1]).powi(2) <= b.radius * b.radius)
            .map(|b| b.height)
            .reduce(f64::max)
    }

    fn crown_cover(&self, x: f64, y: f64) -> bool {
        self.trees.iter().any(|t| t.footprint(x, y) <= 1.0)
    }
}

/// Ranges used to draw random scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOptions {
    pub radius: f64,
    pub density: f64,
    pub raster_k: usize,
    pub max_tilt: f64,
    pub materials: Materials,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            radius: DEFAULT_RADIUS,
            density: 10.0,
            raster_k: DEFAULT_K,
            max_tilt: 0.0,
            materials: Materials::default(),
        }
    }
}

fn center_within(rng: &mut ChaCha8Rng, max_dist: f64) -> [f64; 2] {
    let r = max_dist.max(0.0) * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [r * a.cos(), r * a.sin()]
}

impl SceneSpec {
    /// A random scene; about one plot in eight has no grass and one in eight
    /// is fully covered by it.
    pub fn random(id: impl Into<String>, seed: u64, options: &SceneOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let r = options.radius;
        let mut spec = SceneSpec::empty(id, seed);
        spec.radius = r;
        spec.density = options.density;
        spec.raster_k = options.raster_k;
        spec.materials = options.materials;
        spec.origin = [
            rng.random_range(0.0..10_000.0),
            rng.random_range(0.0..10_000.0),
            rng.random_range(0.0..500.0),
        ];
        if options.max_tilt > 0.0 {
            spec.tilt = [
                rng.random_range(-options.max_tilt..options.max_tilt),
                rng.random_range(-options.max_tilt..options.max_tilt),
            ];
        }
        let grass_mode = rng.random_range(0..8);
        if grass_mode == 1 {
            spec.grass.push(GrassPatch {
                center: [0.0, 0.0],
                radius: r,
            });
        } else if grass_mode > 1 {
            for _ in 0..rng.random_range(1..=4) {
                let radius = rng.random_range(0.1..0.6) * r;
                spec.grass.push(GrassPatch {
                    center: center_within(&mut rng, r - radius),
                    radius,
                });
            }
        }
        for _ in 0..rng.random_range(0..=6) {
            let radius = rng.random_range(0.4..1.6);
            spec.bushes.push(Bush {
                center: center_within(&mut rng, r - radius),
                radius,
                height: rng.random_range(0.55..1.45),
            });
        }
        for _ in 0..rng.random_range(0..=4) {
            let radii: [f64; 3] = [
                rng.random_range(1.2..3.5),
                rng.random_range(1.2..3.5),
                rng.random_range(0.8..2.5),
            ];
            spec.trees.push(Tree {
                center: center_within(&mut rng, r - radii[0].max(radii[1])),
                radii,
                base: rng.random_range(1.6..4.0),
                trunk_radius: rng.random_range(0.1..0.25),
            });
        }
        spec
    }
}

/// A generated plot with its exact answers.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Carries `labels` as its annotation.
    pub plot: Plot,
    pub labels: Occupancy,
    /// Pixel-center footprints of the three strata, `[i, j]` indexed, zero
    /// outside the disk.
    pub reference: [Array2<f64>; 3],
}

/// Footprint area fractions of the three strata within the disk.
pub fn exact_labels(spec: &SceneSpec) -> Occupancy {
    let n = FINE_GRID;
    let r = spec.radius;
    let cell = 2.0 * r / n as f64;
    let mut cover = vec![[false; 3]; n * n];
    let mut mark = |s: usize, lo: [f64; 2], hi: [f64; 2], inside: &dyn Fn(f64, f64) -> bool| {
        let range = |a: f64, b: f64| {
            let first = (((a + r) / cell).floor().max(0.0)) as usize;
            let last = (((b + r) / cell).ceil() as usize).min(n);
            first..last
        };
        for i in range(lo[0], hi[0]) {
            let x = -r + (i as f64 + 0.5) * cell;
            for j in range(lo[1], hi[1]) {
                let y = -r + (j as f64 + 0.5) * cell;
                if inside(x, y) {
                    cover[i * n + j][s] = true;
                }
            }
        }
    };
    for g in &spec.grass {
        let inside = |x: f64, y: f64| (x - g.center[0]).powi(2) + (y - g.center[1]).powi(2) <= g.radius * g.radius;
        let c = g.center;
        mark(0, [c[0] - g.radius, c[1] - g.radius], [c[0] + g.radius, c[1] + g.radius], &inside);
    }
    for b in &spec.bushes {
        let inside = |x: f64, y: f64| (x - b.center[0]).powi(2) + (y - b.center[1]).powi(2) <= b.radius * b.radius;
        let c = b.center;
        mark(1, [c[0] - b.radius, c[1] - b.radius], [c[0] + b.radius, c[1] + b.radius], &inside);
    }
    for t in &spec.trees {
        let inside = |x: f64, y: f64| t.footprint(x, y) <= 1.0;
        let (c, a) = (t.center, t.radii);
        mark(2, [c[0] - a[0], c[1] - a[1]], [c[0] + a[0], c[1] + a[1]], &inside);
    }
    let mut disk = 0usize;
    let mut counts = [0usize; 3];
    for i in 0..n {
        let x = -r + (i as f64 + 0.5) * cell;
        for j in 0..n {
            let y = -r + (j as f64 + 0.5) * cell;
            if x * x + y * y <= r * r {
                disk += 1;
                for s in 0..3 {
                    counts[s] += cover[i * n + j][s] as usize;
                }
            }
        }
    }
    Occupancy::from_array(counts.map(|c| c as f64 / disk as f64))
}

/// Pixel-center footprints on the scene's raster grid.
pub fn reference_rasters(spec: &SceneSpec) -> [Array2<f64>; 3] {
    let k = spec.raster_k;
    let mut maps = [0, 1, 2].map(|_| Array2::<f64>::zeros((k, k)));
    for i in 0..k {
        for j in 0..k {
            if !pixel_center_in_disk(i, j, k) {
                continue;
            }
            let (x, y) = pixel_center(spec, i, j);
            maps[0][[i, j]] = spec.in_grass(x, y) as u8 as f64;
            maps[1][[i, j]] = spec.bush_height(x, y).is_some() as u8 as f64;
            maps[2][[i, j]] = spec.crown_cover(x, y) as u8 as f64;
        }
    }
    maps
}

fn pixel_center(spec: &SceneSpec, i: usize, j: usize) -> (f64, f64) {
    let cell = 2.0 * spec.radius / spec.raster_k as f64;
    let c = |a: usize| -spec.radius + (a as f64 + 0.5) * cell;
    (c(i), c(j))
}

struct Emitter<'a> {
    spec: &'a SceneSpec,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    points: Vec<RawPoint>,
}

impl Emitter<'_> {
    fn point(&mut self, x: f64, y: f64, height: f64, material: Material) -> RawPoint {
        let s = self.spec;
        let mut f = [0.0; 5];
        for (v, m) in f.iter_mut().zip(material.mean) {
            *v = (m + material.sigma * self.noise.sample(&mut self.rng)).clamp(0.0, 1.0);
        }
        RawPoint {
            x: s.origin[0] + x,
            y: s.origin[1] + y,
            z: s.origin[2] + s.tilt[0] * x + s.tilt[1] * y + height,
            r: 255.0 * f[0],
            g: 255.0 * f[1],
            b: 255.0 * f[2],
            nir: 255.0 * f[3],
            intensity: INTENSITY_SCALE * f[4],
            return_number: 0,
        }
    }

    fn ground_height(&mut self) -> f64 {
        (0.02 * self.noise.sample(&mut self.rng)).abs()
    }

    /// Fires one pulse at `(x, y)`; `cover` is where its vegetation is
    /// looked up.
    fn pulse(&mut self, x: f64, y: f64, cover: (f64, f64)) {
        let s = self.spec;
        let m = s.materials;
        let mut returns: Vec<(f64, Material)> = Vec::new();

        let crown = s
            .trees
            .iter()
            .filter(|t| t.footprint(cover.0, cover.1) <= 1.0)
            .map(|t| {
                let d2 = t.footprint(x, y).min(1.0);
                let half = t.radii[2] * (1.0 - d2).sqrt();
                let mid = t.base + t.radii[2];
                (mid - half, mid + half)
            })
            .reduce(|a, b| if b.1 > a.1 { b } else { a });
        if let Some((bottom, top)) = crown {
            returns.push((top, m.leaf));
            if self.rng.random_bool(0.5) {
                let z = self.rng.random_range(bottom..=top);
                returns.push((z, m.leaf));
            }
        }
        if let Some(h) = s.bush_height(cover.0, cover.1) {
            let top = self.rng.random_range((h - 0.2).max(0.55).min(h)..=h);
            returns.push((top, m.bush));
            if self.rng.random_bool(0.5) {
                let z = self.rng.random_range(0.05..h);
                returns.push((z, m.bush));
            }
        }
        for t in &s.trees {
            if (x - t.center[0]).hypot(y - t.center[1]) <= t.trunk_radius && self.rng.random_bool(TRUNK_RETURN) {
                let z = self.rng.random_range(0.05..t.base);
                returns.push((z, m.bark));
            }
        }
        returns.sort_by(|a, b| b.0.total_cmp(&a.0));
        let ground = if s.in_grass(cover.0, cover.1) {
            let h = self.ground_height() + self.rng.random_range(0.0..0.25);
            (h, m.grass)
        } else {
            (self.ground_height(), m.soil)
        };
        returns.push(ground);
        for (n, (h, material)) in returns.into_iter().enumerate() {
            let mut p = self.point(x, y, h, material);
            p.return_number = n as u32 + 1;
            self.points.push(p);
        }
    }
}

/// Generates the point cloud, labels and reference rasters of a scene.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let r = spec.radius;
    let k = spec.raster_k;
    let cell = 2.0 * r / k as f64;
    let sub = ((spec.density * cell * cell).sqrt().round() as usize).max(1);
    let sub_cell = cell / sub as f64;
    let mut em = Emitter {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        noise: Normal::new(0.0, 1.0).expect("unit normal"),
        points: Vec::new(),
    };

    for a in [0.0, 1.0, 2.0] {
        let angle = a * std::f64::consts::TAU / 3.0;
        let (x, y) = (r * angle.cos(), r * angle.sin());
        em.pulse(x, y, (x, y));
    }
    for i in 0..k {
        for j in 0..k {
            let centered = pixel_center_in_disk(i, j, k);
            let (cx, cy) = pixel_center(spec, i, j);
            let x0 = -r + i as f64 * cell;
            let y0 = -r + j as f64 * cell;
            let mut fired = 0;
            let fire = |em: &mut Emitter, x: f64, y: f64| {
                if x * x + y * y < r * r && bin(x / r, k) == i && bin(y / r, k) == j {
                    let cover = if centered { (cx, cy) } else { (x, y) };
                    em.pulse(x, y, cover);
                    true
                } else {
                    false
                }
            };
            for a in 0..sub {
                for b in 0..sub {
                    let u = em.rng.random_range(EDGE_MARGIN..1.0 - EDGE_MARGIN);
                    let v = em.rng.random_range(EDGE_MARGIN..1.0 - EDGE_MARGIN);
                    let x = x0 + (a as f64 + u) * sub_cell;
                    let y = y0 + (b as f64 + v) * sub_cell;
                    fired += fire(&mut em, x, y) as usize;
                }
            }
            // Pixels whose center is in the disk always get a pulse.
            while centered && fired == 0 {
                let u = em.rng.random_range(EDGE_MARGIN..1.0 - EDGE_MARGIN);
                let v = em.rng.random_range(EDGE_MARGIN..1.0 - EDGE_MARGIN);
                fired += fire(&mut em, x0 + u * cell, y0 + v * cell) as usize;
            }
        }
    }

    let labels = exact_labels(spec);
    let plot = Plot::new(spec.id.clone(), em.points, r, Some(labels))?;
    Ok(Scene {
        spec: spec.clone(),
        plot,
        labels,
        reference: reference_rasters(spec),
    })
}

/// `count` random scenes named `synth_0000`, `synth_0001`, ...
pub fn generate_corpus(count: usize, seed: u64, options: &SceneOptions) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|n| {
            let spec = SceneSpec::random(format!("synth_{n:04}"), rng.random(), options);
            generate(&spec)
        })
        .collect()
}

/// Writes `plots/<id>.csv`, `labels.csv` and `rasters/<id>_<stratum>.csv`.
pub fn write_corpus(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("plots"))?;
    std::fs::create_dir_all(dir.join("rasters"))?;
    for scene in scenes {
        let id = &scene.plot.id;
        write_plots(dir.join("plots").join(format!("{id}.csv")), [&scene.plot])?;
        let index = build_index(&[], scene.spec.raster_k)?;
        for (s, name) in STRATUM_NAMES.iter().enumerate() {
            write_raster_csv(dir.join("rasters").join(format!("{id}_{name}.csv")), &scene.reference[s], &index)?;
        }
    }
    write_labels(dir.join("labels.csv"), scenes.iter().map(|s| (s.plot.id.as_str(), s.labels)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{feature, normalize};

    fn disk_pixels(k: usize) -> f64 {
        (0..k * k).filter(|p| pixel_center_in_disk(p / k, p % k, k)).count() as f64
    }

    #[test]
    fn bare_soil_scene() {
        let scene = generate(&SceneSpec::empty("e", 1)).unwrap();
        assert_eq!(scene.labels, Occupancy::new(0.0, 0.0, 0.0));
        assert!(scene.reference.iter().all(|m| m.sum() == 0.0));
        assert!(scene.plot.points.iter().all(|p| p.return_number == 1));
        assert!((scene.plot.center[0]).abs() < 1e-9 && (scene.plot.center[1]).abs() < 1e-9);
    }

    #[test]
    fn full_grass_cover() {
        let mut spec = SceneSpec::empty("g", 2);
        spec.grass.push(GrassPatch {
            center: [0.0, 0.0],
            radius: 10.0,
        });
        let scene = generate(&spec).unwrap();
        assert_eq!(scene.labels, Occupancy::new(1.0, 0.0, 0.0));
        assert_eq!(scene.reference[0].sum(), disk_pixels(32));
    }

    #[test]
    fn centered_crown_area() {
        for r in [2.0, 4.5, 7.0] {
            let mut spec = SceneSpec::empty("t", 3);
            spec.trees.push(Tree {
                center: [0.0, 0.0],
                radii: [r, r, 1.5],
                base: 2.0,
                trunk_radius: 0.2,
            });
            let scene = generate(&spec).unwrap();
            let analytic = r * r / 100.0;
            let cell = 20.0 / 32.0;
            let bound = 2.0 * std::f64::consts::PI * r * cell / (std::f64::consts::PI * 100.0);
            assert!((scene.labels.high - analytic).abs() < 0.002, "{r}: {}", scene.labels.high);
            let pixel = scene.reference[2].sum() / disk_pixels(32);
            assert!((pixel - analytic).abs() <= bound, "{r}: {pixel} vs {analytic}");
        }
    }

    #[test]
    fn labels_track_reference_rasters() {
        let options = SceneOptions::default();
        let d = disk_pixels(32);
        for seed in 0..20 {
            let scene = generate(&SceneSpec::random("s", seed, &options)).unwrap();
            let spec = &scene.spec;
            // Pixel-center sampling misclassifies at most the pixels cut by
            // a footprint boundary, about one per cell length of perimeter.
            let cell = 20.0 / 32.0;
            let perimeter = [
                spec.grass.iter().map(|g| g.radius).sum::<f64>(),
                spec.bushes.iter().map(|b| b.radius).sum::<f64>(),
                spec.trees.iter().map(|t| t.radii[0].max(t.radii[1])).sum::<f64>(),
            ]
            .map(|r| std::f64::consts::TAU * r / cell);
            for s in 0..3 {
                let pixel = scene.reference[s].sum() / d;
                let label = scene.labels.to_array()[s];
                assert!((pixel - label).abs() <= (perimeter[s] + 1.0) / d, "seed {seed} stratum {s}: {pixel} vs {label}");
            }
        }
    }

    #[test]
    fn returns_sit_in_their_height_bands() {
        let mut spec = SceneSpec::empty("mix", 5);
        spec.materials.leaf.sigma = 0.0;
        spec.materials.bush.sigma = 0.0;
        spec.trees.push(Tree {
            center: [3.0, 0.0],
            radii: [2.0, 3.0, 1.0],
            base: 1.6,
            trunk_radius: 0.2,
        });
        spec.bushes.push(Bush {
            center: [-4.0, 2.0],
            radius: 1.5,
            height: 0.9,
        });
        let scene = generate(&spec).unwrap();
        let norm = normalize(&scene.plot);
        let is = |p: &RawPoint, m: Material| (p.r - 255.0 * m.mean[0]).abs() < 1e-9 && (p.nir - 255.0 * m.mean[3]).abs() < 1e-9;
        let (mut leaves, mut bush_tops) = (0, 0);
        for (n, p) in scene.plot.points.iter().enumerate() {
            let h = norm.elevations[n];
            assert!(norm.features[[n, feature::Z]] >= 0.0);
            if is(p, spec.materials.leaf) {
                leaves += 1;
                assert!(h > 1.5, "crown point at {h}");
            }
            if is(p, spec.materials.bush) && p.return_number == 1 {
                bush_tops += 1;
                assert!((0.5..1.5).contains(&h), "bush top at {h}");
            }
            if h > 1.5 {
                let (i, j) = (bin(norm.features[[n, 0]], 32), bin(norm.features[[n, 1]], 32));
                let (cx, cy) = pixel_center(&spec, i, j);
                assert!(spec.crown_cover(cx, cy), "point at {h} outside the crown");
            }
        }
        assert!(leaves > 100 && bush_tops > 30);
    }

    #[test]
    fn determinism_and_validation() {
        let options = SceneOptions::default();
        let a = generate_corpus(3, 9, &options).unwrap();
        let b = generate_corpus(3, 9, &options).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.plot, y.plot);
        }
        let mut spec = SceneSpec::empty("bad", 0);
        spec.bushes.push(Bush {
            center: [9.5, 0.0],
            radius: 1.0,
            height: 1.0,
        });
        assert!(generate(&spec).is_err());
        let mut spec = SceneSpec::empty("bad", 0);
        spec.trees.push(Tree {
            center: [0.0, 0.0],
            radii: [1.0, 1.0, 1.0],
            base: 1.2,
            trunk_radius: 0.1,
        });
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn every_disk_pixel_holds_points() {
        let scene = generate(&SceneSpec::random("p", 4, &SceneOptions::default())).unwrap();
        let norm = normalize(&scene.plot);
        let index = build_index(&norm.xy(), 32).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                if index.in_disk(i, j) {
                    assert!(!index.points_in(i, j).is_empty());
                }
            }
        }
    }
}
