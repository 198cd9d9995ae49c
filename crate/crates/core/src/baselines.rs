//! Reference methods: prototype and height-threshold rules, and a network
//! regressing the three occupancies directly.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{derive_seed, sample_batch, EpochLog, TrainConfig};
use crate::losses::{data_loss, data_loss_grad};
use crate::pointcloud::{feature, NormalizedPlot, Occupancy};
use crate::raster::{build_index, rasterize, PixelIndexMap, StratumRasterSet};
use crate::segnet::{scheduled_learning_rate, AdamState, Mode, RegressionNet};

/// Heights below this are lower stratum.
pub const LOW_CEILING: f64 = 0.5;
/// Heights from [`LOW_CEILING`] up to this are medium stratum, above it high.
pub const MEDIUM_CEILING: f64 = 1.5;

/// Mean non-geometric features of low points on bare and grassed plots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypePair {
    pub bare_soil: [f64; 6],
    pub low_veg: [f64; 6],
}

fn low_point_mean<'a>(plots: impl Iterator<Item = &'a NormalizedPlot>) -> Option<[f64; 6]> {
    let mut sum = [0.0; 6];
    let mut n = 0usize;
    for plot in plots {
        for (row, &h) in plot.features.rows().into_iter().zip(&plot.elevations) {
            if h < LOW_CEILING {
                for (s, &c) in sum.iter_mut().zip(&feature::RADIOMETRIC) {
                    *s += row[c];
                }
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

/// Averages the low points of plots annotated with no lower vegetation
/// (bare soil) and with full lower vegetation.
pub fn fit_prototypes(plots: &[&NormalizedPlot]) -> Result<PrototypePair> {
    let with_low = |target: f64| {
        plots
            .iter()
            .copied()
            .filter(move |p| p.labels.is_some_and(|l| l.low == target))
    };
    let bare_soil = low_point_mean(with_low(0.0)).ok_or_else(|| {
        Error::Validation("no training plot with lower occupancy 0 to form the bare soil prototype".into())
    })?;
    let low_veg = low_point_mean(with_low(1.0)).ok_or_else(|| {
        Error::Validation("no training plot with lower occupancy 1 to form the low vegetation prototype".into())
    })?;
    Ok(PrototypePair { bare_soil, low_veg })
}

pub struct HandcraftedPrediction {
    pub occupancy: Occupancy,
    pub rasters: StratumRasterSet<f64>,
    pub index: PixelIndexMap,
}

fn dist2(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Classifies points by height band and, below 0.5 m, by nearest prototype.
/// A lower pixel is vegetated when at least half of its low points are;
/// medium and high pixels are occupied by any point of their band.
pub fn handcrafted_predict(plot: &NormalizedPlot, protos: &PrototypePair, k: usize) -> Result<HandcraftedPrediction> {
    let n = plot.len();
    let mut classes = Array2::<f64>::zeros((n, 4));
    for (i, (row, &h)) in plot.features.rows().into_iter().zip(&plot.elevations).enumerate() {
        let class = if h < LOW_CEILING {
            let f = feature::RADIOMETRIC.map(|c| row[c]);
            if dist2(&f, &protos.low_veg) <= dist2(&f, &protos.bare_soil) {
                1
            } else {
                0
            }
        } else if h < MEDIUM_CEILING {
            2
        } else {
            3
        };
        classes[[i, class]] = 1.0;
    }
    let index = build_index(&plot.xy(), k)?;
    let mut rasters = rasterize(classes.view(), &index)?;

    let mut voted = 0usize;
    let mut with_low = 0usize;
    let low = &mut rasters.maps[0];
    for i in 0..k {
        for j in 0..k {
            low[[i, j]] = 0.0;
            if !index.in_disk(i, j) {
                continue;
            }
            let (mut veg, mut soil) = (0usize, 0usize);
            for &p in index.points_in(i, j) {
                veg += (classes[[p, 1]] == 1.0) as usize;
                soil += (classes[[p, 0]] == 1.0) as usize;
            }
            if veg + soil == 0 {
                continue;
            }
            with_low += 1;
            if veg >= soil {
                low[[i, j]] = 1.0;
                voted += 1;
            }
        }
    }
    rasters.occupancy[0] = if with_low > 0 {
        voted as f64 / with_low as f64
    } else {
        0.0
    };
    Ok(HandcraftedPrediction {
        occupancy: Occupancy::from_array(rasters.occupancy),
        rasters,
        index,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub m_points: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            epochs: 100,
            batch_size: 20,
            m_points: 2048,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl RegressionConfig {
    /// Same schedule and seed, with the baseline's own point count.
    pub fn from_train(config: &TrainConfig) -> Self {
        RegressionConfig {
            epochs: config.epochs,
            batch_size: config.batch_size,
            m_points: config.m_points.min(2048),
            learning_rate: config.learning_rate,
            seed: config.seed,
        }
    }
}

/// Trains the regression network on `train` and predicts `test`.
pub fn regression_train_predict(
    train: &[&NormalizedPlot],
    test: &[&NormalizedPlot],
    config: &RegressionConfig,
) -> Result<(Vec<Occupancy>, Vec<EpochLog>)> {
    if train.is_empty() || config.epochs == 0 || config.batch_size == 0 || config.m_points == 0 {
        return Err(Error::Contract("regression training needs plots, epochs, batches and points".into()));
    }
    let truths = train
        .iter()
        .map(|p| {
            p.labels
                .map(|l| l.to_array().map(|v| v as f32))
                .ok_or_else(|| Error::Contract(format!("training plot `{}` has no labels", p.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut net = RegressionNet::<f32>::new(derive_seed(&[config.seed, 11]));
    let mut adam = AdamState::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 12]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        adam.learning_rate = scheduled_learning_rate(config.learning_rate, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let plots: Vec<&NormalizedPlot> = chunk.iter().map(|&i| train[i]).collect();
            let (x, _) = sample_batch(&plots, config.m_points, |b| {
                derive_seed(&[config.seed, 13, epoch as u64, chunk[b] as u64])
            })?;
            let dropout_seed = derive_seed(&[config.seed, 14, epoch as u64, step as u64]);
            let (y, mut tape) = net.forward(x.view(), Mode::Train { dropout_seed })?;
            let scale = 1.0 / chunk.len() as f32;
            let mut d = Array2::<f32>::zeros(y.raw_dim());
            for (b, &i) in chunk.iter().enumerate() {
                let pred = [y[[b, 0]], y[[b, 1]], y[[b, 2]]];
                let loss = data_loss(pred, truths[i]);
                if !loss.is_finite() {
                    return Err(Error::Numeric {
                        plot: train[i].id.clone(),
                        message: format!("non-finite loss at epoch {epoch}"),
                    });
                }
                total += loss as f64;
                let g = data_loss_grad(pred, truths[i]);
                for s in 0..3 {
                    d[[b, s]] = g[s] * scale;
                }
            }
            let grads = net.backward(&mut tape, d.view())?;
            adam.step(&mut net, &grads)?;
        }
        let mean = total / train.len() as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            data: mean,
            elevation: 0.0,
            entropy: 0.0,
            total: mean,
            learning_rate: adam.learning_rate,
        });
    }

    let mut out = Vec::with_capacity(test.len());
    for (c, chunk) in test.chunks(config.batch_size).enumerate() {
        let (x, _) = sample_batch(chunk, config.m_points, |b| {
            derive_seed(&[config.seed, 15, (c * config.batch_size + b) as u64])
        })?;
        let y = net.predict(x.view())?;
        for b in 0..chunk.len() {
            let row = y.slice(s![b, ..]);
            out.push(Occupancy::new(row[0] as f64, row[1] as f64, row[2] as f64));
        }
    }
    Ok((out, log))
}
