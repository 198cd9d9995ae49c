//! Training loop, prediction, error metrics and k-fold cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::gamma::{ecm_fit_multistart, EcmOptions, GammaMixture};
use crate::losses::{global_loss_grad, ElevationDensities, LossBreakdown, LossWeights, PlotLossInputs};
use crate::pointcloud::{
    normalize, read_labels, read_plots, sample_points, NormalizedPlot, Occupancy, Plot, Upsampler, DEFAULT_RADIUS,
    NUM_FEATURES,
};
use crate::raster::{build_index, rasterize, PixelIndexMap, StratumRasterSet};
use crate::segnet::{scheduled_learning_rate, AdamState, Mode, SegNet, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub m_points: usize,
    pub raster_k: usize,
    pub weights: LossWeights,
    /// Initial learning rate, divided by ten from epoch 50 on.
    pub learning_rate: f64,
    pub seed: u64,
    pub folds: usize,
    /// Folds trained concurrently by [`cross_validate`].
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 20,
            m_points: 4096,
            raster_k: 32,
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            seed: 0,
            folds: 5,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch size", self.batch_size),
            ("points per plot", self.m_points),
            ("folds", self.folds),
            ("jobs", self.jobs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.raster_k < 2 {
            return Err(Error::Validation(format!("raster size must be >= 2, got {}", self.raster_k)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("bad learning rate {}", self.learning_rate)));
        }
        LossWeights::new(self.weights.elevation, self.weights.entropy)?;
        Ok(())
    }
}

/// Mixes several integers into one seed.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Samples `m` points from every plot into a `B x M x 9` batch.
pub(crate) fn sample_batch(
    plots: &[&NormalizedPlot],
    m: usize,
    seed_of: impl Fn(usize) -> u64,
) -> Result<(Array3<f32>, Vec<Vec<usize>>)> {
    let mut x = Array3::<f32>::zeros((plots.len(), m, NUM_FEATURES));
    let mut sources = Vec::with_capacity(plots.len());
    for (b, plot) in plots.iter().enumerate() {
        let sampled = sample_points(plot, m, seed_of(b))?;
        x.slice_mut(s![b, .., ..]).assign(&sampled.features.mapv(|v| v as f32));
        sources.push(sampled.source_index);
    }
    Ok((x, sources))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub data: f64,
    pub elevation: f64,
    pub entropy: f64,
    pub total: f64,
    pub learning_rate: f64,
}

pub fn write_training_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,data,elevation,entropy,total,lr")?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.data, e.elevation, e.entropy, e.total, e.learning_rate
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Keeps freed blocks in the heap instead of returning them to the system.
/// Every training step allocates and frees activations of tens of
/// megabytes, and fresh pages cost more than the arithmetic done on them.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

/// Per-plot state reused across epochs.
struct Prepared<'a> {
    plot: &'a NormalizedPlot,
    truth: [f32; 3],
    index: PixelIndexMap,
    densities: ElevationDensities<f32>,
}

pub struct TrainOutcome {
    pub net: SegNet<f32>,
    pub log: Vec<EpochLog>,
}

/// Trains the segmentation network on labeled plots.
pub fn train(plots: &[NormalizedPlot], config: &TrainConfig, mixture: &GammaMixture<f64>) -> Result<TrainOutcome> {
    let refs: Vec<&NormalizedPlot> = plots.iter().collect();
    train_refs(&refs, config, mixture)
}

pub(crate) fn train_refs(
    plots: &[&NormalizedPlot],
    config: &TrainConfig,
    mixture: &GammaMixture<f64>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if plots.is_empty() {
        return Err(Error::Contract("no training plots".into()));
    }
    retain_freed_memory();
    let mixture32: GammaMixture<f32> = mixture.cast();
    let prepared = plots
        .iter()
        .map(|&plot| {
            let labels = plot
                .labels
                .ok_or_else(|| Error::Contract(format!("training plot `{}` has no labels", plot.id)))?;
            Ok(Prepared {
                plot,
                truth: labels.to_array().map(|v| v as f32),
                index: build_index(&plot.xy(), config.raster_k)?,
                densities: ElevationDensities::new(&plot.elevations, &mixture32)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut net = SegNet::<f32>::new(derive_seed(&[config.seed, 1]));
    let mut adam = AdamState::new(config.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 2]));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        adam.learning_rate = scheduled_learning_rate(config.learning_rate, epoch);
        order.shuffle(&mut order_rng);
        let mut losses = Vec::with_capacity(prepared.len());
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let batch_plots: Vec<&NormalizedPlot> = batch.iter().map(|p| p.plot).collect();
            let (x, sources) = sample_batch(&batch_plots, config.m_points, |b| {
                derive_seed(&[config.seed, 3, epoch as u64, chunk[b] as u64])
            })?;
            let dropout_seed = derive_seed(&[config.seed, 4, epoch as u64, step as u64]);
            let (probs, mut tape) = net.forward(x.view(), Mode::Train { dropout_seed })?;
            let scale = 1.0 / batch.len() as f32;
            let mut d_probs = Array3::<f32>::zeros(probs.raw_dim());
            for (b, p) in batch.iter().enumerate() {
                let up = Upsampler::new(p.plot.coordinates(), &sources[b])?;
                let probs_n = up.apply(probs.slice(s![b, .., ..]))?;
                let rasters = rasterize(probs_n.view(), &p.index)?;
                let inputs = PlotLossInputs {
                    probs: probs_n.view(),
                    rasters: &rasters,
                    index: &p.index,
                    densities: &p.densities,
                    truth: p.truth,
                };
                let (loss, grad) = global_loss_grad(&inputs, config.weights, scale)?;
                if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numeric {
                        plot: p.plot.id.clone(),
                        message: format!("non-finite loss at epoch {epoch}"),
                    });
                }
                d_probs.slice_mut(s![b, .., ..]).assign(&up.scatter_back(grad.view()));
                losses.push(loss);
            }
            let grads = net.backward(&mut tape, d_probs.view())?;
            if !grads.is_finite() {
                return Err(Error::Numeric {
                    plot: batch_plots.iter().map(|p| p.id.as_str()).collect::<Vec<_>>().join(" "),
                    message: format!("non-finite gradient at epoch {epoch}"),
                });
            }
            adam.step(&mut net, &grads)?;
        }
        let mean = LossBreakdown::mean(&losses);
        let entry = EpochLog {
            epoch: epoch + 1,
            data: mean.data as f64,
            elevation: mean.elevation as f64,
            entropy: mean.entropy as f64,
            total: mean.total as f64,
            learning_rate: adam.learning_rate,
        };
        debug!(
            "epoch {:>3}: data {:.4} elevation {:.4} entropy {:.4} total {:.4}",
            entry.epoch, entry.data, entry.elevation, entry.entropy, entry.total
        );
        log.push(entry);
    }
    Ok(TrainOutcome { net, log })
}

/// Occupancies and rasters predicted for one plot.
pub struct Prediction {
    pub id: String,
    pub occupancy: Occupancy,
    pub rasters: StratumRasterSet<f32>,
    pub index: PixelIndexMap,
    /// `N x 4` class probabilities of the plot's points.
    pub point_probs: Array2<f32>,
}

/// Runs the network in evaluation mode on `m` sampled points per plot and
/// projects the predictions back onto every point.
pub fn predict(net: &SegNet<f32>, plots: &[&NormalizedPlot], m: usize, k: usize, seed: u64) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(plots.len());
    for (c, chunk) in plots.chunks(20).enumerate() {
        let (x, sources) = sample_batch(chunk, m, |b| derive_seed(&[seed, 5, (c * 20 + b) as u64]))?;
        let probs = net.predict(x.view())?;
        for (b, plot) in chunk.iter().enumerate() {
            let up = Upsampler::new(plot.coordinates(), &sources[b])?;
            let point_probs = up.apply(probs.slice(s![b, .., ..]))?;
            debug_assert_eq!(point_probs.ncols(), NUM_CLASSES);
            let index = build_index(&plot.xy(), k)?;
            let rasters = rasterize(point_probs.view(), &index)?;
            let o = rasters.occupancy.map(|v| v as f64);
            out.push(Prediction {
                id: plot.id.clone(),
                occupancy: Occupancy::from_array(o),
                rasters,
                index,
                point_probs,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub e_low: f64,
    pub e_medium: f64,
    pub e_high: f64,
    /// Macro average of the three stratum errors.
    pub e_avg: f64,
    /// `prediction - truth` per plot, in input order.
    pub residuals: Vec<(String, [f64; 3])>,
}

/// Mean absolute occupancy errors of `predictions` against `truths`.
pub fn evaluate(predictions: &[(String, Occupancy)], truths: &BTreeMap<String, Occupancy>) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Contract("no predictions to evaluate".into()));
    }
    let mut seen = BTreeSet::new();
    let mut sums = [0.0; 3];
    let mut residuals = Vec::with_capacity(predictions.len());
    for (id, pred) in predictions {
        if !seen.insert(id.as_str()) {
            return Err(Error::Contract(format!("plot `{id}` predicted twice")));
        }
        let truth = truths
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no ground truth for plot `{id}`")))?;
        let (p, t) = (pred.to_array(), truth.to_array());
        let r = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
        for s in 0..3 {
            sums[s] += r[s].abs();
        }
        residuals.push((id.clone(), r));
    }
    let t = predictions.len() as f64;
    let [e_low, e_medium, e_high] = sums.map(|v| v / t);
    Ok(EvalReport {
        e_low,
        e_medium,
        e_high,
        e_avg: (e_low + e_medium + e_high) / 3.0,
        residuals,
    })
}

/// Seeded shuffle of `0..n` cut into `folds` contiguous parts whose sizes
/// differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds == 0 || folds > n {
        return Err(Error::Contract(format!("cannot split {n} plots into {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 6])));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

/// Fits the elevation mixture to the pooled heights of `plots`.
pub fn fit_mixture(plots: &[&NormalizedPlot]) -> Result<GammaMixture<f64>> {
    let z: Vec<f64> = plots.iter().flat_map(|p| p.elevations.iter().copied()).collect();
    let fit = ecm_fit_multistart(&z, EcmOptions::default())?;
    debug!(
        "mixture fitted in {} iterations: {:?}",
        fit.iterations, fit.mixture
    );
    Ok(fit.mixture)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Weakly supervised segmentation network.
    Segmentation,
    /// Prototype and height-threshold rules.
    Handcrafted,
    /// Direct occupancy regression network.
    Regression,
}

pub struct FoldResult {
    pub fold: usize,
    pub report: EvalReport,
    pub predictions: Vec<(String, Occupancy)>,
    /// Empty for the handcrafted method.
    pub log: Vec<EpochLog>,
    pub net: Option<SegNet<f32>>,
}

pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Over the held-out predictions of every fold.
    pub pooled: EvalReport,
}

impl CvReport {
    pub fn predictions(&self) -> Vec<(String, Occupancy)> {
        self.folds.iter().flat_map(|f| f.predictions.iter().cloned()).collect()
    }
}

fn truth_map(plots: &[NormalizedPlot]) -> Result<BTreeMap<String, Occupancy>> {
    plots
        .iter()
        .map(|p| {
            p.labels
                .map(|l| (p.id.clone(), l))
                .ok_or_else(|| Error::Contract(format!("plot `{}` has no labels", p.id)))
        })
        .collect()
}

fn strip_labels(plot: &NormalizedPlot) -> NormalizedPlot {
    NormalizedPlot {
        labels: None,
        ..plot.clone()
    }
}

fn run_fold(
    plots: &[NormalizedPlot],
    folds: &[Vec<usize>],
    f: usize,
    config: &TrainConfig,
    method: Method,
) -> Result<FoldResult> {
    let held_out: Vec<NormalizedPlot> = folds[f].iter().map(|&i| strip_labels(&plots[i])).collect();
    let held_refs: Vec<&NormalizedPlot> = held_out.iter().collect();
    let training: Vec<&NormalizedPlot> = folds
        .iter()
        .enumerate()
        .filter(|&(g, _)| g != f)
        .flat_map(|(_, idx)| idx.iter().map(|&i| &plots[i]))
        .collect();
    let fold_config = TrainConfig {
        seed: derive_seed(&[config.seed, 7, f as u64]),
        ..config.clone()
    };
    info!("fold {}: {} training plots, {} held out", f + 1, training.len(), held_out.len());
    let (predictions, log, net) = match method {
        Method::Segmentation => {
            let mixture = fit_mixture(&training)?;
            let outcome = train_refs(&training, &fold_config, &mixture)?;
            let preds = predict(&outcome.net, &held_refs, config.m_points, config.raster_k, fold_config.seed)?;
            let preds = preds.into_iter().map(|p| (p.id, p.occupancy)).collect();
            (preds, outcome.log, Some(outcome.net))
        }
        Method::Handcrafted => {
            let protos = baselines::fit_prototypes(&training)?;
            let preds = held_refs
                .iter()
                .map(|p| Ok((p.id.clone(), baselines::handcrafted_predict(p, &protos, config.raster_k)?.occupancy)))
                .collect::<Result<Vec<_>>>()?;
            (preds, Vec::new(), None)
        }
        Method::Regression => {
            let reg_config = baselines::RegressionConfig::from_train(&fold_config);
            let (preds, log) = baselines::regression_train_predict(&training, &held_refs, &reg_config)?;
            let preds = held_refs.iter().map(|p| p.id.clone()).zip(preds).collect();
            (preds, log, None)
        }
    };
    let truths = truth_map(plots)?;
    let report = evaluate(&predictions, &truths)?;
    info!("fold {}: e = {:.4}", f + 1, report.e_avg);
    Ok(FoldResult {
        fold: f + 1,
        report,
        predictions,
        log,
        net,
    })
}

/// k-fold cross-validation: every plot is predicted once by a model that
/// never saw it, its labels or its heights.
pub fn cross_validate(plots: &[NormalizedPlot], config: &TrainConfig, method: Method) -> Result<CvReport> {
    config.validate()?;
    let truths = truth_map(plots)?;
    if truths.len() != plots.len() {
        return Err(Error::Validation("plot ids are not unique".into()));
    }
    let folds = fold_assignment(plots.len(), config.folds, config.seed)?;
    let mut results: Vec<Option<Result<FoldResult>>> = (0..folds.len()).map(|_| None).collect();
    let jobs = config.jobs.min(folds.len());
    if jobs <= 1 {
        for (f, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(plots, &folds, f, config, method));
        }
    } else {
        let folds_ref = &folds;
        std::thread::scope(|scope| {
            for (worker, slots) in results.chunks_mut(folds.len().div_ceil(jobs)).enumerate() {
                let first = worker * folds.len().div_ceil(jobs);
                scope.spawn(move || {
                    for (k, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(run_fold(plots, folds_ref, first + k, config, method));
                    }
                });
            }
        });
    }
    let folds: Vec<FoldResult> = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<_>>()?;
    let all: Vec<(String, Occupancy)> = folds.iter().flat_map(|f| f.predictions.iter().cloned()).collect();
    let pooled = evaluate(&all, &truths)?;
    Ok(CvReport { folds, pooled })
}

/// Writes `fold,e_low,e_medium,e_high,e_avg` rows and a final `pooled` row.
pub fn write_cv_report(path: impl AsRef<Path>, report: &CvReport) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "fold,e_low,e_medium,e_high,e_avg")?;
    let row = |out: &mut BufWriter<File>, name: &str, r: &EvalReport| {
        writeln!(out, "{name},{},{},{},{}", r.e_low, r.e_medium, r.e_high, r.e_avg)
    };
    for f in &report.folds {
        row(&mut out, &f.fold.to_string(), &f.report)?;
    }
    row(&mut out, "pooled", &report.pooled)?;
    out.flush()?;
    Ok(())
}

/// Loads plots from a directory holding `plots/*.csv` or `plots.csv`, plus
/// `labels.csv` when present, or from a single plot CSV file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Plot>> {
    let path = path.as_ref();
    if path.is_file() {
        return read_plots(path, DEFAULT_RADIUS);
    }
    if !path.is_dir() {
        return Err(Error::Format(format!("{} is neither a file nor a directory", path.display())));
    }
    let mut plots = Vec::new();
    let dir = path.join("plots");
    if dir.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        files.sort();
        for f in files {
            plots.extend(read_plots(&f, DEFAULT_RADIUS)?);
        }
    } else if path.join("plots.csv").is_file() {
        plots = read_plots(path.join("plots.csv"), DEFAULT_RADIUS)?;
    } else {
        return Err(Error::Format(format!(
            "{} holds neither plots/ nor plots.csv",
            path.display()
        )));
    }
    let mut ids = BTreeSet::new();
    for p in &plots {
        if !ids.insert(p.id.clone()) {
            return Err(Error::Validation(format!("plot `{}` appears twice", p.id)));
        }
    }
    let labels_path = path.join("labels.csv");
    if labels_path.is_file() {
        let labels = read_labels(labels_path)?;
        for p in &mut plots {
            if let Some(l) = labels.get(&p.id) {
                p.labels = Some(*l);
            }
        }
    }
    Ok(plots)
}

pub fn normalize_all(plots: &[Plot]) -> Vec<NormalizedPlot> {
    plots.iter().map(normalize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn occ(a: f64, b: f64, c: f64) -> Occupancy {
        Occupancy::new(a, b, c)
    }

    #[test]
    fn perfect_and_single_errors() {
        let truths: BTreeMap<String, Occupancy> = [("a".to_string(), occ(0.2, 0.3, 0.4))].into();
        let r = evaluate(&[("a".into(), occ(0.2, 0.3, 0.4))], &truths).unwrap();
        assert_eq!((r.e_low, r.e_medium, r.e_high, r.e_avg), (0.0, 0.0, 0.0, 0.0));
        let r = evaluate(&[("a".into(), occ(0.3, 0.3, 0.4))], &truths).unwrap();
        assert_relative_eq!(r.e_low, 0.1, max_relative = 1e-12);
        assert_eq!((r.e_medium, r.e_high), (0.0, 0.0));
        assert_relative_eq!(r.e_avg, 0.1 / 3.0, max_relative = 1e-12);
        assert_eq!(r.e_avg, (r.e_low + r.e_medium + r.e_high) / 3.0);
    }

    #[test]
    fn evaluation_errors() {
        let truths: BTreeMap<String, Occupancy> = [("a".to_string(), occ(0.2, 0.3, 0.4))].into();
        assert!(matches!(evaluate(&[("b".into(), occ(0.0, 0.0, 0.0))], &truths), Err(Error::Contract(_))));
        let twice = vec![("a".into(), occ(0.0, 0.0, 0.0)), ("a".into(), occ(0.0, 0.0, 0.0))];
        assert!(evaluate(&twice, &truths).is_err());
        assert!(evaluate(&[], &truths).is_err());
    }

    #[test]
    fn uniform_guesses_score_one_third() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut u = || Occupancy::new(rng.random(), rng.random(), rng.random());
        let truths: BTreeMap<String, Occupancy> = (0..1000).map(|i| (i.to_string(), u())).collect();
        let preds: Vec<(String, Occupancy)> = (0..1000).map(|i| (i.to_string(), u())).collect();
        let r = evaluate(&preds, &truths).unwrap();
        assert!((r.e_avg - 1.0 / 3.0).abs() < 0.01, "{}", r.e_avg);
    }

    #[test]
    fn evaluation_ignores_order() {
        let truths: BTreeMap<String, Occupancy> =
            [("a".to_string(), occ(0.2, 0.3, 0.4)), ("b".to_string(), occ(0.9, 0.1, 0.0))].into();
        let p = vec![("a".to_string(), occ(0.1, 0.5, 0.4)), ("b".to_string(), occ(0.6, 0.2, 0.3))];
        let q: Vec<_> = p.iter().rev().cloned().collect();
        let (r1, r2) = (evaluate(&p, &truths).unwrap(), evaluate(&q, &truths).unwrap());
        assert_relative_eq!(r1.e_avg, r2.e_avg, max_relative = 1e-15);
    }

    #[test]
    fn folds_partition_the_plots() {
        let folds = fold_assignment(5, 5, 1).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(folds.iter().all(|f| f.len() == 1));
        let folds = fold_assignment(23, 5, 9).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5, 5, 4, 4]);
        assert_eq!(folds, fold_assignment(23, 5, 9).unwrap());
        assert_ne!(folds, fold_assignment(23, 5, 10).unwrap());
        assert!(fold_assignment(4, 5, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeds_differ_by_part() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[1, 2]), derive_seed(&[1, 2]));
    }
}
