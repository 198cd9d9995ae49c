use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use strata::gamma::{ecm_fit, ecm_fit_multistart, EcmOptions, GammaMixture};
use strata::harness::{self, CvReport, Method};
use strata::pointcloud::{read_labels, write_labels, NormalizedPlot, Occupancy};
use strata::raster::export_rasters;
use strata::segnet::{Checkpoint, SegNet};
use strata::synth::{self, SceneOptions};

use crate::args::{
    train_config, BaselineArgs, BaselineKind, Cli, Command, ConfigFile, CvArgs, EvalArgs, FitGammaArgs, PredictArgs,
    SynthArgs, TrainArgs,
};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth_cmd(a, &cfg),
        Command::FitGamma(a) => fit_gamma(a, &cfg),
        Command::Train(a) => train(a, &cfg),
        Command::Predict(a) => predict(a, &cfg),
        Command::Eval(a) => eval(a, &cfg),
        Command::Cv(a) => cv(a, &cfg),
        Command::Baseline(a) => baseline(a, &cfg),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &ConfigFile) -> Result<PathBuf> {
    let dir: PathBuf = cfg.required(flag, "out")?;
    fs::create_dir_all(&dir).map_err(strata::Error::from)?;
    Ok(dir)
}

fn load_plots(flag: Option<PathBuf>, cfg: &ConfigFile) -> Result<Vec<NormalizedPlot>> {
    let data: PathBuf = cfg.required(flag, "data")?;
    let plots = harness::load_dataset(&data)?;
    info!("loaded {} plots from {}", plots.len(), data.display());
    Ok(harness::normalize_all(&plots))
}

fn labeled(plots: &[NormalizedPlot]) -> Result<()> {
    if let Some(p) = plots.iter().find(|p| p.labels.is_none()) {
        return Err(strata::Error::Validation(format!("plot `{}` has no label", p.id)).into());
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs, cfg: &ConfigFile) -> Result<()> {
    let d = SceneOptions::default();
    let count: usize = cfg.or(a.plots, "plots", 100)?;
    if count == 0 {
        return Err(CliError::Usage("--plots must be positive".into()));
    }
    let options = SceneOptions {
        density: cfg.or(a.density, "density", d.density)?,
        raster_k: cfg.or(a.raster_k, "raster-k", d.raster_k)?,
        max_tilt: cfg.or(a.max_tilt, "max-tilt", d.max_tilt)?,
        ..d
    };
    if !(options.density > 0.0 && options.density.is_finite()) {
        return Err(CliError::Usage(format!("--density must be positive, got {}", options.density)));
    }
    if options.raster_k < 2 {
        return Err(CliError::Usage(format!("--raster-k must be >= 2, got {}", options.raster_k)));
    }
    if !(options.max_tilt >= 0.0 && options.max_tilt < 1.0) {
        return Err(CliError::Usage(format!("--max-tilt must lie in [0, 1), got {}", options.max_tilt)));
    }
    let seed = cfg.or(a.seed, "seed", 0)?;
    let dir = out_dir(a.out, cfg)?;
    let scenes = synth::generate_corpus(count, seed, &options)?;
    synth::write_corpus(&dir, &scenes)?;
    info!("wrote {count} synthetic plots to {}", dir.display());
    Ok(())
}

fn fit_gamma(a: FitGammaArgs, cfg: &ConfigFile) -> Result<()> {
    let out: PathBuf = cfg.or(a.out, "out", PathBuf::from("mixture.json"))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(strata::Error::from)?;
    }
    let plots = load_plots(a.data, cfg)?;
    let z: Vec<f64> = plots.iter().flat_map(|p| p.elevations.iter().copied()).collect();
    let fit = match cfg.get::<PathBuf>(a.init, "init")? {
        Some(path) => ecm_fit(&z, &GammaMixture::load(path)?, EcmOptions::default())?,
        None => ecm_fit_multistart(&z, EcmOptions::default())?,
    };
    let ll = fit.log_likelihood.last().copied().unwrap_or(f64::NAN);
    info!("ECM: {} iterations, converged {}, log-likelihood {ll}", fit.iterations, fit.converged);
    fit.mixture.save(&out)?;
    println!("{}", fit.mixture.to_json()?);
    Ok(())
}

fn train(a: TrainArgs, cfg: &ConfigFile) -> Result<()> {
    let config = train_config(&a.hyper, cfg)?;
    let dir = out_dir(a.out, cfg)?;
    let plots = load_plots(a.data, cfg)?;
    labeled(&plots)?;
    let mixture = match cfg.get::<PathBuf>(a.mixture, "mixture")? {
        Some(path) => GammaMixture::load(path)?,
        None => harness::fit_mixture(&plots.iter().collect::<Vec<_>>())?,
    };
    mixture.save(dir.join("mixture.json"))?;
    let outcome = harness::train(&plots, &config, &mixture)?;
    outcome
        .net
        .to_checkpoint(config.m_points, config.raster_k)
        .save(dir.join("model.json"))?;
    harness::write_training_log(dir.join("training_log.csv"), &outcome.log)?;
    if let Some(last) = outcome.log.last() {
        println!("final epoch {}: total loss {}", last.epoch, last.total);
    }
    Ok(())
}

fn predict(a: PredictArgs, cfg: &ConfigFile) -> Result<()> {
    let model: PathBuf = cfg.required(a.model, "model")?;
    let ckpt = Checkpoint::load(&model)?;
    let net = SegNet::<f32>::from_checkpoint(&ckpt)?;
    let m: usize = cfg.or(a.m_points, "m-points", ckpt.m_points)?;
    let k: usize = cfg.or(a.raster_k, "raster-k", ckpt.raster_k)?;
    if m == 0 || k < 2 {
        return Err(CliError::Usage("--m-points must be positive and --raster-k at least 2".into()));
    }
    let seed = cfg.or(a.seed, "seed", 0)?;
    let source = match (cfg.get::<PathBuf>(a.plot, "plot")?, cfg.get::<PathBuf>(a.data, "data")?) {
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => return Err(CliError::Usage("one of --plot or --data is required".into())),
    };
    let dir = out_dir(Some(cfg.or(a.out, "out", PathBuf::from("."))?), cfg)?;
    let plots = load_plots(Some(source), cfg)?;
    let raster_dir = dir.join("rasters");
    fs::create_dir_all(&raster_dir).map_err(strata::Error::from)?;
    let refs: Vec<&NormalizedPlot> = plots.iter().collect();
    let preds = harness::predict(&net, &refs, m, k, seed)?;
    for p in &preds {
        export_rasters(&raster_dir, &p.id, &p.rasters, &p.index)?;
        let o = p.occupancy;
        println!("{},{},{},{}", p.id, o.low, o.medium, o.high);
    }
    write_labels(dir.join("predictions.csv"), preds.iter().map(|p| (p.id.as_str(), p.occupancy)))?;
    info!("predicted {} plots into {}", preds.len(), dir.display());
    Ok(())
}

fn labels_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("labels.csv")
    } else {
        path.to_path_buf()
    }
}

fn eval(a: EvalArgs, cfg: &ConfigFile) -> Result<()> {
    let preds_path: PathBuf = cfg.required(a.predictions, "predictions")?;
    let data: PathBuf = cfg.required(a.data, "data")?;
    let preds: Vec<(String, Occupancy)> = read_labels(labels_path(&preds_path))?.into_iter().collect();
    let truths = read_labels(labels_path(&data))?;
    let report = harness::evaluate(&preds, &truths)?;
    println!(
        "e_low={:.4} e_medium={:.4} e_high={:.4} e_avg={:.4}",
        report.e_low, report.e_medium, report.e_high, report.e_avg
    );
    if let Some(out) = cfg.get::<PathBuf>(a.out, "out")? {
        let json = serde_json::to_string_pretty(&report).map_err(strata::Error::from)?;
        fs::write(out, json).map_err(strata::Error::from)?;
    }
    Ok(())
}

fn write_cv(dir: &Path, report: &CvReport) -> Result<()> {
    harness::write_cv_report(dir.join("cv_report.csv"), report)?;
    let preds = report.predictions();
    write_labels(dir.join("predictions.csv"), preds.iter().map(|(id, o)| (id.as_str(), *o)))?;
    for f in &report.folds {
        if !f.log.is_empty() {
            harness::write_training_log(dir.join(format!("fold_{}_log.csv", f.fold)), &f.log)?;
        }
    }
    let p = &report.pooled;
    println!(
        "pooled e_low={:.4} e_medium={:.4} e_high={:.4} e_avg={:.4}",
        p.e_low, p.e_medium, p.e_high, p.e_avg
    );
    Ok(())
}

fn cv(a: CvArgs, cfg: &ConfigFile) -> Result<()> {
    let config = train_config(&a.hyper, cfg)?;
    let dir = out_dir(a.out, cfg)?;
    let plots = load_plots(a.data, cfg)?;
    labeled(&plots)?;
    let report = harness::cross_validate(&plots, &config, Method::Segmentation)?;
    for f in &report.folds {
        if let Some(net) = &f.net {
            net.to_checkpoint(config.m_points, config.raster_k)
                .save(dir.join(format!("fold_{}_model.json", f.fold)))?;
        }
    }
    write_cv(&dir, &report)
}

fn baseline(a: BaselineArgs, cfg: &ConfigFile) -> Result<()> {
    let kind: BaselineKind = match a.method {
        Some(k) => k,
        None => match cfg.get::<String>(None, "method")?.as_deref() {
            None | Some("handcrafted") => BaselineKind::Handcrafted,
            Some("regression") => BaselineKind::Regression,
            Some(other) => return Err(CliError::Usage(format!("unknown baseline `{other}`"))),
        },
    };
    let config = train_config(&a.hyper, cfg)?;
    let dir = out_dir(a.out, cfg)?;
    let plots = load_plots(a.data, cfg)?;
    labeled(&plots)?;
    let method = match kind {
        BaselineKind::Handcrafted => Method::Handcrafted,
        BaselineKind::Regression => Method::Regression,
    };
    let report = harness::cross_validate(&plots, &config, method)?;
    write_cv(&dir, &report)
}
