//! Train, evaluate and map commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{io_err, EvaluateArgs, MapArgs, TrainArgs};
use crate::checkpoint::{Checkpoint, Precision, RunConfig};
use crate::data::{
    extract_patch, extract_patches, load_cube, stratified_split, HsiCube, LabelMap, PatchSet,
    SplitSpec, SplitStrategy,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{argmax, init_params, model_forward, ModelConfig, ModelParams};
use crate::palette::{write_ppm, PaletteSpec};
use crate::pca::{pca_fit, pca_transform, PcaModel};
use crate::tensor::{Scalar, Tensor};
use crate::train::{evaluate, train_loop, TrainConfig};

/// Files written by `train`.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: MetricsReport,
}

fn split_patches(
    cube: &HsiCube,
    labels: &LabelMap,
    pca: &PcaModel,
    model: &ModelConfig,
    split: &SplitSpec,
) -> Result<(PatchSet, PatchSet)> {
    let reduced = pca_transform(cube, pca)?;
    let patches = extract_patches(&reduced, labels, model.patch_size)?;
    stratified_split(&patches, split)
}

fn evaluate_as<T: Scalar>(
    params: &ModelParams<Tensor<f32>>,
    model: &ModelConfig,
    test: &PatchSet,
) -> Result<MetricsReport> {
    Ok(evaluate(&params.cast::<T>(), model, test)?.1)
}

fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    test: &PatchSet,
    split: SplitSpec,
) -> Result<MetricsReport> {
    let model = &ckpt.config.model;
    let mut report = match ckpt.config.precision {
        Precision::F32 => evaluate_as::<f32>(&ckpt.params, model, test)?,
        Precision::F64 => evaluate_as::<f64>(&ckpt.params, model, test)?,
    };
    report.split = Some(split);
    report.seed = Some(ckpt.config.train.seed);
    report.config_hash = Some(ckpt.config.config_hash()?);
    Ok(report)
}

fn train_as<T: Scalar>(
    run: &RunConfig,
    train: &PatchSet,
    quiet: bool,
    err: &mut dyn Write,
) -> Result<ModelParams<Tensor<f32>>> {
    let mut params = init_params::<T>(&run.model, run.train.seed)?;
    let epochs = run.train.epochs;
    let mut sink_err = Ok(());
    train_loop(&mut params, &run.model, train, &run.train, |r| {
        if !quiet && sink_err.is_ok() {
            sink_err = writeln!(
                err,
                "epoch {:>4}/{epochs}  loss {:.6}  train acc {:.2}%",
                r.epoch + 1,
                r.mean_loss,
                100.0 * r.train_accuracy
            );
        }
    })?;
    sink_err.map_err(io_err)?;
    Ok(params.cast::<f32>())
}

fn write_report(report: &MetricsReport, labels: &LabelMap, out: &mut dyn Write) -> Result<()> {
    let mut text = String::new();
    for (k, acc) in report.per_class.iter().enumerate() {
        let acc = acc.map_or("-".to_string(), |a| format!("{a:.2}"));
        text += &format!("C{:<3} {:<24} {acc:>7}\n", k + 1, labels.class_name(k + 1));
    }
    text += &format!(
        "OA        {:.2}\nAA        {:.2}\nkappa×100 {:.2}\n",
        report.oa, report.aa, report.kappa_x100
    );
    out.write_all(text.as_bytes()).map_err(io_err)
}

fn write_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(
    args: &TrainArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<TrainOutputs> {
    let (cube, labels) = load_cube(&args.data)?;
    let model = args.model.resolve(labels.num_classes())?;
    let strategy = match (args.train_fraction, args.train_count) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--train-fraction and --train-count are mutually exclusive".into(),
            ))
        }
        (_, Some(c)) => SplitStrategy::Count(c),
        (f, None) => SplitStrategy::Fraction(f.unwrap_or(0.1)),
    };
    let run = RunConfig {
        model,
        split: SplitSpec {
            strategy,
            seed: args.split_seed.unwrap_or(args.seed),
        },
        train: TrainConfig {
            learning_rate: args.lr,
            batch_size: args.batch,
            epochs: args.epochs,
            seed: args.seed,
            cosine_schedule: args.cosine,
            ..TrainConfig::default()
        },
        precision: args.precision,
    };
    run.split.validate()?;
    run.train.validate()?;
    if run.model.pca_bands > cube.bands() {
        return Err(Error::Config(format!(
            "cannot keep {} components of {} bands",
            run.model.pca_bands,
            cube.bands()
        )));
    }

    // the checkpoint stores f32, so transform with exactly what it will hold
    let pca = pca_fit(&cube, run.model.pca_bands)?.round_to_f32();
    let (train, test) = split_patches(&cube, &labels, &pca, &run.model, &run.split)?;
    writeln!(
        err,
        "{} training / {} test patches ({})",
        train.len(),
        test.len(),
        run.split.describe()
    )
    .map_err(io_err)?;
    let params = match run.precision {
        Precision::F32 => train_as::<f32>(&run, &train, args.quiet, err)?,
        Precision::F64 => train_as::<f64>(&run, &train, args.quiet, err)?,
    };

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let ckpt_path = args.out.join("model.ckpt");
    let ckpt = Checkpoint {
        config: run.clone(),
        pca,
        params,
    };
    ckpt.save(&ckpt_path)?;
    // score what was saved, so `evaluate` on the checkpoint agrees exactly
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let report = evaluate_checkpoint(&ckpt, &test, run.split)?;
    let metrics_path = args.out.join("metrics.json");
    write_json(&metrics_path, &report)?;
    write_report(&report, &labels, out)?;
    Ok(TrainOutputs {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        report,
    })
}

fn check_compatible(ckpt: &Checkpoint, cube: &HsiCube, labels: &LabelMap) -> Result<()> {
    if ckpt.config.model.num_classes != labels.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint was trained for {} classes, dataset has {}",
            ckpt.config.model.num_classes,
            labels.num_classes()
        )));
    }
    if ckpt.pca.input_bands() != cube.bands() {
        return Err(Error::Config(format!(
            "checkpoint PCA expects {} bands, dataset has {}",
            ckpt.pca.input_bands(),
            cube.bands()
        )));
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (cube, labels) = load_cube(&args.data)?;
    check_compatible(&ckpt, &cube, &labels)?;
    let mut split = ckpt.config.split;
    if let Some(seed) = args.split_seed {
        split.seed = seed;
    }
    let (_, test) = split_patches(&cube, &labels, &ckpt.pca, &ckpt.config.model, &split)?;
    let report = evaluate_checkpoint(&ckpt, &test, split)?;
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    write_report(&report, &labels, out)?;
    Ok(report)
}

fn predict_pixels<T: Scalar>(
    params: &ModelParams<Tensor<f32>>,
    model: &ModelConfig,
    reduced: &HsiCube,
    pixels: &[(usize, usize)],
) -> Result<Vec<u16>> {
    let params = params.cast::<T>();
    let s = model.patch_size;
    let shape = [reduced.bands(), s, s];
    let mut classes = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(512) {
        let patches = chunk
            .iter()
            .map(|&(r, c)| {
                let values = extract_patch(reduced, r, c, s);
                Tensor::new(shape, values.into_iter().map(T::from_f32_lossy).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        for p in model_forward(&patches, &params, model)? {
            classes.push(argmax(&p) as u16 + 1);
        }
    }
    Ok(classes)
}

/// Writes the map and returns the rendered class raster.
pub fn cmd_map(args: &MapArgs, out: &mut dyn Write) -> Result<Vec<u16>> {
    let (cube, labels) = load_cube(&args.data)?;
    let palette = PaletteSpec::for_labels(&labels);
    let (w, h) = (labels.width(), labels.height());
    let raster: Vec<u16> = if args.truth {
        labels.labels().to_vec()
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("--checkpoint is required without --truth".into()))?;
        let ckpt = Checkpoint::load(path)?;
        check_compatible(&ckpt, &cube, &labels)?;
        let reduced = pca_transform(&cube, &ckpt.pca)?;
        let pixels: Vec<(usize, usize)> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| args.full || labels.get(r, c) > 0)
            .collect();
        let model = &ckpt.config.model;
        let predicted = match ckpt.config.precision {
            Precision::F32 => predict_pixels::<f32>(&ckpt.params, model, &reduced, &pixels)?,
            Precision::F64 => predict_pixels::<f64>(&ckpt.params, model, &reduced, &pixels)?,
        };
        let mut raster = vec![0u16; w * h];
        for (&(r, c), &k) in pixels.iter().zip(&predicted) {
            raster[r * w + c] = k;
        }
        raster
    };
    write_ppm(&args.out, w, h, &raster, &palette)?;
    writeln!(out, "wrote {}×{} map to {}", w, h, args.out.display()).map_err(io_err)?;
    Ok(raster)
}
