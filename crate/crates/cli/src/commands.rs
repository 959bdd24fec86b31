use std::fs;
use std::path::{Path, PathBuf};

use ncn_core::analysis::{self, AnalysisAdapter, AnalysisError, ToyAnalysis, ToyTrainConfig};
use ncn_core::checkpoint::{self, CheckpointError};
use ncn_core::codec::{self, CodecError};
use ncn_core::dataset::{self, DatasetError, SyntheticConfig};
use ncn_core::entropy::{unpack_bitstream, BitstreamFile, HEADER_LEN};
use ncn_core::image::{ImageError, ImageTensor};
use ncn_core::losses::LossError;
use ncn_core::lsmnet::LsmError;
use ncn_core::metrics::{self, MetricError, QualityKind, RdCurve};
use ncn_core::ncn::NcnError;
use ncn_core::plot::{self, PlotError};
use ncn_core::trainer::{self, config_hash, Datasets, EpochRecord, TrainError, TrainOptions, TrainPlan};

use crate::resolve_dataset;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset `{0}` not found (looked in {1:?}); set NCN_CACHE_DIR or pass a directory")]
    DatasetNotFound(String, Vec<PathBuf>),
    #[error("{0}")]
    Capability(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl CliError {
    /// 0 success, 1 usage or I/O, 2 missing capability, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use CliError as E;
        match self {
            E::Capability(_)
            | E::Codec(CodecError::Mask(LsmError::NoHead | LsmError::FeaturesUnavailable(_)))
            | E::Analysis(AnalysisError::Unsupported { .. })
            | E::Train(
                TrainError::NoHead(_)
                | TrainError::Mask(LsmError::NoHead | LsmError::FeaturesUnavailable(_))
                | TrainError::Analysis(AnalysisError::Unsupported { .. })
                | TrainError::Loss(LossError::MissingAnalysis(_)),
            ) => 2,
            E::Codec(CodecError::Ncn(NcnError::NonFinite(_)))
            | E::Train(TrainError::NumericFailure { .. } | TrainError::Loss(LossError::NonFinite(_))) => 3,
            _ => 1,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a sibling temp file so a failed run leaves nothing behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = tmp_sibling(path);
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

fn load_analysis(path: Option<&Path>) -> Result<Option<ToyAnalysis>, CliError> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Io {
                    path: p.to_path_buf(),
                    source: std::io::ErrorKind::NotFound.into(),
                });
            }
            Ok(Some(checkpoint::load_analysis(p)?.0))
        }
        None => Ok(None),
    }
}

fn load_model(path: &Path) -> Result<checkpoint::Checkpoint, CliError> {
    let bytes = read(path)?;
    Ok(checkpoint::from_bytes(&bytes)?)
}

fn size_report(file: &BitstreamFile) -> String {
    format!(
        "header {HEADER_LEN} B, hyper {} B, latent {} B, total {} B",
        file.b2.len(),
        file.b1.len(),
        file.total_bytes()
    )
}

pub fn encode(model: &Path, input: &Path, out: &Path, mask: bool, analysis: Option<&Path>) -> Result<(), CliError> {
    let ckpt = load_model(model)?;
    let image = ImageTensor::load(input)?;
    let enc = if mask {
        if ckpt.weights.lsm.is_none() {
            return Err(CliError::Capability(format!("{} has no masking head; --mask needs an attached LSMnet", model.display())));
        }
        let a = load_analysis(analysis)?
            .ok_or_else(|| CliError::Capability("--mask needs the analysis network (--analysis)".into()))?;
        codec::masked_encode(&image, &ckpt.weights, &a)?
    } else {
        codec::encode_image(&image, &ckpt.weights, None)?
    };
    let bytes = enc.bytes();
    write_atomic(out, &bytes)?;
    println!("{}x{} -> {} ({:.4} bpp)", image.width(), image.height(), out.display(), enc.bpp());
    println!("{}", size_report(&enc.file));
    Ok(())
}

pub fn decode(model: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = load_model(model)?;
    let bytes = read(input)?;
    let file = unpack_bitstream(&bytes).map_err(CodecError::from)?;
    let dec = codec::decode_file(&file, &ckpt.weights)?;
    let tmp = tmp_sibling(out);
    let tmp = tmp.with_extension(out.extension().unwrap_or_default());
    if let Err(e) = dec.image.save(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    fs::rename(&tmp, out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    println!("{} -> {}x{} {}", input.display(), dec.image.width(), dec.image.height(), out.display());
    println!("{}", size_report(&file));
    Ok(())
}

fn read_plan(path: &Path) -> Result<(TrainPlan, String), CliError> {
    let text = String::from_utf8(read(path)?).map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
    Ok((TrainPlan::from_toml(&text)?, text))
}

/// Loads the `train` split of every dataset the plan references.
fn plan_datasets(plan: &TrainPlan, base: Option<&Path>) -> Result<Vec<(String, Vec<analysis::Sample>)>, CliError> {
    let mut out: Vec<(String, Vec<analysis::Sample>)> = Vec::new();
    for p in &plan.phases {
        if out.iter().any(|(id, _)| *id == p.dataset) {
            continue;
        }
        let dir = resolve_dataset(&p.dataset, base)?;
        let (samples, _) = dataset::load_split(&dir, "train")?;
        out.push((p.dataset.clone(), samples));
    }
    Ok(out)
}

fn print_epoch(r: &EpochRecord) {
    println!(
        "model {} {} [{}] epoch {:>3}  loss {:.5}  D {:.5}  bpp {:.4}  lambda {:.4e}  ({:.1}s)",
        r.model, r.phase, r.loss, r.epoch, r.total, r.distortion, r.bpp, r.lambda, r.seconds
    );
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn train(plan_path: &Path, out: &Path, analysis: Option<&Path>, init: &[PathBuf], resume: bool) -> Result<(), CliError> {
    let (plan, text) = read_plan(plan_path)?;
    let a = load_analysis(analysis)?;
    let owned = plan_datasets(&plan, plan_path.parent())?;
    let data = Datasets {
        sets: owned.iter().map(|(k, v)| (k.clone(), v.as_slice())).collect(),
    };
    create_dir(out)?;
    write_atomic(&out.join("plan.toml"), text.as_bytes())?;
    let init = if init.is_empty() {
        None
    } else {
        Some(init.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?)
    };
    let mut cb = print_epoch;
    let models = trainer::train(
        &plan,
        &data,
        a.as_ref().map(|a| a as &dyn AnalysisAdapter),
        TrainOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            on_epoch: Some(&mut cb),
            init,
        },
    )?;
    println!("config hash {}; {} model(s) in {}", plan.config_hash(), models.len(), out.display());
    Ok(())
}

pub fn sweep(plan_path: &Path, lambdas: &[f64], out: &Path, analysis: Option<&Path>, val: Option<&str>) -> Result<(), CliError> {
    let (plan, _) = read_plan(plan_path)?;
    let a = load_analysis(analysis)?;
    let owned = plan_datasets(&plan, plan_path.parent())?;
    let data = Datasets {
        sets: owned.iter().map(|(k, v)| (k.clone(), v.as_slice())).collect(),
    };
    let last = plan.phases.last().expect("validated plan has phases");
    let val_dir = resolve_dataset(val.unwrap_or(&last.dataset), plan_path.parent())?;
    let (val_set, classes) = dataset::load_split(&val_dir, "val")?;
    create_dir(out)?;
    let mut cb = print_epoch;
    let (_, curves) = trainer::sweep(
        &plan,
        lambdas,
        &data,
        &val_set,
        a.as_ref().map(|a| a as &dyn AnalysisAdapter),
        classes.len(),
        TrainOptions {
            out_dir: Some(out.to_path_buf()),
            on_epoch: Some(&mut cb),
            ..Default::default()
        },
    )?;
    let loss = last.loss;
    let lambda_text: Vec<String> = lambdas.iter().map(|l| l.to_string()).collect();
    let comments = vec![
        format!("config_hash={}", plan.config_hash()),
        format!("seed={}", plan.seed),
        format!("lambdas={}", lambda_text.join(",")),
    ];
    let csv = out.join(format!("rd_{loss}.csv"));
    metrics::write_curves_csv(&csv, &curves, &comments)?;
    let shown: Vec<RdCurve> = [QualityKind::Wap, QualityKind::Psnr]
        .iter()
        .find_map(|k| curves.iter().find(|c| c.kind == *k).cloned())
        .into_iter()
        .collect();
    let png = out.join(format!("rd_{loss}.png"));
    plot::write_plot(&png, &shown, &format!("{loss} sweep"))?;
    for c in &curves {
        print_curve(c);
    }
    println!("wrote {} and {}", csv.display(), png.display());
    Ok(())
}

fn print_curve(c: &RdCurve) {
    let pts: Vec<String> = c.points().iter().map(|p| format!("({:.4}, {:.4})", p.bpp, p.quality)).collect();
    println!("{:<16} {:<7} {}", c.label, c.kind.to_string(), pts.join(" "));
}

pub fn eval(paths: &[PathBuf], bd: bool, anchor: Option<&str>) -> Result<(), CliError> {
    let mut curves = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        if !p.exists() {
            return Err(CliError::Io {
                path: p.clone(),
                source: std::io::ErrorKind::NotFound.into(),
            });
        }
        for mut c in metrics::read_curves_csv(p)? {
            if curves.iter().any(|o: &RdCurve| o.label == c.label && o.kind == c.kind) {
                c.label = format!("{}#{}", c.label, i + 1);
            }
            curves.push(c);
        }
    }
    for c in &curves {
        print_curve(c);
    }
    if !bd {
        return Ok(());
    }
    let anchors: Vec<&RdCurve> = match anchor {
        Some(label) => curves.iter().filter(|c| c.label == label).collect(),
        None => {
            let first = curves.first().ok_or_else(|| CliError::Usage("no curves".into()))?;
            curves.iter().filter(|c| c.label == first.label).collect()
        }
    };
    if anchors.is_empty() {
        return Err(CliError::Usage(format!("no curve labelled `{}`", anchor.unwrap_or_default())));
    }
    println!();
    println!("{:<16} {:<7} {:>10} {:>12}   anchor", "curve", "kind", "BDR", "BD-quality");
    for a in &anchors {
        for c in curves.iter().filter(|c| c.kind == a.kind && !std::ptr::eq(*c, *a)) {
            let rate = metrics::bd_rate(c, a)?;
            let quality = metrics::bd_quality(c, a)?;
            println!("{:<16} {:<7} {:>9.2}% {:>12.4}   {}", c.label, c.kind.to_string(), rate, quality, a.label);
        }
        if curves.iter().filter(|c| c.kind == a.kind).count() == 1 {
            println!("{:<16} {:<7} {:>9.2}% {:>12.4}   {}", a.label, a.kind.to_string(), 0.0, 0.0, a.label);
        }
    }
    Ok(())
}

pub fn gen_synthetic(n: usize, classes: usize, seed: u64, val: Option<usize>, out: Option<&Path>) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let cfg = SyntheticConfig {
        count: n,
        classes,
        seed,
        ..Default::default()
    };
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => crate::cache_dir()
            .ok_or_else(|| CliError::Usage("pass --out or set NCN_CACHE_DIR".into()))?
            .join(format!("synthetic-{n}-{classes}-{seed}")),
    };
    let val = val.unwrap_or(n / 5).min(n);
    let samples = dataset::generate(&cfg)?;
    let hash = config_hash(&format!("{cfg:?} val={val}"));
    dataset::write_dataset(&dir, &samples, cfg.class_names(), val, Some(seed), Some(hash.clone()))?;
    println!("{} images ({} train, {val} val) in {} [config {hash}]", n, n - val, dir.display());
    Ok(())
}

pub fn train_analysis(data: &str, out: &Path, epochs: usize, seed: u64) -> Result<(), CliError> {
    let dir = resolve_dataset(data, None)?;
    let (train, classes) = dataset::load_split(&dir, "train")?;
    let (val, _) = dataset::load_split(&dir, "val")?;
    let cfg = ToyTrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    let (model, report) = analysis::train_toy_analysis(&train, &val, classes.len(), &cfg)?;
    checkpoint::save_analysis(out, &model, &classes)?;
    println!(
        "trained on {} images; final loss {:.4}; validation wAP {:.4}",
        train.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.validation_wap
    );
    Ok(())
}
