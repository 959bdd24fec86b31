use ncn_core::analysis::{AnalysisAdapter, ExternalAdapter, Sample, ToyAnalysis};
use ncn_core::checkpoint::{self, Checkpoint};
use ncn_core::codec;
use ncn_core::dataset::{generate, SyntheticConfig};
use ncn_core::lsmnet::{LsmInit, MaskTensor};
use ncn_core::ncn::{NcnConfig, NcnWeights};
use ncn_core::nn::Module;
use ncn_core::tensor::Tensor;
use ncn_core::trainer::{attach_lsmnet, detach_lsmnet, spearman, sweep, train, Datasets, EpochRecord, TrainError, TrainOptions, TrainPlan};

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    generate(&SyntheticConfig {
        count: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn plan(epochs: u32, lambdas: &str, extra: &str) -> TrainPlan {
    TrainPlan::from_toml(&format!(
        r#"
seed = 5

[[phases]]
name = "base"
loss = "hvs"
dataset = "train"
epochs = {epochs}
learning_rate = 1e-3
lambdas = [{lambdas}]
{extra}
"#
    ))
    .unwrap()
}

fn run(plan: &TrainPlan, data: &[Sample], analysis: Option<&dyn AnalysisAdapter>, init: Option<Vec<Checkpoint>>) -> (Vec<Checkpoint>, Vec<f64>) {
    let mut totals = Vec::new();
    let mut cb = |r: &EpochRecord| totals.push(r.total);
    let out = train(
        plan,
        &Datasets::single("train", data),
        analysis,
        TrainOptions {
            on_epoch: Some(&mut cb),
            init,
            ..Default::default()
        },
    )
    .unwrap();
    (out, totals)
}

#[test]
fn desk_plan_reduces_loss() {
    let data = samples(24, 1);
    let (models, totals) = run(&plan(20, "0.01", ""), &data, None, None);
    assert_eq!(totals.len(), 20);
    assert!(totals[19] < totals[0], "{totals:?}");
    let w = &models[0].weights;
    assert_eq!(w.config, NcnConfig::desk());
    assert_eq!(w.meta.lambda, 0.01);
    assert_eq!(w.meta.epoch, 20);
    assert_eq!(w.meta.config_hash, plan(20, "0.01", "").config_hash());
}

#[test]
fn same_seed_same_trajectory() {
    let data = samples(8, 2);
    let p = plan(2, "0.01", "");
    let (a, ta) = run(&p, &data, None, None);
    let (b, tb) = run(&p, &data, None, None);
    assert_eq!(ta, tb);
    assert_eq!(a[0].weights.checksum(), b[0].weights.checksum());
}

#[test]
fn resume_reproduces_trajectory() {
    let data = samples(8, 3);
    let dir = tempfile::tempdir().unwrap();
    let (full, full_totals) = run(&plan(4, "0.01", ""), &data, None, None);
    let first = train(
        &plan(2, "0.01", ""),
        &Datasets::single("train", &data),
        None,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(first[0].epoch, 2);
    let mut rest = Vec::new();
    let mut cb = |r: &EpochRecord| rest.push(r.total);
    let resumed = train(
        &plan(4, "0.01", ""),
        &Datasets::single("train", &data),
        None,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: true,
            on_epoch: Some(&mut cb),
            init: None,
        },
    )
    .unwrap();
    assert_eq!(rest.len(), 2);
    for (a, b) in rest.iter().zip(&full_totals[2..]) {
        assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
    }
    assert_eq!(resumed[0].loss_history.len(), 4);
    assert_eq!(resumed[0].weights.checksum(), full[0].weights.checksum());
    let log = std::fs::read_to_string(dir.path().join("log_0.csv")).unwrap();
    assert!(log.starts_with("# config_hash="));
    assert_eq!(log.lines().filter(|l| l.starts_with("0,base")).count(), 4);
}

#[test]
fn head_only_phase_freezes_codec() {
    let data = samples(8, 4);
    let toy = ToyAnalysis::new(3, 0);
    let (base, _) = run(&plan(1, "0.01", ""), &data, Some(&toy), None);
    let p = TrainPlan::from_toml(
        r#"
seed = 5
[[phases]]
name = "head"
loss = "task"
dataset = "train"
epochs = 2
learning_rate = 1e-2
lambdas = [0.1]
attach_lsmnet = true
[phases.freeze]
ncn = true
"#,
    )
    .unwrap();
    let analysis_sum = toy.checksum();
    let (out, _) = run(&p, &data, Some(&toy), Some(base.clone()));
    let w = &out[0].weights;
    assert_eq!(w.checksum(), base[0].weights.checksum());
    let fresh = attach_lsmnet(&base[0], &toy, LsmInit::default()).unwrap();
    assert_ne!(w.lsm.as_ref().unwrap().checksum(), fresh.weights.lsm.as_ref().unwrap().checksum());
    assert_eq!(toy.checksum(), analysis_sum);
}

#[test]
fn nan_loss_aborts_with_last_good_checkpoint() {
    let data = samples(4, 5);
    let bad = ExternalAdapter::new("nan", |_| Ok(Default::default()))
        .with_loss(|tape, _, _| Ok(tape.constant(Tensor::full([1, 1, 1, 1], f64::NAN))))
        .with_checksum("fixed");
    let p = TrainPlan::from_toml(
        r#"
seed = 1
[[phases]]
name = "task"
loss = "task"
dataset = "train"
epochs = 3
lambdas = [0.1]
"#,
    )
    .unwrap();
    let start = Checkpoint::new(NcnWeights::new(NcnConfig::desk(), 9));
    let err = train(
        &p,
        &Datasets::single("train", &data),
        Some(&bad),
        TrainOptions {
            init: Some(vec![start.clone()]),
            ..Default::default()
        },
    )
    .unwrap_err();
    match err {
        TrainError::NumericFailure { last_good, epoch, .. } => {
            assert_eq!(epoch, 0);
            assert_eq!(last_good.weights.checksum(), start.weights.checksum());
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn empty_dataset_and_lambda_list_are_errors() {
    let p = plan(1, "0.01", "");
    let err = train(&p, &Datasets::single("train", &[]), None, TrainOptions::default()).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset(_)));
    let data = samples(2, 6);
    let err = sweep(&p, &[], &Datasets::single("train", &data), &data, None, 3, TrainOptions::default()).unwrap_err();
    assert!(matches!(err, TrainError::TooFewLambdas));
}

#[test]
fn attach_and_detach() {
    let toy = ToyAnalysis::new(3, 0);
    let base = Checkpoint::new(NcnWeights::new(NcnConfig::desk(), 3));
    let attached = attach_lsmnet(&base, &toy, LsmInit::default()).unwrap();
    assert_eq!(attached.weights.checksum(), base.weights.checksum());
    assert_eq!(attached.weights.lsm.as_ref().unwrap().feature_channels(), 128);
    assert!(matches!(attach_lsmnet(&attached, &toy, LsmInit::default()), Err(TrainError::AlreadyAttached)));
    assert_eq!(checkpoint::to_bytes(&detach_lsmnet(&attached)), checkpoint::to_bytes(&base));
    let blind = ExternalAdapter::new("blind", |_| Ok(Default::default()));
    assert!(matches!(attach_lsmnet(&base, &blind, LsmInit::default()), Err(TrainError::Mask(_))));
}

#[test]
fn fresh_head_barely_changes_bits() {
    let data = samples(12, 7);
    let (base, _) = run(&plan(3, "0.01", ""), &data, None, None);
    let toy = ToyAnalysis::new(3, 0);
    let default = attach_lsmnet(&base[0], &toy, LsmInit::default()).unwrap();
    let zeroed = attach_lsmnet(&base[0], &toy, LsmInit::Constant { bias: 0.0 }).unwrap();
    let (mut plain_bits, mut masked_bits) = (0usize, 0usize);
    for s in &data {
        let plain = codec::encode_image(&s.image, &base[0].weights, None).unwrap();
        let masked = codec::masked_encode(&s.image, &default.weights, &toy).unwrap();
        plain_bits += plain.bytes().len() * 8;
        masked_bits += masked.bytes().len() * 8;
        let half = codec::encode_image(&s.image, &base[0].weights, Some(&MaskTensor::uniform(plain.residual.shape, 0.5).unwrap())).unwrap();
        assert_eq!(codec::masked_encode(&s.image, &zeroed.weights, &toy).unwrap().bytes(), half.bytes());
    }
    let rel = (masked_bits as f64 - plain_bits as f64).abs() / plain_bits as f64;
    assert!(rel <= 0.01, "{masked_bits} vs {plain_bits}");
}

#[test]
fn larger_lambda_gives_lower_rate() {
    let data = samples(16, 8);
    let val = samples(8, 9);
    let p = TrainPlan::from_toml(
        r#"
seed = 2
[model]
channels = 16
hyper_channels = 8
hidden = 16
kernel = 5
context_hidden = 16
[[phases]]
name = "base"
loss = "hvs"
dataset = "train"
epochs = 40
learning_rate = 3e-3
lambdas = [0.01]
"#,
    )
    .unwrap();
    let lambdas = [0.001, 0.01, 0.1, 1.0];
    let (models, curves) = sweep(&p, &lambdas, &Datasets::single("train", &data), &val, None, 3, TrainOptions::default()).unwrap();
    let psnr = curves.iter().find(|c| c.kind == ncn_core::metrics::QualityKind::Psnr).unwrap();
    assert_eq!(psnr.label, "hvs");
    assert!(psnr.points().windows(2).all(|w| w[0].bpp < w[1].bpp));
    let by_lambda: Vec<f64> = models
        .iter()
        .map(|m| ncn_core::trainer::evaluate(&m.weights, &val, None, 0, false).unwrap().bpp)
        .collect();
    assert_eq!(models.iter().map(|m| m.weights.meta.lambda_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    let rho = spearman(&lambdas, &by_lambda);
    assert!(rho <= -0.8, "rho {rho}, bpp {by_lambda:?}");
}
