//! Deterministic training loop, dataset loading, and evaluation entry points.

mod config;
mod eval;
mod infer;
mod optim;

pub use config::{
    DatasetSource, ExperimentConfig, InferenceKind, LossKind, OptimizerConfig, Sparsify,
    SyntheticDataset,
};
pub use eval::{
    evaluate_samples, input_tensor, predict, summarize, EvalSummary, Prediction,
    ATTENTION_DMAX_MARGIN, EVAL_BATCH,
};
pub use infer::{centre_cell, infer_image, InferOutput, InferRequest};
pub use optim::OptimizerState;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::CamOptions;
use crate::discretization::{DepthDiscretization, DiscretizationError};
use crate::losses::{
    attention_loss, cross_entropy_loss, gt_attention_weights, ordinal_loss, total_loss,
    GroundTruthAttention,
};
use crate::metrics::{MetricReport, MetricsError};
use crate::model::{
    downsample_targets, forward, init_params, CellTargets, Checkpoint, Mode, ModelError,
    ParamStore, OUTPUT_STRIDE,
};
use crate::scenes::{
    generate_scene, sparsify_mask, DatasetManifest, SceneError, SceneSample, Split,
};
use crate::tensor::{write_tensors, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("non-finite loss at step {step} (epoch {epoch}, batch {batch}, seed {seed}); batch dumped to {dump}")]
    NonFinite {
        step: usize,
        epoch: usize,
        batch: usize,
        seed: u64,
        dump: String,
    },
    #[error("dataset split {0:?} is empty")]
    EmptySplit(Split),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Discretization(#[from] DiscretizationError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub const STEP_LOG_HEADER: &str = "step,epoch,lr,loss,attention_loss,depth_loss";

pub fn val_log_header() -> String {
    format!(
        "epoch,inference,{},attention_kl,diagonal_mass",
        MetricReport::CSV_HEADER
    )
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SceneSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Synthetic scenes use consecutive seeds starting at the dataset seed,
/// train first, then val, then test.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic(s) => {
            let mut next = s.seed;
            let mut make = |n: usize| -> Result<Vec<SceneSample>> {
                (0..n)
                    .map(|_| {
                        let seed = next;
                        next += 1;
                        let scene = generate_scene(seed, &s.generator)?;
                        Ok(match s.sparsify {
                            Some(sp) => sparsify_mask(&scene, sp.keep_fraction, sp.pattern, seed),
                            None => scene,
                        })
                    })
                    .collect()
            };
            Ok(Dataset {
                train: make(s.train)?,
                val: make(s.val)?,
                test: make(s.test)?,
            })
        }
        DatasetSource::Manifest(path) => {
            let m = DatasetManifest::load(path)?;
            if m.discretization != cfg.discretization {
                return Err(TrainError::Config(format!(
                    "manifest discretization {:?} differs from config {:?}",
                    m.discretization, cfg.discretization
                )));
            }
            Ok(Dataset {
                train: m.load_split(Split::Train)?,
                val: m.load_split(Split::Val)?,
                test: m.load_split(Split::Test)?,
            })
        }
    }
}

struct Prepared {
    sample: SceneSample,
    cells: CellTargets,
    attention: GroundTruthAttention,
}

fn prepare(sample: SceneSample, disc: &DepthDiscretization) -> Result<Prepared> {
    let cells = downsample_targets(
        &sample.depth,
        &sample.valid,
        sample.height,
        sample.width,
        OUTPUT_STRIDE,
        disc,
    );
    let attention = gt_attention_weights(
        &cells.depth,
        disc.d_max() * ATTENTION_DMAX_MARGIN,
        Some(&cells.valid),
    )?;
    Ok(Prepared {
        sample,
        cells,
        attention,
    })
}

/// Result of one epoch's validation pass.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub validation: Option<EvalSummary>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and logs go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
    /// Skip per-epoch validation (the best checkpoint is then the final one).
    pub skip_validation: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub best_epoch: usize,
    /// Per-step CSV including the header.
    pub step_log: String,
    /// Per-epoch validation CSV including the header.
    pub val_log: String,
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochReport>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| TrainError::Io(path.display().to_string(), e))
}

fn val_lines(epoch: usize, s: &EvalSummary) -> String {
    let mut out = String::new();
    for (name, r) in [("hard", &s.hard), ("soft", &s.soft)] {
        let _ = writeln!(
            out,
            "{epoch},{name},{},{},{}",
            r.to_csv_line(),
            s.attention_kl,
            s.confusion.diagonal_mass()
        );
    }
    out
}

pub fn steps_per_epoch(train_len: usize, batch: usize) -> usize {
    train_len.div_ceil(batch)
}

/// Runs `epochs × ⌈train/batch⌉` SGD steps. Batch order and flips come from
/// a generator seeded with the config seed; initialisation uses the same seed.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let net = cfg.network();
    let disc = DepthDiscretization::from_params(cfg.discretization)?;
    let weights = cfg.effective_weights();
    let cam = CamOptions {
        image_pooling: cfg.image_pooling,
    };
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io(dir.display().to_string(), e))?;
        write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    }

    let mut prepared = Vec::with_capacity(data.train.len());
    for s in &data.train {
        let flipped = if cfg.flip {
            Some(prepare(s.flip_horizontal(), &disc)?)
        } else {
            None
        };
        prepared.push((prepare(s.clone(), &disc)?, flipped));
    }

    let mut store = init_params(&net, cfg.seed)?;
    let per_epoch = steps_per_epoch(data.train.len(), cfg.batch_size);
    let mut optim = OptimizerState::new(cfg.optimizer, &store, cfg.epochs * per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c);

    let mut step_log = format!("{STEP_LOG_HEADER}\n");
    let mut val_log = format!("{}\n", val_log_header());
    let mut losses = Vec::with_capacity(optim.max_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let checkpoint = |store: &ParamStore| Checkpoint {
        config: net.clone(),
        discretization: cfg.discretization,
        store: store.clone(),
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk
                .iter()
                .map(|&i| match &prepared[i] {
                    (_, Some(f)) if rng.gen_bool(0.5) => f,
                    (p, _) => p,
                })
                .collect();
            let samples: Vec<&SceneSample> = batch.iter().map(|p| &p.sample).collect();
            let input = input_tensor(&samples);
            let labels: Vec<usize> = batch
                .iter()
                .flat_map(|p| p.cells.labels.iter().copied())
                .collect();
            let valid: Vec<bool> = batch
                .iter()
                .flat_map(|p| p.cells.valid.iter().copied())
                .collect();
            let targets: Vec<GroundTruthAttention> =
                batch.iter().map(|p| p.attention.clone()).collect();

            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let out = forward(&mut tape, &net, &store, x, Mode::Train, cam)?;
            let depth_loss = match cfg.loss {
                LossKind::Ordinal => ordinal_loss(&mut tape, out.logits, &labels, &valid)?,
                LossKind::Ce => cross_entropy_loss(&mut tape, out.logits, &labels, &valid)?,
            };
            let att_loss = attention_loss(&mut tape, out.attention, &targets)?;
            let loss = total_loss(&mut tape, att_loss, depth_loss, weights)?;
            let value = tape.value(loss).item();
            let step = optim.step;
            if !value.is_finite() {
                let dump = match &options.out_dir {
                    Some(d) => d.join(format!("nonfinite_step{step}.actn")),
                    None => std::env::temp_dir()
                        .join(format!("acan_nonfinite_seed{}_step{step}.actn", cfg.seed)),
                };
                let mut f = fs::File::create(&dump)
                    .map_err(|e| TrainError::Io(dump.display().to_string(), e))?;
                write_tensors(&mut f, [&input, tape.value(out.logits)])?;
                return Err(TrainError::NonFinite {
                    step,
                    epoch,
                    batch: batch_index,
                    seed: cfg.seed,
                    dump: dump.display().to_string(),
                });
            }
            let grads = tape.backward(loss)?;
            let named: IndexMap<String, Tensor> = out
                .params
                .iter()
                .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g)))
                .collect();
            let _ = writeln!(
                step_log,
                "{step},{epoch},{},{value},{},{}",
                optim.lr(step),
                tape.value(att_loss).item(),
                tape.value(depth_loss).item()
            );
            optim.sgd_step(&mut store, &named)?;
            store.update_running(&out.batch_stats);
            losses.push(value);
            epoch_loss += value;
        }

        let validation = if options.skip_validation || data.val.is_empty() {
            None
        } else {
            let s = evaluate_samples(&net, &store, &disc, &data.val, cam)?;
            val_log.push_str(&val_lines(epoch, &s));
            let soft = cfg.inference != InferenceKind::Hard;
            let rmse = s.report(soft).rmse;
            if best.as_ref().map_or(true, |(b, _, _)| rmse < *b) {
                best = Some((rmse, epoch, store.clone()));
            }
            Some(s)
        };
        let report = EpochReport {
            epoch,
            step: optim.step,
            mean_loss: epoch_loss / per_epoch as f64,
            validation,
        };
        if options.verbose {
            match &report.validation {
                Some(v) => eprintln!(
                    "epoch {epoch:>3}  loss {:.4}  val rmse hard {:.4} soft {:.4}  att-kl {:.4}",
                    report.mean_loss, v.hard.rmse, v.soft.rmse, v.attention_kl
                ),
                None => eprintln!("epoch {epoch:>3}  loss {:.4}", report.mean_loss),
            }
        }
        epochs.push(report);
    }

    let final_checkpoint = checkpoint(&store);
    let (best_epoch, best_checkpoint) = match best {
        Some((_, e, s)) => (e, checkpoint(&s)),
        None => (cfg.epochs - 1, final_checkpoint.clone()),
    };
    if let Some(dir) = &options.out_dir {
        write_file(&dir.join("steps.csv"), step_log.as_bytes())?;
        write_file(&dir.join("validation.csv"), val_log.as_bytes())?;
        final_checkpoint.save(&dir.join("final.ckpt"))?;
        best_checkpoint.save(&dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        best_epoch,
        step_log,
        val_log,
        losses,
        epochs,
    })
}

/// Evaluates a checkpoint on `samples`, failing if the checkpoint's network
/// differs from `expected` (when given).
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    expected: Option<&crate::model::NetworkConfig>,
    samples: &[SceneSample],
    options: CamOptions,
) -> Result<(Vec<Prediction>, EvalSummary)> {
    if let Some(cfg) = expected {
        ckpt.check_compatible(cfg)?;
    }
    if samples.is_empty() {
        return Err(TrainError::EmptySplit(Split::Test));
    }
    let disc = DepthDiscretization::from_params(ckpt.discretization)?;
    let predictions = predict(&ckpt.config, &ckpt.store, &disc, samples, options)?;
    let summary = summarize(&predictions, samples, &disc)?;
    Ok((predictions, summary))
}

/// Least-squares slope of `values` against their index.
pub fn trend_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in values.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderStage, NetworkConfig};
    use crate::scenes::GeneratorConfig;

    fn tiny() -> ExperimentConfig {
        let stage = |channels, stride, dilation| EncoderStage {
            channels,
            stride,
            dilation,
        };
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticDataset {
                generator: GeneratorConfig {
                    height: 16,
                    width: 16,
                    ..Default::default()
                },
                train: 6,
                val: 2,
                test: 2,
                ..Default::default()
            }),
            network: NetworkConfig {
                input_height: 16,
                input_width: 16,
                stages: vec![
                    stage(4, 2, 1),
                    stage(4, 2, 1),
                    stage(8, 2, 1),
                    stage(8, 1, 2),
                ],
                key_channels: 4,
                value_channels: 4,
                ..Default::default()
            },
            batch_size: 4,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn tiny_run_is_reproducible() {
        let cfg = tiny();
        let data = load_dataset(&cfg).unwrap();
        let a = train(&cfg, &data, &TrainOptions::default()).unwrap();
        let b = train(&cfg, &data, &TrainOptions::default()).unwrap();
        assert_eq!(a.step_log, b.step_log);
        assert_eq!(a.val_log, b.val_log);
        assert_eq!(a.final_checkpoint, b.final_checkpoint);
        assert_eq!(a.losses.len(), 4);
        assert_eq!(a.step_log.lines().count(), 5);
        assert_eq!(a.val_log.lines().count(), 1 + 2 * 2);
        let c = train(
            &ExperimentConfig { seed: 1, ..cfg },
            &data,
            &TrainOptions::default(),
        )
        .unwrap();
        assert_ne!(a.step_log, c.step_log);
    }

    #[test]
    fn writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let data = load_dataset(&cfg).unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let out = train(&cfg, &data, &opts).unwrap();
        for f in [
            "steps.csv",
            "validation.csv",
            "final.ckpt",
            "best.ckpt",
            "config.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let loaded = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(loaded, out.final_checkpoint);
        let back = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn soft_and_hard_share_masking() {
        let cfg = tiny();
        let data = load_dataset(&cfg).unwrap();
        let out = train(&cfg, &data, &TrainOptions::default()).unwrap();
        let (_, s) = evaluate_checkpoint(
            &out.final_checkpoint,
            Some(&cfg.network()),
            &data.test,
            CamOptions::default(),
        )
        .unwrap();
        assert_eq!(s.hard.n_valid, s.soft.n_valid);
        let (_, again) = evaluate_checkpoint(
            &out.final_checkpoint,
            None,
            &data.test,
            CamOptions::default(),
        )
        .unwrap();
        assert_eq!(s, again);
        let wrong = NetworkConfig::default();
        assert!(matches!(
            evaluate_checkpoint(
                &out.final_checkpoint,
                Some(&wrong),
                &data.test,
                CamOptions::default()
            ),
            Err(TrainError::Model(ModelError::Checkpoint(_)))
        ));
    }

    #[test]
    fn cross_entropy_variant_trains() {
        let cfg = ExperimentConfig {
            loss: LossKind::Ce,
            inference: InferenceKind::CeSoft,
            ..tiny()
        };
        let data = load_dataset(&cfg).unwrap();
        let out = train(&cfg, &data, &TrainOptions::default()).unwrap();
        assert!(out.losses.iter().all(|l| l.is_finite()));
        let (preds, _) = evaluate_checkpoint(
            &out.final_checkpoint,
            None,
            &data.test,
            CamOptions::default(),
        )
        .unwrap();
        let probs = preds[0].class_probs.as_ref().unwrap();
        assert_eq!(probs.shape(), &[4, 16]);
        assert!(crate::metrics::is_non_increasing(preds[0].curves.row(0)));
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.optimizer.base_lr = 1e300;
        let data = load_dataset(&cfg).unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            skip_validation: true,
            ..Default::default()
        };
        match train(&cfg, &data, &opts) {
            Err(TrainError::NonFinite { seed, dump, .. }) => {
                assert_eq!(seed, cfg.seed);
                assert!(Path::new(&dump).exists());
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn slope_of_line() {
        assert!((trend_slope(&[3.0, 2.5, 2.0, 1.5]) + 0.5).abs() < 1e-12);
    }
}
