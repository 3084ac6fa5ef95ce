//! Training loop for all four modes, evaluation and α-sweeps.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig, Mode, Precision};
use crate::data::{batch_iterator_sized, load_cifar100, prepare_images, synthetic_dataset, Dataset, Split};
use crate::embed_cache::{load_cache_checked, CacheExpectation};
use crate::error::{Error, Result};
use crate::losses::{
    distillation_loss, project_teacher, project_teacher_backward, DistillAux, LossBreakdown, LossWeights,
    ProjectionWeights, TargetMatrix, NORM_EPS,
};
use crate::model::{load_checkpoint, ModelConfig, ModelWeights};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::real::Real;

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's batches.
    pub losses: LossBreakdown,
    pub val_accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: ExperimentConfig,
    /// Weight of the distillation term for this run (the α-sweep tag).
    pub alpha2: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub wall_seconds: f64,
    pub teacher_forward_calls: u64,
}

impl TrainingReport {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainingReport,
    pub student: ModelWeights<f32>,
    pub projection: Option<Array2<f32>>,
    /// Loss components of every optimizer step, in order.
    pub step_losses: Vec<LossBreakdown>,
}

/// Train and validation splits.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub val: Dataset,
}

/// Materializes the configured datasets.
pub fn load_datasets(spec: &DatasetSpec) -> Result<TrainData> {
    match spec {
        DatasetSpec::Synthetic {
            num_classes,
            per_class,
            val_per_class,
            image_size,
            seed,
        } => Ok(TrainData {
            train: synthetic_dataset(*num_classes, *per_class, *image_size, *seed),
            val: synthetic_dataset(*num_classes, *val_per_class, *image_size, seed.wrapping_add(1)),
        }),
        DatasetSpec::Cifar100 { dir } => Ok(TrainData {
            train: load_cifar100(dir, Split::Train)?,
            val: load_cifar100(dir, Split::Test)?,
        }),
    }
}

/// A frozen model whose forward passes are counted.
pub struct Teacher<T> {
    weights: ModelWeights<T>,
    calls: AtomicU64,
}

impl<T: Real> Teacher<T> {
    pub fn new(weights: ModelWeights<T>) -> Self {
        Self {
            weights,
            calls: AtomicU64::new(0),
        }
    }

    pub fn forward(&self, images: ArrayView4<T>) -> Result<crate::model::EncoderOutput<T>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.weights.forward(images)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        &self.weights
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }
}

/// Loads the configured teacher from its checkpoint, or initializes it from
/// `init_seed`.
pub fn load_teacher(config: &ExperimentConfig) -> Result<ModelWeights<f32>> {
    let spec = config
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("mode {} requires a teacher", config.mode)))?;
    let expected = config.teacher_config().expect("teacher spec present");
    match &spec.checkpoint {
        Some(path) => {
            let w = load_checkpoint(path)?;
            if w.config != expected {
                return Err(Error::Config(format!(
                    "teacher checkpoint {} has config {:?}, expected {:?}",
                    path.display(),
                    w.config,
                    expected
                )));
            }
            Ok(w)
        }
        None => ModelWeights::init(&expected, spec.init_seed),
    }
}

/// SplitMix64 finalizer; derives independent seeds from one run seed.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PROJECTION_SEED_STREAM: u64 = 1;
const EVAL_BATCH: usize = 256;

/// Fraction of rows whose argmax equals the label (first maximum wins).
pub fn accuracy_from_logits<T: Real>(logits: ArrayView2<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy at the model's input size.
pub fn evaluate<T: Real>(weights: &ModelWeights<T>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let size = weights.config.image_size;
    let mut hits = 0.0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let images = prepare_images(dataset, chunk, size).mapv(|v| T::from_f64_lossy(v as f64));
        let out = weights.forward(images.view())?;
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        hits += accuracy_from_logits(out.logits.view(), &labels) * chunk.len() as f64;
    }
    Ok(hits / dataset.len() as f64)
}

fn check_finite(b: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    let parts = [
        ("loss_ce", Some(b.loss_ce)),
        ("loss_kd", b.loss_kd),
        ("loss_clip", b.loss_clip),
        ("loss_total", Some(b.loss_total)),
    ];
    for (component, v) in parts {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NumericAbort {
                    component,
                    value: v,
                    epoch,
                    step,
                });
            }
        }
    }
    Ok(())
}

#[derive(Default)]
struct EpochAccumulator {
    samples: f64,
    total: f64,
    ce: f64,
    kd: Option<f64>,
    clip: Option<f64>,
}

impl EpochAccumulator {
    fn add(&mut self, b: &LossBreakdown, n: usize) {
        let n = n as f64;
        self.samples += n;
        self.total += b.loss_total * n;
        self.ce += b.loss_ce * n;
        if let Some(k) = b.loss_kd {
            *self.kd.get_or_insert(0.0) += k * n;
        }
        if let Some(c) = b.loss_clip {
            *self.clip.get_or_insert(0.0) += c * n;
        }
    }

    fn mean(&self) -> LossBreakdown {
        let s = self.samples.max(1.0);
        LossBreakdown {
            loss_total: self.total / s,
            loss_ce: self.ce / s,
            loss_kd: self.kd.map(|v| v / s),
            loss_clip: self.clip.map(|v| v / s),
        }
    }
}

/// Trains one student as configured. Dispatches on `config.precision`.
pub fn train(config: &ExperimentConfig, data: &TrainData) -> Result<TrainOutcome> {
    match config.precision {
        Precision::F32 => train_typed::<f32>(config, data),
        Precision::F64 => train_typed::<f64>(config, data),
    }
}

/// Trains with element type `T`.
///
/// The student and projection are updated by AdamW with a cosine learning
/// rate stepped once per epoch; the projection is not weight-decayed. The
/// teacher is never updated, and in clip-embed mode it is never built.
pub fn train_typed<T: Real>(config: &ExperimentConfig, data: &TrainData) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let mode = config.mode;
    let weights: LossWeights = config.loss_weights()?;
    let classes = config.num_classes();
    for (name, ds) in [("train", &data.train), ("validation", &data.val)] {
        if ds.class_count != classes {
            return Err(Error::Data(format!(
                "{name} set has {} classes, config expects {classes}",
                ds.class_count
            )));
        }
        if ds.is_empty() {
            return Err(Error::Data(format!("{name} set is empty")));
        }
    }

    // Teacher surrogate: a live model or the class-embedding table.
    let teacher: Option<Teacher<T>> = if mode.needs_teacher_model() {
        Some(Teacher::new(load_teacher(config)?.cast::<T>()))
    } else {
        None
    };
    let table: Option<Array2<T>> = if mode == Mode::ClipEmbed {
        let path = config.cache_path.as_ref().expect("validated");
        let expect = CacheExpectation {
            teacher_digest: config.teacher_digest()?,
            dataset_digest: Some(data.train.digest()),
        };
        let cache = load_cache_checked(path, &expect)?;
        if cache.num_classes() != classes {
            return Err(Error::Stale(format!(
                "cache has {} classes, dataset has {classes}",
                cache.num_classes()
            )));
        }
        Some(cache.table.mapv(|v| T::from_f64_lossy(v as f64)))
    } else {
        None
    };
    let teacher_dim = teacher
        .as_ref()
        .map(|t| t.config().embed_dim)
        .or_else(|| table.as_ref().map(|t| t.ncols()));

    let student_cfg = config.student_config();
    let mut student = ModelWeights::<T>::init(&student_cfg, config.seed)?;
    let mut grads = ModelWeights::<T>::zeros(&student_cfg);
    let mut projection = if mode.uses_projection() {
        Some(ProjectionWeights::<T>::init(
            student_cfg.embed_dim,
            teacher_dim.expect("clip modes have a teacher dim"),
            derive_seed(config.seed, PROJECTION_SEED_STREAM),
        ))
    } else {
        None
    };

    let adam = AdamWConfig::default();
    let mut student_opt = AdamW::<T>::new(adam, student.tensors().iter().map(|(_, t)| t.shape()));
    let mut proj_opt = projection
        .as_ref()
        .map(|p| AdamW::<T>::new(adam, [p.w.shape()]));

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let lr = cosine_lr(epoch, config.epochs, config.base_lr);
        let mut acc = EpochAccumulator::default();
        let batches = batch_iterator_sized(&data.train, config.batch_size, config.seed, epoch, student_cfg.image_size);
        for (step, batch) in batches.enumerate() {
            let images = batch.images.mapv(|v| T::from_f64_lossy(v as f64));
            let (out, trace) = student.forward_train(images.view())?;

            let teacher_out = match &teacher {
                Some(t) => {
                    let timg = prepare_images(&data.train, &batch.indices, t.config().image_size)
                        .mapv(|v| T::from_f64_lossy(v as f64));
                    Some(t.forward(timg.view())?)
                }
                None => None,
            };
            // Teacher embeddings E_t fed to the projection, and their targets.
            let (e_t, targets): (Option<ArrayView2<T>>, Option<TargetMatrix>) = match mode {
                Mode::ClipTeacher => (
                    teacher_out.as_ref().map(|o| o.cls_embedding.view()),
                    Some(TargetMatrix::identity(batch.len())),
                ),
                Mode::ClipEmbed => (
                    table.as_ref().map(|t| t.view()),
                    Some(TargetMatrix::one_hot(&batch.labels, classes)?),
                ),
                _ => (None, None),
            };
            let e_t_hat = match (&projection, e_t) {
                (Some(p), Some(e)) => Some(project_teacher(e, p)?),
                _ => None,
            };

            let aux = match mode {
                Mode::SupervisedOnly => DistillAux::None,
                Mode::RegularKd => DistillAux::TeacherLogits {
                    z_t: teacher_out.as_ref().expect("teacher present").logits.view(),
                    temperature: config.loss.kl_temperature,
                },
                Mode::ClipTeacher | Mode::ClipEmbed => DistillAux::Embeddings {
                    e_s: out.cls_embedding.view(),
                    e_t_hat: e_t_hat.as_ref().expect("projected").view(),
                    targets: targets.as_ref().expect("targets built"),
                    eps: NORM_EPS,
                    scale: config.loss.clip_scale,
                },
            };
            let loss = distillation_loss(mode, out.logits.view(), &batch.labels, aux, weights)?;
            check_finite(&loss.breakdown, epoch, step)?;

            grads.tensors_mut().into_iter().for_each(|(_, mut g)| g.fill(T::zero()));
            student.backward(
                &trace,
                loss.d_student_embedding.as_ref().map(|d| d.view()),
                Some(loss.d_logits.view()),
                &mut grads,
            )?;
            drop(trace);
            student_opt.update(
                student.tensors_mut().into_iter().map(|(_, t)| t).collect(),
                grads.tensors().into_iter().map(|(_, t)| t).collect(),
                lr,
                config.weight_decay,
            );
            if let (Some(p), Some(opt), Some(e), Some(d)) =
                (projection.as_mut(), proj_opt.as_mut(), e_t, loss.d_teacher_embedding.as_ref())
            {
                let dw = project_teacher_backward(e, d.view());
                opt.update(vec![p.w.view_mut().into_dyn()], vec![dw.view().into_dyn()], lr, 0.0);
            }

            acc.add(&loss.breakdown, batch.len());
            step_losses.push(loss.breakdown);
        }
        let seconds = epoch_start.elapsed().as_secs_f64();
        let val_accuracy = evaluate(&student, &data.val)?;
        epochs.push(EpochRecord {
            epoch,
            losses: acc.mean(),
            val_accuracy,
            lr,
            seconds,
        });
    }

    let final_accuracy = epochs.last().map_or(0.0, |e| e.val_accuracy);
    let report = TrainingReport {
        config: config.clone(),
        alpha2: if mode == Mode::SupervisedOnly { 0.0 } else { weights.alpha2() },
        epochs,
        final_accuracy,
        wall_seconds: start.elapsed().as_secs_f64(),
        teacher_forward_calls: teacher.as_ref().map_or(0, Teacher::calls),
    };
    Ok(TrainOutcome {
        report,
        student: student.cast(),
        projection: projection.map(|p| p.w.mapv(|v| v.to_f64_lossy() as f32)),
        step_losses,
    })
}

/// One run per α₂ with α₁ = 1 − α₂, sharing seed and data order.
pub fn alpha_sweep(base: &ExperimentConfig, alpha2_values: &[f64], data: &TrainData) -> Result<Vec<TrainOutcome>> {
    if let Some(bad) = alpha2_values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Validation(format!("alpha2 {bad} is outside [0, 1]")));
    }
    alpha2_values
        .iter()
        .map(|&a2| {
            let mut cfg = base.clone();
            cfg.loss.alpha2 = a2;
            cfg.loss.alpha1 = 1.0 - a2;
            cfg.name = format!("{}-alpha2-{a2}", base.name);
            train(&cfg, data)
        })
        .collect()
}

/// Mean over rows; used for quick embedding summaries in reports and tests.
pub fn mean_embedding<T: Real>(e: ArrayView2<T>) -> Vec<f64> {
    e.mean_axis(Axis(0))
        .map(|m| m.iter().map(|v| v.to_f64_lossy()).collect())
        .unwrap_or_default()
}
