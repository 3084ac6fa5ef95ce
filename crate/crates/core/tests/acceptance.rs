//! Acceptance suite: one PASS/FAIL line per criterion, at the stated
//! tolerances. Exits non-zero if any criterion fails.
//!
//! Run with `cargo test -p edkd --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::oracles::{cache_average_worst, cross_entropy_worst, similarity_worst, INSTANCES};
use common::{desk_config, max_rel_err, numeric_grad, rand_matrix, rel_err, rng};
use edkd::config::config_from_value;
use edkd::data::{parse_cifar100, CIFAR_RECORD_LEN};
use edkd::embed_cache::{build_cache, build_cache_with, save_cache, load_cache, load_cache_checked, CacheExpectation, EmbeddingCache};
use edkd::losses::{
    clip_loss, clip_loss_grad, cross_entropy_rows, distillation_loss, kl_distill_loss, kl_distill_loss_grad,
    project_teacher, project_teacher_backward, DistillAux, LossWeights, ProjectionWeights, TargetMatrix, NORM_EPS,
};
use edkd::metrics::{measure_run, static_memory_estimate, ResourceProfile};
use edkd::model::{decode_checkpoint, encode_checkpoint, save_checkpoint};
use edkd::trainer::{load_datasets, load_teacher, train, TrainOutcome};
use edkd::{Error, ExperimentConfig, ModelConfig, ModelWeights, Mode, TrackingAllocator};
use ndarray::{Array2, Array4};
use rand::Rng;
use serde_json::json;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run_criterion(name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("[PRIMARY] PASS {name} ({secs:.2} s): {detail}"),
        Err(detail) => println!("[PRIMARY] FAIL {name} ({secs:.2} s): {detail}"),
    }
    outcome.is_ok()
}

// ---------------------------------------------------------------- identities

fn loss_identities() -> Check {
    let start = Instant::now();
    let mut worst_ce = 0.0f64;
    for m in [2usize, 10, 100, 1000] {
        let z = Array2::<f64>::from_elem((4, m), -1.25);
        let t = TargetMatrix::one_hot(&[0, 1, m - 1, m / 2], m).map_err(|e| e.to_string())?;
        let v = cross_entropy_rows(z.view(), &t).map_err(|e| e.to_string())?;
        worst_ce = worst_ce.max((v - (m as f64).ln()).abs());
    }
    ensure(worst_ce < 1e-6, format!("uniform CE off by {worst_ce:e}"))?;

    let e = ndarray::array![[1.0f64, 0.0], [0.0, 1.0]];
    let clip = clip_loss(e.view(), e.view(), &TargetMatrix::identity(2), NORM_EPS).map_err(|e| e.to_string())?;
    let clip_err = (clip - (1.0 + (-1.0f64).exp()).ln()).abs();
    ensure(clip_err < 1e-6, format!("clip B=2 off by {clip_err:e}"))?;

    let mut r = rng(11);
    let mut worst_kl = 0.0f64;
    for _ in 0..20 {
        let z = rand_matrix(&mut r, 5, 7) * 4.0;
        for t in [0.5, 1.0, 3.0] {
            worst_kl = worst_kl.max(kl_distill_loss(z.view(), z.view(), t).map_err(|e| e.to_string())?.abs());
        }
    }
    ensure(worst_kl < 1e-9, format!("KL(identical) = {worst_kl:e}"))?;

    // α₂ = 0 reduces every distillation mode to the supervised loss, exactly.
    let z = rand_matrix(&mut r, 6, 5);
    let zt = rand_matrix(&mut r, 6, 5);
    let es = rand_matrix(&mut r, 6, 4);
    let et = rand_matrix(&mut r, 6, 4);
    let labels = [0, 1, 2, 3, 4, 0];
    let sup = distillation_loss(Mode::SupervisedOnly, z.view(), &labels, DistillAux::None, LossWeights::default())
        .map_err(|e| e.to_string())?;
    let w0 = LossWeights::new(1.0, 0.0).map_err(|e| e.to_string())?;
    let ident = TargetMatrix::identity(6);
    let onehot = TargetMatrix::one_hot(&labels, 6).map_err(|e| e.to_string())?;
    let cases = [
        (Mode::RegularKd, DistillAux::TeacherLogits { z_t: zt.view(), temperature: 2.0 }),
        (
            Mode::ClipTeacher,
            DistillAux::Embeddings { e_s: es.view(), e_t_hat: et.view(), targets: &ident, eps: NORM_EPS, scale: 1.0 },
        ),
        (
            Mode::ClipEmbed,
            DistillAux::Embeddings { e_s: es.view(), e_t_hat: et.view(), targets: &onehot, eps: NORM_EPS, scale: 1.0 },
        ),
    ];
    for (mode, aux) in cases {
        let out = distillation_loss(mode, z.view(), &labels, aux, w0).map_err(|e| e.to_string())?;
        ensure(
            out.breakdown.loss_total == sup.breakdown.loss_total && out.d_logits == sup.d_logits,
            format!("{mode} with alpha2=0 differs from supervised"),
        )?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, format!("took {secs:.3} s (limit 1 s)"))?;
    Ok(format!(
        "uniform CE |err| {worst_ce:.1e} < 1e-6; clip(I, B=2) |err| {clip_err:.1e} < 1e-6; \
         KL(z,z) max {worst_kl:.1e} < 1e-9; alpha2=0 equalities exact in 3 modes; {secs:.3} s < 1 s"
    ))
}

// ----------------------------------------------------------------- gradients

fn gradient_suite() -> Check {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut r = rng(21);
    let mut clip_es = 0.0f64;
    let mut clip_w = 0.0f64;
    let mut kl = 0.0f64;
    for trial in 0..5 {
        let (b, ds, dt) = (6, 5, 8);
        let es = rand_matrix(&mut r, b, ds);
        let et = rand_matrix(&mut r, b, dt);
        let w = rand_matrix(&mut r, ds, dt);
        let targets = if trial % 2 == 0 {
            TargetMatrix::identity(b)
        } else {
            TargetMatrix::one_hot(&[0, 1, 2, 2, 5, 0], b).unwrap()
        };
        let loss = |es: &Array2<f64>, w: &Array2<f64>| {
            let hat = project_teacher(et.view(), &ProjectionWeights { w: w.clone() }).unwrap();
            clip_loss_grad(es.view(), hat.view(), &targets, NORM_EPS, 1.0).unwrap()
        };
        let g = loss(&es, &w);
        clip_es = clip_es.max(max_rel_err(&g.d_student, &numeric_grad(&es, H, |x| loss(x, &w).loss)));
        let dw = project_teacher_backward(et.view(), g.d_teacher.view());
        clip_w = clip_w.max(max_rel_err(&dw, &numeric_grad(&w, H, |x| loss(&es, x).loss)));

        let zs = rand_matrix(&mut r, 6, 8) * 2.0;
        let zt = rand_matrix(&mut r, 6, 8) * 2.0;
        for temp in [1.0, 2.5] {
            let (_, gz) = kl_distill_loss_grad(zs.view(), zt.view(), temp).unwrap();
            let n = numeric_grad(&zs, H, |x| kl_distill_loss_grad(x.view(), zt.view(), temp).unwrap().0);
            kl = kl.max(max_rel_err(&gz, &n));
        }
    }

    // Full model: 2 layers, 16 dims, clip-teacher objective on CLS and logits.
    let cfg = ModelConfig::new(2, 16, 2, 24, 4, 8, 5);
    let mut w = ModelWeights::<f64>::init(&cfg, 3).unwrap();
    for (_, mut t) in w.tensors_mut() {
        t.mapv_inplace(|v| v * 10.0 + r.random_range(-0.05..0.05));
    }
    let images = Array4::from_shape_fn((3, 8, 8, 3), |_| r.random_range(-1.0..1.0));
    let labels = [1, 4, 0];
    let e_t_hat = rand_matrix(&mut r, 3, 16);
    let model_loss = |w: &ModelWeights<f64>, want_grad: bool| {
        let (out, trace) = w.forward_train(images.view()).unwrap();
        let targets = TargetMatrix::identity(3);
        let loss = distillation_loss(
            Mode::ClipTeacher,
            out.logits.view(),
            &labels,
            DistillAux::Embeddings {
                e_s: out.cls_embedding.view(),
                e_t_hat: e_t_hat.view(),
                targets: &targets,
                eps: NORM_EPS,
                scale: 1.0,
            },
            LossWeights::default(),
        )
        .unwrap();
        let mut grads = ModelWeights::zeros(&w.config);
        if want_grad {
            w.backward(&trace, loss.d_student_embedding.as_ref().map(|d| d.view()), Some(loss.d_logits.view()), &mut grads)
                .unwrap();
        }
        (loss.breakdown.loss_total, grads)
    };
    let (_, grads) = model_loss(&w, true);
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let mut model = 0.0f64;
    let mut checked = 0usize;
    for (k, a) in analytic.iter().enumerate() {
        for (j, &analytic_j) in a.iter().enumerate() {
            let eval = |delta: f64| {
                let mut wp = w.clone();
                *wp.tensors_mut()[k].1.iter_mut().nth(j).unwrap() += delta;
                model_loss(&wp, false).0
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            model = model.max(rel_err(analytic_j, numeric));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = clip_es.max(clip_w).max(kl).max(model);
    ensure(worst < 1e-3, format!("max rel err {worst:.2e} (clip E_s {clip_es:.1e}, W_proj {clip_w:.1e}, KL {kl:.1e}, model {model:.1e})"))?;
    ensure(secs < 60.0, format!("took {secs:.1} s (limit 60 s)"))?;
    Ok(format!(
        "max rel err: clip/E_s {clip_es:.1e}, clip/W_proj {clip_w:.1e}, KL/z_s {kl:.1e}, \
         full model ({checked} params, 2 layers x 16 dims) {model:.1e}; all < 1e-3 at f64; {secs:.1} s < 60 s"
    ))
}

// ------------------------------------------------------------------- oracles

fn oracle_suite() -> Check {
    let sim = similarity_worst();
    let ce = cross_entropy_worst();
    let cache = cache_average_worst();
    // The loss oracles sum in a different order from the library, so they can
    // only agree to the last few ulps; the cache mean is compared bit for bit.
    ensure(sim <= 1e-13, format!("similarity differs by {sim:e}"))?;
    ensure(ce <= 1e-13, format!("cross entropy differs by {ce:e}"))?;
    ensure(cache == 0.0, format!("cache mean differs by {cache:e}"))?;
    Ok(format!(
        "{INSTANCES} instances each at f64: similarity max |diff| {sim:.1e}, CE max |diff| {ce:.1e} \
         (round-off only, <= 1e-13), cache mean bit-exact (max |diff| {cache:e})"
    ))
}

// -------------------------------------------------------------- desk scale

struct DeskRuns {
    outcomes: Vec<(Mode, TrainOutcome, ResourceProfile)>,
    seconds: f64,
}

fn measured(config: &ExperimentConfig, data: &edkd::trainer::TrainData) -> Result<(TrainOutcome, ResourceProfile), Error> {
    let estimate = static_memory_estimate(config)?;
    measure_run(config.mode, estimate, || {
        let o = train(config, data)?;
        let s = o.report.mean_epoch_seconds();
        Ok((o, s))
    })
}

/// Trains a teacher locally (supervised, 32 px input), then one student per
/// mode on the 10-class 16 px synthetic task.
fn desk_runs(dir: &Path) -> Result<DeskRuns, String> {
    let start = Instant::now();
    let err = |e: Error| e.to_string();
    let mut teacher_cfg = desk_config("supervised-only", 50, 6);
    teacher_cfg["name"] = json!("teacher");
    teacher_cfg["student"] = json!({"layers": 3, "embed_dim": 96, "heads": 4, "mlp_dim": 192, "patch_size": 4});
    teacher_cfg["student_image_size"] = json!(32);
    let teacher_cfg = config_from_value(teacher_cfg, &[]).map_err(err)?;
    let data = load_datasets(&teacher_cfg.dataset).map_err(err)?;
    let teacher = train(&teacher_cfg, &data).map_err(err)?;
    let teacher_path = dir.join("teacher.edkd");
    save_checkpoint(&teacher.student, &teacher_path).map_err(err)?;

    let mut outcomes = Vec::new();
    for mode in Mode::ALL {
        let mut cfg = desk_config(mode.as_str(), 50, 20);
        cfg["teacher"] = json!({"layers": 3, "embed_dim": 96, "heads": 4, "mlp_dim": 192, "patch_size": 4, "checkpoint": teacher_path});
        cfg["cache_path"] = json!(dir.join("desk.edkc"));
        cfg["cache_samples_per_class"] = json!(50);
        let config = config_from_value(cfg, &[]).map_err(err)?;
        if mode == Mode::ClipEmbed {
            let t = load_teacher(&config).map_err(err)?;
            let digest = config.teacher_digest().map_err(err)?.expect("teacher configured");
            let cache = build_cache_with(&t, digest, &data.train, config.cache_samples_per_class, 0, 32).map_err(err)?;
            save_cache(&cache, config.cache_path.as_ref().unwrap()).map_err(err)?;
        }
        let (o, p) = measured(&config, &data).map_err(err)?;
        outcomes.push((mode, o, p));
    }
    Ok(DeskRuns {
        outcomes,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn desk_scale(runs: &Result<DeskRuns, String>) -> Check {
    let runs = runs.as_ref().map_err(|e| format!("training failed: {e}"))?;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (mode, o, _) in &runs.outcomes {
        let acc = o.report.final_accuracy;
        let curve: Vec<f64> = o.report.epochs.iter().take(5).map(|e| e.losses.loss_total).collect();
        let decreasing = curve.len() == 5 && curve.windows(2).all(|w| w[1] < w[0]);
        if acc <= 0.5 {
            failures.push(format!("{mode} accuracy {acc:.3} <= 0.5"));
        }
        if !decreasing {
            failures.push(format!("{mode} epoch-mean loss not strictly decreasing over epochs 1-5: {curve:.3?}"));
        }
        parts.push(format!("{mode} acc {acc:.3}"));
    }
    let embed = runs.outcomes.iter().find(|(m, ..)| *m == Mode::ClipEmbed).unwrap();
    let calls = embed.1.report.teacher_forward_calls;
    if calls != 0 {
        failures.push(format!("clip-embed teacher forward calls = {calls}"));
    }
    if runs.seconds >= 600.0 {
        failures.push(format!("took {:.0} s (limit 600 s)", runs.seconds));
    }
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    Ok(format!(
        "{} (all > 0.5, chance 0.1); epoch-mean loss strictly decreasing over first 5 epochs in every mode; \
         clip-embed teacher forwards = 0; {:.0} s incl. teacher training < 600 s",
        parts.join(", "),
        runs.seconds
    ))
}

// -------------------------------------------------------------------- memory

fn memory_claims(runs: &Result<DeskRuns, String>) -> Check {
    let large = json!({"layers": 24, "embed_dim": 1024, "heads": 16, "mlp_dim": 4096, "patch_size": 32});
    let mk = |mode: &str| {
        config_from_value(
            json!({
                "mode": mode,
                "dataset": {"kind": "cifar100", "dir": "unused"},
                "teacher": large,
                "cache_path": "unused.edkc"
            }),
            &[],
        )
        .unwrap()
    };
    let teacher_side = static_memory_estimate(&mk("clip-teacher")).map_err(|e| e.to_string())?.teacher_side();
    let table = static_memory_estimate(&mk("clip-embed")).map_err(|e| e.to_string())?.teacher_side();
    ensure(table == 409_600, format!("table bytes {table} != 409600"))?;
    let ratio = teacher_side as f64 / table as f64;
    ensure(ratio >= 59.0, format!("static teacher-side ratio {ratio:.1} < 59"))?;

    let runs = runs.as_ref().map_err(|e| format!("desk runs failed: {e}"))?;
    let get = |m: Mode| &runs.outcomes.iter().find(|(x, ..)| *x == m).unwrap().2;
    let (ct, ce) = (get(Mode::ClipTeacher), get(Mode::ClipEmbed));
    let (pt, pe) = (
        ct.peak_bytes_measured.ok_or("allocator not installed")?,
        ce.peak_bytes_measured.ok_or("allocator not installed")?,
    );
    ensure(pe < pt, format!("clip-embed peak {pe} B >= clip-teacher peak {pt} B"))?;
    ensure(
        ce.mean_epoch_seconds < ct.mean_epoch_seconds,
        format!("clip-embed epoch {:.3} s >= clip-teacher epoch {:.3} s", ce.mean_epoch_seconds, ct.mean_epoch_seconds),
    )?;
    Ok(format!(
        "static teacher-side bytes: ViT-L/32 teacher {teacher_side} vs table {table} -> {ratio:.0}x >= 59; \
         measured peak clip-embed {pe} B < clip-teacher {pt} B ({:.1}x); epoch time {:.3} s < {:.3} s ({:.1}x)",
        pt as f64 / pe as f64,
        ce.mean_epoch_seconds,
        ct.mean_epoch_seconds,
        ct.mean_epoch_seconds / ce.mean_epoch_seconds
    ))
}

// ------------------------------------------------------------------ α-sweep

const SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Low-data variant of the desk task (8 training images per class) with the
/// locally trained teacher's class table. A seed is counted when the best
/// interior α₂ strictly beats both endpoints.
fn alpha_sweep_shape(dir: &Path, runs: &Result<DeskRuns, String>) -> Check {
    runs.as_ref().map_err(|e| format!("teacher unavailable: {e}"))?;
    let err = |e: Error| e.to_string();
    let mut cfg = desk_config("clip-embed", 8, 20);
    cfg["name"] = json!("sweep");
    cfg["dataset"]["val_per_class"] = json!(50);
    cfg["teacher"] = json!({"layers": 3, "embed_dim": 96, "heads": 4, "mlp_dim": 192, "patch_size": 4, "checkpoint": dir.join("teacher.edkd")});
    cfg["cache_path"] = json!(dir.join("sweep.edkc"));
    cfg["cache_samples_per_class"] = json!(8);
    let base = config_from_value(cfg, &[]).map_err(err)?;
    let data = load_datasets(&base.dataset).map_err(err)?;
    let teacher = load_teacher(&base).map_err(err)?;
    let digest = base.teacher_digest().map_err(err)?.expect("teacher configured");
    let cache = build_cache_with(&teacher, digest, &data.train, 8, 0, 32).map_err(err)?;
    save_cache(&cache, base.cache_path.as_ref().unwrap()).map_err(err)?;

    let mut interior_wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut accs = Vec::new();
        for a2 in SWEEP {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.loss.alpha2 = a2;
            cfg.loss.alpha1 = 1.0 - a2;
            accs.push(train(&cfg, &data).map_err(err)?.report.final_accuracy);
        }
        let interior = accs[1..4].iter().cloned().fold(f64::MIN, f64::max);
        let wins = interior > accs[0] && interior > accs[4];
        interior_wins += wins as usize;
        let best = accs.iter().cloned().fold(f64::MIN, f64::max);
        let argbest: Vec<String> = SWEEP
            .iter()
            .zip(&accs)
            .filter(|(_, &a)| a == best)
            .map(|(s, _)| s.to_string())
            .collect();
        rows.push(format!(
            "seed {seed}: [{}] best at alpha2={}",
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", "),
            argbest.join("/")
        ));
    }
    let detail = format!("interior best in {interior_wins}/3 seeds; {}", rows.join("; "));
    ensure(interior_wins >= 2, detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------------- formats

fn is_format<T>(r: &Result<T, Error>) -> bool {
    matches!(r, Err(Error::Format { .. }))
}

fn format_suite(dir: &Path) -> Check {
    let model = ModelWeights::<f32>::init(&ModelConfig::new(2, 16, 2, 32, 4, 8, 10), 5).map_err(|e| e.to_string())?;
    let bytes = encode_checkpoint(&model);
    let path = dir.join("fmt.edkd");
    save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
    let back = decode_checkpoint(&std::fs::read(&path).unwrap(), &path).map_err(|e| e.to_string())?;
    ensure(encode_checkpoint(&back) == bytes, "checkpoint re-encode differs")?;
    let exact = model
        .tensors()
        .into_iter()
        .zip(back.tensors())
        .all(|((_, a), (_, b))| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(exact, "checkpoint values not bit-exact")?;
    let truncations = (0..bytes.len()).filter(|&n| !is_format(&decode_checkpoint(&bytes[..n], &path))).count();
    ensure(truncations == 0, format!("{truncations} checkpoint truncations accepted"))?;
    let mut bad = bytes.clone();
    bad[1] = b'x';
    ensure(is_format(&decode_checkpoint(&bad, &path)), "bad checkpoint magic accepted")?;

    let teacher = ModelWeights::<f32>::init(&ModelConfig::new(1, 12, 2, 16, 4, 8, 4), 1).map_err(|e| e.to_string())?;
    let ds = edkd::data::synthetic_dataset(4, 3, 8, 2);
    let cache = build_cache(&teacher, &ds, 2, 7).map_err(|e| e.to_string())?;
    let cpath = dir.join("fmt.edkc");
    save_cache(&cache, &cpath).map_err(|e| e.to_string())?;
    ensure(load_cache(&cpath).map_err(|e| e.to_string())? == cache, "cache round trip differs")?;
    let cbytes = cache.encode();
    ensure(std::fs::read(&cpath).unwrap() == cbytes, "cache bytes differ")?;
    let ctrunc = (0..cbytes.len()).filter(|&n| !is_format(&EmbeddingCache::decode(&cbytes[..n], &cpath))).count();
    ensure(ctrunc == 0, format!("{ctrunc} cache truncations accepted"))?;
    let mut cbad = cbytes.clone();
    cbad[4] = 0xee;
    ensure(is_format(&EmbeddingCache::decode(&cbad, &cpath)), "bad cache version accepted")?;
    let stale = CacheExpectation {
        teacher_digest: Some([9; 32]),
        dataset_digest: None,
    };
    ensure(matches!(load_cache_checked(&cpath, &stale), Err(Error::Stale(_))), "digest mismatch not stale")?;

    let mut cifar = Vec::new();
    for i in 0..3u8 {
        cifar.extend_from_slice(&[i, i * 30]);
        cifar.extend(std::iter::repeat_n(i, 3072));
    }
    let parsed = parse_cifar100(&cifar, Path::new("t.bin"), "t").map_err(|e| e.to_string())?;
    ensure(parsed.len() * CIFAR_RECORD_LEN == cifar.len(), "CIFAR count x record != size")?;
    ensure(parsed.labels == vec![0, 30, 60], "CIFAR fine labels wrong")?;
    let framing = [1, CIFAR_RECORD_LEN - 1, CIFAR_RECORD_LEN + 1, cifar.len() - 1]
        .iter()
        .all(|&n| is_format(&parse_cifar100(&cifar[..n], Path::new("t.bin"), "t")));
    ensure(framing, "CIFAR mis-framed file accepted")?;
    let mut label = cifar.clone();
    label[1] = 255;
    ensure(
        matches!(parse_cifar100(&label, Path::new("t.bin"), "t"), Err(Error::Validation(_))),
        "CIFAR label 255 not a validation error",
    )?;
    Ok(format!(
        "checkpoint + cache round trips bit-exact; all {} checkpoint and {} cache truncations -> format error; \
         bad magic/version -> format error; digest mismatch -> stale; CIFAR framing exact, label 255 -> validation",
        bytes.len(),
        cbytes.len()
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results = Vec::new();

    results.push(run_criterion("loss-identity suite", loss_identities));
    results.push(run_criterion("gradient suite", gradient_suite));
    results.push(run_criterion("oracle-equivalence suite", oracle_suite));
    let mut desk = Err("not run".to_string());
    results.push(run_criterion("desk-scale training", || {
        desk = desk_runs(dir.path());
        desk_scale(&desk)
    }));
    results.push(run_criterion("structural memory claim", || memory_claims(&desk)));
    results.push(run_criterion("alpha-sweep shape", || alpha_sweep_shape(dir.path(), &desk)));
    results.push(run_criterion("format suite", || format_suite(dir.path())));

    // Paper-scale accuracies are out of reach here (no pretrained teachers,
    // desk compute); the criterion is met by the substituted suite above.
    let substituted = results.iter().all(|&ok| ok);
    results.push(run_criterion("paper-scale accuracy substitution", || {
        if substituted {
            Ok("full-size CIFAR-100 accuracies with pretrained teachers not reproduced (by design); every substituted criterion passed".into())
        } else {
            Err("full-size accuracies not reproduced and a substituted criterion failed".into())
        }
    }));

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
