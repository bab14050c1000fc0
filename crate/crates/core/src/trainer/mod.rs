//! Optimizer, configuration and the training protocols.
//!
//! Every network draws its initialization and the shared batch order from
//! seeds derived per role from the experiment seed, so runs that differ only
//! in mode or loss weights see the same student start and the same batches.

mod config;
mod log;
mod sgd;

pub use config::{
    apply_override, AblationAxes, AblationMask, DataConfig, DataKind, ExperimentConfig, FeatureConfig, Mode,
    MetricsConfig, NetworkConfig, OptimConfig,
};
pub use log::{read_run_csv, read_summary, write_run_csv, EpochRow, RunLog, RunSummary};
pub use sgd::{lr_at, sgd_step, Milestone, SgdConfig, SgdState};

use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::data::{batches, epoch_order, load_csv, load_idx, synth_blobs, Batch, BatchPlan, Dataset, Split};
use crate::distill::{
    build_kbm, dml_losses, feature_distill_losses, kd_student_loss, reconstruct_teacher, sokd_losses,
    FeatureLossInputs, LossWeights,
};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, imitation_error_rate, linear_cka, misleading_rate, ActivationMatrix, PredictionRecord};
use crate::nn::{build_model, load_checkpoint, load_checkpoint_expecting, ModelSpec, Network, ParamMode, SequentialModel};
use crate::tensor::{Gradients, Tape, Tensor, Var};

const EVAL_CHUNK: usize = 256;

/// Independent seed for one role (`"student"`, `"partner"`, `"batches"`...).
pub fn derive_seed(seed: u64, role: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(role.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Data and (optionally) the pretrained teacher an experiment runs on.
#[derive(Clone, Debug)]
pub struct ExperimentInputs {
    pub train: Dataset,
    pub test: Dataset,
    pub teacher: Option<SequentialModel>,
}

pub struct RunOutput {
    pub log: RunLog,
    pub student: SequentialModel,
    /// KBM (semi-online) or peer (DML).
    pub partner: Option<SequentialModel>,
    pub reconstructed: Option<SequentialModel>,
    pub student_steps: usize,
    pub partner_steps: usize,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let missing = |field: &str, p: &std::path::Path| {
        if p.exists() {
            Ok(())
        } else {
            Err(Error::config(field, format!("{} does not exist", p.display())))
        }
    };
    let (mut train, mut test) = match d.kind {
        DataKind::Blobs => synth_blobs(cfg.data_seed(), d.classes, d.dim, d.per_class, d.spread)
            .map_err(|e| Error::config("data", e.to_string()))?,
        DataKind::Idx | DataKind::Csv => {
            let path = d.path.clone().ok_or_else(|| Error::config("data.path", "dataset path is required"))?;
            missing("data.path", &path)?;
            let load = |p: &std::path::Path, labels: Option<&std::path::Path>| -> Result<Dataset> {
                match d.kind {
                    DataKind::Idx => {
                        let lp = labels.ok_or_else(|| Error::config("data.labels_path", "idx data needs a label file"))?;
                        missing("data.labels_path", lp)?;
                        load_idx(p, lp)
                    }
                    _ => load_csv(p, &d.label_column),
                }
            };
            let full = load(&path, d.labels_path.as_deref())?;
            match &d.test_path {
                Some(tp) => {
                    missing("data.test_path", tp)?;
                    let mut test = load(tp, d.test_labels_path.as_deref())?;
                    test.split = Split::Test;
                    test.classes = test.classes.max(full.classes);
                    let mut train = full;
                    train.classes = test.classes;
                    (train, test)
                }
                None => {
                    let order = epoch_order(full.len(), cfg.data_seed(), 0);
                    let n_test = ((full.len() as f32) * d.test_fraction).round() as usize;
                    if n_test == 0 || n_test >= full.len() {
                        return Err(Error::config("data.test_fraction", "leaves an empty split"));
                    }
                    let (te, tr) = order.split_at(n_test);
                    let train = full.subset(tr);
                    let mut test = full.subset(te);
                    test.split = Split::Test;
                    (train, test)
                }
            }
        }
    };
    if d.normalize {
        let stats = train.fit_normalization();
        train.normalize(&stats)?;
        test.normalize(&stats)?;
    }
    Ok((train, test))
}

/// Loads data and the teacher checkpoint named by the configuration.
pub fn prepare(cfg: &ExperimentConfig) -> Result<ExperimentInputs> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let teacher = match &cfg.teacher.checkpoint {
        Some(p) if cfg.mode.needs_teacher_checkpoint() => {
            if !p.exists() {
                return Err(Error::config("teacher.checkpoint", format!("{} does not exist", p.display())));
            }
            let ckpt = if cfg.teacher.layers.is_empty() {
                load_checkpoint(p)?
            } else {
                let spec = parse_spec(train.sample_shape(), &cfg.teacher.layers, "teacher.layers")?;
                load_checkpoint_expecting(p, &spec)?
            };
            Some(ckpt.model)
        }
        _ => None,
    };
    Ok(ExperimentInputs { train, test, teacher })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let inputs = prepare(cfg)?;
    run_with(cfg, &inputs)
}

fn parse_spec(input_shape: &[usize], layers: &[String], field: &str) -> Result<ModelSpec> {
    let spec = ModelSpec::parse(input_shape.to_vec(), layers).map_err(|e| Error::config(field, e.to_string()))?;
    spec.infer_shapes().map_err(|e| Error::config(field, e.to_string()))?;
    Ok(spec)
}

/// Top-1 accuracy and predicted classes, without a gradient tape.
pub fn evaluate(model: &impl Network, ds: &Dataset) -> Result<(f64, Vec<usize>)> {
    let (preds, _) = predict(model, ds, None)?;
    Ok((accuracy(&preds, &ds.labels)?, preds))
}

/// Predictions plus, when `tap` is set, that layer's activations flattened
/// per sample.
fn predict(model: &impl Network, ds: &Dataset, tap: Option<&str>) -> Result<(Vec<usize>, Option<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(ds.len());
    let mut feats = tap.map(|_| Vec::new());
    let taps: Vec<&str> = tap.into_iter().collect();
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let out = model.forward(&ds.inputs.select_rows(chunk), &taps)?;
        preds.extend(out.logits.argmax_rows());
        if let (Some(f), Some(name)) = (feats.as_mut(), tap) {
            f.extend(out.features[name].data().iter().map(|&v| v as f64));
        }
    }
    Ok((preds, feats))
}

/// Penultimate representation, or the logits layer for single-block nets.
fn default_tap(model: &SequentialModel) -> String {
    model
        .penultimate_tap()
        .map(str::to_string)
        .unwrap_or_else(|| model.layers().last().expect("non-empty model").spec.name.clone())
}

fn check_tap(model: &SequentialModel, tap: &str, field: &str) -> Result<()> {
    if model.layer_names().any(|n| n == tap) {
        Ok(())
    } else {
        Err(Error::config(field, format!("no layer named `{tap}`")))
    }
}

struct Imitation {
    cka: Option<f64>,
    ier: f64,
    mr: Option<f64>,
}

fn imitation(
    reference: &SequentialModel,
    ref_tap: &str,
    student: &SequentialModel,
    student_tap: &str,
    ds: &Dataset,
) -> Result<Imitation> {
    let (tp, tf) = predict(reference, ds, Some(ref_tap))?;
    let (sp, sf) = predict(student, ds, Some(student_tap))?;
    let record = PredictionRecord::new(tp, sp, ds.labels.clone(), ds.classes)?;
    let n = ds.len();
    let cka = if n >= 2 {
        let (tf, sf) = (tf.unwrap(), sf.unwrap());
        let x = ActivationMatrix::new(n, tf.len() / n, tf)?;
        let y = ActivationMatrix::new(n, sf.len() / n, sf)?;
        Some(linear_cka(&x, &y)?.value)
    } else {
        None
    };
    Ok(Imitation {
        cka,
        ier: imitation_error_rate(&record)?,
        mr: misleading_rate(&record),
    })
}

/// Accuracy of two networks on one dataset plus their imitation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub acc_reference: f64,
    pub acc_student: f64,
    pub cka: Option<f64>,
    pub ier: f64,
    pub mr: Option<f64>,
}

/// Compares `student` against `reference` on `ds`. Taps default to each
/// network's penultimate representation. Networks that do not accept the
/// dataset's samples, or unknown taps, are configuration errors.
pub fn compare_networks(
    reference: &SequentialModel,
    reference_tap: Option<&str>,
    student: &SequentialModel,
    student_tap: Option<&str>,
    ds: &Dataset,
) -> Result<PairMetrics> {
    for (model, field) in [(reference, "teacher"), (student, "student")] {
        if model.input_shape() != ds.sample_shape() {
            return Err(Error::config(
                field,
                format!("network takes {:?} but samples are {:?}", model.input_shape(), ds.sample_shape()),
            ));
        }
        if model.output_shape() != [ds.classes] {
            return Err(Error::config(
                field,
                format!("network emits {:?} but the dataset has {} classes", model.output_shape(), ds.classes),
            ));
        }
    }
    let rt = reference_tap.map_or_else(|| default_tap(reference), str::to_string);
    let st = student_tap.map_or_else(|| default_tap(student), str::to_string);
    check_tap(reference, &rt, "metrics.teacher_tap")?;
    check_tap(student, &st, "metrics.student_tap")?;
    let im = imitation(reference, &rt, student, &st, ds)?;
    Ok(PairMetrics {
        acc_reference: evaluate(reference, ds)?.0,
        acc_student: evaluate(student, ds)?.0,
        cka: im.cka,
        ier: im.ier,
        mr: im.mr,
    })
}

fn step(
    model: &mut SequentialModel,
    vars: &[Var],
    grads: &Gradients,
    state: &mut SgdState,
    cfg: &SgdConfig,
    lr: f32,
) -> Result<()> {
    let gs: Vec<Tensor> = vars
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect();
    sgd_step(model.params_mut(), &gs, state, cfg, lr)
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

/// Mutable training state shared by the protocol implementations.
struct Nets<'t> {
    student: SequentialModel,
    student_opt: SgdState,
    partner: Option<SequentialModel>,
    partner_opt: SgdState,
    teacher: Option<&'t SequentialModel>,
    split: usize,
}

struct TapNames {
    kbm: String,
    student: String,
}

fn train_batch(
    cfg: &ExperimentConfig,
    w: &LossWeights,
    nets: &mut Nets,
    taps: &TapNames,
    batch: &Batch,
    lr_s: f32,
    lr_p: f32,
) -> Result<(Option<f64>, f64)> {
    let labels = &batch.labels;
    let (os, op) = (&cfg.optim.student, &cfg.optim.partner);
    match cfg.mode {
        Mode::Vanilla | Mode::Kd => {
            let mut tape = Tape::new();
            let x = tape.constant(batch.inputs.clone());
            let s = nets.student.forward_on(&mut tape, x, ParamMode::Trainable, &[])?;
            let loss = if cfg.mode == Mode::Kd {
                let teacher = nets.teacher.expect("checked before training");
                let t = teacher.forward_on(&mut tape, x, ParamMode::Frozen, &[])?;
                kd_student_loss(&mut tape, s.logits, t.logits, labels, w)?
            } else {
                tape.cross_entropy(s.logits, labels)?
            };
            let g = tape.backward(loss)?;
            step(&mut nets.student, &s.params, &g, &mut nets.student_opt, os, lr_s)?;
            Ok((None, scalar(&tape, loss)))
        }
        Mode::Dml => {
            let peer = nets.partner.as_mut().expect("peer built");
            let mut tape = Tape::new();
            let x = tape.constant(batch.inputs.clone());
            let a = nets.student.forward_on(&mut tape, x, ParamMode::Trainable, &[])?;
            let b = peer.forward_on(&mut tape, x, ParamMode::Trainable, &[])?;
            let (la, lb) = dml_losses(&mut tape, a.logits, b.logits, labels, w)?;
            let ga = tape.backward(la)?;
            if !cfg.sequential_updates {
                let gb = tape.backward(lb)?;
                step(&mut nets.student, &a.params, &ga, &mut nets.student_opt, os, lr_s)?;
                step(peer, &b.params, &gb, &mut nets.partner_opt, op, lr_p)?;
                return Ok((Some(scalar(&tape, lb)), scalar(&tape, la)));
            }
            step(&mut nets.student, &a.params, &ga, &mut nets.student_opt, os, lr_s)?;
            let mut tape2 = Tape::new();
            let x2 = tape2.constant(batch.inputs.clone());
            let a2 = nets.student.forward_on(&mut tape2, x2, ParamMode::Frozen, &[])?;
            let b2 = peer.forward_on(&mut tape2, x2, ParamMode::Trainable, &[])?;
            let lb2 = kd_student_loss(&mut tape2, b2.logits, a2.logits, labels, w)?;
            let gb = tape2.backward(lb2)?;
            step(peer, &b2.params, &gb, &mut nets.partner_opt, op, lr_p)?;
            Ok((Some(scalar(&tape2, lb2)), scalar(&tape, la)))
        }
        Mode::Sokd | Mode::SokdFeature => {
            let teacher = nets.teacher.expect("checked before training");
            let (low, high) = teacher.split(nets.split)?;
            let kbm = nets.partner.as_mut().expect("kbm built");
            let feature = cfg.mode == Mode::SokdFeature;
            let kbm_taps: Vec<&str> = if feature { vec![taps.kbm.as_str()] } else { vec![] };
            let s_taps: Vec<&str> = if feature { vec![taps.student.as_str()] } else { vec![] };

            let mut tape = Tape::new();
            let x = tape.constant(batch.inputs.clone());
            let h = low.forward_on(&mut tape, x, ParamMode::Frozen, &[])?.logits;
            let t = high.forward_on(&mut tape, h, ParamMode::Frozen, &kbm_taps)?;
            let k = kbm.forward_on(&mut tape, h, ParamMode::Trainable, &kbm_taps)?;
            let s = nets.student.forward_on(&mut tape, x, ParamMode::Trainable, &s_taps)?;
            let (l_kbm, l_s) = if feature {
                let inputs = FeatureLossInputs {
                    kbm_logits: k.logits,
                    student_logits: s.logits,
                    feat_kbm: k.features[&taps.kbm],
                    feat_teacher: t.features[&taps.kbm],
                    feat_student: s.features[&taps.student],
                };
                feature_distill_losses(&mut tape, inputs, labels, cfg.features.spec(), w)?
            } else {
                let l = sokd_losses(&mut tape, k.logits, t.logits, s.logits, labels, w)?;
                (l.kbm, l.student)
            };
            let gk = tape.backward(l_kbm)?;
            if !cfg.sequential_updates {
                let gs = tape.backward(l_s)?;
                step(kbm, &k.params, &gk, &mut nets.partner_opt, op, lr_p)?;
                step(&mut nets.student, &s.params, &gs, &mut nets.student_opt, os, lr_s)?;
                return Ok((Some(scalar(&tape, l_kbm)), scalar(&tape, l_s)));
            }
            step(kbm, &k.params, &gk, &mut nets.partner_opt, op, lr_p)?;
            let mut tape2 = Tape::new();
            let x2 = tape2.constant(batch.inputs.clone());
            let h2 = low.forward_on(&mut tape2, x2, ParamMode::Frozen, &[])?.logits;
            let k2 = kbm.forward_on(&mut tape2, h2, ParamMode::Frozen, &kbm_taps)?;
            let s2 = nets.student.forward_on(&mut tape2, x2, ParamMode::Trainable, &s_taps)?;
            let l_s2 = if feature {
                let inputs = FeatureLossInputs {
                    kbm_logits: k2.logits,
                    student_logits: s2.logits,
                    feat_kbm: k2.features[&taps.kbm],
                    feat_teacher: k2.features[&taps.kbm],
                    feat_student: s2.features[&taps.student],
                };
                feature_distill_losses(&mut tape2, inputs, labels, cfg.features.spec(), w)?.1
            } else {
                kd_student_loss(&mut tape2, s2.logits, k2.logits, labels, w)?
            };
            let gs = tape2.backward(l_s2)?;
            step(&mut nets.student, &s2.params, &gs, &mut nets.student_opt, os, lr_s)?;
            Ok((Some(scalar(&tape, l_kbm)), scalar(&tape2, l_s2)))
        }
    }
}

/// Runs one experiment on already loaded inputs.
pub fn run_with(cfg: &ExperimentConfig, inputs: &ExperimentInputs) -> Result<RunOutput> {
    let started = Instant::now();
    cfg.validate_with(false)?;
    let (train, test) = (&inputs.train, &inputs.test);
    let shape = train.sample_shape().to_vec();

    let student_spec = parse_spec(&shape, &cfg.student.layers, "student.layers")?;
    if student_spec.output_shape()? != [train.classes] {
        return Err(Error::config(
            "student.layers",
            format!("network emits {:?} but the data has {} classes", student_spec.output_shape()?, train.classes),
        ));
    }
    let student = match &cfg.student.checkpoint {
        Some(p) => load_checkpoint_expecting(p, &student_spec)?.model,
        None => build_model(&student_spec, derive_seed(cfg.seed, "student"))?,
    };

    let teacher = if cfg.mode.needs_teacher_checkpoint() {
        let t = inputs
            .teacher
            .as_ref()
            .ok_or_else(|| Error::config("teacher.checkpoint", "no pretrained teacher supplied"))?;
        if t.input_shape() != shape.as_slice() || t.output_shape() != [train.classes] {
            return Err(Error::config(
                "teacher.checkpoint",
                format!("teacher maps {:?} -> {:?}, data needs {shape:?} -> [{}]", t.input_shape(), t.output_shape(), train.classes),
            ));
        }
        Some(t)
    } else {
        None
    };

    let mut split = 0;
    let partner = match cfg.mode {
        Mode::Dml => {
            let spec = parse_spec(&shape, &cfg.teacher.layers, "teacher.layers")?;
            if spec.output_shape()? != [train.classes] {
                return Err(Error::config("teacher.layers", "peer output does not match the class count"));
            }
            Some(build_model(&spec, derive_seed(cfg.seed, "partner"))?)
        }
        Mode::Sokd | Mode::SokdFeature => {
            let t = teacher.expect("semi-online modes have a teacher");
            let blocks = t.block_count();
            split = cfg.split_index.unwrap_or(blocks.saturating_sub(2).max(1));
            if split == 0 || split >= blocks {
                return Err(Error::config(
                    "split_index",
                    format!("must lie in [1, {}] for a {blocks}-block teacher", blocks.saturating_sub(1)),
                ));
            }
            Some(build_kbm(t, split, cfg.kbm_init, derive_seed(cfg.seed, "partner"))?)
        }
        _ => None,
    };

    let taps = TapNames {
        kbm: match (&cfg.features.kbm_tap, &partner) {
            (Some(tap), Some(k)) => {
                check_tap(k, tap, "features.kbm_tap")?;
                tap.clone()
            }
            (None, Some(k)) => default_tap(k),
            _ => String::new(),
        },
        student: match &cfg.features.student_tap {
            Some(tap) => {
                check_tap(&student, tap, "features.student_tap")?;
                tap.clone()
            }
            None => default_tap(&student),
        },
    };

    let weights = if cfg.mode.is_sokd() {
        cfg.ablation.apply(&cfg.loss)
    } else {
        cfg.loss.clone()
    };
    let teacher_checksum_before = teacher.map(|t| t.param_checksum());
    let teacher_acc = teacher.map(|t| evaluate(t, test)).transpose()?.map(|r| r.0);
    let reconstruct = |kbm: &SequentialModel| -> Result<SequentialModel> {
        let t = teacher.expect("semi-online modes have a teacher");
        let (low, _) = t.split(split)?;
        reconstruct_teacher(&low, kbm)
    };
    let initial_reconstructed_acc = match (&partner, cfg.mode.is_sokd()) {
        (Some(k), true) => Some(evaluate(&reconstruct(k)?, test)?.0),
        _ => None,
    };

    let mut nets = Nets {
        student,
        student_opt: SgdState::default(),
        partner,
        partner_opt: SgdState::default(),
        teacher,
        split,
    };
    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, "batches"),
        drop_last: cfg.drop_last,
    };

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut batches_per_epoch = 0;
    let mut reconstructed = None;
    for epoch in 0..cfg.epochs {
        let lr_s = lr_at(epoch, &cfg.optim.student);
        let lr_p = lr_at(epoch, &cfg.optim.partner);
        let epoch_batches = batches(train, &plan, epoch)?;
        batches_per_epoch = epoch_batches.len();
        let (mut sum_p, mut sum_s) = (0f64, 0f64);
        for batch in &epoch_batches {
            let (lp, ls) = train_batch(cfg, &weights, &mut nets, &taps, batch, lr_s, lr_p)?;
            if !ls.is_finite() || lp.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("training loss diverged in epoch {epoch}")));
            }
            sum_p += lp.unwrap_or(0.0);
            sum_s += ls;
        }
        let nb = epoch_batches.len().max(1) as f64;

        let (acc_train_s, _) = evaluate(&nets.student, train)?;
        let (acc_test_s, _) = evaluate(&nets.student, test)?;
        reconstructed = match (&nets.partner, cfg.mode.is_sokd()) {
            (Some(k), true) => Some(reconstruct(k)?),
            _ => None,
        };
        let acc_rec = reconstructed.as_ref().map(|r| evaluate(r, test)).transpose()?.map(|r| r.0);

        let reference: Option<&SequentialModel> = match cfg.mode {
            Mode::Vanilla => None,
            Mode::Kd => nets.teacher,
            Mode::Dml => nets.partner.as_ref(),
            Mode::Sokd | Mode::SokdFeature => reconstructed.as_ref(),
        };
        let due = cfg.metrics.every > 0 && ((epoch + 1) % cfg.metrics.every == 0 || epoch + 1 == cfg.epochs);
        let im = match reference {
            Some(r) if due => {
                let rtap = cfg.metrics.teacher_tap.clone().unwrap_or_else(|| default_tap(r));
                check_tap(r, &rtap, "metrics.teacher_tap")?;
                let stap = cfg.metrics.student_tap.clone().unwrap_or_else(|| default_tap(&nets.student));
                check_tap(&nets.student, &stap, "metrics.student_tap")?;
                Some(imitation(r, &rtap, &nets.student, &stap, train)?)
            }
            _ => None,
        };

        rows.push(EpochRow {
            epoch,
            lr: lr_s,
            loss_teacher_or_kbm: nets.partner.as_ref().map(|_| sum_p / nb),
            loss_student: sum_s / nb,
            acc_train_s,
            acc_test_s,
            acc_test_kbm_reconstructed: acc_rec,
            cka: im.as_ref().and_then(|m| m.cka),
            ier: im.as_ref().map(|m| m.ier),
            mr: im.as_ref().and_then(|m| m.mr),
        });
    }

    let last = rows.last().expect("epochs >= 1");
    let best = |f: fn(&EpochRow) -> Option<f64>| rows.iter().filter_map(f).reduce(f64::max);
    let summary = RunSummary {
        mode: cfg.mode.name().to_string(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_acc_student: last.acc_test_s,
        best_acc_student: best(|r| Some(r.acc_test_s)).unwrap_or(0.0),
        final_acc_reconstructed: last.acc_test_kbm_reconstructed,
        best_acc_reconstructed: best(|r| r.acc_test_kbm_reconstructed),
        teacher_acc,
        initial_reconstructed_acc,
        final_cka: last.cka,
        final_ier: last.ier,
        final_mr: last.mr,
        student_steps: nets.student_opt.steps,
        partner_steps: nets.partner_opt.steps,
        batches_per_epoch,
        teacher_checksum_before,
        teacher_checksum_after: nets.teacher.map(|t| t.param_checksum()),
        config_checksum: cfg.checksum(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        log: RunLog {
            rows,
            summary,
            config_echo: cfg.echo(),
        },
        student: nets.student,
        partner: nets.partner,
        reconstructed,
        student_steps: nets.student_opt.steps,
        partner_steps: nets.partner_opt.steps,
    })
}

#[cfg(test)]
mod tests;
