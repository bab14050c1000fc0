use super::*;
use crate::nn::{Layer, LayerSpec};

fn base(mode: Mode) -> ExperimentConfig {
    let text = r#"
mode = "vanilla"
seed = 11
epochs = 3
batch_size = 16

[data]
kind = "blobs"
classes = 3
dim = 4
per_class = 40
spread = 1.5

[teacher]
layers = ["dense 4 16", "relu", "dense 16 16", "relu", "dense 16 3"]

[student]
layers = ["dense 4 6", "relu", "dense 6 3"]

[optim.student]
lr = 0.05
schedule = [{ epoch = 2, factor = 0.5 }]

[optim.partner]
lr = 0.05
"#;
    let mut cfg = ExperimentConfig::from_toml_str(text, &[]).unwrap();
    cfg.mode = mode;
    cfg
}

fn inputs_with_teacher(cfg: &ExperimentConfig) -> ExperimentInputs {
    let (train, test) = load_data(cfg).unwrap();
    let pre = cfg.pretrain_view();
    let teacher = run_with(
        &pre,
        &ExperimentInputs {
            train: train.clone(),
            test: test.clone(),
            teacher: None,
        },
    )
    .unwrap()
    .student;
    ExperimentInputs {
        train,
        test,
        teacher: Some(teacher),
    }
}

fn student_columns(log: &RunLog) -> Vec<(u64, u64, u64)> {
    log.rows
        .iter()
        .map(|r| (r.loss_student.to_bits(), r.acc_train_s.to_bits(), r.acc_test_s.to_bits()))
        .collect()
}

#[test]
fn kd_without_kl_is_vanilla() {
    let inputs = inputs_with_teacher(&base(Mode::Vanilla));
    let vanilla = run_with(&base(Mode::Vanilla), &inputs).unwrap();
    let mut kd = base(Mode::Kd);
    kd.loss.lambda2 = 0.0;
    let kd = run_with(&kd, &inputs).unwrap();
    assert_eq!(student_columns(&vanilla.log), student_columns(&kd.log));
    assert_eq!(vanilla.student.param_checksum(), kd.student.param_checksum());

    let full = run_with(&base(Mode::Kd), &inputs).unwrap();
    assert_ne!(vanilla.student.param_checksum(), full.student.param_checksum());
}

#[test]
fn sokd_without_distillation_is_vanilla_student_and_ce_kbm() {
    let inputs = inputs_with_teacher(&base(Mode::Vanilla));
    let vanilla = run_with(&base(Mode::Vanilla), &inputs).unwrap();
    let mut cfg = base(Mode::Sokd);
    cfg.loss.alpha2 = 0.0;
    cfg.loss.alpha3 = 0.0;
    cfg.loss.lambda2 = 0.0;
    let sokd = run_with(&cfg, &inputs).unwrap();
    assert_eq!(student_columns(&vanilla.log), student_columns(&sokd.log));
    assert_eq!(vanilla.student.param_checksum(), sokd.student.param_checksum());

    // the KBM followed plain cross-entropy on frozen low-level features
    let teacher = inputs.teacher.as_ref().unwrap();
    let l = teacher.block_count() - 2;
    let mut kbm = build_kbm(teacher, l, Default::default(), 0).unwrap();
    let (low, _) = teacher.split(l).unwrap();
    let mut opt = SgdState::default();
    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, "batches"),
        drop_last: false,
    };
    for epoch in 0..cfg.epochs {
        for b in batches(&inputs.train, &plan, epoch).unwrap() {
            let mut tape = Tape::new();
            let x = tape.constant(b.inputs.clone());
            let h = low.forward_on(&mut tape, x, ParamMode::Frozen, &[]).unwrap().logits;
            let k = kbm.forward_on(&mut tape, h, ParamMode::Trainable, &[]).unwrap();
            let loss = tape.cross_entropy(k.logits, &b.labels).unwrap();
            let g = tape.backward(loss).unwrap();
            step(&mut kbm, &k.params, &g, &mut opt, &cfg.optim.partner, lr_at(epoch, &cfg.optim.partner)).unwrap();
        }
    }
    assert_eq!(kbm.param_checksum(), sokd.partner.unwrap().param_checksum());
}

#[test]
fn sokd_freezes_teacher_and_starts_from_it() {
    let inputs = inputs_with_teacher(&base(Mode::Vanilla));
    let before = inputs.teacher.as_ref().unwrap().param_checksum();
    let out = run_with(&base(Mode::Sokd), &inputs).unwrap();
    let s = &out.log.summary;
    assert_eq!(s.teacher_checksum_before.as_deref(), Some(before.as_str()));
    assert_eq!(s.teacher_checksum_before, s.teacher_checksum_after);
    assert_eq!(s.initial_reconstructed_acc, s.teacher_acc);
    assert_eq!(out.student_steps, s.batches_per_epoch * 3);
    assert_eq!(out.partner_steps, out.student_steps);
    assert!(out.log.rows.iter().all(|r| r.acc_test_kbm_reconstructed.is_some()));
    assert!(out.log.rows.iter().all(|r| r.cka.is_some() && r.ier.is_some()));
    assert!(out.reconstructed.is_some());
}

#[test]
fn dml_steps_both_networks_once_per_batch() {
    let cfg = base(Mode::Dml);
    let out = run_experiment(&cfg).unwrap();
    let bpe = out.log.summary.batches_per_epoch;
    assert_eq!(bpe, 6);
    assert_eq!(out.student_steps, bpe * cfg.epochs);
    assert_eq!(out.partner_steps, bpe * cfg.epochs);
    assert!(out.log.rows.iter().all(|r| r.loss_teacher_or_kbm.is_some()));
}

#[test]
fn sequential_updates_differ_from_synchronous() {
    for mode in [Mode::Dml, Mode::Sokd] {
        let inputs = inputs_with_teacher(&base(Mode::Vanilla));
        let sync = run_with(&base(mode), &inputs).unwrap();
        let mut cfg = base(mode);
        cfg.sequential_updates = true;
        let seq = run_with(&cfg, &inputs).unwrap();
        assert_eq!(seq.student_steps, sync.student_steps);
        assert_ne!(seq.student.param_checksum(), sync.student.param_checksum());
    }
}

#[test]
fn feature_mode_trains() {
    let inputs = inputs_with_teacher(&base(Mode::Vanilla));
    let mut cfg = base(Mode::SokdFeature);
    cfg.split_index = Some(1);
    let out = run_with(&cfg, &inputs).unwrap();
    assert!(out.log.rows.iter().all(|r| r.loss_student.is_finite()));
    cfg.features.kbm_tap = Some("nope".into());
    assert!(matches!(run_with(&cfg, &inputs), Err(Error::Config { ref field, .. }) if field == "features.kbm_tap"));
}

#[test]
fn runs_are_deterministic() {
    let inputs = inputs_with_teacher(&base(Mode::Vanilla));
    for mode in [Mode::Vanilla, Mode::Kd, Mode::Sokd] {
        let a = run_with(&base(mode), &inputs).unwrap();
        let b = run_with(&base(mode), &inputs).unwrap();
        assert_eq!(a.log.csv_string(), b.log.csv_string());
    }
}

#[test]
fn mode_requirements_are_config_errors() {
    let mut cfg = base(Mode::Vanilla);
    let (train, test) = load_data(&cfg).unwrap();
    let bare = ExperimentInputs {
        train,
        test,
        teacher: None,
    };
    cfg.mode = Mode::Kd;
    cfg.teacher.checkpoint = Some("t.ckpt".into());
    assert!(matches!(run_with(&cfg, &bare), Err(Error::Config { ref field, .. }) if field == "teacher.checkpoint"));

    let inputs = inputs_with_teacher(&base(Mode::Vanilla));
    let mut cfg = base(Mode::Sokd);
    cfg.split_index = Some(3);
    assert!(matches!(run_with(&cfg, &inputs), Err(Error::Config { ref field, .. }) if field == "split_index"));

    let mut cfg = base(Mode::Vanilla);
    cfg.student.layers = vec!["dense 4 5".into()];
    assert!(matches!(run_with(&cfg, &inputs), Err(Error::Config { ref field, .. }) if field == "student.layers"));
    cfg.student.layers = vec!["dense 5 3".into()];
    assert!(matches!(run_with(&cfg, &inputs), Err(Error::Config { ref field, .. }) if field == "student.layers"));
}

fn dense_model(weight: Tensor, bias: Tensor) -> SequentialModel {
    let (i, o) = (weight.shape()[0], weight.shape()[1]);
    let spec = LayerSpec::parse(&format!("dense {i} {o}"), 0).unwrap();
    SequentialModel::from_layers(
        vec![i],
        vec![Layer {
            spec,
            params: vec![weight, bias],
        }],
    )
    .unwrap()
}

#[test]
fn evaluate_examples() {
    let labels = vec![0, 2, 2, 1, 2];
    let ds = Dataset::new(Tensor::full(&[5, 2], 0.3), labels.clone(), 3, Split::Test, "fixture").unwrap();
    let constant = dense_model(Tensor::zeros(&[2, 3]), Tensor::new(vec![3], vec![0.0, 0.0, 1.0]).unwrap());
    let (acc, preds) = evaluate(&constant, &ds).unwrap();
    assert_eq!(preds, vec![2; 5]);
    assert_eq!(acc, 60.0);

    // one-hot inputs routed straight to their labels
    let n = labels.len();
    let mut eye = Tensor::zeros(&[n, n]);
    let mut w = Tensor::zeros(&[n, 3]);
    for (i, &y) in labels.iter().enumerate() {
        eye.data_mut()[i * n + i] = 1.0;
        w.data_mut()[i * 3 + y] = 1.0;
    }
    let memo = dense_model(w, Tensor::zeros(&[3]));
    let ds = Dataset::new(eye, labels, 3, Split::Train, "fixture").unwrap();
    assert_eq!(evaluate(&memo, &ds).unwrap().0, 100.0);
    assert_eq!(evaluate(&memo, &ds).unwrap(), evaluate(&memo, &ds).unwrap());

    let wrong = Dataset::new(Tensor::zeros(&[2, 7]), vec![0, 1], 3, Split::Test, "fixture").unwrap();
    assert!(matches!(evaluate(&memo, &wrong), Err(Error::ShapeMismatch(_))));
}

#[test]
fn csv_data_is_split_by_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut text = String::from("a,b,label\n");
    for i in 0..20 {
        text.push_str(&format!("{},{},{}\n", i, 20 - i, if i % 2 == 0 { "even" } else { "odd" }));
    }
    std::fs::write(&path, text).unwrap();
    let mut cfg = base(Mode::Vanilla);
    cfg.data.kind = DataKind::Csv;
    cfg.data.path = Some(path);
    let (train, test) = load_data(&cfg).unwrap();
    assert_eq!((train.len(), test.len()), (16, 4));
    assert_eq!(train.label_map, vec!["even", "odd"]);
    assert!(train.normalization().is_some());

    cfg.data.path = Some(dir.path().join("missing.csv"));
    assert!(matches!(load_data(&cfg), Err(Error::Config { ref field, .. }) if field == "data.path"));
}

#[test]
fn derived_seeds_are_distinct_and_stable() {
    assert_eq!(derive_seed(1, "student"), derive_seed(1, "student"));
    assert_ne!(derive_seed(1, "student"), derive_seed(1, "partner"));
    assert_ne!(derive_seed(1, "student"), derive_seed(2, "student"));
}
