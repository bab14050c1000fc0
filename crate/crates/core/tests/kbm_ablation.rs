//! Dropping the KBM's teacher and student terms should not help either network.

use sokd_core::trainer::{load_data, run_with, AblationMask, ExperimentConfig, ExperimentInputs, Mode};

const DESK: &str = r#"
mode = "vanilla"
seed = 0

[data]
kind = "blobs"
classes = 4
dim = 8
per_class = 313

[teacher]
layers = ["dense 8 16", "relu", "dense 16 16", "relu", "dense 16 4"]

[student]
layers = ["dense 8 2", "relu", "dense 2 4"]
"#;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn full_mask_beats_ce_only_for_both_networks() {
    let ce_only = AblationMask {
        ce_kbm: true,
        kl_kbm_t: false,
        kl_kbm_s: false,
    };
    let (mut student, mut rebuilt) = ([vec![], vec![]], [vec![], vec![]]);
    for seed in 0..5 {
        let mut cfg = ExperimentConfig::from_toml_str(DESK, &[]).unwrap();
        cfg.seed = seed;
        let (train, test) = load_data(&cfg).unwrap();
        let mut inputs = ExperimentInputs {
            train,
            test,
            teacher: None,
        };
        inputs.teacher = Some(run_with(&cfg.pretrain_view(), &inputs).unwrap().student);
        cfg.mode = Mode::Sokd;
        for (i, mask) in [AblationMask::default(), ce_only].into_iter().enumerate() {
            cfg.ablation = mask;
            let s = run_with(&cfg, &inputs).unwrap().log.summary;
            student[i].push(s.final_acc_student);
            rebuilt[i].push(s.final_acc_reconstructed.unwrap());
        }
    }
    let [full_s, ce_s] = student.map(median);
    let [full_t, ce_t] = rebuilt.map(median);
    assert!(full_s >= ce_s, "student: full {full_s} < ce-only {ce_s}");
    assert!(full_t >= ce_t, "reconstructed teacher: full {full_t} < ce-only {ce_t}");
}
