use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sokd_core::trainer::{load_data, run_with, ExperimentConfig, ExperimentInputs, Mode};
use sokd_core::{Tape, Tensor};

fn filled(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_fwd_bwd");
    for n in [32usize, 128, 256] {
        let (a, b) = (filled(&[n, n]), filled(&[n, n]));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
                let y = tape.matmul(va, vb).unwrap();
                let loss = tape.sum(y);
                tape.backward(loss).unwrap()
            })
        });
    }
    g.finish();
}

fn conv2d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_fwd_bwd");
    for (batch, ch, hw) in [(8usize, 3usize, 16usize), (16, 16, 16)] {
        let x = filled(&[batch, ch, hw, hw]);
        let k = filled(&[16, ch, 3, 3]);
        g.bench_function(format!("{batch}x{ch}x{hw}x{hw}"), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (vx, vk) = (tape.param(x.clone()), tape.param(k.clone()));
                let y = tape.conv2d(vx, vk, 1, 1).unwrap();
                let loss = tape.sum(y);
                tape.backward(loss).unwrap()
            })
        });
    }
    g.finish();
}

const DESK: &str = r#"
mode = "vanilla"
seed = 0
epochs = 1

[data]
kind = "blobs"
classes = 4
dim = 8
per_class = 250

[teacher]
layers = ["dense 8 16", "relu", "dense 16 16", "relu", "dense 16 4"]

[student]
layers = ["dense 8 2", "relu", "dense 2 4"]
"#;

fn epoch(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::from_toml_str(DESK, &[]).unwrap();
    let (train, test) = load_data(&cfg).unwrap();
    let mut inputs = ExperimentInputs {
        train,
        test,
        teacher: None,
    };
    inputs.teacher = Some(run_with(&cfg.pretrain_view(), &inputs).unwrap().student);
    let mut g = c.benchmark_group("epoch_1000_samples");
    g.sample_size(20);
    for mode in [Mode::Vanilla, Mode::Kd, Mode::Dml, Mode::Sokd] {
        cfg.mode = mode;
        g.bench_function(format!("{mode:?}"), |bench| bench.iter(|| run_with(&cfg, &inputs).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, matmul, conv2d, epoch);
criterion_main!(benches);
