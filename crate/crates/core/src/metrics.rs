//! Imitation metrics: linear CKA, imitation error rate (IER), misleading
//! rate (MR) and top-1 accuracy. Rates are percentages.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Teacher and student predictions with ground truth, one entry per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionRecord {
    teacher_pred: Vec<usize>,
    student_pred: Vec<usize>,
    label: Vec<usize>,
}

impl PredictionRecord {
    pub fn new(teacher_pred: Vec<usize>, student_pred: Vec<usize>, label: Vec<usize>, classes: usize) -> Result<Self> {
        if teacher_pred.len() != student_pred.len() || teacher_pred.len() != label.len() {
            return Err(shape_err!(
                "prediction record lengths differ: teacher {}, student {}, labels {}",
                teacher_pred.len(),
                student_pred.len(),
                label.len()
            ));
        }
        if let Some(bad) = teacher_pred.iter().chain(&student_pred).chain(&label).find(|&&c| c >= classes) {
            return Err(invalid_arg!("class index {bad} outside [0, {classes})"));
        }
        Ok(PredictionRecord {
            teacher_pred,
            student_pred,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label.is_empty()
    }

    pub fn teacher_pred(&self) -> &[usize] {
        &self.teacher_pred
    }

    pub fn student_pred(&self) -> &[usize] {
        &self.student_pred
    }

    pub fn label(&self) -> &[usize] {
        &self.label
    }
}

/// Samples × flattened features, stored in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ActivationMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows < 2 || cols == 0 {
            return Err(invalid_arg!("activation matrix needs at least 2 rows and 1 column, got {rows}x{cols}"));
        }
        if values.len() != rows * cols {
            return Err(shape_err!("{} values for a {rows}x{cols} matrix", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation matrix".into()));
        }
        Ok(ActivationMatrix { rows, cols, values })
    }

    /// Flattens every sample of an `[n, ...]` tensor into one row.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.rows(), t.row_len(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn centered(&self) -> Vec<f64> {
        let mut means = vec![0f64; self.cols];
        for row in self.values.chunks_exact(self.cols) {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= self.rows as f64;
        }
        let mut out = self.values.clone();
        for row in out.chunks_exact_mut(self.cols) {
            for (v, m) in row.iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CkaResult {
    pub value: f64,
    /// Either input had zero variance in every column.
    pub degenerate: bool,
}

/// `‖A_cᵀ B_c‖_F²` for column-centered row-major matrices.
fn cross_frobenius_sq(a: &[f64], ac: usize, b: &[f64], bc: usize, n: usize) -> f64 {
    let mut m = vec![0f64; ac * bc];
    for r in 0..n {
        let (ra, rb) = (&a[r * ac..(r + 1) * ac], &b[r * bc..(r + 1) * bc]);
        for (i, &x) in ra.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (mij, &y) in m[i * bc..(i + 1) * bc].iter_mut().zip(rb) {
                *mij += x * y;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA with column centering:
/// `‖Y_cᵀ X_c‖_F² / (‖X_cᵀ X_c‖_F · ‖Y_cᵀ Y_c‖_F)`.
pub fn linear_cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<CkaResult> {
    if x.rows != y.rows {
        return Err(shape_err!("CKA inputs have {} and {} samples", x.rows, y.rows));
    }
    let (xc, yc) = (x.centered(), y.centered());
    if xc.iter().all(|&v| v == 0.0) || yc.iter().all(|&v| v == 0.0) {
        return Ok(CkaResult {
            value: 0.0,
            degenerate: true,
        });
    }
    let n = x.rows;
    let xy = cross_frobenius_sq(&xc, x.cols, &yc, y.cols, n);
    let xx = cross_frobenius_sq(&xc, x.cols, &xc, x.cols, n).sqrt();
    let yy = cross_frobenius_sq(&yc, y.cols, &yc, y.cols, n).sqrt();
    Ok(CkaResult {
        value: xy / (xx * yy),
        degenerate: false,
    })
}

/// `100 · (1 − |D_st| / |D|)`.
pub fn imitation_error_rate(r: &PredictionRecord) -> Result<f64> {
    if r.is_empty() {
        return Err(invalid_arg!("imitation error rate of an empty record"));
    }
    let agree = r.teacher_pred.iter().zip(&r.student_pred).filter(|(t, s)| t == s).count();
    Ok(100.0 * (1.0 - agree as f64 / r.len() as f64))
}

/// `100 · (1 − |D_sg| / |D_st|)`; `None` when teacher and student never agree.
pub fn misleading_rate(r: &PredictionRecord) -> Option<f64> {
    let mut agree = 0usize;
    let mut correct = 0usize;
    for ((t, s), y) in r.teacher_pred.iter().zip(&r.student_pred).zip(&r.label) {
        if t == s {
            agree += 1;
            if s == y {
                correct += 1;
            }
        }
    }
    (agree > 0).then(|| 100.0 * (1.0 - correct as f64 / agree as f64))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(invalid_arg!("accuracy of an empty prediction set"));
    }
    if preds.len() != labels.len() {
        return Err(shape_err!("{} predictions vs {} labels", preds.len(), labels.len()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// One evaluation in the metric dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub run_id: String,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub cka: Option<f64>,
    pub ier: Option<f64>,
    pub mr: Option<f64>,
}

/// Writes rows as CSV; absent values become empty cells.
pub fn write_metric_csv(out: impl Write, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| invalid_arg!("cannot encode metric row: {e}"))?;
    }
    w.flush().map_err(|e| Error::io("<metric csv>", e))
}

pub fn save_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metric_csv(file, rows)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(t: &[usize], s: &[usize], y: &[usize]) -> PredictionRecord {
        PredictionRecord::new(t.to_vec(), s.to_vec(), y.to_vec(), 4).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ActivationMatrix {
        ActivationMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// HSIC ratio over explicit centered Gram matrices `H K H`.
    fn hsic_cka(x: &ActivationMatrix, y: &ActivationMatrix) -> f64 {
        let n = x.rows;
        let gram = |m: &ActivationMatrix| {
            let mut k = vec![vec![0f64; n]; n];
            for i in 0..n {
                for j in 0..n {
                    k[i][j] = (0..m.cols).map(|c| m.values[i * m.cols + c] * m.values[j * m.cols + c]).sum();
                }
            }
            k
        };
        let h = |i: usize, j: usize| if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };
        let center = |k: &Vec<Vec<f64>>| {
            let mut hk = vec![vec![0f64; n]; n];
            for i in 0..n {
                for j in 0..n {
                    hk[i][j] = (0..n).map(|a| h(i, a) * k[a][j]).sum();
                }
            }
            let mut out = vec![vec![0f64; n]; n];
            for i in 0..n {
                for j in 0..n {
                    out[i][j] = (0..n).map(|a| hk[i][a] * h(a, j)).sum();
                }
            }
            out
        };
        let (kc, lc) = (center(&gram(x)), center(&gram(y)));
        let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
            (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| a[i][j] * b[j][i]).sum()
        };
        hsic(&kc, &lc) / (hsic(&kc, &kc) * hsic(&lc, &lc)).sqrt()
    }

    #[test]
    fn ier_examples() {
        assert_eq!(imitation_error_rate(&record(&[0, 1, 2], &[0, 1, 2], &[0, 0, 0])).unwrap(), 0.0);
        assert_eq!(imitation_error_rate(&record(&[0, 1, 2, 3], &[0, 1, 0, 0], &[0; 4])).unwrap(), 50.0);
        assert_eq!(imitation_error_rate(&record(&[0, 1], &[1, 0], &[0, 0])).unwrap(), 100.0);
        assert!(matches!(imitation_error_rate(&record(&[], &[], &[])), Err(Error::InvalidArg(_))));
    }

    #[test]
    fn mr_examples() {
        assert_eq!(misleading_rate(&record(&[0, 1], &[0, 1], &[0, 1])), Some(0.0));
        assert_eq!(misleading_rate(&record(&[0, 0, 1], &[0, 0, 2], &[0, 1, 1])), Some(50.0));
        assert_eq!(misleading_rate(&record(&[0, 1], &[1, 0], &[0, 0])), None);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(accuracy(&[0, 1], &[0, 0]).unwrap(), 50.0);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3, 0, 1];
        let preds = [0, 1, 2, 3, 0, 1, 2, 0, 1, 2];
        assert_eq!(accuracy(&preds, &labels).unwrap(), 70.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::InvalidArg(_))));
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn record_validation() {
        assert!(matches!(
            PredictionRecord::new(vec![0], vec![0, 1], vec![0], 2),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            PredictionRecord::new(vec![0], vec![2], vec![0], 2),
            Err(Error::InvalidArg(_))
        ));
    }

    #[test]
    fn cka_self_similarity_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 8, 3);
            let y = random_matrix(&mut rng, 8, 5);
            assert!((linear_cka(&x, &x).unwrap().value - 1.0).abs() < 1e-9);
            let got = linear_cka(&x, &y).unwrap().value;
            assert!((got - hsic_cka(&x, &y)).abs() < 1e-9);
            assert!((0.0..=1.0 + 1e-9).contains(&got));
        }
    }

    #[test]
    fn cka_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 10, 2);
        let y = random_matrix(&mut rng, 10, 4);
        let base = linear_cka(&x, &y).unwrap().value;
        let (c, s) = (0.6f64, 0.8f64);
        let rotated: Vec<f64> = x
            .values
            .chunks_exact(2)
            .flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]])
            .collect();
        let xr = ActivationMatrix::new(10, 2, rotated).unwrap();
        assert!((linear_cka(&xr, &y).unwrap().value - base).abs() < 1e-12);
        assert!((linear_cka(&x, &x).unwrap().value - linear_cka(&x, &xr).unwrap().value).abs() < 1e-12);
        let scaled = ActivationMatrix::new(10, 4, y.values.iter().map(|v| -3.5 * v).collect()).unwrap();
        assert!((linear_cka(&x, &scaled).unwrap().value - base).abs() < 1e-12);
    }

    #[test]
    fn cka_degenerate_input_is_flagged() {
        let flat = ActivationMatrix::new(3, 2, vec![1., 2., 1., 2., 1., 2.]).unwrap();
        let other = ActivationMatrix::new(3, 1, vec![0., 1., 2.]).unwrap();
        let r = linear_cka(&flat, &other).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
        let short = ActivationMatrix::new(2, 1, vec![0., 1.]).unwrap();
        assert!(matches!(linear_cka(&short, &other), Err(Error::ShapeMismatch(_))));
        assert!(ActivationMatrix::new(1, 1, vec![0.]).is_err());
    }

    #[test]
    fn metric_csv_leaves_absent_values_empty() {
        let rows = [MetricRow {
            run_id: "r".into(),
            epoch: 2,
            split: "train".into(),
            accuracy: 75.0,
            cka: Some(0.5),
            ier: Some(10.0),
            mr: None,
        }];
        let mut buf = Vec::new();
        write_metric_csv(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "run_id,epoch,split,accuracy,cka,ier,mr\nr,2,train,75.0,0.5,10.0,\n"
        );
    }

    /// Naive set-based counting.
    fn oracle(t: &[usize], s: &[usize], y: &[usize]) -> (f64, Option<f64>) {
        use std::collections::BTreeSet;
        let d: BTreeSet<usize> = (0..t.len()).collect();
        let d_st: BTreeSet<usize> = d.iter().copied().filter(|&i| t[i] == s[i]).collect();
        let d_sg: BTreeSet<usize> = d_st.iter().copied().filter(|&i| s[i] == y[i]).collect();
        let ier = (1.0 - d_st.len() as f64 / d.len() as f64) * 100.0;
        let mr = (!d_st.is_empty()).then(|| (1.0 - d_sg.len() as f64 / d_st.len() as f64) * 100.0);
        (ier, mr)
    }

    #[test]
    fn exhaustive_binary_records_match_set_oracle() {
        for n in 1..=6usize {
            for code in 0..(1u32 << (3 * n)) {
                let bit = |k: usize| ((code >> k) & 1) as usize;
                let t: Vec<usize> = (0..n).map(bit).collect();
                let s: Vec<usize> = (0..n).map(|i| bit(n + i)).collect();
                let y: Vec<usize> = (0..n).map(|i| bit(2 * n + i)).collect();
                let r = PredictionRecord::new(t.clone(), s.clone(), y.clone(), 2).unwrap();
                let (ier, mr) = oracle(&t, &s, &y);
                assert_eq!(imitation_error_rate(&r).unwrap(), ier);
                assert_eq!(misleading_rate(&r), mr);
            }
        }
    }

    proptest! {
        #[test]
        fn ier_is_symmetric_and_bounded(
            raw in prop::collection::vec((0usize..5, 0usize..5, 0usize..5), 1..40)
        ) {
            let t: Vec<usize> = raw.iter().map(|r| r.0).collect();
            let s: Vec<usize> = raw.iter().map(|r| r.1).collect();
            let y: Vec<usize> = raw.iter().map(|r| r.2).collect();
            let a = PredictionRecord::new(t.clone(), s.clone(), y.clone(), 5).unwrap();
            let b = PredictionRecord::new(s.clone(), t.clone(), y.clone(), 5).unwrap();
            let ier = imitation_error_rate(&a).unwrap();
            prop_assert_eq!(ier, imitation_error_rate(&b).unwrap());
            prop_assert!((0.0..=100.0).contains(&ier));
            // swapping roles keeps D_st, so MR only depends on the agreeing student predictions
            prop_assert_eq!(misleading_rate(&a), misleading_rate(&b));
            prop_assert_eq!((ier, misleading_rate(&a)), oracle(&t, &s, &y));
        }

        #[test]
        fn zero_ier_ties_mr_to_student_accuracy(
            raw in prop::collection::vec((0usize..3, 0usize..3), 1..30)
        ) {
            let s: Vec<usize> = raw.iter().map(|r| r.0).collect();
            let y: Vec<usize> = raw.iter().map(|r| r.1).collect();
            let r = PredictionRecord::new(s.clone(), s.clone(), y.clone(), 3).unwrap();
            prop_assert_eq!(imitation_error_rate(&r).unwrap(), 0.0);
            let mr = misleading_rate(&r).unwrap();
            prop_assert!((mr - (100.0 - accuracy(&s, &y).unwrap())).abs() < 1e-9);
        }

        #[test]
        fn cka_is_bounded_and_scale_invariant(
            vals in prop::collection::vec(-5.0f64..5.0, 24),
            other in prop::collection::vec(-5.0f64..5.0, 18),
            scale in 0.1f64..10.0,
        ) {
            let x = ActivationMatrix::new(6, 4, vals.clone()).unwrap();
            let y = ActivationMatrix::new(6, 3, other).unwrap();
            let r = linear_cka(&x, &y).unwrap();
            prop_assert!(r.value >= 0.0 && r.value <= 1.0 + 1e-6);
            let xs = ActivationMatrix::new(6, 4, vals.iter().map(|v| v * scale).collect()).unwrap();
            prop_assert!((linear_cka(&xs, &y).unwrap().value - r.value).abs() < 1e-5);
        }
    }
}
