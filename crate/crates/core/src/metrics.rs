//! Accuracy reporting, the overfitting index, and the quadratic-loss
//! ambiguity decomposition of the patch-position ensemble.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{cnnic_forward, CnnicModel};
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, softmax_rows, Tensor};
use crate::Mode;

/// Classification outcome over one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalReport {
    pub error_count: usize,
    pub sample_count: usize,
    /// Rows are true labels, columns predictions; row sums are the per-class
    /// sample counts.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn error_rate(&self) -> f64 {
        self.error_count as f64 / self.sample_count as f64
    }
}

/// Score probability rows against labels. The prediction is the argmax with
/// ties broken toward the lowest class index.
pub fn error_rate<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<EvalReport> {
    let [n, classes] = probs.shape()[..] else {
        return Err(Error::Shape(format!(
            "error_rate: probs must be [B,C], got {}",
            fmt_shape(probs.shape())
        )));
    };
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "error_rate: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::Config("error_rate: empty batch".into()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut errors = 0;
    for (pred, &label) in probs.argmax_rows().iter().zip(labels.iter()) {
        let label = label as usize;
        if label >= classes {
            return Err(Error::Data(format!(
                "error_rate: label {label} out of range [0,{classes})"
            )));
        }
        confusion[label][*pred] += 1;
        if *pred != label {
            errors += 1;
        }
    }
    Ok(EvalReport {
        error_count: errors,
        sample_count: n,
        confusion,
    })
}

/// Overfitting index O = E_train/N_train − E_test/N_test, sign convention
/// exactly as written; the negated value is the "test minus train" reading.
pub fn overfitting_index(
    e_train: usize,
    n_train: usize,
    e_test: usize,
    n_test: usize,
) -> Result<f64> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("overfitting_index: zero sample count".into()));
    }
    Ok(e_train as f64 / n_train as f64 - e_test as f64 / n_test as f64)
}

/// Quadratic-loss decomposition of a uniformly averaged ensemble:
/// E = Ē − Ā, returned as (E, Ē, Ā).
///
/// With f̄ the elementwise mean of the member outputs and quadratic loss
/// measured as the mean squared deviation over all entries: E is the MSE of
/// the ensemble, Ē the mean of the member MSEs, and Ā the mean squared
/// member-to-ensemble deviation (the ambiguity). The identity is algebraic,
/// so it holds to rounding error for every input.
pub fn ambiguity_decomposition<T: Scalar>(
    members: &[Tensor<T>],
    targets: &Tensor<T>,
) -> Result<(f64, f64, f64)> {
    if members.is_empty() {
        return Err(Error::Config("ambiguity_decomposition: no members".into()));
    }
    for m in members {
        if m.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "ambiguity_decomposition: member {} vs targets {}",
                fmt_shape(m.shape()),
                fmt_shape(targets.shape())
            )));
        }
    }
    let count = targets.len() as f64;
    let m_count = members.len() as f64;

    // Ensemble mean, in f64 regardless of the member precision.
    let mut mean = vec![0.0f64; targets.len()];
    for m in members {
        for (acc, &v) in mean.iter_mut().zip(m.data()) {
            *acc += v.to_f64();
        }
    }
    for v in &mut mean {
        *v /= m_count;
    }

    let mut ensemble_err = 0.0;
    for (&f, t) in mean.iter().zip(targets.data()) {
        let d = f - t.to_f64();
        ensemble_err += d * d;
    }
    ensemble_err /= count;

    let (mut member_err, mut ambiguity) = (0.0, 0.0);
    for m in members {
        let (mut e, mut a) = (0.0, 0.0);
        for ((&v, t), &f) in m.data().iter().zip(targets.data()).zip(mean.iter()) {
            let v = v.to_f64();
            let de = v - t.to_f64();
            let da = v - f;
            e += de * de;
            a += da * da;
        }
        member_err += e / count;
        ambiguity += a / count;
    }
    member_err /= m_count;
    ambiguity /= m_count;

    Ok((ensemble_err, member_err, ambiguity))
}

/// One-hot encode labels into [B, classes].
pub fn one_hot<T: Scalar>(labels: &[u8], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (b, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= classes {
            return Err(Error::Data(format!(
                "one_hot: label {y} out of range [0,{classes})"
            )));
        }
        t.data_mut()[b * classes + y] = T::ONE;
    }
    Ok(t)
}

/// The ensemble members of the decomposition: the softmaxed output of every
/// (kernel, position) pair, extracted from a logit map [B,K,P,C].
pub fn members_from_logit_map<T: Scalar>(map: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let [b, k, p, c] = map.shape()[..] else {
        return Err(Error::Shape(format!(
            "members_from_logit_map: expected [B,K,P,C], got {}",
            fmt_shape(map.shape())
        )));
    };
    let mut members = Vec::with_capacity(k * p);
    for ki in 0..k {
        for pi in 0..p {
            let mut logits = Tensor::zeros(&[b, c]);
            for bi in 0..b {
                let src = ((bi * k + ki) * p + pi) * c;
                logits.data_mut()[bi * c..(bi + 1) * c]
                    .copy_from_slice(&map.data()[src..src + c]);
            }
            members.push(softmax_rows(&logits));
        }
    }
    Ok(members)
}

/// Evaluate a model over a dataset in inference mode.
pub fn evaluate<T: Scalar>(
    model: &CnnicModel<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Config("evaluate: zero batch size".into()));
    }
    let n = data.len();
    let classes = model.config.num_classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut errors = 0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = data.gather(&idx)?;
        let out = cnnic_forward(model, &images, Mode::Infer, 0, 0)?;
        let report = error_rate(&out.probs, &labels)?;
        errors += report.error_count;
        for (row, src) in confusion.iter_mut().zip(report.confusion.iter()) {
            for (a, b) in row.iter_mut().zip(src.iter()) {
                *a += b;
            }
        }
        start = end;
    }
    Ok(EvalReport {
        error_count: errors,
        sample_count: n,
        confusion,
    })
}
