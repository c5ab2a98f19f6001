use super::{NnError, Scalar, Tensor};

/// Row-wise softmax of a `[B, K]` tensor, at temperature `t`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, t: f64) -> Tensor<T> {
    let k = logits.item_len();
    let inv_t = T::lit(1.0 / t);
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k.max(1)) {
        let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) * inv_t).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

fn check_labels<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(), NnError> {
    let k = logits.item_len();
    if logits.shape().len() != 2 || labels.len() != logits.batch() {
        return Err(NnError::ShapeMismatch {
            expected: format!("[{}, K] logits", labels.len()),
            actual: format!("{:?}", logits.shape()),
        });
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(NnError::BadLabel { label: *bad, classes: k });
    }
    Ok(())
}

/// Mean cross-entropy of softmax(logits) against `labels`, and its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), NnError> {
    check_labels(logits, labels)?;
    let weights = vec![T::one(); labels.len()];
    weighted_cross_entropy(logits, labels, &weights)
}

/// Cross-entropy where sample `i` contributes `weights[i] * CE_i / B`.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    weights: &[T],
) -> Result<(T, Tensor<T>), NnError> {
    check_labels(logits, labels)?;
    let b = T::from_usize(labels.len().max(1)).unwrap();
    let k = logits.item_len();
    let mut grad = softmax(logits, 1.0);
    let mut loss = T::zero();
    let tiny = T::min_positive_value();
    for ((row, &label), &w) in grad.data_mut().chunks_mut(k).zip(labels).zip(weights) {
        loss += -(row[label].max(tiny)).ln() * w;
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v = *v * w / b);
    }
    Ok((loss / b, grad))
}

/// `(mu/2)·‖θ − θ_prev‖² + l2·‖θ‖²`; adds its gradient to `grad` when given.
pub fn fedprox_penalty<T: Scalar>(params: &[T], prev: Option<&[T]>, mu: f64, l2: f64, mut grad: Option<&mut [T]>) -> T {
    let mut total = 0.0f64;
    let (mu_t, two_l2) = (T::lit(mu), T::lit(2.0 * l2));
    if l2 != 0.0 {
        let mut sq = 0.0f64;
        for (i, p) in params.iter().enumerate() {
            let v = p.to_f64().unwrap();
            sq += v * v;
            if let Some(g) = grad.as_deref_mut() {
                g[i] += two_l2 * *p;
            }
        }
        total += l2 * sq;
    }
    if let (Some(prev), true) = (prev, mu != 0.0) {
        let mut sq = 0.0f64;
        for (i, (p, q)) in params.iter().zip(prev).enumerate() {
            let d = *p - *q;
            let dv = d.to_f64().unwrap();
            sq += dv * dv;
            if let Some(g) = grad.as_deref_mut() {
                g[i] += mu_t * d;
            }
        }
        total += 0.5 * mu * sq;
    }
    T::lit(total)
}

/// Cross-entropy plus the proximal and L2 terms.
pub fn loss_fedprox<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    params: &[T],
    prev_params: &[T],
    mu: f64,
    l2: f64,
) -> Result<T, NnError> {
    if params.len() != prev_params.len() {
        return Err(NnError::ShapeMismatch {
            expected: format!("{} previous params", params.len()),
            actual: format!("{}", prev_params.len()),
        });
    }
    let (ce, _) = softmax_cross_entropy(logits, labels)?;
    Ok(ce + fedprox_penalty(params, Some(prev_params), mu, l2, None))
}

/// Per-sample `T²·KL(softmax(teacher/T) ‖ softmax(student/T))`, averaged
/// over the batch with sample weights, plus its gradient w.r.t. the student
/// logits.
pub fn distillation_kl<T: Scalar>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    temperature: f64,
    weights: &[T],
) -> Result<(T, Tensor<T>), NnError> {
    if student.shape() != teacher.shape() {
        return Err(NnError::ShapeMismatch {
            expected: format!("{:?}", student.shape()),
            actual: format!("{:?}", teacher.shape()),
        });
    }
    let k = student.item_len();
    let b = T::from_usize(student.batch().max(1)).unwrap();
    let ps = softmax(student, temperature);
    let pt = softmax(teacher, temperature);
    let t = T::lit(temperature);
    let tiny = T::min_positive_value();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); ps.data().len()];
    for (i, ((s_row, t_row), g_row)) in ps
        .data()
        .chunks(k)
        .zip(pt.data().chunks(k))
        .zip(grad.chunks_mut(k))
        .enumerate()
    {
        let w = weights[i];
        let mut kl = T::zero();
        for j in 0..k {
            if t_row[j] > T::zero() {
                kl += t_row[j] * (t_row[j].max(tiny).ln() - s_row[j].max(tiny).ln());
            }
            // d/dz_s of T²·KL = T·(p_s − p_t)
            g_row[j] = t * (s_row[j] - t_row[j]) * w / b;
        }
        loss += t * t * kl * w;
    }
    Ok((loss / b, Tensor::new(student.shape().to_vec(), grad)?))
}
