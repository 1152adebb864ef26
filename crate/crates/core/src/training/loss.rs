use crate::tensor::{Scalar, Tensor, Var};
use crate::{Error, Result};

/// Mean squared difference over every element.
pub fn layer_mse<'g, F: Scalar>(teacher: Var<'g, F>, student: Var<'g, F>) -> Result<Var<'g, F>> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape(format!(
            "layer_mse: teacher {:?} vs student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    student.sub(&teacher)?.square()?.mean()
}

/// Mean next-token negative log-likelihood; the caller applies the shift.
pub fn cross_entropy<'g, F: Scalar>(logits: Var<'g, F>, targets: &[usize]) -> Result<Var<'g, F>> {
    logits.cross_entropy(targets)
}

/// `weight * T² * KL(softmax(teacher/T) || softmax(student/T))
///  + (1 - weight) * cross_entropy(student, targets)`,
/// with the KL averaged over rows. `weight = 0` is exactly the cross
/// entropy and `weight = 1` drops it.
pub fn soft_target_loss<'g, F: Scalar>(
    student: Var<'g, F>,
    teacher: &Tensor<F>,
    temperature: f64,
    targets: &[usize],
    weight: f64,
) -> Result<Var<'g, F>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::config(format!(
            "soft-target weight must be in [0, 1], got {weight}"
        )));
    }
    if student.shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "soft_target_loss: student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let ce = || student.cross_entropy(targets);
    if weight == 0.0 {
        return ce();
    }
    let g = student.graph();
    let (rows, cols) = (teacher.shape()[0], teacher.shape()[1]);
    let inv_t = 1.0 / temperature;
    let mut p = vec![F::zero(); rows * cols];
    let mut neg_entropy = 0.0f64;
    for (row, out) in teacher
        .data()
        .chunks_exact(cols)
        .zip(p.chunks_exact_mut(cols))
    {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let z: f64 = row.iter().map(|v| ((v.f64() - max) * inv_t).exp()).sum();
        let log_z = z.ln();
        for (o, v) in out.iter_mut().zip(row) {
            let lp = (v.f64() - max) * inv_t - log_z;
            let pv = lp.exp();
            *o = F::c(pv);
            if pv > 0.0 {
                neg_entropy += pv * lp;
            }
        }
    }
    let p = g.constant([rows, cols], p)?;
    let log_q = student.scale(inv_t)?.log_softmax_rows()?;
    let kl = p
        .mul(&log_q)?
        .sum()?
        .scale(-1.0 / rows as f64)?
        .add_scalar(neg_entropy / rows as f64)?;
    let soft = kl.scale(weight * temperature * temperature)?;
    if weight == 1.0 {
        return Ok(soft);
    }
    soft.add(&ce()?.scale(1.0 - weight)?)
}

/// Mean squared difference of two tensors, accumulated at 64-bit.
pub fn mse_value<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}
