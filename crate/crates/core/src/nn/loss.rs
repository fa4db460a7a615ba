use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn rows<T: Element>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    match *logits.shape() {
        [b, c] => Ok((b, c)),
        _ => Err(Error::shape("logits", logits.shape(), &[0, 0])),
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = rows(logits)?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Tensor::from_parts_unchecked(logits.shape(), out)
}

/// Mean cross-entropy of `softmax(logits)` against class indices, and its
/// gradient `(softmax - onehot) / B` w.r.t. the logits.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (b, c) = rows(logits)?;
    if labels.len() != b {
        return Err(Error::shape("labels", &[labels.len()], &[b]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::arg(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = softmax(logits)?.into_data();
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut total = 0.0f64;
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(c)
        .zip(grad.chunks_exact_mut(c))
        .zip(labels)
    {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.as_f64()));
        let lse = m + row.iter().map(|&v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        total += lse - row[label].as_f64();
        g[label] = g[label] - T::one();
        for v in g.iter_mut() {
            *v = *v * inv_b;
        }
    }
    Ok((
        total / b as f64,
        Tensor::from_parts_unchecked(logits.shape(), grad)?,
    ))
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, c) = rows(logits)?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(logits)?;
    if pred.len() != labels.len() {
        return Err(Error::shape("labels", &[labels.len()], &[pred.len()]));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let logits = Tensor::<f32>::new(&[1, 2], vec![1e6, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-9);
        grad.check_finite().unwrap();
    }

    #[test]
    fn closed_form_two_class() {
        let logits = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 1.0, 2.0]).unwrap();
        let (loss0, grad) = softmax_cross_entropy(&logits.clone(), &[0, 0]).unwrap();
        // -log(e/(e+e²)) = ln(1+e)
        assert!((loss0 - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((loss0 - 1.313262).abs() < 1e-6);
        let p0 = 1.0 / (1.0 + 1f64.exp());
        assert!((grad.data()[0] - (p0 - 1.0) / 2.0).abs() < 1e-12);
        // -log(e²/(e+e²)) = ln(1+e) - 1
        let (loss1, _) = softmax_cross_entropy(&logits, &[1, 1]).unwrap();
        assert!((loss1 - ((1.0 + 1f64.exp()).ln() - 1.0)).abs() < 1e-12);
        assert!((loss1 - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let logits = Tensor::<f64>::from_f64(&[2, 3], &[0., 0., 0., 1., 5., 5.]).unwrap();
        assert_eq!(argmax_rows(&logits).unwrap(), vec![0, 1]);
        assert_eq!(accuracy(&logits, &[0, 2]).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f32..50.0, 12)) {
            let t = Tensor::<f32>::new(&[3, 4], v).unwrap();
            let s = softmax(&t).unwrap();
            for row in s.data().chunks(4) {
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
