use crate::autodiff::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::Result;

/// Smoothed Dice similarity of a reference mask `s` and a prediction `s_hat`
/// over the whole tensor: `(2 sum(s * s_hat) + eps) / (sum(s) + sum(s_hat) + eps)`.
pub fn dsc<T: Scalar>(s: &Tensor<T>, s_hat: &Tensor<T>, eps: f64) -> Result<f64> {
    s.expect_same_shape(s_hat)?;
    Ok(dsc_slices(s.data(), s_hat.data(), eps))
}

pub(crate) fn dsc_slices<T: Scalar>(s: &[T], s_hat: &[T], eps: f64) -> f64 {
    let (mut inter, mut a, mut b) = (0.0, 0.0, 0.0);
    for (&x, &y) in s.iter().zip(s_hat) {
        let (x, y) = (x.as_f64(), y.as_f64());
        inter += x * y;
        a += x;
        b += y;
    }
    (2.0 * inter + eps) / (a + b + eps)
}

pub fn dice_loss<T: Scalar>(s: &Tensor<T>, s_hat: &Tensor<T>, eps: f64) -> Result<f64> {
    Ok(1.0 - dsc(s, s_hat, eps)?)
}

/// Dice loss of every sample of a `[N, ...]` batch.
pub fn dice_loss_per_sample<T: Scalar>(
    s: &Tensor<T>,
    s_hat: &Tensor<T>,
    eps: f64,
) -> Result<Vec<f64>> {
    s.expect_same_shape(s_hat)?;
    Ok((0..s.shape()[0])
        .map(|n| 1.0 - dsc_slices(s.sample(n), s_hat.sample(n), eps))
        .collect())
}

/// Records `1 - mean_n dsc(target_n, pred_n)` for `[N, ...]` batches.
pub fn record_dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    eps: f64,
) -> crate::autodiff::Result<Var> {
    let eps = T::from_f64_lossy(eps);
    let prod = tape.mul(pred, target)?;
    let inter = tape.sum_per_sample(prod)?;
    let num = tape.mul_scalar(inter, T::from_f64_lossy(2.0))?;
    let num = tape.add_scalar(num, eps)?;
    let sp = tape.sum_per_sample(pred)?;
    let st = tape.sum_per_sample(target)?;
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, eps)?;
    let d = tape.div(num, den)?;
    let m = tape.mean(d)?;
    let neg = tape.mul_scalar(m, T::from_f64_lossy(-1.0))?;
    tape.add_scalar(neg, T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(on: &[usize], n: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n], |i| if on.contains(&i) { 1.0 } else { 0.0 })
    }

    #[test]
    fn closed_form_cases() {
        let a = mask(&(0..10).collect::<Vec<_>>(), 30);
        let b = mask(&(10..20).collect::<Vec<_>>(), 30);
        assert_eq!(dsc(&a, &a, 1.0).unwrap(), 1.0);
        assert!((dsc(&a, &b, 1.0).unwrap() - 1.0 / 21.0).abs() < 1e-15);
        assert!((dice_loss(&a, &b, 1.0).unwrap() - 20.0 / 21.0).abs() < 1e-15);
        let z = Tensor::<f64>::zeros(&[30]);
        assert_eq!(dsc(&z, &z, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let pred = Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.37).sin().abs());
        let target = Tensor::from_fn(&[2, 1, 3, 3], |i| (i % 3 == 0) as u8 as f64);
        let mut tape = Tape::<f64>::new();
        let p = tape.input("p", pred.clone()).unwrap();
        let t = tape.constant(target.clone()).unwrap();
        let l = record_dice_loss(&mut tape, p, t, 1.0).unwrap();
        let per = dice_loss_per_sample(&target, &pred, 1.0).unwrap();
        let expect = per.iter().sum::<f64>() / 2.0;
        assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-12);
    }
}
