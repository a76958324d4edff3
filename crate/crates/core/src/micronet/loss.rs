use crate::micronet::tensor::Real;

/// Mean over the three components of the squared difference, with `dL/d(pred)`.
pub fn mse_loss<T: Real>(pred: &[T; 3], gt: &[T; 3]) -> (T, [T; 3]) {
    let three = T::from_f64(3.0);
    let two_thirds = T::from_f64(2.0 / 3.0);
    let mut loss = T::zero();
    let mut grad = [T::zero(); 3];
    for i in 0..3 {
        let d = pred[i] - gt[i];
        loss = loss + d * d;
        grad[i] = two_thirds * d;
    }
    (loss / three, grad)
}
