//! Loss functions. Forward passes accumulate in f64 and store f32 results.

use crate::tensor::Tensor;

use super::TrainError;

/// Probability clamp applied inside the binary cross-entropy to avoid log(0).
pub const PROB_CLAMP: f32 = 1e-7;

/// Weighted binary cross-entropy over per-concept probabilities.
///
/// The loss is the mean over concepts of
/// `−[w_c·y_c·log p_c + (1−y_c)·log(1−p_c)]` with probabilities clamped to
/// `[ε, 1−ε]`. It is nonnegative and zero (up to ε) exactly when p = y.
#[derive(Clone, Debug)]
pub struct BceLoss {
    pub weights: Vec<f32>,
    pub eps: f32,
}

impl BceLoss {
    pub fn new(weights: Vec<f32>, eps: f32) -> Result<BceLoss, TrainError> {
        if !(eps > 0.0 && eps <= 0.01) {
            return Err(TrainError::BadLossConfig(format!(
                "clamp epsilon {} outside (0, 0.01]",
                eps
            )));
        }
        if weights.is_empty() || weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(TrainError::BadLossConfig(
                "positive weights must be finite and > 0".into(),
            ));
        }
        Ok(BceLoss { weights, eps })
    }

    /// Unit weights for `n` concepts with the default clamp.
    pub fn uniform(n: usize) -> BceLoss {
        BceLoss { weights: vec![1.0; n], eps: PROB_CLAMP }
    }

    pub fn loss(&self, p: &Tensor, y: &[f32]) -> Result<Tensor, TrainError> {
        bce_loss(p, y, &self.weights, self.eps)
    }
}

/// See [`BceLoss`]. `p` must already be probabilities (post-sigmoid).
pub fn bce_loss(p: &Tensor, y: &[f32], weights: &[f32], eps: f32) -> Result<Tensor, TrainError> {
    let n = p.numel();
    if y.len() != n || weights.len() != n {
        return Err(TrainError::Shape {
            op: "bce_loss",
            detail: format!("p has {} entries, y {}, weights {}", n, y.len(), weights.len()),
        });
    }
    let eps64 = eps as f64;
    let mut total = 0.0f64;
    {
        let pd = p.data();
        for i in 0..n {
            let pc = (pd[i] as f64).clamp(eps64, 1.0 - eps64);
            let (yc, wc) = (y[i] as f64, weights[i] as f64);
            total -= wc * yc * pc.ln() + (1.0 - yc) * (1.0 - pc).ln();
        }
    }
    let value = (total / n as f64) as f32;
    let (y, weights, eps) = (y.to_vec(), weights.to_vec(), eps);
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![p.clone()],
        Box::new(move |g, parents| {
            let n = y.len();
            let pd = parents[0].data();
            let scale = g[0] as f64 / n as f64;
            let eps64 = eps as f64;
            let gp: Vec<f32> = (0..n)
                .map(|i| {
                    let p = pd[i] as f64;
                    // zero gradient where the clamp is active
                    if p <= eps64 || p >= 1.0 - eps64 {
                        return 0.0;
                    }
                    let (yc, wc) = (y[i] as f64, weights[i] as f64);
                    (-scale * (wc * yc / p - (1.0 - yc) / (1.0 - p))) as f32
                })
                .collect();
            drop(pd);
            parents[0].accumulate_grad(&gp);
        }),
    ))
}

/// `−log softmax(logits)[class]`, numerically stable.
pub fn cross_entropy(logits: &Tensor, class: usize) -> Result<Tensor, TrainError> {
    let n = logits.numel();
    if class >= n || n < 2 {
        return Err(TrainError::BadClass(class, n));
    }
    let soft = {
        let d = logits.data();
        let m = d.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
        let exps: Vec<f64> = d.iter().map(|&x| ((x as f64) - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect::<Vec<f64>>()
    };
    let value = (-soft[class].ln()) as f32;
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![logits.clone()],
        Box::new(move |g, parents| {
            let gl: Vec<f32> = soft
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let one_hot = if i == class { 1.0 } else { 0.0 };
                    (g[0] as f64 * (s - one_hot)) as f32
                })
                .collect();
            parents[0].accumulate_grad(&gl);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;
    use crate::testutil::{self, reference};
    use rand::Rng;

    #[test]
    fn bce_perfect_prediction_is_zero() {
        let p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let l = bce_loss(&p, &[1.0], &[1.0], PROB_CLAMP).unwrap();
        assert!(l.item().abs() < 1e-5, "{}", l.item());
    }

    #[test]
    fn bce_uncertain_positive_is_ln_two() {
        let p = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let l = bce_loss(&p, &[1.0], &[1.0], PROB_CLAMP).unwrap();
        assert!((l.item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn bce_confident_wrong_negative() {
        let p = Tensor::from_vec(&[1], vec![0.9]).unwrap();
        for w in [1.0, 5.0] {
            let l = bce_loss(&p, &[0.0], &[w], PROB_CLAMP).unwrap();
            // weight touches only the positive term
            assert!((l.item() - 2.302_585).abs() < 1e-4, "w={}: {}", w, l.item());
        }
    }

    #[test]
    fn bce_weight_scales_positive_term() {
        let p = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let l = bce_loss(&p, &[1.0], &[3.0], PROB_CLAMP).unwrap();
        assert!((l.item() - 3.0 * std::f32::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn bce_matches_f64_reference_on_random_vectors() {
        let mut rng = testutil::rng(11);
        for _ in 0..20 {
            let n = rng.gen_range(1..8);
            let p: Vec<f32> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            let y: Vec<f32> = (0..n).map(|_| f32::from(rng.gen_bool(0.5))).collect();
            let w: Vec<f32> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
            let t = Tensor::from_vec(&[n], p.clone()).unwrap();
            let got = bce_loss(&t, &y, &w, PROB_CLAMP).unwrap().item() as f64;
            let want = reference::bce_f64(
                &testutil::promote(&p),
                &testutil::promote(&y),
                &testutil::promote(&w),
                PROB_CLAMP as f64,
            );
            assert!((got - want).abs() < 1e-6, "got {} want {}", got, want);
        }
    }

    #[test]
    fn bce_through_sigmoid_gradient_is_sigmoid_minus_label() {
        let mut rng = testutil::rng(5);
        for _ in 0..10 {
            let n = rng.gen_range(1..5);
            let z: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y: Vec<f32> = (0..n).map(|_| f32::from(rng.gen_bool(0.5))).collect();
            let logits = Tensor::param(&[n], z.clone()).unwrap();
            let p = tensor::sigmoid(&logits);
            let loss = bce_loss(&p, &y, &vec![1.0; n], PROB_CLAMP).unwrap();
            loss.backward().unwrap();
            let g = logits.grad().unwrap();
            for i in 0..n {
                let want = (reference::sigmoid_f64(z[i] as f64) - y[i] as f64) / n as f64;
                assert!(
                    (g[i] as f64 - want).abs() < 1e-5,
                    "dL/dz[{}] = {} want {}",
                    i,
                    g[i],
                    want
                );
            }
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences_of_f64_oracle() {
        let mut rng = testutil::rng(23);
        let n = 4;
        let z: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = [1.0f32, 0.0, 1.0, 0.0];
        let w = [2.0f32, 1.0, 0.5, 1.5];
        let logits = Tensor::param(&[n], z.clone()).unwrap();
        let loss = bce_loss(&tensor::sigmoid(&logits), &y, &w, PROB_CLAMP).unwrap();
        loss.backward().unwrap();
        let g = logits.grad().unwrap();
        let oracle = |z: &[f32]| {
            let p: Vec<f64> = z.iter().map(|&z| reference::sigmoid_f64(z as f64)).collect();
            reference::bce_f64(&p, &testutil::promote(&y), &testutil::promote(&w), PROB_CLAMP as f64)
        };
        let fd = testutil::central_diff(&z, 1e-3, oracle);
        assert!(testutil::max_rel_err(&g, &fd) < 1e-3);
    }

    #[test]
    fn bce_shape_mismatch_rejected() {
        let p = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            bce_loss(&p, &[1.0], &[1.0, 1.0], PROB_CLAMP),
            Err(TrainError::Shape { .. })
        ));
    }

    #[test]
    fn bce_spec_validation() {
        assert!(BceLoss::new(vec![1.0], 0.5).is_err());
        assert!(BceLoss::new(vec![0.0], PROB_CLAMP).is_err());
        assert!(BceLoss::new(vec![2.0, 0.5], PROB_CLAMP).is_ok());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let l = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let ce = cross_entropy(&l, 0).unwrap();
        assert!((ce.item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_correct_near_zero() {
        let l = Tensor::from_vec(&[2], vec![10.0, -10.0]).unwrap();
        assert!(cross_entropy(&l, 0).unwrap().item() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_f64_reference() {
        let mut rng = testutil::rng(7);
        for _ in 0..20 {
            let z: Vec<f32> = (0..2).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let class = usize::from(rng.gen_bool(0.5));
            let t = Tensor::from_vec(&[2], z.clone()).unwrap();
            let got = cross_entropy(&t, class).unwrap().item() as f64;
            let want = reference::cross_entropy_f64(&testutil::promote(&z), class);
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_one_hot() {
        let z = vec![1.3f32, -0.4];
        let t = Tensor::param(&[2], z.clone()).unwrap();
        let ce = cross_entropy(&t, 1).unwrap();
        ce.backward().unwrap();
        let g = t.grad().unwrap();
        let s = reference::softmax_f64(&testutil::promote(&z));
        assert!((g[0] as f64 - s[0]).abs() < 1e-6);
        assert!((g[1] as f64 - (s[1] - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_bad_class_rejected() {
        let t = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(cross_entropy(&t, 2), Err(TrainError::BadClass(2, 2))));
    }
}
