use rand::Rng;

/// Softmax of `logits / temperature` in double precision.
pub fn softmax_with_temperature<S: crate::autodiff::Scalar>(logits: &[S], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v.to_f64() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// The `k` most probable indices (ties broken by lower index) with their
/// probabilities renormalized to sum to one, most probable first.
pub fn top_k_probs(probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let k = k.clamp(1, probs.len().max(1));
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let z: f64 = idx.iter().map(|&i| probs[i]).sum();
    idx.into_iter().map(|i| (i, if z > 0.0 { probs[i] / z } else { 1.0 / k as f64 })).collect()
}

/// Draws from the renormalized top-`k` of `probs`; `k = 1` is the argmax.
pub fn sample_top_k<R: Rng + ?Sized>(probs: &[f64], k: usize, rng: &mut R) -> usize {
    let top = top_k_probs(probs, k);
    if top.len() == 1 {
        return top[0].0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in &top {
        acc += p;
        if u < acc {
            return i;
        }
    }
    top[top.len() - 1].0
}

/// Temperature softmax followed by top-`k` sampling.
pub fn sample_logits<S: crate::autodiff::Scalar, R: Rng + ?Sized>(logits: &[S], k: usize, temperature: f64, rng: &mut R) -> usize {
    sample_top_k(&softmax_with_temperature(logits, temperature), k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn argmax(p: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn uniform_full_support_frequencies_are_uniform() {
        let v = 16;
        let p = vec![1.0 / v as f64; v];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = vec![0usize; v];
        for _ in 0..n {
            counts[sample_top_k(&p, v, &mut rng)] += 1;
        }
        let q = 1.0 / v as f64;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * q).abs() < 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn top_two_renormalizes_the_two_largest() {
        let p = [0.5, 0.3, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_top_k(&p, 2, &mut rng)] += 1;
        }
        assert_eq!(counts[2], 0);
        let q = 0.625;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        assert!((counts[0] as f64 - n as f64 * q).abs() < 3.0 * sigma, "{counts:?}");
    }

    #[test]
    fn temperature_sharpens_and_flattens() {
        let l = [1.0f32, 0.0, -1.0];
        let cold = softmax_with_temperature(&l, 0.5);
        let warm = softmax_with_temperature(&l, 2.0);
        let base = softmax_with_temperature(&l, 1.0);
        assert!(cold[0] > base[0] && base[0] > warm[0]);
        assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn k_one_is_argmax(raw in prop::collection::vec(0.0f64..1.0, 1..40), seed in 0u64..1000) {
            let z: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / z).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(sample_top_k(&p, 1, &mut rng), argmax(&p));
        }

        #[test]
        fn samples_stay_in_the_top_k(raw in prop::collection::vec(0.01f64..1.0, 2..40), k in 1usize..10, seed in 0u64..1000) {
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let top: Vec<usize> = top_k_probs(&p, k).into_iter().map(|x| x.0).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                prop_assert!(top.contains(&sample_top_k(&p, k, &mut rng)));
            }
            let total: f64 = top_k_probs(&p, k).iter().map(|x| x.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
