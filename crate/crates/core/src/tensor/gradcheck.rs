//! Central finite-difference checks against tape gradients.

use super::{DType, Result, Tape, Tensor, Var};

/// Compares tape gradients of a scalar function with central differences.
///
/// `f` records the function on a fresh f64 tape given leaf handles for
/// `inputs` and returns the scalar output. The result is the largest
/// `|analytic - numeric| / max(1, |analytic|)` over every input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(DType::F64);
        let vars = vals
            .iter()
            .map(|t| tape.leaf(t.cast(DType::F64), false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new(DType::F64);
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.cast(DType::F64), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = inputs.iter().map(|t| t.cast(DType::F64)).collect();
    let mut worst = 0.0f64;
    for (ti, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        for i in 0..work[ti].numel() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data, DType::F64).unwrap()
    }

    /// Weighted sum of all outputs so every element contributes.
    fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
        let n = tape.value(y).numel();
        let shape = tape.shape(y).to_vec();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let w = tape.constant(Tensor::new(&shape, w, DType::F64)?)?;
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }

    const TOL: f64 = 1e-3;
    const H: f64 = 1e-5;

    #[test]
    fn conv_dilated_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let err = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], ConvParams::same(3, 2, 2, 1))?;
                probe(t, y)
            },
            &[x, k],
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn depthwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 3, 5, 5]);
        let k = rand_tensor(&mut rng, &[3, 1, 3, 3]);
        let err = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], ConvParams::same(3, 1, 1, 3))?;
                probe(t, y)
            },
            &[x, k],
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn batch_norm_relu_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let err = grad_check(
            |t, v| {
                let (b, _, _) = t.batch_norm_train(v[0], 1e-5)?;
                let r = t.relu(b)?;
                let a = t.avg_pool(r, 3, 2)?;
                let m = t.max_pool(b, 3, 2)?;
                let s = t.subsample(b, 2)?;
                let y = t.add_n(&[a, m, s])?;
                probe(t, y)
            },
            &[x],
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_gather_recip_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[5]);
        let x = rand_tensor(&mut rng, &[1, 1, 3, 3]);
        let err = grad_check(
            |t, v| {
                let b = t.softmax(v[0])?;
                let g = t.gather(b, &[1, 3])?;
                let m = t.sum(g)?;
                let r = t.recip_clamped(m, 1e-8)?;
                let y = t.scale(v[1], r)?;
                let w = t.gather(b, &[0, 2])?;
                let z = t.weighted_sum(&[y, v[1]], w)?;
                probe(t, z)
            },
            &[a, x],
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn head_and_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4, 2, 2]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let b = rand_tensor(&mut rng, &[5]);
        let err = grad_check(
            |t, v| {
                let g = t.global_avg_pool(v[0])?;
                let z = t.linear(g, v[1], Some(v[2]))?;
                t.cross_entropy(z, &[0, 4, 2])
            },
            &[x, w, b],
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn kernel_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dw = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let pw = rand_tensor(&mut rng, &[3, 2, 1, 1]);
        let err = grad_check(
            |t, v| {
                let d = t.compose_separable(v[0], v[1])?;
                let n = t.normalize_kernel(d, 1e-5, false)?;
                let e = t.embed_kernel(n, 7, 2)?;
                let dd = t.depthwise_to_dense(v[0])?;
                let nn = t.normalize_kernel(dd, 1e-5, true)?;
                let e2 = t.embed_kernel(nn, 7, 1)?;
                let p = probe(t, e)?;
                let q = probe(t, e2)?;
                t.add(p, q)
            },
            &[dw, pw],
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let tape = Tape::new(DType::F64);
        let mut other = Tape::new(DType::F64);
        let v = other.constant(Tensor::scalar(1.0, DType::F64)).unwrap();
        assert!(matches!(tape.backward(v), Err(crate::tensor::TensorError::State(_))));
    }
}
