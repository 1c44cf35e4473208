//! Kernel unification, separable composition, weighted merging and kernel
//! normalization, plus the graph pass that fuses parallel conv branches.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::{Body, Branch, CandidateSet, ComputeGraph, MergedConv, MergedMember, Mix, Stage};
use crate::tensor::{embedded_taps, Tensor, TensorError};

/// Clamp for the mass of a candidate group used as a denominator.
pub const EPS_P: f64 = 1e-8;
/// Clamp for the kernel standard deviation under normalization.
pub const EPS_STD: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelNorm {
    #[default]
    Off,
    /// Zero mean and unit deviation over the whole kernel.
    Whole,
    PerOutputChannel,
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4], TensorError> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::Dimension(format!("{what}: expected a 4-d kernel, got {:?}", t.shape()))),
    }
}

/// Re-expresses a kernel used at dilation `d` as a dilation-1 kernel of size
/// `target`, centred, with zeros elsewhere.
pub fn unify_kernel(k: &Tensor, d: usize, target: usize) -> Result<Tensor, TensorError> {
    let [o, i, kh, kw] = dims4(k, "unify_kernel")?;
    let taps = embedded_taps(kh, kw, target, d)?;
    let mut data = vec![0.0; o * i * target * target];
    let src = k.data();
    for p in 0..o * i {
        for (t, &(y, x)) in taps.iter().enumerate() {
            data[p * target * target + y * target + x] = src[p * kh * kw + t];
        }
    }
    Tensor::new(&[o, i, target, target], data, k.dtype())
}

/// Dense kernel of a depthwise (C,1,k,k) conv followed by a pointwise
/// (O,C,1,1) conv: `K[o,c] = pw[o,c] · dw[c]`.
pub fn compose_depthwise_pointwise(dw: &Tensor, pw: &Tensor) -> Result<Tensor, TensorError> {
    let [c, one, kh, kw] = dims4(dw, "compose depthwise")?;
    let [o, c2, ph, pwid] = dims4(pw, "compose pointwise")?;
    if one != 1 || c2 != c || ph != 1 || pwid != 1 {
        return Err(TensorError::Dimension(format!(
            "depthwise {:?} does not compose with pointwise {:?}",
            dw.shape(),
            pw.shape()
        )));
    }
    let taps = kh * kw;
    let mut data = Vec::with_capacity(o * c * taps);
    for oi in 0..o {
        for ci in 0..c {
            let p = pw.data()[oi * c + ci];
            data.extend(dw.data()[ci * taps..(ci + 1) * taps].iter().map(|v| p * v));
        }
    }
    Tensor::new(&[o, c, kh, kw], data, dw.dtype())
}

/// Dense (C,C,k,k) kernel with the depthwise taps on the channel diagonal.
pub fn depthwise_as_dense(dw: &Tensor) -> Result<Tensor, TensorError> {
    let [c, one, kh, kw] = dims4(dw, "depthwise_as_dense")?;
    if one != 1 {
        return Err(TensorError::Dimension("depthwise kernel must have one input channel".into()));
    }
    let taps = kh * kw;
    let mut data = vec![0.0; c * c * taps];
    for ci in 0..c {
        data[(ci * c + ci) * taps..(ci * c + ci + 1) * taps].copy_from_slice(&dw.data()[ci * taps..(ci + 1) * taps]);
    }
    Tensor::new(&[c, c, kh, kw], data, dw.dtype())
}

/// `Σ_i β_i K_i` over kernels of identical shape.
pub fn merge_branch(kernels: &[Tensor], beta: &[f64]) -> Result<Tensor, TensorError> {
    let first = kernels
        .first()
        .ok_or_else(|| TensorError::Parameter("merge_branch needs at least one kernel".into()))?;
    if kernels.len() != beta.len() {
        return Err(TensorError::Parameter(format!(
            "{} kernels but {} weights",
            kernels.len(),
            beta.len()
        )));
    }
    let mut acc = Tensor::zeros(first.shape(), first.dtype());
    for (k, &b) in kernels.iter().zip(beta) {
        acc.axpy(b, k)?;
    }
    Ok(acc)
}

/// Zero-mean, unit population deviation, with the deviation clamped below by
/// [`EPS_STD`].
pub fn normalize_kernel(k: &Tensor, mode: KernelNorm) -> Tensor {
    let groups = match mode {
        KernelNorm::Off => return k.clone(),
        KernelNorm::Whole => 1,
        KernelNorm::PerOutputChannel => k.shape()[0],
    };
    let len = k.numel() / groups;
    let mut data = k.to_vec();
    for part in data.chunks_mut(len) {
        let mean = part.iter().sum::<f64>() / len as f64;
        let var = part.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
        let s = var.sqrt().max(EPS_STD);
        for v in part.iter_mut() {
            *v = (*v - mean) / s;
        }
    }
    Tensor::new(k.shape(), data, k.dtype()).expect("same shape")
}

fn single_conv(b: &Branch) -> Option<&crate::graph::UnitInstance> {
    match &b.body {
        Body::Path(stages) if stages.len() == 1 => match &stages[0] {
            Stage::Unit(u) if u.unit.is_conv() => Some(u),
            _ => None,
        },
        _ => None,
    }
}

/// Fuses, inside one mix, every set of two or more branches whose body is a
/// single conv unit with matching stride and channels. Returns the member
/// set and target size of each fusion.
pub fn reparameterize_mix(mix: &mut Mix) -> Vec<(CandidateSet, usize)> {
    let mut groups: Vec<((usize, usize, usize), Vec<usize>)> = Vec::new();
    for (i, b) in mix.branches.iter().enumerate() {
        if let Some(u) = single_conv(b) {
            let key = (u.unit.stride(), u.unit.in_ch(), u.unit.out_ch());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(i),
                None => groups.push((key, vec![i])),
            }
        }
    }
    let mut merges = Vec::new();
    let mut replace: Vec<(usize, Branch)> = Vec::new();
    let mut drop: Vec<usize> = Vec::new();
    for ((stride, in_ch, out_ch), idx) in groups.into_iter().filter(|(_, v)| v.len() >= 2) {
        let members: Vec<MergedMember> = idx
            .iter()
            .map(|&i| MergedMember {
                members: mix.branches[i].members,
                unit: single_conv(&mix.branches[i]).expect("grouped").clone(),
            })
            .collect();
        let target = members
            .iter()
            .filter_map(|m| m.unit.unit.effective_size())
            .max()
            .expect("conv members");
        let mut taps: Vec<(usize, usize)> = members
            .iter()
            .flat_map(|m| {
                let (k, d) = m.unit.unit.spatial_kernel().expect("conv member");
                embedded_taps(k, k, target, d).expect("effective size fits target")
            })
            .collect();
        taps.sort_unstable();
        taps.dedup();
        let mc = MergedConv {
            members,
            target,
            stride,
            in_ch,
            out_ch,
            taps: Arc::from(taps),
        };
        let set = mc.candidates();
        merges.push((set, target));
        replace.push((idx[0], Branch {
            members: set,
            body: Body::Path(vec![Stage::Merged(mc)]),
        }));
        drop.extend_from_slice(&idx[1..]);
    }
    for (i, b) in replace {
        mix.branches[i] = b;
    }
    let mut i = 0;
    mix.branches.retain(|_| {
        i += 1;
        !drop.contains(&(i - 1))
    });
    merges
}

/// Applies [`reparameterize_mix`] to every mix of the graph.
pub fn reparameterize(g: &mut ComputeGraph) -> Vec<(CandidateSet, usize)> {
    let mut all = Vec::new();
    g.root.visit_mut(&mut |m| {
        all.extend(reparameterize_mix(m));
        false
    });
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), DType::F64).unwrap()
    }

    /// Direct zero-padded convolution, kept deliberately naive.
    fn conv(x: &Tensor, k: &Tensor, dil: usize, pad: usize, groups: usize) -> Tensor {
        let [n, c, h, w] = dims4(x, "x").unwrap();
        let [o, cg, kh, kw] = dims4(k, "k").unwrap();
        let oh = h + 2 * pad - dil * (kh - 1);
        let ow = w + 2 * pad - dil * (kw - 1);
        let og = o / groups;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                let g = oc / og;
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..cg {
                            let ci = g * cg + ic;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y + ky * dil) as isize - pad as isize;
                                    let ix = (xx + kx * dil) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((oc * cg + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        Tensor::new(&[n, o, oh, ow], out, DType::F64).unwrap()
    }

    #[test]
    fn unified_dilated_kernel_matches_original_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, d, t) in [(3, 2, 5), (3, 1, 5), (5, 2, 9), (3, 2, 7), (1, 1, 3)] {
            let x = rand_tensor(&mut rng, &[2, 3, 9, 9]);
            let kern = rand_tensor(&mut rng, &[4, 3, k, k]);
            let e = d * (k - 1) + 1;
            let a = conv(&x, &kern, d, (e - 1) / 2, 1);
            let b = conv(&x, &unify_kernel(&kern, d, t).unwrap(), 1, (t - 1) / 2, 1);
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-10, "k={k} d={d} t={t}");
        }
    }

    #[test]
    fn unify_rejects_kernels_that_do_not_fit() {
        let k = Tensor::zeros(&[1, 1, 3, 3], DType::F64);
        assert!(unify_kernel(&k, 2, 3).is_err());
        assert!(unify_kernel(&k, 1, 4).is_err());
    }

    #[test]
    fn composed_kernel_matches_two_stage_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 3, 7, 7]);
        let dw = rand_tensor(&mut rng, &[3, 1, 3, 3]);
        let pw = rand_tensor(&mut rng, &[5, 3, 1, 1]);
        let two = conv(&conv(&x, &dw, 1, 1, 3), &pw, 1, 0, 1);
        let one = conv(&x, &compose_depthwise_pointwise(&dw, &pw).unwrap(), 1, 1, 1);
        assert!(two.max_abs_diff(&one).unwrap() <= 1e-10);
        let dense = conv(&x, &depthwise_as_dense(&dw).unwrap(), 1, 1, 1);
        assert!(dense.max_abs_diff(&conv(&x, &dw, 1, 1, 3)).unwrap() <= 1e-12);
    }

    #[test]
    fn merged_kernel_matches_weighted_branch_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 2, 8, 8]);
        let specs = [(3, 1), (5, 1), (3, 2)];
        let beta = [0.2, 0.5, 0.3];
        let kernels: Vec<Tensor> = specs.iter().map(|&(k, _)| rand_tensor(&mut rng, &[2, 2, k, k])).collect();
        let mut reference = Tensor::zeros(&[1, 2, 8, 8], DType::F64);
        for ((k, &(ks, d)), &b) in kernels.iter().zip(&specs).zip(&beta) {
            let e = d * (ks - 1) + 1;
            reference.axpy(b, &conv(&x, k, d, (e - 1) / 2, 1)).unwrap();
        }
        let unified: Vec<Tensor> = kernels
            .iter()
            .zip(&specs)
            .map(|(k, &(_, d))| unify_kernel(k, d, 5).unwrap())
            .collect();
        let merged = merge_branch(&unified, &beta).unwrap();
        let got = conv(&x, &merged, 1, 2, 1);
        assert!(got.max_abs_diff(&reference).unwrap() <= 1e-10);
    }

    #[test]
    fn normalization_worked_example() {
        let k = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], DType::F64).unwrap();
        let n = normalize_kernel(&k, KernelNorm::Whole);
        let s = 1.25f64.sqrt();
        let want = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        for (a, b) in n.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = normalize_kernel(&Tensor::full(&[1, 1, 3, 3], 2.0, DType::F64), KernelNorm::Whole);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_channel_normalization_standardizes_each_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let n = normalize_kernel(&k, KernelNorm::PerOutputChannel);
        for part in n.data().chunks(18) {
            let mean = part.iter().sum::<f64>() / 18.0;
            let var = part.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn normalization_is_affine_invariant(
            vals in prop::collection::vec(-3.0f64..3.0, 9),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let k = Tensor::new(&[1, 1, 3, 3], vals, DType::F64).unwrap();
            let spread = k.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - k.data().iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-2);
            let shifted = k.map(|v| a * v + b);
            let d = normalize_kernel(&k, KernelNorm::Whole)
                .max_abs_diff(&normalize_kernel(&shifted, KernelNorm::Whole))
                .unwrap();
            prop_assert!(d < 1e-9);
        }

        #[test]
        fn normalized_kernel_has_zero_mean_unit_deviation(vals in prop::collection::vec(-3.0f64..3.0, 2..30)) {
            let n = vals.len();
            let mean0 = vals.iter().sum::<f64>() / n as f64;
            let sd0 = (vals.iter().map(|v| (v - mean0).powi(2)).sum::<f64>() / n as f64).sqrt();
            prop_assume!(sd0 > 1e-3);
            let k = Tensor::new(&[1, 1, 1, n], vals, DType::F64).unwrap();
            let out = normalize_kernel(&k, KernelNorm::Whole);
            let mean = out.data().iter().sum::<f64>() / n as f64;
            let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
