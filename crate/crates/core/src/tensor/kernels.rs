//! Raw numeric kernels over row-major slices.
//!
//! Every reduction runs in a fixed order regardless of how the work is split
//! across threads, so results are bitwise reproducible.

use rayon::prelude::*;

/// Below this many multiply-adds a kernel runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

pub fn conv_out_size(input: usize, kernel: usize, g: &ConvGeom) -> Option<usize> {
    let span = g.dilation * (kernel - 1) + 1;
    let padded = input + 2 * g.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / g.stride + 1)
}

/// Range of output positions `o` for which `o*stride - pad + offset` lands in
/// `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    let (s, p, off, len) = (stride as i64, pad as i64, offset as i64, len as i64);
    // o*s >= p - off
    let lo = if p - off <= 0 { 0 } else { (p - off + s - 1) / s };
    // o*s <= len - 1 + p - off
    let hi_num = len - 1 + p - off;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let hi = hi.min(out_len as i64 - 1);
    if hi < lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize + 1)
    }
}

fn all_taps(kh: usize, kw: usize) -> Vec<(usize, usize)> {
    (0..kh).flat_map(|y| (0..kw).map(move |x| (y, x))).collect()
}

/// Direct convolution. `taps`, when given, restricts the kernel positions
/// visited; kernel entries outside it must be zero.
pub fn conv2d_forward(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    g: &ConvGeom,
    taps: Option<&[(usize, usize)]>,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [o, cg, kh, kw] = ks;
    let oh = conv_out_size(h, kh, g).expect("validated");
    let ow = conv_out_size(w, kw, g).expect("validated");
    let opg = o / g.groups;
    let owned;
    let taps = match taps {
        Some(t) => t,
        None => {
            owned = all_taps(kh, kw);
            &owned
        }
    };
    let plane = oh * ow;
    let mut out = vec![0.0; n * o * plane];
    let work = n * o * plane * cg * taps.len();

    let fill = |idx: usize, out_plane: &mut [f64]| {
        let (ni, oi) = (idx / o, idx % o);
        let grp = oi / opg;
        for ci in 0..cg {
            let ch = grp * cg + ci;
            let xp = &x[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
            let kbase = (oi * cg + ci) * kh * kw;
            for &(ky, kx) in taps {
                let wv = k[kbase + ky * kw + kx];
                let (y0, y1) = valid_range(h, oh, g.stride, g.padding, ky * g.dilation);
                let (x0, x1) = valid_range(w, ow, g.stride, g.padding, kx * g.dilation);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky * g.dilation - g.padding;
                    let row = &xp[iy * w..(iy + 1) * w];
                    let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let shift = kx * g.dilation;
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox + shift - g.padding];
                        }
                    } else {
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox * g.stride + kx * g.dilation - g.padding];
                        }
                    }
                }
            }
        }
    };

    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, p)| fill(idx, p));
    } else {
        out.chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, p)| fill(idx, p));
    }
    (out, [n, o, oh, ow])
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_grad_input(
    dy: &[f64],
    ys: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    xs: [usize; 4],
    g: &ConvGeom,
    taps: Option<&[(usize, usize)]>,
) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let [_, o, oh, ow] = ys;
    let [_, cg, kh, kw] = ks;
    let opg = o / g.groups;
    let owned;
    let taps = match taps {
        Some(t) => t,
        None => {
            owned = all_taps(kh, kw);
            &owned
        }
    };
    let plane = h * w;
    let mut dx = vec![0.0; n * c * plane];
    let work = n * o * oh * ow * cg * taps.len();

    let fill = |idx: usize, dplane: &mut [f64]| {
        let (ni, ch) = (idx / c, idx % c);
        let grp = ch / cg;
        let ci = ch % cg;
        for oi in grp * opg..(grp + 1) * opg {
            let dyp = &dy[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            let kbase = (oi * cg + ci) * kh * kw;
            for &(ky, kx) in taps {
                let wv = k[kbase + ky * kw + kx];
                let (y0, y1) = valid_range(h, oh, g.stride, g.padding, ky * g.dilation);
                let (x0, x1) = valid_range(w, ow, g.stride, g.padding, kx * g.dilation);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky * g.dilation - g.padding;
                    let drow = &mut dplane[iy * w..(iy + 1) * w];
                    let grow = &dyp[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        drow[ox * g.stride + kx * g.dilation - g.padding] += wv * grow[ox];
                    }
                }
            }
        }
    };

    if work >= PAR_THRESHOLD {
        dx.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, p)| fill(idx, p));
    } else {
        dx.chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, p)| fill(idx, p));
    }
    dx
}

/// Gradient of the convolution with respect to its kernel. Positions outside
/// `taps` are left at zero.
pub fn conv2d_grad_kernel(
    dy: &[f64],
    ys: [usize; 4],
    x: &[f64],
    xs: [usize; 4],
    ks: [usize; 4],
    g: &ConvGeom,
    taps: Option<&[(usize, usize)]>,
) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let [_, o, oh, ow] = ys;
    let [_, cg, kh, kw] = ks;
    let opg = o / g.groups;
    let owned;
    let taps = match taps {
        Some(t) => t,
        None => {
            owned = all_taps(kh, kw);
            &owned
        }
    };
    let per_out = cg * kh * kw;
    let mut dk = vec![0.0; o * per_out];
    let work = n * o * oh * ow * cg * taps.len();

    let fill = |oi: usize, dko: &mut [f64]| {
        let grp = oi / opg;
        for ci in 0..cg {
            let ch = grp * cg + ci;
            for &(ky, kx) in taps {
                let (y0, y1) = valid_range(h, oh, g.stride, g.padding, ky * g.dilation);
                let (x0, x1) = valid_range(w, ow, g.stride, g.padding, kx * g.dilation);
                let mut acc = 0.0;
                for ni in 0..n {
                    let xp = &x[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
                    let dyp = &dy[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky * g.dilation - g.padding;
                        let row = &xp[iy * w..(iy + 1) * w];
                        let grow = &dyp[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            acc += grow[ox] * row[ox * g.stride + kx * g.dilation - g.padding];
                        }
                    }
                }
                dko[(ci * kh + ky) * kw + kx] = acc;
            }
        }
    };

    if work >= PAR_THRESHOLD {
        dk.par_chunks_mut(per_out)
            .enumerate()
            .for_each(|(oi, p)| fill(oi, p));
    } else {
        dk.chunks_mut(per_out)
            .enumerate()
            .for_each(|(oi, p)| fill(oi, p));
    }
    dk
}

/// "Same"-padded pooling window bookkeeping shared by average and max pooling.
#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as i64 - self.padding() as i64;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel as i64) as usize).min(len);
        (lo, hi)
    }
}

/// Average pooling that excludes padded positions from the divisor.
pub fn avg_pool_forward(x: &[f64], xs: [usize; 4], p: &PoolGeom) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let (oh, ow) = (p.out_size(h), p.out_size(w));
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = p.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = p.window(ox, w);
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += xp[iy * w + ix];
                    }
                }
                op[oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn avg_pool_backward(dy: &[f64], ys: [usize; 4], xs: [usize; 4], p: &PoolGeom) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let [_, _, oh, ow] = ys;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
        let gp = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = p.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = p.window(ox, w);
                let share = gp[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dp[iy * w + ix] += share;
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling; also returns the flat input index chosen for every output.
pub fn max_pool_forward(
    x: &[f64],
    xs: [usize; 4],
    p: &PoolGeom,
) -> (Vec<f64>, Vec<usize>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let (oh, ow) = (p.out_size(h), p.out_size(w));
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = p.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = p.window(ox, w);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let v = x[base + iy * w + ix];
                        if v > best {
                            best = v;
                            best_i = base + iy * w + ix;
                        }
                    }
                }
                let oi = plane * oh * ow + oy * ow + ox;
                out[oi] = best;
                arg[oi] = best_i;
            }
        }
    }
    (out, arg, [n, c, oh, ow])
}

/// Per-channel statistics of an NCHW buffer: (mean, biased variance).
pub fn channel_stats(x: &[f64], xs: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = xs;
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += x[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for ni in 0..n {
            for &xv in &x[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for len in 1..7 {
            for stride in 1..3 {
                for pad in 0..4 {
                    for off in 0..7 {
                        let out_len = 9;
                        let (lo, hi) = valid_range(len, out_len, stride, pad, off);
                        for o in 0..out_len {
                            let pos = (o * stride + off) as i64 - pad as i64;
                            let inside = pos >= 0 && pos < len as i64;
                            assert_eq!(inside, o >= lo && o < hi, "len {len} s {stride} p {pad} off {off} o {o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pool_same_padding_preserves_size() {
        let p = PoolGeom { kernel: 3, stride: 1 };
        assert_eq!(p.out_size(8), 8);
        let p = PoolGeom { kernel: 3, stride: 2 };
        assert_eq!(p.out_size(8), 4);
    }
}
