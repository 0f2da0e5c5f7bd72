//! Independent reference implementations shared by the integration tests.
//! Everything here is plain loops over `Vec<f64>`; nothing touches the tape.
#![allow(dead_code)]

use hsi_gsf::gsf::GsfParams;
use hsi_gsf::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Cross-correlation of `x: [C, D, H, W]` with `k: [O, C, KD, KH, KW]`,
/// stride 1, zero padding `pad` on each side of each axis.
pub fn conv3d_oracle(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 5],
    bias: &[f64],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 4]) {
    let [c, d, h, w] = xs;
    let [o, kc, kd, kh, kw] = ks;
    assert_eq!(c, kc);
    let od = d + 2 * pad[0] + 1 - kd;
    let oh = h + 2 * pad[1] + 1 - kh;
    let ow = w + 2 * pad[2] + 1 - kw;
    let mut out = vec![0.0; o * od * oh * ow];
    for oc in 0..o {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for a in 0..kd {
                            for b in 0..kh {
                                for e in 0..kw {
                                    let iz = z as isize + a as isize - pad[0] as isize;
                                    let iy = y as isize + b as isize - pad[1] as isize;
                                    let ix = xx as isize + e as isize - pad[2] as isize;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ic * d + iz as usize) * h + iy as usize) * w
                                        + ix as usize;
                                    let ki = (((oc * c + ic) * kd + a) * kh + b) * kw + e;
                                    acc += x[xi] * k[ki];
                                }
                            }
                        }
                    }
                    out[((oc * od + z) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [o, od, oh, ow])
}

/// Cross-correlation of `x: [C, H, W]` with `k: [O, C, KH, KW]`.
pub fn conv2d_oracle(
    x: &[f64],
    xs: [usize; 3],
    k: &[f64],
    ks: [usize; 4],
    bias: &[f64],
    pad: [usize; 2],
) -> (Vec<f64>, [usize; 3]) {
    let [c, h, w] = xs;
    let [o, kc, kh, kw] = ks;
    assert_eq!(c, kc);
    let oh = h + 2 * pad[0] + 1 - kh;
    let ow = w + 2 * pad[1] + 1 - kw;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for b in 0..kh {
                        for e in 0..kw {
                            let iy = y as isize + b as isize - pad[0] as isize;
                            let ix = xx as isize + e as isize - pad[1] as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ic * h + iy as usize) * w + ix as usize]
                                * k[((oc * c + ic) * kh + b) * kw + e];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = acc;
            }
        }
    }
    (out, [o, oh, ow])
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Gate-shift-fuse on `x: [C, T, H, W]`, scripted step by step:
/// split channels in half; per group a tanh gate plane from a padded 3-D
/// convolution; gated part shifted one band forward (group 0) or backward
/// (group 1) with zero fill; residual = input - gated; both pooled over
/// space, stacked, fused by a padded 2-D convolution and a sigmoid; output
/// = w * shifted + (1 - w) * residual; groups concatenated.
pub fn gsf_oracle(x: &[f64], shape: [usize; 4], p: &GsfParams<Tensor<f64>>) -> Vec<f64> {
    let [c, t, h, w] = shape;
    let half = c / 2;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for g in 0..2 {
        let xg = &x[g * half * t * plane..(g + 1) * half * t * plane];
        // gate plane [1, T, H, W]
        let gk = &p.gate[g].kernel;
        let (gate_pre, _) = conv3d_oracle(
            xg,
            [half, t, h, w],
            gk.data(),
            [1, half, 3, 3, 3],
            p.gate[g].bias.data(),
            [1, 1, 1],
        );
        let gate: Vec<f64> = gate_pre.iter().map(|v| v.tanh()).collect();
        let mut gated = vec![0.0; xg.len()];
        let mut residual = vec![0.0; xg.len()];
        for ch in 0..half {
            for s in 0..t {
                for q in 0..plane {
                    let i = (ch * t + s) * plane + q;
                    gated[i] = gate[s * plane + q] * xg[i];
                    residual[i] = xg[i] - gated[i];
                }
            }
        }
        let mut shifted = vec![0.0; xg.len()];
        for ch in 0..half {
            for s in 0..t {
                let src = if g == 0 {
                    s.checked_sub(1)
                } else {
                    (s + 1 < t).then_some(s + 1)
                };
                if let Some(src) = src {
                    for q in 0..plane {
                        shifted[(ch * t + s) * plane + q] = gated[(ch * t + src) * plane + q];
                    }
                }
            }
        }
        // pooled [2, C/2, T]
        let mut pooled = vec![0.0; 2 * half * t];
        for ch in 0..half {
            for s in 0..t {
                let base = (ch * t + s) * plane;
                pooled[ch * t + s] = shifted[base..base + plane].iter().sum::<f64>() / plane as f64;
                pooled[half * t + ch * t + s] =
                    residual[base..base + plane].iter().sum::<f64>() / plane as f64;
            }
        }
        let (fuse_pre, _) = conv2d_oracle(
            &pooled,
            [2, half, t],
            p.fuse[g].kernel.data(),
            [1, 2, 3, 3],
            p.fuse[g].bias.data(),
            [1, 1],
        );
        for ch in 0..half {
            for s in 0..t {
                let wgt = sigmoid(fuse_pre[ch * t + s]);
                for q in 0..plane {
                    let i = (ch * t + s) * plane + q;
                    out[g * half * t * plane + i] = wgt * shifted[i] + (1.0 - wgt) * residual[i];
                }
            }
        }
    }
    out
}

/// Random GSF parameters for `channels` input channels.
pub fn random_gsf(rng: &mut ChaCha8Rng, channels: usize, scale: f64) -> GsfParams<Tensor<f64>> {
    let mut p = GsfParams::<Tensor<f64>>::zeros(channels);
    for conv in p.gate.iter_mut().chain(p.fuse.iter_mut()) {
        for t in [&mut conv.kernel, &mut conv.bias] {
            for v in t.data_mut() {
                *v = scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            }
        }
    }
    p
}

/// OA, AA and kappa x 100 evaluated straight from the textbook formulas.
pub fn metrics_formula(counts: &[u64], c: usize) -> (f64, f64, f64) {
    let total: f64 = counts.iter().map(|&v| v as f64).sum();
    let diag: f64 = (0..c).map(|k| counts[k * c + k] as f64).sum();
    let row = |k: usize| (0..c).map(|j| counts[k * c + j] as f64).sum::<f64>();
    let col = |k: usize| (0..c).map(|i| counts[i * c + k] as f64).sum::<f64>();
    let po = diag / total;
    let pe = (0..c).map(|k| row(k) * col(k)).sum::<f64>() / (total * total);
    let recalls: Vec<f64> = (0..c)
        .filter(|&k| row(k) > 0.0)
        .map(|k| counts[k * c + k] as f64 / row(k))
        .collect();
    let aa = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;
    (100.0 * po, aa, 100.0 * (po - pe) / (1.0 - pe))
}

pub fn random_confusion(rng: &mut ChaCha8Rng, c: usize) -> Vec<u64> {
    (0..c * c)
        .map(|i| {
            let diag = i / c == i % c;
            rng.random_range(0..if diag { 200 } else { 30 })
        })
        .collect()
}

/// 64 patches (32 per class) of two Gaussian spectral signatures in five
/// reduced bands, sized for the tiny configuration.
pub fn two_signature_set() -> hsi_gsf::data::PatchSet {
    let spec = hsi_gsf::synth::SynthSpec {
        bands: 5,
        classes: 2,
        shift: 2.0,
        peak_width: 1.0,
        noise: 0.1,
        seed: 5,
        ..Default::default()
    };
    hsi_gsf::synth::signature_patches(&spec, 7, 32).unwrap()
}

/// Runs `f` on a dedicated rayon pool with `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}
