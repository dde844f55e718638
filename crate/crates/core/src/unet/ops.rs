//! Layer kernels. Reductions accumulate in f64 and round to f32 once per
//! output value, in a fixed order that does not depend on thread count.

use rayon::prelude::*;

use super::{Tensor5, UNetError};

/// Shape-preserving 3D convolution (cross-correlation, stride 1, zero
/// padding `k / 2`).
///
/// `weight` is laid out as `[out][in][kz][ky][kx]` with `kx` fastest, i.e.
/// the kernel's spatial axes follow the same x-fastest order as tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3d {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, UNetError> {
        if kernel.is_multiple_of(2) {
            return Err(UNetError::ShapeMismatch(format!("kernel size {kernel} must be odd")));
        }
        if weight.len() != out_channels * in_channels * kernel.pow(3) || bias.len() != out_channels {
            return Err(UNetError::ShapeMismatch(format!(
                "conv {out_channels}x{in_channels}x{kernel}^3 given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self { out_channels, in_channels, kernel, weight, bias })
    }

    #[inline]
    fn w(&self, o: usize, i: usize, kx: usize, ky: usize, kz: usize) -> f32 {
        let k = self.kernel;
        self.weight[(o * self.in_channels + i) * k * k * k + kx + k * (ky + k * kz)]
    }
}

/// Valid output range along one axis for kernel offset `d`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

pub fn conv3d(input: &Tensor5, conv: &Conv3d) -> Result<Tensor5, UNetError> {
    if input.channels() != conv.in_channels {
        return Err(UNetError::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            conv.in_channels,
            input.channels()
        )));
    }
    let [nx, ny, nz] = input.shape();
    let n = nx * ny * nz;
    let k = conv.kernel;
    let r = (k / 2) as isize;

    let per_channel: Vec<Vec<f32>> = (0..conv.out_channels)
        .into_par_iter()
        .map(|o| {
            let mut acc = vec![conv.bias[o] as f64; n];
            for i in 0..conv.in_channels {
                let src = input.channel(i);
                for kz in 0..k {
                    let dz = kz as isize - r;
                    let (z0, z1) = valid_range(nz, dz);
                    for ky in 0..k {
                        let dy = ky as isize - r;
                        let (y0, y1) = valid_range(ny, dy);
                        for kx in 0..k {
                            let dx = kx as isize - r;
                            let (x0, x1) = valid_range(nx, dx);
                            if x0 >= x1 {
                                continue;
                            }
                            let w = conv.w(o, i, kx, ky, kz) as f64;
                            let len = x1 - x0;
                            for z in z0..z1 {
                                let sz = (z as isize + dz) as usize;
                                for y in y0..y1 {
                                    let sy = (y as isize + dy) as usize;
                                    let out_row = x0 + nx * (y + ny * z);
                                    let in_row = (x0 as isize + dx) as usize + nx * (sy + ny * sz);
                                    let dst = &mut acc[out_row..out_row + len];
                                    let s = &src[in_row..in_row + len];
                                    for (a, &v) in dst.iter_mut().zip(s) {
                                        *a += w * v as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        })
        .collect();

    let data = per_channel.concat();
    Tensor5::new(conv.out_channels, input.shape(), data)
}

pub fn relu_in_place(t: &mut Tensor5) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Max over non-overlapping 2x2x2 blocks.
pub fn maxpool2(input: &Tensor5) -> Result<Tensor5, UNetError> {
    let s = input.shape();
    if s.iter().any(|n| n % 2 != 0) {
        return Err(UNetError::OddDimension(s));
    }
    let out_shape = s.map(|n| n / 2);
    let [ox, oy, oz] = out_shape;
    let mut data = Vec::with_capacity(input.channels() * ox * oy * oz);
    for c in 0..input.channels() {
        let src = input.channel(c);
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let mut m = f32::NEG_INFINITY;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = s[0] * (2 * y + dy + s[1] * (2 * z + dz));
                            m = m.max(src[row + 2 * x]).max(src[row + 2 * x + 1]);
                        }
                    }
                    data.push(m);
                }
            }
        }
    }
    Tensor5::new(input.channels(), out_shape, data)
}

/// Nearest-neighbour replication by a factor of two on every axis.
pub fn upsample2_nearest(input: &Tensor5) -> Tensor5 {
    let s = input.shape();
    let out_shape = s.map(|n| n * 2);
    let mut data = Vec::with_capacity(input.channels() * out_shape.iter().product::<usize>());
    for c in 0..input.channels() {
        let src = input.channel(c);
        for z in 0..out_shape[2] {
            for y in 0..out_shape[1] {
                let row = s[0] * (y / 2 + s[1] * (z / 2));
                data.extend((0..out_shape[0]).map(|x| src[row + x / 2]));
            }
        }
    }
    Tensor5::new(input.channels(), out_shape, data).expect("shape computed from input")
}

/// Concatenates along the channel axis.
pub fn concat_channels(parts: &[&Tensor5]) -> Result<Tensor5, UNetError> {
    let first = parts.first().ok_or_else(|| UNetError::ShapeMismatch("nothing to concatenate".into()))?;
    let mut data = Vec::new();
    let mut channels = 0;
    for p in parts {
        if p.shape() != first.shape() {
            return Err(UNetError::ShapeMismatch(format!("concat {:?} with {:?}", p.shape(), first.shape())));
        }
        channels += p.channels();
        data.extend_from_slice(p.data());
    }
    Tensor5::new(channels, first.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor5 {
        let n = c * shape.iter().product::<usize>();
        Tensor5::new(c, shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_conv(o: usize, i: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv3d {
        let w = (0..o * i * k * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        Conv3d::new(o, i, k, w, b).unwrap()
    }

    /// Six nested loops over output voxel and kernel tap (channels outermost),
    /// reading out-of-range taps as zero.
    fn naive_conv(input: &Tensor5, conv: &Conv3d) -> Vec<f64> {
        let [nx, ny, nz] = input.shape();
        let k = conv.kernel as isize;
        let r = k / 2;
        let mut out = Vec::new();
        for o in 0..conv.out_channels {
            for z in 0..nz as isize {
                for y in 0..ny as isize {
                    for x in 0..nx as isize {
                        let mut s = conv.bias[o] as f64;
                        for i in 0..conv.in_channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (sx, sy, sz) = (x + kx - r, y + ky - r, z + kz - r);
                                        if sx < 0 || sy < 0 || sz < 0 {
                                            continue;
                                        }
                                        if sx >= nx as isize || sy >= ny as isize || sz >= nz as isize {
                                            continue;
                                        }
                                        let w = conv.weight[(o * conv.in_channels + i) * (k * k * k) as usize
                                            + (kx + k * (ky + k * kz)) as usize];
                                        s += w as f64 * input.get(i, sx as usize, sy as usize, sz as usize) as f64;
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(1, [5, 4, 6], &mut rng);
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let conv = Conv3d::new(1, 1, 3, w, vec![0.0]).unwrap();
        assert_eq!(conv3d(&input, &conv).unwrap(), input);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let input = Tensor5::new(1, [5, 5, 5], vec![2.5; 125]).unwrap();
        let conv = Conv3d::new(1, 1, 3, vec![1.0; 27], vec![0.0]).unwrap();
        let out = conv3d(&input, &conv).unwrap();
        assert_eq!(out.get(0, 2, 2, 2), 27.0 * 2.5);
        // Corner sees a 2x2x2 window.
        assert_eq!(out.get(0, 0, 0, 0), 8.0 * 2.5);
    }

    #[test]
    fn random_conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(2, [6, 6, 6], &mut rng);
        let conv = random_conv(4, 2, 3, &mut rng);
        let got = conv3d(&input, &conv).unwrap();
        for (g, e) in got.data().iter().zip(naive_conv(&input, &conv)) {
            assert!((*g as f64 - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn pointwise_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(3, [4, 5, 3], &mut rng);
        let conv = random_conv(2, 3, 1, &mut rng);
        let got = conv3d(&input, &conv).unwrap();
        for (g, e) in got.data().iter().zip(naive_conv(&input, &conv)) {
            assert!((*g as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_is_affine_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(2, [5, 5, 5], &mut rng);
        let y = random_tensor(2, [5, 5, 5], &mut rng);
        let conv = random_conv(3, 2, 3, &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let mixed: Vec<f32> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let mixed = Tensor5::new(2, [5, 5, 5], mixed).unwrap();
        let (cx, cy, cm) = (conv3d(&x, &conv).unwrap(), conv3d(&y, &conv).unwrap(), conv3d(&mixed, &conv).unwrap());
        let n = 125;
        for o in 0..3 {
            let bias = conv.bias[o];
            for v in 0..n {
                let i = o * n + v;
                let expected = a * cx.data()[i] + b * cy.data()[i] - (a + b - 1.0) * bias;
                assert!((cm.data()[i] - expected).abs() < 1e-5, "{} vs {expected}", cm.data()[i]);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let input = Tensor5::zeros(3, [2, 2, 2]);
        let conv = Conv3d::new(1, 2, 3, vec![0.0; 54], vec![0.0]).unwrap();
        assert!(matches!(conv3d(&input, &conv), Err(UNetError::ShapeMismatch(_))));
        assert!(Conv3d::new(1, 2, 2, vec![0.0; 16], vec![0.0]).is_err());
    }

    #[test]
    fn pool_and_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(2, [3, 4, 5], &mut rng);
        assert_eq!(maxpool2(&upsample2_nearest(&t)).unwrap(), t);
        assert!(matches!(maxpool2(&t), Err(UNetError::OddDimension(_))));
        let c = Tensor5::new(1, [4, 4, 4], vec![3.0; 64]).unwrap();
        assert!(maxpool2(&c).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn maxpool_matches_block_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_tensor(1, [8, 8, 8], &mut rng);
        let p = maxpool2(&t).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let mut m = f32::MIN;
                    for i in 0..8 {
                        m = m.max(t.get(0, 2 * x + (i & 1), 2 * y + (i >> 1 & 1), 2 * z + (i >> 2)));
                    }
                    assert_eq!(p.get(0, x, y, z), m);
                }
            }
        }
    }
}
