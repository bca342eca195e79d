//! 2D convolution (zero padding, odd square kernels, stride 1 or 2) and
//! nearest-neighbor upsampling.

use crate::grid::Dims;
use crate::par;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub iw: usize,
    pub ih: usize,
    pub ow: usize,
    pub oh: usize,
}

impl ConvGeom {
    pub(crate) fn new(cin: usize, cout: usize, k: usize, stride: usize, input: &Dims) -> Self {
        let (iw, ih) = (input.size(0), input.size(1));
        ConvGeom {
            cin,
            cout,
            k,
            stride,
            iw,
            ih,
            ow: iw.div_ceil(stride),
            oh: ih.div_ceil(stride),
        }
    }

    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Output columns `x` whose input column `x*s + kx - pad` is in range.
    #[inline]
    fn valid_range(&self, kx: usize, out: usize, inp: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad();
        // need 0 <= x*s + off < inp
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((inp as isize - off) + s - 1) / s;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo as usize, hi.max(lo as usize))
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane_in = g.iw * g.ih;
    let plane_out = g.ow * g.oh;
    let kk = g.k * g.k;
    let s = g.stride;
    let pad = g.pad();
    let mut out = vec![0.0; g.cout * plane_out];
    par::for_each_chunk(&mut out, plane_out, |o, dst| {
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..g.cin {
            let src = &input[i * plane_in..(i + 1) * plane_in];
            let w = &weight[(o * g.cin + i) * kk..(o * g.cin + i + 1) * kk];
            for ky in 0..g.k {
                let (y0, y1) = g.valid_range(ky, g.oh, g.ih);
                for kx in 0..g.k {
                    let wv = w[ky * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid_range(kx, g.ow, g.iw);
                    for y in y0..y1 {
                        let iy = (y * s) as isize + ky as isize - pad;
                        let row = &src[iy as usize * g.iw..];
                        let orow = &mut dst[y * g.ow..(y + 1) * g.ow];
                        for x in x0..x1 {
                            let ix = (x * s) as isize + kx as isize - pad;
                            orow[x] += wv * row[ix as usize];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns (grad input, grad weight, grad bias).
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane_in = g.iw * g.ih;
    let plane_out = g.ow * g.oh;
    let kk = g.k * g.k;
    let s = g.stride;
    let pad = g.pad();

    let mut gin = vec![0.0; g.cin * plane_in];
    par::for_each_chunk(&mut gin, plane_in, |i, dst| {
        for o in 0..g.cout {
            let go = &grad_out[o * plane_out..(o + 1) * plane_out];
            let w = &weight[(o * g.cin + i) * kk..(o * g.cin + i + 1) * kk];
            for ky in 0..g.k {
                let (y0, y1) = g.valid_range(ky, g.oh, g.ih);
                for kx in 0..g.k {
                    let wv = w[ky * g.k + kx];
                    let (x0, x1) = g.valid_range(kx, g.ow, g.iw);
                    for y in y0..y1 {
                        let iy = ((y * s) as isize + ky as isize - pad) as usize;
                        for x in x0..x1 {
                            let ix = ((x * s) as isize + kx as isize - pad) as usize;
                            dst[iy * g.iw + ix] += wv * go[y * g.ow + x];
                        }
                    }
                }
            }
        }
    });

    let mut gw = vec![0.0; g.cout * g.cin * kk];
    par::for_each_chunk(&mut gw, g.cin * kk, |o, dst| {
        let go = &grad_out[o * plane_out..(o + 1) * plane_out];
        for i in 0..g.cin {
            let src = &input[i * plane_in..(i + 1) * plane_in];
            for ky in 0..g.k {
                let (y0, y1) = g.valid_range(ky, g.oh, g.ih);
                for kx in 0..g.k {
                    let (x0, x1) = g.valid_range(kx, g.ow, g.iw);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = ((y * s) as isize + ky as isize - pad) as usize;
                        for x in x0..x1 {
                            let ix = ((x * s) as isize + kx as isize - pad) as usize;
                            acc += go[y * g.ow + x] * src[iy * g.iw + ix];
                        }
                    }
                    dst[i * kk + ky * g.k + kx] = acc;
                }
            }
        }
    });

    let gb = (0..g.cout)
        .map(|o| grad_out[o * plane_out..(o + 1) * plane_out].iter().sum())
        .collect();
    (gin, gw, gb)
}

/// Nearest-neighbor x2 upsampling of planar `channels` on `dims`.
pub(crate) fn upsample_forward(input: &[f64], channels: usize, dims: &Dims) -> Vec<f64> {
    let out_dims = dims.doubled();
    let n_in = dims.len();
    let n_out = out_dims.len();
    let nd = dims.ndim();
    par::map_indexed(channels * n_out, |k| {
        let c = k / n_out;
        let mut co = out_dims.coords(k % n_out);
        for v in co.iter_mut().take(nd) {
            *v /= 2;
        }
        input[c * n_in + dims.index(co)]
    })
}

pub(crate) fn upsample_backward(grad_out: &[f64], channels: usize, dims: &Dims) -> Vec<f64> {
    let out_dims = dims.doubled();
    let n_in = dims.len();
    let n_out = out_dims.len();
    let nd = dims.ndim();
    let mut g = vec![0.0; channels * n_in];
    for c in 0..channels {
        for i in 0..n_out {
            let mut co = out_dims.coords(i);
            for v in co.iter_mut().take(nd) {
                *v /= 2;
            }
            g[c * n_in + dims.index(co)] += grad_out[c * n_out + i];
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition with explicit bounds checks.
    fn conv_naive(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.cout * g.ow * g.oh];
        let pad = (g.k / 2) as isize;
        for o in 0..g.cout {
            for y in 0..g.oh {
                for x in 0..g.ow {
                    let mut acc = bias[o];
                    for i in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (y * g.stride) as isize + ky as isize - pad;
                                let ix = (x * g.stride) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= g.ih as isize || ix >= g.iw as isize {
                                    continue;
                                }
                                acc += weight[((o * g.cin + i) * g.k + ky) * g.k + kx]
                                    * input[i * g.iw * g.ih + iy as usize * g.iw + ix as usize];
                            }
                        }
                    }
                    out[o * g.ow * g.oh + y * g.ow + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        for (stride, w, h) in [(1, 5, 4), (2, 5, 4), (2, 6, 6), (1, 1, 3)] {
            let dims = Dims::new(&[w, h]).unwrap();
            let g = ConvGeom::new(3, 2, 3, stride, &dims);
            let input: Vec<f64> = (0..3 * w * h).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let weight: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
            let bias = [0.5, -0.25];
            let fast = conv_forward(&g, &input, &weight, Some(&bias));
            let slow = conv_naive(&g, &input, &weight, &bias);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_replicates() {
        let d = Dims::new(&[2, 1]).unwrap();
        let out = upsample_forward(&[1.0, 2.0], 1, &d);
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let back = upsample_backward(&[1.0; 8], 1, &d);
        assert_eq!(back, vec![4.0, 4.0]);
    }
}
