//! Direct (non-FFT) 2-D cross-correlation kernels over C×H×W maps.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if stride == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Output positions `o` for which `o * stride + k - pad` lands inside
    /// `0..input`.
    fn valid_range(&self, k: usize, input: usize, output: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.pad);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if input + p > k {
            ((input + p - k - 1) / s + 1).min(output)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, g: &ConvGeometry) -> Tensor {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.pad);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.out_channels * oh * ow];
    for co in 0..g.out_channels {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            plane.fill(b.data()[co]);
        }
        for ci in 0..g.in_channels {
            let xin = &x[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..kh {
                let ys = g.valid_range(ky, ih, oh);
                for kx in 0..kw {
                    let wv = k[((co * g.in_channels + ci) * kh + ky) * kw + kx];
                    let xs = g.valid_range(kx, iw, ow);
                    for oy in ys.clone() {
                        let iy = oy * s + ky - p;
                        let row = &xin[iy * iw..(iy + 1) * iw];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in xs.clone() {
                            orow[ox] += wv * row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.out_channels, oh, ow], out)
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeometry,
) -> (Tensor, Tensor, Tensor) {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.pad);
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; g.out_channels];
    for co in 0..g.out_channels {
        let gplane = &go[co * oh * ow..(co + 1) * oh * ow];
        db[co] = gplane.iter().sum();
        for ci in 0..g.in_channels {
            let base = ci * ih * iw;
            for ky in 0..kh {
                let ys = g.valid_range(ky, ih, oh);
                for kx in 0..kw {
                    let widx = ((co * g.in_channels + ci) * kh + ky) * kw + kx;
                    let wv = k[widx];
                    let xs = g.valid_range(kx, iw, ow);
                    let mut acc = 0.0;
                    for oy in ys.clone() {
                        let iy = oy * s + ky - p;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let roff = base + iy * iw;
                        for ox in xs.clone() {
                            let ix = roff + ox * s + kx - p;
                            acc += grow[ox] * x[ix];
                            dx[ix] += wv * grow[ox];
                        }
                    }
                    dk[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![g.out_channels], db),
    )
}
