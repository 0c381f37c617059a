use rand::Rng;
use rand_distr::StandardNormal;

use crate::fusion::FeatureMap;

/// Square-kernel 2D convolution with zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `(out_ch, in_ch, k, k)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let mut c = Self::zeros(in_ch, out_ch, kernel, stride);
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        for w in &mut c.weight {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        c
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad() as usize - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, input: &FeatureMap, scale_index: usize) -> FeatureMap {
        debug_assert_eq!(input.channels, self.in_ch);
        let (ih, iw) = (input.height as isize, input.width as isize);
        let (oh, ow) = (self.out_dim(input.height), self.out_dim(input.width));
        let k = self.kernel;
        let s = self.stride as isize;
        let pad = self.pad();
        let mut out = FeatureMap::zeros(self.out_ch, oh, ow, scale_index);
        for oc in 0..self.out_ch {
            let o = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
            o.fill(self.bias[oc]);
            for ic in 0..self.in_ch {
                let inp = input.channel(ic);
                for ky in 0..k {
                    for kx in 0..k {
                        let w = self.weight[((oc * self.in_ch + ic) * k + ky) * k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let y = oy as isize * s + ky as isize - pad;
                            if y < 0 || y >= ih {
                                continue;
                            }
                            let row = &inp[(y * iw) as usize..((y + 1) * iw) as usize];
                            let orow = &mut o[oy * ow..(oy + 1) * ow];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let x = ox as isize * s + kx as isize - pad;
                                if x >= 0 && x < iw {
                                    *ov += w * row[x as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns parameter gradients and, if requested, the input gradient.
    pub fn backward(&self, input: &FeatureMap, d_out: &FeatureMap, want_input: bool) -> (ConvGrads, Option<FeatureMap>) {
        let (ih, iw) = (input.height as isize, input.width as isize);
        let (oh, ow) = (d_out.height, d_out.width);
        let k = self.kernel;
        let s = self.stride as isize;
        let pad = self.pad();
        let mut d_weight = vec![0.0; self.weight.len()];
        let d_bias: Vec<f64> = (0..self.out_ch).map(|oc| d_out.channel(oc).iter().sum()).collect();
        let mut d_in = want_input.then(|| FeatureMap::zeros(self.in_ch, input.height, input.width, input.scale_index));
        for oc in 0..self.out_ch {
            let g = d_out.channel(oc);
            for ic in 0..self.in_ch {
                let inp = input.channel(ic);
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * self.in_ch + ic) * k + ky) * k + kx;
                        let w = self.weight[widx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let y = oy as isize * s + ky as isize - pad;
                            if y < 0 || y >= ih {
                                continue;
                            }
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            for (ox, &gv) in grow.iter().enumerate() {
                                let x = ox as isize * s + kx as isize - pad;
                                if x >= 0 && x < iw {
                                    let ii = (y * iw + x) as usize;
                                    acc += gv * inp[ii];
                                    if let Some(d) = d_in.as_mut() {
                                        d.data[ic * input.plane() + ii] += w * gv;
                                    }
                                }
                            }
                        }
                        d_weight[widx] += acc;
                    }
                }
            }
        }
        (ConvGrads { d_weight, d_bias }, d_in)
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given its pre-activation.
pub fn relu_backward(pre: &FeatureMap, d_out: &FeatureMap) -> FeatureMap {
    let mut d = d_out.clone();
    for (g, &z) in d.data.iter_mut().zip(&pre.data) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    d
}

/// 1x1 linear map over channels: `out[o] = sum_i m[o, i] * in[i]` (+ bias).
pub fn pointwise(m: &[f64], bias: Option<&[f64]>, out_ch: usize, input: &FeatureMap) -> FeatureMap {
    let n = input.plane();
    let mut out = FeatureMap::zeros(out_ch, input.height, input.width, input.scale_index);
    for o in 0..out_ch {
        let dst = &mut out.data[o * n..(o + 1) * n];
        if let Some(b) = bias {
            dst.fill(b[o]);
        }
        for i in 0..input.channels {
            let w = m[o * input.channels + i];
            for (d, &v) in dst.iter_mut().zip(input.channel(i)) {
                *d += w * v;
            }
        }
    }
    out
}

/// Returns `(d_matrix, d_bias, d_input)`.
pub fn pointwise_backward(m: &[f64], out_ch: usize, input: &FeatureMap, d_out: &FeatureMap) -> (Vec<f64>, Vec<f64>, FeatureMap) {
    let n = input.plane();
    let in_ch = input.channels;
    let mut d_m = vec![0.0; out_ch * in_ch];
    let d_b: Vec<f64> = (0..out_ch).map(|o| d_out.channel(o).iter().sum()).collect();
    let mut d_in = FeatureMap::zeros(in_ch, input.height, input.width, input.scale_index);
    for o in 0..out_ch {
        let g = d_out.channel(o);
        for i in 0..in_ch {
            let w = m[o * in_ch + i];
            let x = input.channel(i);
            let mut acc = 0.0;
            let di = &mut d_in.data[i * n..(i + 1) * n];
            for p in 0..n {
                acc += g[p] * x[p];
                di[p] += w * g[p];
            }
            d_m[o * in_ch + i] = acc;
        }
    }
    (d_m, d_b, d_in)
}

/// 2x2 average pooling (dimensions must be even).
pub fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, oh, ow, x.scale_index);
    for c in 0..x.channels {
        let src = x.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * x.width + 2 * ox;
                out.data[(c * oh + oy) * ow + ox] =
                    0.25 * (src[i] + src[i + 1] + src[i + x.width] + src[i + x.width + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(d_out: &FeatureMap, in_h: usize, in_w: usize) -> FeatureMap {
    let mut d = FeatureMap::zeros(d_out.channels, in_h, in_w, d_out.scale_index);
    let (oh, ow) = (d_out.height, d_out.width);
    for c in 0..d_out.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * d_out.data[(c * oh + oy) * ow + ox];
                let base = c * in_h * in_w + 2 * oy * in_w + 2 * ox;
                d.data[base] += g;
                d.data[base + 1] += g;
                d.data[base + in_w] += g;
                d.data[base + in_w + 1] += g;
            }
        }
    }
    d
}
