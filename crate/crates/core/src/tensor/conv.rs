use super::gemm::gemm;
use crate::error::{Error, Result};

type Grad = Option<Vec<f64>>;

/// Resolved extents of one 3D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub input: [usize; 3],
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        if input_shape.len() != 5 || weight_shape.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d expects input [N,C,T,H,W] and weight [Co,Ci,kT,kH,kW], got {input_shape:?} and {weight_shape:?}"
            )));
        }
        if input_shape[1] != weight_shape[1] {
            return Err(Error::Shape(format!(
                "conv3d channel mismatch: input {input_shape:?} vs weight {weight_shape:?}"
            )));
        }
        if stride.contains(&0) {
            return Err(Error::Shape(format!("conv3d stride {stride:?} has a zero component")));
        }
        let mut output = [0; 3];
        for d in 0..3 {
            let padded = input_shape[2 + d] + 2 * padding[d];
            let k = weight_shape[2 + d];
            if k > padded {
                return Err(Error::Shape(format!(
                    "conv3d kernel {weight_shape:?} exceeds padded input {input_shape:?} (padding {padding:?})"
                )));
            }
            output[d] = (padded - k) / stride[d] + 1;
        }
        Ok(Conv3dGeometry {
            batch: input_shape[0],
            in_channels: input_shape[1],
            input: [input_shape[2], input_shape[3], input_shape[4]],
            out_channels: weight_shape[0],
            kernel: [weight_shape[2], weight_shape[3], weight_shape[4]],
            stride,
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Unfold one sample `[Ci,T,H,W]` into `[Ci*kT*kH*kW, T'*H'*W']`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let p = self.out_volume();
        let mut row = 0;
        for c in 0..self.in_channels {
            let xc = &x[c * t * h * w..(c + 1) * t * h * w];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        let mut idx = 0;
                        for ti in 0..ot {
                            let it = (ti * st + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                dst[idx..idx + oh * ow].fill(0.0);
                                idx += oh * ow;
                                continue;
                            }
                            let plane = &xc[it as usize * h * w..(it as usize + 1) * h * w];
                            for hi in 0..oh {
                                let ih = (hi * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    dst[idx..idx + ow].fill(0.0);
                                    idx += ow;
                                    continue;
                                }
                                let line = &plane[ih as usize * w..(ih as usize + 1) * w];
                                for wi in 0..ow {
                                    let iw = (wi * sw + dw) as isize - pw as isize;
                                    dst[idx] = if iw < 0 || iw >= w as isize {
                                        0.0
                                    } else {
                                        line[iw as usize]
                                    };
                                    idx += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add columns back into `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let p = self.out_volume();
        let mut row = 0;
        for c in 0..self.in_channels {
            let xc = &mut dx[c * t * h * w..(c + 1) * t * h * w];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let src = &cols[row * p..(row + 1) * p];
                        let mut idx = 0;
                        for ti in 0..ot {
                            let it = (ti * st + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                idx += oh * ow;
                                continue;
                            }
                            for hi in 0..oh {
                                let ih = (hi * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    idx += ow;
                                    continue;
                                }
                                let base = (it as usize * h + ih as usize) * w;
                                for wi in 0..ow {
                                    let iw = (wi * sw + dw) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        xc[base + iw as usize] += src[idx];
                                    }
                                    idx += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    pub(crate) fn forward(&self, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let ck = self.patch_len();
        let p = self.out_volume();
        let in_len = self.in_channels * self.in_volume();
        let out_len = self.out_channels * p;
        let mut out = vec![0.0; self.batch * out_len];
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; ck * p]
        };
        for n in 0..self.batch {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let on = &mut out[n * out_len..(n + 1) * out_len];
            for (c, chunk) in on.chunks_mut(p).enumerate() {
                chunk.fill(bias[c]);
            }
            let patches: &[f64] = if self.is_pointwise() {
                xn
            } else {
                self.im2col(xn, &mut cols);
                &cols
            };
            gemm(self.out_channels, ck, p, weight, false, patches, false, on, true);
        }
        out
    }

    /// Returns `(d_input, d_weight, d_bias)`; the input adjoint is skipped when not needed.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        weight: &[f64],
        d_out: &[f64],
        need_input: bool,
        need_params: bool,
    ) -> (Grad, Grad, Grad) {
        let ck = self.patch_len();
        let p = self.out_volume();
        let in_len = self.in_channels * self.in_volume();
        let out_len = self.out_channels * p;
        let mut dx = need_input.then(|| vec![0.0; self.batch * in_len]);
        let mut dw = need_params.then(|| vec![0.0; self.out_channels * ck]);
        let mut db = need_params.then(|| vec![0.0; self.out_channels]);
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; ck * p] };
        let mut dcols = if pointwise || !need_input {
            Vec::new()
        } else {
            vec![0.0; ck * p]
        };
        for n in 0..self.batch {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let gn = &d_out[n * out_len..(n + 1) * out_len];
            if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
                let patches: &[f64] = if pointwise {
                    xn
                } else {
                    self.im2col(xn, &mut cols);
                    &cols
                };
                gemm(self.out_channels, p, ck, gn, false, patches, true, dw, true);
                for (c, chunk) in gn.chunks(p).enumerate() {
                    db[c] += chunk.iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                if pointwise {
                    gemm(ck, self.out_channels, p, weight, true, gn, false, dxn, true);
                } else {
                    gemm(ck, self.out_channels, p, weight, true, gn, false, &mut dcols, false);
                    self.col2im(&dcols, dxn);
                }
            }
        }
        (dx, dw, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation, used as the reference for the im2col path.
    fn direct(g: &Conv3dGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [t, h, wd] = g.input;
        let [kt, kh, kw] = g.kernel;
        let [ot, oh, ow] = g.output;
        let mut out = vec![0.0; g.batch * g.out_channels * ot * oh * ow];
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                for a in 0..ot {
                    for bb in 0..oh {
                        for c in 0..ow {
                            let mut s = b[co];
                            for ci in 0..g.in_channels {
                                for i in 0..kt {
                                    for j in 0..kh {
                                        for k in 0..kw {
                                            let it = (a * g.stride[0] + i) as isize - g.padding[0] as isize;
                                            let ih = (bb * g.stride[1] + j) as isize - g.padding[1] as isize;
                                            let iw = (c * g.stride[2] + k) as isize - g.padding[2] as isize;
                                            if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((n * g.in_channels + ci) * t + it as usize) * h + ih as usize) * wd + iw as usize;
                                            let wi = (((co * g.in_channels + ci) * kt + i) * kh + j) * kw + k;
                                            s += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((n * g.out_channels + co) * ot + a) * oh + bb) * ow + c] = s;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_path_matches_direct_loops() {
        let cases = [
            ([2, 3, 4, 5, 6], [4, 3, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([1, 2, 5, 7, 7], [3, 2, 3, 3, 3], [2, 2, 2], [1, 1, 1]),
            ([2, 3, 2, 4, 4], [5, 3, 1, 1, 1], [1, 1, 1], [0, 0, 0]),
            ([1, 1, 3, 6, 5], [2, 1, 1, 3, 2], [1, 2, 1], [0, 1, 0]),
        ];
        for (xs, ws, stride, pad) in cases {
            let g = Conv3dGeometry::new(&xs, &ws, stride, pad).unwrap();
            let nx: usize = xs.iter().product();
            let nw: usize = ws.iter().product();
            let x: Vec<f64> = (0..nx).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
            let w: Vec<f64> = (0..nw).map(|i| ((i * 5 % 11) as f64 - 5.0) / 7.0).collect();
            let b: Vec<f64> = (0..ws[0]).map(|i| i as f64 * 0.1).collect();
            let got = g.forward(&x, &w, &b);
            let want = direct(&g, &x, &w, &b);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_oversized_kernel_and_zero_stride() {
        assert!(Conv3dGeometry::new(&[1, 1, 2, 2, 2], &[1, 1, 3, 1, 1], [1, 1, 1], [0, 0, 0]).is_err());
        assert!(Conv3dGeometry::new(&[1, 1, 2, 2, 2], &[1, 1, 1, 1, 1], [0, 1, 1], [0, 0, 0]).is_err());
    }
}
