use std::f64::consts::{LN_2, SQRT_2};
use std::rc::Rc;

use statrs::function::erf::erfc;

use super::conv::{self, ConvGeom};
use super::{Tensor, Var};

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl<'g> Var<'g> {
    fn unary(self, value: Tensor, grad: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'g> {
        self.graph.record(value, &[self], move |g, _| vec![Some(grad(g))])
    }

    /// Elementwise map with derivative `dfdx(x, y)` evaluated on input and output.
    fn pointwise(self, f: impl Fn(f64) -> f64, dfdx: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let out = (*y).clone();
        self.unary(out, move |g| {
            let mut r = g.clone();
            for ((gv, &xv), &yv) in r.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                *gv *= dfdx(xv, yv);
            }
            r
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.record(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.record(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.graph.record(v, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, y| gv * y)),
                need[1].then(|| g.zip_map(&a, |gv, x| gv * x)),
            ]
        })
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x / y);
        self.graph.record(v, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, y| gv / y)),
                need[1].then(|| {
                    let mut r = g.clone();
                    for ((gv, &x), &y) in r.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *gv *= -x / (y * y);
                    }
                    r
                }),
            ]
        })
    }

    pub fn neg(self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x + s);
        self.unary(v, |g| g.clone())
    }

    pub fn mul_scalar(self, s: f64) -> Var<'g> {
        let v = self.value().scale(s);
        self.unary(v, move |g| g.scale(s))
    }

    /// Multiplies by a shape-[1] variable.
    pub fn mul_by(self, s: Var<'g>) -> Var<'g> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "mul_by expects a scalar factor");
        let k = sv.item();
        let v = x.scale(k);
        self.graph.record(v, &[self, s], move |g, need| {
            vec![
                need[0].then(|| g.scale(k)),
                need[1].then(|| {
                    let d: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
                    Tensor::scalar(d)
                }),
            ]
        })
    }

    pub fn square(self) -> Var<'g> {
        self.pointwise(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.pointwise(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'g> {
        self.pointwise(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.pointwise(f64::ln, |x, _| 1.0 / x)
    }

    pub fn log2(self) -> Var<'g> {
        self.pointwise(f64::log2, |x, _| 1.0 / (x * LN_2))
    }

    pub fn relu(self) -> Var<'g> {
        self.pointwise(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.pointwise(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.pointwise(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'g> {
        self.pointwise(
            |x| if x > 30.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn abs(self) -> Var<'g> {
        self.pointwise(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.pointwise(move |x| x.clamp(lo, hi), move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    /// Clamps in the forward pass; the gradient passes through unchanged.
    pub fn clamp_ste(self, lo: f64, hi: f64) -> Var<'g> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.straight_through(v)
    }

    pub fn clamp_min(self, lo: f64) -> Var<'g> {
        self.clamp(lo, f64::INFINITY)
    }

    /// `x^e` for `x >= 0`, with the derivative at zero defined as zero.
    pub fn pow_nonneg(self, e: f64) -> Var<'g> {
        self.pointwise(
            move |x| x.max(0.0).powf(e),
            move |x, _| if x > 0.0 { e * x.powf(e - 1.0) } else { 0.0 },
        )
    }

    /// Standard normal cumulative distribution function.
    pub fn normal_cdf(self) -> Var<'g> {
        self.pointwise(normal_cdf, |x, _| normal_pdf(x))
    }

    /// Forward value is `value`; the backward pass treats the map as identity.
    pub fn straight_through(self, value: Tensor) -> Var<'g> {
        assert_eq!(value.shape(), self.value().shape(), "straight-through value must keep the shape");
        self.unary(value, |g| g.clone())
    }

    /// Rounds to the nearest integer; gradient passes straight through.
    pub fn round_ste(self) -> Var<'g> {
        let v = self.value().map(f64::round);
        self.straight_through(v)
    }

    /// Copy that blocks gradient flow.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(shape.clone(), g.item()))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let v = (*x).clone().reshape(shape);
        self.unary(v, move |g| g.clone().reshape(old.clone()))
    }

    /// Spatial mean of an NCHW tensor, giving `[N, C]`.
    pub fn mean_hw(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let data: Vec<f64> = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.unary(Tensor::new([n, c], data), move |g| {
            let mut out = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                out.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            Tensor::new([n, c, h, w], out)
        })
    }

    /// Mean over all axes but the first, giving `[N]`.
    pub fn mean_per_item(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape[0];
        let per = x.len() / n;
        let data: Vec<f64> = x.data().chunks(per).map(|p| p.iter().sum::<f64>() / per as f64).collect();
        self.unary(Tensor::new([n], data), move |g| {
            let mut out = Vec::with_capacity(n * per);
            for &gv in g.data() {
                out.extend(std::iter::repeat_n(gv / per as f64, per));
            }
            Tensor::new(shape.clone(), out)
        })
    }

    /// Broadcasts a `[C]` vector to `[n, C, h, w]`.
    pub fn expand_channels(self, n: usize, h: usize, w: usize) -> Var<'g> {
        let x = self.value();
        let c = x.len();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c * hw);
        for _ in 0..n {
            for &v in x.data() {
                data.extend(std::iter::repeat_n(v, hw));
            }
        }
        self.unary(Tensor::new([n, c, h, w], data), move |g| {
            let mut out = vec![0.0; c];
            for (i, plane) in g.data().chunks(hw).enumerate() {
                out[i % c] += plane.iter().sum::<f64>();
            }
            Tensor::new([c], out)
        })
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat_channels: mismatched N/H/W");
                vc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&chans) {
                data.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        parts[0].graph.record(Tensor::new([n, total, h, w], data), parts, move |g, need| {
            let mut offset = 0;
            chans
                .iter()
                .zip(need)
                .map(|(&c, &needed)| {
                    let start = offset;
                    offset += c;
                    needed.then(|| {
                        let mut out = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let base = (b * total + start) * hw;
                            out.extend_from_slice(&g.data()[base..base + c * hw]);
                        }
                        Tensor::new([n, c, h, w], out)
                    })
                })
                .collect()
        })
    }

    /// Spatial window `[top..top+h, left..left+w]` of an NCHW tensor.
    pub fn crop(self, top: usize, left: usize, h: usize, w: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, ih, iw) = x.dims4();
        assert!(top + h <= ih && left + w <= iw, "crop window outside input");
        if (top, left, h, w) == (0, 0, ih, iw) {
            return self;
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in x.data().chunks(ih * iw) {
            for y in top..top + h {
                data.extend_from_slice(&plane[y * iw + left..y * iw + left + w]);
            }
        }
        self.unary(Tensor::new([n, c, h, w], data), move |g| {
            let mut out = Tensor::zeros([n, c, ih, iw]);
            for (dst, src) in out.data_mut().chunks_mut(ih * iw).zip(g.data().chunks(h * w)) {
                for y in 0..h {
                    dst[(top + y) * iw + left..(top + y) * iw + left + w]
                        .copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
            out
        })
    }

    /// Mirror padding without edge repetition (`dcb|abcd|cba`).
    pub fn reflect_pad(self, top: usize, bottom: usize, left: usize, right: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        if top + bottom + left + right == 0 {
            return self;
        }
        assert!(top < h && bottom < h && left < w && right < w, "reflect padding exceeds input size");
        let (oh, ow) = (h + top + bottom, w + left + right);
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= len {
                i = 2 * (len - 1) - i;
            }
            i as usize
        };
        let rows: Vec<usize> = (0..oh).map(|y| reflect(y as isize - top as isize, h)).collect();
        let cols: Vec<usize> = (0..ow).map(|x| reflect(x as isize - left as isize, w)).collect();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for &ry in &rows {
                data.extend(cols.iter().map(|&rx| plane[ry * w + rx]));
            }
        }
        self.unary(Tensor::new([n, c, oh, ow], data), move |g| {
            let mut out = Tensor::zeros([n, c, h, w]);
            for (dst, src) in out.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                for (y, &ry) in rows.iter().enumerate() {
                    for (xx, &rx) in cols.iter().enumerate() {
                        dst[ry * w + rx] += src[y * ow + xx];
                    }
                }
            }
            out
        })
    }

    /// 2x2 average pooling; an odd trailing row or column is dropped.
    pub fn avg_pool2(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    data.push(0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]));
                }
            }
        }
        self.unary(Tensor::new([n, c, oh, ow], data), move |g| {
            let mut out = Tensor::zeros([n, c, h, w]);
            for (dst, src) in out.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = 0.25 * src[y * ow + xx];
                        let i = 2 * y * w + 2 * xx;
                        dst[i] += v;
                        dst[i + 1] += v;
                        dst[i + w] += v;
                        dst[i + w + 1] += v;
                    }
                }
            }
            out
        })
    }

    /// Per-channel separable filtering with `kernel` along both axes, "valid" extent.
    pub fn separable_filter_valid(self, kernel: &[f64]) -> Var<'g> {
        self.filter_axis_valid(kernel, true).filter_axis_valid(kernel, false)
    }

    fn filter_axis_valid(self, kernel: &[f64], along_w: bool) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let k = kernel.len();
        let (oh, ow) = if along_w { (h, w + 1 - k) } else { (h + 1 - k, w) };
        assert!(oh > 0 && ow > 0 && k <= if along_w { w } else { h }, "filter larger than input");
        let kernel: Rc<[f64]> = kernel.into();
        let mut data = vec![0.0; n * c * oh * ow];
        for (dst, src) in data.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for (t, kv) in kernel.iter().enumerate() {
                        acc += kv * if along_w { src[y * w + xx + t] } else { src[(y + t) * w + xx] };
                    }
                    dst[y * ow + xx] = acc;
                }
            }
        }
        self.unary(Tensor::new([n, c, oh, ow], data), move |g| {
            let mut out = Tensor::zeros([n, c, h, w]);
            for (dst, src) in out.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                for y in 0..oh {
                    for xx in 0..ow {
                        let gv = src[y * ow + xx];
                        for (t, kv) in kernel.iter().enumerate() {
                            if along_w {
                                dst[y * w + xx + t] += kv * gv;
                            } else {
                                dst[(y + t) * w + xx] += kv * gv;
                            }
                        }
                    }
                }
            }
            out
        })
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    /// `weight` is `[out, in, k, k]`, `bias` is `[out]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let wv = weight.value();
        let (n, cin, h, w) = x.dims4();
        let (cout, wcin, k, k2) = wv.dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        let geom = ConvGeom {
            channels: cin,
            in_h: h,
            in_w: w,
            out_h: conv::conv_out_size(h, k, stride, pad),
            out_w: conv::conv_out_size(w, k, stride, pad),
            kernel: k,
            stride,
            pad,
        };
        let per_out = cout * geom.col_cols();
        let mut out = vec![0.0; n * per_out];
        let mut scratch = Vec::new();
        for b in 0..n {
            conv::conv_forward(x.item_slice(b), wv.data(), cout, &geom, &mut scratch, &mut out[b * per_out..(b + 1) * per_out]);
        }
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            add_channel_bias(&mut out, bv.data(), geom.col_cols());
        }
        let value = Tensor::new([n, cout, geom.out_h, geom.out_w], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.record(value, &parents, move |g, need| {
            let mut gx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
            let mut gw = need[1].then(|| Tensor::zeros(wv.shape().to_vec()));
            let mut scratch = Vec::new();
            for b in 0..n {
                let go = g.item_slice(b);
                let gi = gx.as_mut().map(|t| {
                    let per = t.len() / n;
                    &mut t.data_mut()[b * per..(b + 1) * per]
                });
                conv::conv_backward(
                    x.item_slice(b),
                    wv.data(),
                    cout,
                    &geom,
                    go,
                    gi,
                    gw.as_mut().map(|t| t.data_mut()),
                    &mut scratch,
                );
            }
            let mut res = vec![gx, gw];
            if need.len() > 2 {
                res.push(need[2].then(|| channel_sums(g, cout, geom.col_cols())));
            }
            res
        })
    }

    /// Transposed convolution. `weight` is `[in, out, k, k]`, `bias` is `[out]`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var<'g> {
        let x = self.value();
        let wv = weight.value();
        let (n, cin, h, w) = x.dims4();
        let (wcin, cout, k, _) = wv.dims4();
        assert_eq!(cin, wcin, "conv_transpose2d: input has {cin} channels, weight expects {wcin}");
        let geom = ConvGeom {
            channels: cout,
            in_h: conv::conv_transpose_out_size(h, k, stride, pad, out_pad),
            in_w: conv::conv_transpose_out_size(w, k, stride, pad, out_pad),
            out_h: h,
            out_w: w,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.in_h, geom.in_w);
        let per_out = cout * oh * ow;
        let mut out = vec![0.0; n * per_out];
        let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
        for b in 0..n {
            conv::gemm(geom.col_rows(), cin, h * w, wv.data(), true, x.item_slice(b), false, 0.0, &mut cols);
            conv::col2im(&cols, &geom, &mut out[b * per_out..(b + 1) * per_out]);
        }
        if let Some(bv) = bias.map(|b| b.value()) {
            add_channel_bias(&mut out, bv.data(), oh * ow);
        }
        let value = Tensor::new([n, cout, oh, ow], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.record(value, &parents, move |g, need| {
            let mut gx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
            let mut gw = need[1].then(|| Tensor::zeros(wv.shape().to_vec()));
            let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
            for b in 0..n {
                conv::im2col(g.item_slice(b), &geom, &mut cols);
                if let Some(gx) = gx.as_mut() {
                    let per = cin * h * w;
                    let dst = &mut gx.data_mut()[b * per..(b + 1) * per];
                    conv::gemm(cin, geom.col_rows(), h * w, wv.data(), false, &cols, false, 1.0, dst);
                }
                if let Some(gw) = gw.as_mut() {
                    conv::gemm(cin, h * w, geom.col_rows(), x.item_slice(b), false, &cols, true, 1.0, gw.data_mut());
                }
            }
            let mut res = vec![gx, gw];
            if need.len() > 2 {
                res.push(need[2].then(|| channel_sums(g, cout, oh * ow)));
            }
            res
        })
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        assert_eq!(k, k2, "matmul inner dims differ");
        let mut out = vec![0.0; m * n];
        conv::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        self.graph.record(Tensor::new([m, n], out), &[self, other], move |g, need| {
            vec![
                need[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    conv::gemm(m, n, k, g.data(), false, b.data(), true, 0.0, &mut ga);
                    Tensor::new([m, k], ga)
                }),
                need[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    conv::gemm(k, m, n, a.data(), true, g.data(), false, 0.0, &mut gb);
                    Tensor::new([k, n], gb)
                }),
            ]
        })
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(self, bias: Var<'g>) -> Var<'g> {
        let (x, bv) = (self.value(), bias.value());
        let (m, n) = x.dims2();
        assert_eq!(bv.len(), n);
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        self.graph.record(Tensor::new([m, n], data), &[self, bias], move |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| {
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new([n], gb)
                }),
            ]
        })
    }

    /// Mean softmax cross-entropy of `[m, classes]` logits against labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g> {
        let x = self.value();
        let (m, k) = x.dims2();
        assert_eq!(labels.len(), m);
        let mut probs = vec![0.0; m * k];
        let mut loss = 0.0;
        for (i, (row, p)) in x.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for (pv, v) in p.iter_mut().zip(row) {
                *pv = (v - mx).exp() / z;
            }
            loss += -(row[labels[i]] - mx - z.ln());
        }
        let labels = labels.to_vec();
        self.unary(Tensor::scalar(loss / m as f64), move |g| {
            let s = g.item() / m as f64;
            let mut d = probs.clone();
            for (i, row) in d.chunks_mut(k).enumerate() {
                row[labels[i]] -= 1.0;
                for v in row.iter_mut() {
                    *v *= s;
                }
            }
            Tensor::new([m, k], d)
        })
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums(g: &Tensor, c: usize, plane: usize) -> Tensor {
    let mut out = vec![0.0; c];
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        out[i % c] += chunk.iter().sum::<f64>();
    }
    Tensor::new([c], out)
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(f(x) * probe))/dx for every input element.
    fn check_grad(inputs: Vec<Tensor>, f: impl for<'g> Fn(&[Var<'g>]) -> Var<'g>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&vars);
        let probe = rand_tensor(&out.shape(), &mut rng);
        let pv = g.constant(probe.clone());
        let loss = out.mul(pv).sum();
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor]| {
            let g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            f(&vars).mul(g.constant(probe.clone())).sum().item()
        };
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i]);
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {i} element {j}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        check_grad(vec![x, w, b], |v| v[0].conv2d(v[1], Some(v[2]), 2, 1));
    }

    #[test]
    fn pointwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        let w = rand_tensor(&[2, 3, 1, 1], &mut rng);
        check_grad(vec![x, w], |v| v[0].conv2d(v[1], None, 1, 0));
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 3, 3, 4], &mut rng);
        let w = rand_tensor(&[3, 2, 5, 5], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        check_grad(vec![x, w, b], |v| {
            let y = v[0].conv_transpose2d(v[1], Some(v[2]), 2, 2, 1);
            assert_eq!(y.shape(), vec![2, 2, 6, 8]);
            y
        });
    }

    #[test]
    fn shape_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[2, 2, 6, 7], &mut rng);
        let y = rand_tensor(&[2, 1, 6, 7], &mut rng);
        check_grad(vec![x.clone()], |v| v[0].reflect_pad(2, 1, 3, 2));
        check_grad(vec![x.clone()], |v| v[0].crop(1, 2, 4, 3));
        check_grad(vec![x.clone()], |v| v[0].avg_pool2());
        check_grad(vec![x.clone()], |v| v[0].separable_filter_valid(&[0.2, 0.5, 0.3]));
        check_grad(vec![x.clone()], |v| v[0].mean_hw());
        check_grad(vec![x.clone()], |v| v[0].mean_per_item());
        check_grad(vec![x, y], |v| Var::concat_channels(&[v[1], v[0]]));
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng).map(|v| v.abs() + 0.5);
        check_grad(vec![a.clone(), b.clone()], |v| v[0].mul(v[1]).div(v[1].add(v[0].square())));
        check_grad(vec![b.clone()], |v| v[0].sqrt().ln().add(v[0].log2()));
        check_grad(vec![a.clone()], |v| v[0].sigmoid().add(v[0].softplus()).add(v[0].exp()));
        check_grad(vec![a.clone()], |v| v[0].normal_cdf());
        check_grad(vec![b.clone()], |v| v[0].pow_nonneg(0.3));
        check_grad(vec![a.clone(), Tensor::scalar(0.7)], |v| v[0].mul_by(v[1]));
        let c = rand_tensor(&[4], &mut rng);
        check_grad(vec![c], |v| v[0].expand_channels(2, 2, 3));
    }

    #[test]
    fn linear_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&[3, 5], &mut rng);
        let w = rand_tensor(&[5, 4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        check_grad(vec![a, w, b], |v| v[0].matmul(v[1]).add_row_bias(v[2]).cross_entropy(&[0, 3, 1]));
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new([3], vec![0.2, 1.7, -2.4]));
        let y = x.round_ste();
        assert_eq!(y.value().data(), &[0.0, 2.0, -2.0]);
        let grads = g.backward(y.mul_scalar(3.0).sum());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let grads = g.backward(x.mul(c).add(c));
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert!(grads.get(c).is_none());
    }
}
