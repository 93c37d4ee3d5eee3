//! 2D convolution via im2col + GEMM. Columns are rebuilt during the backward
//! pass instead of being saved, trading a little data movement for a much
//! smaller live set.

use super::{acc, Arr, BackFn, Tape, TensorId};
use ndarray::{Array2, ArrayD, IxDyn};

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn dims(x: &Arr, wt: &Arr, stride: usize, pad: usize) -> ConvDims {
    let xs = x.shape();
    let ws = wt.shape();
    assert_eq!(xs.len(), 4, "conv input must be [N,C,H,W]");
    assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,kh,kw]");
    assert_eq!(xs[1], ws[1], "conv channel mismatch");
    let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    ConvDims {
        n: xs[0],
        cin: xs[1],
        h,
        w,
        cout: ws[0],
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    }
}

/// Lower one sample into a `[Cin*kh*kw, Ho*Wo]` column matrix.
fn im2col(x: &Arr, n: usize, d: &ConvDims) -> Array2<f64> {
    let mut col = Array2::<f64>::zeros((d.cin * d.kh * d.kw, d.ho * d.wo));
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                for oi in 0..d.ho {
                    let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    for oj in 0..d.wo {
                        let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                        if jj < 0 || jj >= d.w as isize {
                            continue;
                        }
                        col[[row, oi * d.wo + oj]] = x[[n, c, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter a column-matrix gradient back onto the input grid of one sample.
fn col2im_acc(dcol: &Array2<f64>, dx: &mut Arr, n: usize, d: &ConvDims) {
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                for oi in 0..d.ho {
                    let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    for oj in 0..d.wo {
                        let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                        if jj < 0 || jj >= d.w as isize {
                            continue;
                        }
                        dx[[n, c, ii as usize, jj as usize]] += dcol[[row, oi * d.wo + oj]];
                    }
                }
            }
        }
    }
}

fn forward(x: &Arr, wt: &Arr, b: Option<&Arr>, d: &ConvDims) -> Arr {
    let wmat = wt
        .view()
        .into_shape_with_order((d.cout, d.cin * d.kh * d.kw))
        .expect("contiguous conv weight");
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[d.n, d.cout, d.ho, d.wo]));
    for n in 0..d.n {
        let col = im2col(x, n, d);
        let out = wmat.dot(&col); // [Cout, Ho*Wo]
        for co in 0..d.cout {
            let bias = b.map_or(0.0, |bv| bv[[co]]);
            for oi in 0..d.ho {
                for oj in 0..d.wo {
                    y[[n, co, oi, oj]] = out[[co, oi * d.wo + oj]] + bias;
                }
            }
        }
    }
    y
}

/// Convolution without a tape, for frozen-module inference.
pub fn conv2d_infer(x: &Arr, wt: &Arr, b: Option<&Arr>, stride: usize, pad: usize) -> Arr {
    let d = dims(x, wt, stride, pad);
    forward(x, wt, b, &d)
}

impl Tape {
    /// `x: [N,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, optional bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let d = dims(&self.vals[x.0], &self.vals[w.0], stride, pad);
        let v = forward(
            &self.vals[x.0],
            &self.vals[w.0],
            b.map(|bi| &self.vals[bi.0]),
            &d,
        );
        let mut inputs = vec![x, w];
        if let Some(bi) = b {
            inputs.push(bi);
        }
        let needs = self.wants(&inputs);
        let nx = self.needs(x);
        let nw = self.needs(w);
        let nb = b.map(|bi| self.needs(bi)).unwrap_or(false);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                let wmat = vals[w.0]
                    .view()
                    .into_shape_with_order((d.cout, d.cin * d.kh * d.kw))
                    .expect("contiguous conv weight");
                let mut dw = nw.then(|| Array2::<f64>::zeros(wmat.dim()));
                let mut dx = nx.then(|| ArrayD::<f64>::zeros(vals[x.0].raw_dim()));
                for n in 0..d.n {
                    let mut gn = Array2::<f64>::zeros((d.cout, d.ho * d.wo));
                    for co in 0..d.cout {
                        for oi in 0..d.ho {
                            for oj in 0..d.wo {
                                gn[[co, oi * d.wo + oj]] = g[[n, co, oi, oj]];
                            }
                        }
                    }
                    if nw || nx {
                        if let Some(dwm) = dw.as_mut() {
                            let col = im2col(&vals[x.0], n, &d);
                            *dwm += &gn.dot(&col.t());
                        }
                        if let Some(dxm) = dx.as_mut() {
                            let dcol = wmat.t().dot(&gn);
                            col2im_acc(&dcol, dxm, n, &d);
                        }
                    }
                }
                if let Some(dwm) = dw {
                    let dwd = dwm
                        .into_shape_with_order(IxDyn(&[d.cout, d.cin, d.kh, d.kw]))
                        .unwrap();
                    acc(grads, w, dwd);
                }
                if let Some(dxm) = dx {
                    acc(grads, x, dxm);
                }
                if nb {
                    let mut db = ArrayD::<f64>::zeros(IxDyn(&[d.cout]));
                    for n in 0..d.n {
                        for co in 0..d.cout {
                            for oi in 0..d.ho {
                                for oj in 0..d.wo {
                                    db[[co]] += g[[n, co, oi, oj]];
                                }
                            }
                        }
                    }
                    acc(grads, b.unwrap(), db);
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Pointwise (1x1) convolution expressed as one GEMM over all positions.
    /// Same contract as `conv2d` with kh = kw = 1, stride 1, pad 0.
    pub fn conv1x1(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> TensorId {
        let xs = self.vals[x.0].shape().to_vec();
        let ws = self.vals[w.0].shape().to_vec();
        assert_eq!(ws[2] * ws[3], 1, "conv1x1 expects a 1x1 kernel");
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let wmat = self.vals[w.0]
            .view()
            .into_shape_with_order((cout, cin))
            .unwrap()
            .to_owned();
        // [N,Cin,H,W] -> [Cin, N*H*W]
        let mut xmat = Array2::<f64>::zeros((cin, n * h * wd));
        for ni in 0..n {
            for c in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        xmat[[c, (ni * h + i) * wd + j]] = self.vals[x.0][[ni, c, i, j]];
                    }
                }
            }
        }
        let ymat = wmat.dot(&xmat);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, cout, h, wd]));
        for ni in 0..n {
            for c in 0..cout {
                let bias = b.map_or(0.0, |bi| self.vals[bi.0][[c]]);
                for i in 0..h {
                    for j in 0..wd {
                        y[[ni, c, i, j]] = ymat[[c, (ni * h + i) * wd + j]] + bias;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(bi) = b {
            inputs.push(bi);
        }
        let needs = self.wants(&inputs);
        let nx = self.needs(x);
        let nw = self.needs(w);
        let nb = b.map(|bi| self.needs(bi)).unwrap_or(false);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                let mut gmat = Array2::<f64>::zeros((cout, n * h * wd));
                for ni in 0..n {
                    for c in 0..cout {
                        for i in 0..h {
                            for j in 0..wd {
                                gmat[[c, (ni * h + i) * wd + j]] = g[[ni, c, i, j]];
                            }
                        }
                    }
                }
                if nw {
                    let mut xmat = Array2::<f64>::zeros((cin, n * h * wd));
                    for ni in 0..n {
                        for c in 0..cin {
                            for i in 0..h {
                                for j in 0..wd {
                                    xmat[[c, (ni * h + i) * wd + j]] = vals[x.0][[ni, c, i, j]];
                                }
                            }
                        }
                    }
                    let dw = gmat.dot(&xmat.t());
                    acc(grads, w, dw.into_shape_with_order(IxDyn(&[cout, cin, 1, 1])).unwrap());
                }
                if nx {
                    let wmat = vals[w.0]
                        .view()
                        .into_shape_with_order((cout, cin))
                        .unwrap()
                        .to_owned();
                    let dxmat = wmat.t().dot(&gmat);
                    let mut dx = ArrayD::<f64>::zeros(vals[x.0].raw_dim());
                    for ni in 0..n {
                        for c in 0..cin {
                            for i in 0..h {
                                for j in 0..wd {
                                    dx[[ni, c, i, j]] = dxmat[[c, (ni * h + i) * wd + j]];
                                }
                            }
                        }
                    }
                    acc(grads, x, dx);
                }
                if nb {
                    let db = gmat.sum_axis(ndarray::Axis(1));
                    acc(grads, b.unwrap(), db.into_dyn());
                }
            }) as BackFn
        });
        self.push(y, back, needs)
    }
}
