//! Data-movement ops: reshape, concatenation, batch indexing, upsampling,
//! token flattening, rotary position encoding, elementwise-max pooling.

use super::{acc, Arr, BackFn, Tape, TensorId};
use ndarray::{Array2, ArrayD, IxDyn};

/// Interpolation weights for one output axis under the half-pixel-center
/// convention (`align_corners = false`).
pub fn bilinear_matrix(src: usize, dst: usize) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((dst, src));
    let ratio = src as f64 / dst as f64;
    for i in 0..dst {
        let p = (i as f64 + 0.5) * ratio - 0.5;
        let p = p.clamp(0.0, (src - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = p - lo as f64;
        a[[i, lo]] += 1.0 - frac;
        a[[i, hi]] += frac;
    }
    a
}

impl Tape {
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let v = self.vals[x.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let needs = self.wants(&[x]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let orig = vals[x.0].raw_dim();
                acc(grads, x, gout.clone().into_shape_with_order(orig).unwrap());
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Concatenate along channel axis 1 of `[N,C,H,W]` tensors.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = &self.vals[a.0];
        let bv = &self.vals[b.0];
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        assert_eq!(sa.len(), 4);
        assert_eq!(&sa[2..], &sb[2..], "spatial dims must match");
        assert_eq!(sa[0], sb[0], "batch dims must match");
        let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let mut v = ArrayD::<f64>::zeros(IxDyn(&[n, ca + cb, h, w]));
        for ni in 0..n {
            for c in 0..ca {
                for i in 0..h {
                    for j in 0..w {
                        v[[ni, c, i, j]] = av[[ni, c, i, j]];
                    }
                }
            }
            for c in 0..cb {
                for i in 0..h {
                    for j in 0..w {
                        v[[ni, ca + c, i, j]] = bv[[ni, c, i, j]];
                    }
                }
            }
        }
        let needs = self.wants(&[a, b]);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                if na {
                    let mut da = ArrayD::<f64>::zeros(IxDyn(&[n, ca, h, w]));
                    for ni in 0..n {
                        for c in 0..ca {
                            for i in 0..h {
                                for j in 0..w {
                                    da[[ni, c, i, j]] = gout[[ni, c, i, j]];
                                }
                            }
                        }
                    }
                    acc(grads, a, da);
                }
                if nb {
                    let mut db = ArrayD::<f64>::zeros(IxDyn(&[n, cb, h, w]));
                    for ni in 0..n {
                        for c in 0..cb {
                            for i in 0..h {
                                for j in 0..w {
                                    db[[ni, c, i, j]] = gout[[ni, ca + c, i, j]];
                                }
                            }
                        }
                    }
                    acc(grads, b, db);
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Gather rows of a `[N,...]` tensor along axis 0; duplicate indices
    /// accumulate their gradients.
    pub fn select_batch(&mut self, x: TensorId, indices: &[usize]) -> TensorId {
        let xs = self.vals[x.0].shape().to_vec();
        let mut out_shape = xs.clone();
        out_shape[0] = indices.len();
        let mut v = ArrayD::<f64>::zeros(IxDyn(&out_shape));
        for (r, &i) in indices.iter().enumerate() {
            v.index_axis_mut(ndarray::Axis(0), r)
                .assign(&self.vals[x.0].index_axis(ndarray::Axis(0), i));
        }
        let idx: Vec<usize> = indices.to_vec();
        let needs = self.wants(&[x]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let mut dx = ArrayD::<f64>::zeros(vals[x.0].raw_dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut slot = dx.index_axis_mut(ndarray::Axis(0), i);
                    slot += &gout.index_axis(ndarray::Axis(0), r);
                }
                acc(grads, x, dx);
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Concatenate `[R, A]` and `[R, B]` along the column axis.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.vals[a.0].shape().to_vec();
        let sb = self.vals[b.0].shape().to_vec();
        assert_eq!(sa.len(), 2);
        assert_eq!(sa[0], sb[0], "row counts must match");
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut v = ArrayD::<f64>::zeros(IxDyn(&[r, ca + cb]));
        for i in 0..r {
            for j in 0..ca {
                v[[i, j]] = self.vals[a.0][[i, j]];
            }
            for j in 0..cb {
                v[[i, ca + j]] = self.vals[b.0][[i, j]];
            }
        }
        let needs = self.wants(&[a, b]);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                if na {
                    let mut da = ArrayD::<f64>::zeros(IxDyn(&[r, ca]));
                    for i in 0..r {
                        for j in 0..ca {
                            da[[i, j]] = gout[[i, j]];
                        }
                    }
                    acc(grads, a, da);
                }
                if nb {
                    let mut db = ArrayD::<f64>::zeros(IxDyn(&[r, cb]));
                    for i in 0..r {
                        for j in 0..cb {
                            db[[i, j]] = gout[[i, ca + j]];
                        }
                    }
                    acc(grads, b, db);
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Select sample `i` from a `[N,...]` tensor, dropping the batch axis.
    pub fn index_batch(&mut self, x: TensorId, i: usize) -> TensorId {
        let v = self.vals[x.0].index_axis(ndarray::Axis(0), i).to_owned();
        let needs = self.wants(&[x]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let mut dx = ArrayD::<f64>::zeros(vals[x.0].raw_dim());
                dx.index_axis_mut(ndarray::Axis(0), i).assign(gout);
                acc(grads, x, dx);
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Stack `[D]` vectors into `[N, D]` rows.
    pub fn stack_rows(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty());
        let d = self.vals[xs[0].0].len();
        let n = xs.len();
        let mut v = ArrayD::<f64>::zeros(IxDyn(&[n, d]));
        for (r, id) in xs.iter().enumerate() {
            let row = &self.vals[id.0];
            assert_eq!(row.len(), d);
            for (j, val) in row.iter().enumerate() {
                v[[r, j]] = *val;
            }
        }
        let ids: Vec<TensorId> = xs.to_vec();
        let needs = self.wants(&ids);
        let flags: Vec<bool> = ids.iter().map(|i| self.needs(*i)).collect();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                for (r, id) in ids.iter().enumerate() {
                    if flags[r] {
                        let mut dr = ArrayD::<f64>::zeros(vals[id.0].raw_dim());
                        for (j, slot) in dr.iter_mut().enumerate() {
                            *slot = gout[[r, j]];
                        }
                        acc(grads, *id, dr);
                    }
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Nearest-neighbor 2x spatial upsampling of `[N,C,H,W]`.
    pub fn nearest_up2(&mut self, x: TensorId) -> TensorId {
        let xs = self.vals[x.0].shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = &self.vals[x.0];
        let mut v = ArrayD::<f64>::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        for ni in 0..n {
            for cc in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let val = xv[[ni, cc, i, j]];
                        v[[ni, cc, 2 * i, 2 * j]] = val;
                        v[[ni, cc, 2 * i + 1, 2 * j]] = val;
                        v[[ni, cc, 2 * i, 2 * j + 1]] = val;
                        v[[ni, cc, 2 * i + 1, 2 * j + 1]] = val;
                    }
                }
            }
        }
        let needs = self.wants(&[x]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for cc in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[ni, cc, i, j]] = gout[[ni, cc, 2 * i, 2 * j]]
                                    + gout[[ni, cc, 2 * i + 1, 2 * j]]
                                    + gout[[ni, cc, 2 * i, 2 * j + 1]]
                                    + gout[[ni, cc, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                acc(grads, x, dx);
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Bilinear resize of `[N,C,H,W]` to `(th, tw)`, half-pixel centers.
    pub fn bilinear_resize(&mut self, x: TensorId, th: usize, tw: usize) -> TensorId {
        let xs = self.vals[x.0].shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ah = bilinear_matrix(h, th);
        let aw = bilinear_matrix(w, tw);
        let xv = &self.vals[x.0];
        let mut v = ArrayD::<f64>::zeros(IxDyn(&[n, c, th, tw]));
        for ni in 0..n {
            for cc in 0..c {
                let plane = plane2(xv, ni, cc, h, w);
                let out = ah.dot(&plane).dot(&aw.t());
                for i in 0..th {
                    for j in 0..tw {
                        v[[ni, cc, i, j]] = out[[i, j]];
                    }
                }
            }
        }
        let needs = self.wants(&[x]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for cc in 0..c {
                        let gplane = plane2(gout, ni, cc, th, tw);
                        let d = ah.t().dot(&gplane).dot(&aw);
                        for i in 0..h {
                            for j in 0..w {
                                dx[[ni, cc, i, j]] = d[[i, j]];
                            }
                        }
                    }
                }
                acc(grads, x, dx);
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Flatten `[C,H,W]` into raster-order tokens `[H*W, C]`.
    pub fn chw_to_tokens(&mut self, x: TensorId) -> TensorId {
        let xs = self.vals[x.0].shape().to_vec();
        assert_eq!(xs.len(), 3, "chw_to_tokens expects [C,H,W]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = &self.vals[x.0];
        let mut v = ArrayD::<f64>::zeros(IxDyn(&[h * w, c]));
        for i in 0..h {
            for j in 0..w {
                for cc in 0..c {
                    v[[i * w + j, cc]] = xv[[cc, i, j]];
                }
            }
        }
        let needs = self.wants(&[x]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                for i in 0..h {
                    for j in 0..w {
                        for cc in 0..c {
                            dx[[cc, i, j]] = gout[[i * w + j, cc]];
                        }
                    }
                }
                acc(grads, x, dx);
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Broadcast-add a per-(sample, channel) shift `e: [N, C]` onto
    /// `x: [N,C,H,W]` over the spatial axes.
    pub fn add_channels_nc(&mut self, x: TensorId, e: TensorId) -> TensorId {
        let xs = self.vals[x.0].shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ev = &self.vals[e.0];
        assert_eq!(ev.shape(), &[n, c]);
        let mut v = self.vals[x.0].clone();
        for ni in 0..n {
            for cc in 0..c {
                let s = ev[[ni, cc]];
                for i in 0..h {
                    for j in 0..w {
                        v[[ni, cc, i, j]] += s;
                    }
                }
            }
        }
        let needs = self.wants(&[x, e]);
        let (nx, ne) = (self.needs(x), self.needs(e));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                if nx {
                    acc(grads, x, gout.clone());
                }
                if ne {
                    let mut de = ArrayD::<f64>::zeros(IxDyn(&[n, c]));
                    for ni in 0..n {
                        for cc in 0..c {
                            let mut s = 0.0;
                            for i in 0..h {
                                for j in 0..w {
                                    s += gout[[ni, cc, i, j]];
                                }
                            }
                            de[[ni, cc]] = s;
                        }
                    }
                    acc(grads, e, de);
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Elementwise maximum across same-shaped tensors; ties go to the
    /// earliest input so the subgradient routing is deterministic.
    pub fn max_over(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty());
        let shape = self.vals[xs[0].0].raw_dim();
        let mut v = self.vals[xs[0].0].clone();
        let mut winner: Vec<u32> = vec![0; v.len()];
        for (m, id) in xs.iter().enumerate().skip(1) {
            let xv = &self.vals[id.0];
            assert_eq!(xv.raw_dim(), shape, "max_over shape mismatch");
            for (k, (slot, cand)) in v.iter_mut().zip(xv.iter()).enumerate() {
                if *cand > *slot {
                    *slot = *cand;
                    winner[k] = m as u32;
                }
            }
        }
        let ids: Vec<TensorId> = xs.to_vec();
        let needs = self.wants(&ids);
        let flags: Vec<bool> = ids.iter().map(|i| self.needs(*i)).collect();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                for (m, id) in ids.iter().enumerate() {
                    if !flags[m] {
                        continue;
                    }
                    let mut d = ArrayD::<f64>::zeros(vals[id.0].raw_dim());
                    for (k, slot) in d.iter_mut().enumerate() {
                        if winner[k] == m as u32 {
                            *slot = gout.as_slice().unwrap()[k];
                        }
                    }
                    acc(grads, *id, d);
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Apply a fixed 2D rotary encoding to tokens `[T, C]` given integer
    /// `(row, col)` positions. First half of the channels rotates by row
    /// angle, second half by column angle; pairs within each half use
    /// geometric frequencies of `base`.
    pub fn rope_2d(&mut self, x: TensorId, positions: &[(usize, usize)], base: f64) -> TensorId {
        let xs = self.vals[x.0].shape().to_vec();
        assert_eq!(xs.len(), 2);
        let (t, c) = (xs[0], xs[1]);
        assert_eq!(t, positions.len(), "one position per token");
        assert!(c % 4 == 0, "channel dim must be divisible by 4");
        let v = rope_apply_raw(&self.vals[x.0], positions, base, false);
        let pos: Vec<(usize, usize)> = positions.to_vec();
        let needs = self.wants(&[x]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                acc(grads, x, rope_apply_raw(gout, &pos, base, true));
            }) as BackFn
        });
        self.push(v, back, needs)
    }
}

fn plane2(x: &Arr, n: usize, c: usize, h: usize, w: usize) -> Array2<f64> {
    let mut p = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            p[[i, j]] = x[[n, c, i, j]];
        }
    }
    p
}

/// Rotate token channels; `inverse` applies the transpose rotation, which is
/// also the exact backward of the forward map.
pub fn rope_apply_raw(x: &Arr, positions: &[(usize, usize)], base: f64, inverse: bool) -> Arr {
    let t = x.shape()[0];
    let c = x.shape()[1];
    let half = c / 2;
    let pairs = half / 2;
    let mut y = x.clone();
    for ti in 0..t {
        let (row, col) = positions[ti];
        for i in 0..pairs {
            let freq = base.powf(-2.0 * i as f64 / half as f64);
            for (off, p) in [(0usize, row), (half, col)] {
                let mut theta = p as f64 * freq;
                if inverse {
                    theta = -theta;
                }
                let (s, cs) = theta.sin_cos();
                let a = x[[ti, off + 2 * i]];
                let b = x[[ti, off + 2 * i + 1]];
                y[[ti, off + 2 * i]] = a * cs - b * s;
                y[[ti, off + 2 * i + 1]] = a * s + b * cs;
            }
        }
    }
    y
}
