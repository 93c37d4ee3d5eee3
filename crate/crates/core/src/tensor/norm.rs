//! Normalization layers and softmax.

use super::{acc, Arr, BackFn, Tape, TensorId};
use ndarray::{ArrayD, Axis};

impl Tape {
    /// GroupNorm over `[N,C,H,W]` with affine per-channel `gamma`/`beta` of
    /// shape `[C]`. Statistics are computed per (sample, group).
    pub fn group_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        eps: f64,
    ) -> TensorId {
        let xs = self.vals[x.0].shape().to_vec();
        assert_eq!(xs.len(), 4, "group_norm expects [N,C,H,W]");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(c % groups == 0, "channels must divide into groups");
        let cg = c / groups;
        let m = (cg * h * w) as f64;

        let xv = &self.vals[x.0];
        let gv = &self.vals[gamma.0];
        let bv = &self.vals[beta.0];
        let mut y = ArrayD::<f64>::zeros(xv.raw_dim());
        let mut mean = vec![0.0; n * groups];
        let mut istd = vec![0.0; n * groups];
        for ni in 0..n {
            for g in 0..groups {
                let mut s = 0.0;
                for cc in g * cg..(g + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            s += xv[[ni, cc, i, j]];
                        }
                    }
                }
                let mu = s / m;
                let mut var = 0.0;
                for cc in g * cg..(g + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            let d = xv[[ni, cc, i, j]] - mu;
                            var += d * d;
                        }
                    }
                }
                var /= m;
                let is = 1.0 / (var + eps).sqrt();
                mean[ni * groups + g] = mu;
                istd[ni * groups + g] = is;
                for cc in g * cg..(g + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            let xh = (xv[[ni, cc, i, j]] - mu) * is;
                            y[[ni, cc, i, j]] = gv[[cc]] * xh + bv[[cc]];
                        }
                    }
                }
            }
        }

        let needs = self.wants(&[x, gamma, beta]);
        let nx = self.needs(x);
        let ng = self.needs(gamma);
        let nb = self.needs(beta);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let xv = &vals[x.0];
                let gv = &vals[gamma.0];
                let mut dx = nx.then(|| ArrayD::<f64>::zeros(xv.raw_dim()));
                let mut dgamma = ng.then(|| ArrayD::<f64>::zeros(ndarray::IxDyn(&[c])));
                let mut dbeta = nb.then(|| ArrayD::<f64>::zeros(ndarray::IxDyn(&[c])));
                for ni in 0..n {
                    for g in 0..groups {
                        let mu = mean[ni * groups + g];
                        let is = istd[ni * groups + g];
                        // two reductions over the group: E[dxh], E[dxh * xh]
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for cc in g * cg..(g + 1) * cg {
                            for i in 0..h {
                                for j in 0..w {
                                    let xh = (xv[[ni, cc, i, j]] - mu) * is;
                                    let dy = gout[[ni, cc, i, j]];
                                    let dxh = dy * gv[[cc]];
                                    s1 += dxh;
                                    s2 += dxh * xh;
                                    if let Some(dg) = dgamma.as_mut() {
                                        dg[[cc]] += dy * xh;
                                    }
                                    if let Some(db) = dbeta.as_mut() {
                                        db[[cc]] += dy;
                                    }
                                }
                            }
                        }
                        if let Some(dxm) = dx.as_mut() {
                            let e1 = s1 / m;
                            let e2 = s2 / m;
                            for cc in g * cg..(g + 1) * cg {
                                for i in 0..h {
                                    for j in 0..w {
                                        let xh = (xv[[ni, cc, i, j]] - mu) * is;
                                        let dxh = gout[[ni, cc, i, j]] * gv[[cc]];
                                        dxm[[ni, cc, i, j]] = is * (dxh - e1 - xh * e2);
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(d) = dx {
                    acc(grads, x, d);
                }
                if let Some(d) = dgamma {
                    acc(grads, gamma, d);
                }
                if let Some(d) = dbeta {
                    acc(grads, beta, d);
                }
            }) as BackFn
        });
        self.push(y, back, needs)
    }

    /// LayerNorm over the last axis of a rank-2 tensor `[T, D]`, affine
    /// `gamma`/`beta` of shape `[D]`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorId {
        let xs = self.vals[x.0].shape().to_vec();
        assert_eq!(xs.len(), 2, "layer_norm expects [T, D]");
        let (t, d) = (xs[0], xs[1]);
        let m = d as f64;
        let xv = &self.vals[x.0];
        let gv = &self.vals[gamma.0];
        let bv = &self.vals[beta.0];
        let mut y = ArrayD::<f64>::zeros(xv.raw_dim());
        let mut mean = vec![0.0; t];
        let mut istd = vec![0.0; t];
        for ti in 0..t {
            let mut s = 0.0;
            for j in 0..d {
                s += xv[[ti, j]];
            }
            let mu = s / m;
            let mut var = 0.0;
            for j in 0..d {
                let dv = xv[[ti, j]] - mu;
                var += dv * dv;
            }
            var /= m;
            let is = 1.0 / (var + eps).sqrt();
            mean[ti] = mu;
            istd[ti] = is;
            for j in 0..d {
                y[[ti, j]] = gv[[j]] * (xv[[ti, j]] - mu) * is + bv[[j]];
            }
        }
        let needs = self.wants(&[x, gamma, beta]);
        let nx = self.needs(x);
        let ng = self.needs(gamma);
        let nb = self.needs(beta);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let xv = &vals[x.0];
                let gv = &vals[gamma.0];
                let mut dx = nx.then(|| ArrayD::<f64>::zeros(xv.raw_dim()));
                let mut dgamma = ng.then(|| ArrayD::<f64>::zeros(ndarray::IxDyn(&[d])));
                let mut dbeta = nb.then(|| ArrayD::<f64>::zeros(ndarray::IxDyn(&[d])));
                for ti in 0..t {
                    let mu = mean[ti];
                    let is = istd[ti];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let xh = (xv[[ti, j]] - mu) * is;
                        let dy = gout[[ti, j]];
                        let dxh = dy * gv[[j]];
                        s1 += dxh;
                        s2 += dxh * xh;
                        if let Some(dg) = dgamma.as_mut() {
                            dg[[j]] += dy * xh;
                        }
                        if let Some(db) = dbeta.as_mut() {
                            db[[j]] += dy;
                        }
                    }
                    if let Some(dxm) = dx.as_mut() {
                        let e1 = s1 / m;
                        let e2 = s2 / m;
                        for j in 0..d {
                            let xh = (xv[[ti, j]] - mu) * is;
                            let dxh = gout[[ti, j]] * gv[[j]];
                            dxm[[ti, j]] = is * (dxh - e1 - xh * e2);
                        }
                    }
                }
                if let Some(dv) = dx {
                    acc(grads, x, dv);
                }
                if let Some(dv) = dgamma {
                    acc(grads, gamma, dv);
                }
                if let Some(dv) = dbeta {
                    acc(grads, beta, dv);
                }
            }) as BackFn
        });
        self.push(y, back, needs)
    }

    /// Row-wise softmax over the last axis of `[R, C]`.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let xv = super::as2(&self.vals[x.0]);
        let mut y = xv.to_owned();
        for mut row in y.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let yd = y.into_dyn();
        let needs = self.wants(&[x]);
        // The backward needs the output id; push first, then install the node.
        let out = self.push(yd, None, needs);
        if needs {
            let back: BackFn = Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let yv = super::as2(&vals[out.0]);
                let gm = super::as2(gout);
                let mut dx = yv.to_owned();
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let mut dot = 0.0;
                    for j in 0..row.len() {
                        dot += gm[[r, j]] * yv[[r, j]];
                    }
                    for j in 0..row.len() {
                        row[j] = yv[[r, j]] * (gm[[r, j]] - dot);
                    }
                }
                acc(grads, x, dx.into_dyn());
            });
            self.nodes[out.0] = Some(back);
        }
        out
    }

    /// Mean over every element, yielding a `[1]` scalar.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let m = self.vals[x.0].len() as f64;
        let v = super::scalar(self.vals[x.0].sum() / m);
        let needs = self.wants(&[x]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let g = gout[[0]] / m;
                acc(grads, x, ArrayD::from_elem(vals[x.0].raw_dim(), g));
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Sum over rows: `[R, D] -> [D]`.
    pub fn sum_rows(&mut self, x: TensorId) -> TensorId {
        let v = super::as2(&self.vals[x.0]).sum_axis(Axis(0)).into_dyn();
        let needs = self.wants(&[x]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let shape = vals[x.0].raw_dim();
                let r = shape[0];
                let mut dx = ArrayD::<f64>::zeros(shape);
                for i in 0..r {
                    let mut row = dx.index_axis_mut(Axis(0), i);
                    row += &gout.view();
                }
                acc(grads, x, dx);
            }) as BackFn
        });
        self.push(v, back, needs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::inference();
        let x = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap(),
        );
        let y = t.softmax_rows(x);
        let yv = t.value(y);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| yv[[r, c]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_zero_mean_unit_var() {
        use crate::nn::seeded_normal;
        let mut t = Tape::inference();
        let x = t.constant(seeded_normal(&[1, 8, 4, 4], 2.0, 3));
        let gamma = t.constant(ArrayD::ones(IxDyn(&[8])));
        let beta = t.constant(ArrayD::zeros(IxDyn(&[8])));
        let y = t.group_norm(x, gamma, beta, 2, 1e-5);
        let yv = t.value(y);
        // group 0 = channels 0..4
        let mut s = 0.0;
        let mut s2 = 0.0;
        for c in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    s += yv[[0, c, i, j]];
                    s2 += yv[[0, c, i, j]] * yv[[0, c, i, j]];
                }
            }
        }
        let m = 64.0;
        assert!((s / m).abs() < 1e-10);
        assert!((s2 / m - 1.0).abs() < 1e-3);
    }
}
