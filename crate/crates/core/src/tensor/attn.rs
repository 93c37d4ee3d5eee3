//! Multi-head scaled-dot-product attention as one fused op.

use super::{acc, as2, Arr, BackFn, Tape, TensorId};
use ndarray::{Array2, Array3};

/// Split `[T, C]` into `heads` slices of width `C/heads`.
fn split_heads(x: &Array2<f64>, heads: usize) -> Array3<f64> {
    let (t, c) = x.dim();
    let dk = c / heads;
    let mut out = Array3::<f64>::zeros((heads, t, dk));
    for h in 0..heads {
        for ti in 0..t {
            for d in 0..dk {
                out[[h, ti, d]] = x[[ti, h * dk + d]];
            }
        }
    }
    out
}

fn merge_heads(x: &Array3<f64>) -> Array2<f64> {
    let (heads, t, dk) = x.dim();
    let mut out = Array2::<f64>::zeros((t, heads * dk));
    for h in 0..heads {
        for ti in 0..t {
            for d in 0..dk {
                out[[ti, h * dk + d]] = x[[h, ti, d]];
            }
        }
    }
    out
}

fn softmax_rows_2(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Plain-function attention that also returns the per-head attention
/// weights `[heads, Tq, Tk]`; used for inference and weight inspection.
pub fn attention_with_weights(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, Array3<f64>) {
    let (tq, c) = q.dim();
    let tk = k.dim().0;
    assert!(c % heads == 0, "head count must divide channel dim");
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let qh = split_heads(q, heads);
    let kh = split_heads(k, heads);
    let vh = split_heads(v, heads);
    let mut weights = Array3::<f64>::zeros((heads, tq, tk));
    let mut outh = Array3::<f64>::zeros((heads, tq, dk));
    for h in 0..heads {
        let qm = qh.index_axis(ndarray::Axis(0), h);
        let km = kh.index_axis(ndarray::Axis(0), h);
        let vm = vh.index_axis(ndarray::Axis(0), h);
        let mut scores = qm.dot(&km.t());
        scores *= scale;
        softmax_rows_2(&mut scores);
        let o = scores.dot(&vm);
        weights.index_axis_mut(ndarray::Axis(0), h).assign(&scores);
        outh.index_axis_mut(ndarray::Axis(0), h).assign(&o);
    }
    (merge_heads(&outh), weights)
}

impl Tape {
    /// Multi-head attention: `q: [Tq, C]`, `k, v: [Tk, C]` -> `[Tq, C]`.
    pub fn attention(&mut self, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> TensorId {
        let qm = as2(&self.vals[q.0]).to_owned();
        let km = as2(&self.vals[k.0]).to_owned();
        let vm = as2(&self.vals[v.0]).to_owned();
        let (out, weights) = attention_with_weights(&qm, &km, &vm, heads);
        let needs = self.wants(&[q, k, v]);
        let (nq, nk, nv) = (self.needs(q), self.needs(k), self.needs(v));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], gout: &Arr, grads: &mut [Option<Arr>]| {
                let qm = as2(&vals[q.0]).to_owned();
                let km = as2(&vals[k.0]).to_owned();
                let vm = as2(&vals[v.0]).to_owned();
                let gm = as2(gout).to_owned();
                let (_, c) = qm.dim();
                let dk = c / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let qh = split_heads(&qm, heads);
                let kh = split_heads(&km, heads);
                let vh = split_heads(&vm, heads);
                let gh = split_heads(&gm, heads);
                let mut dqh = Array3::<f64>::zeros(qh.dim());
                let mut dkh = Array3::<f64>::zeros(kh.dim());
                let mut dvh = Array3::<f64>::zeros(vh.dim());
                for h in 0..heads {
                    let a = weights.index_axis(ndarray::Axis(0), h);
                    let go = gh.index_axis(ndarray::Axis(0), h);
                    let vmh = vh.index_axis(ndarray::Axis(0), h);
                    if nv {
                        dvh.index_axis_mut(ndarray::Axis(0), h).assign(&a.t().dot(&go));
                    }
                    if nq || nk {
                        let da = go.dot(&vmh.t()); // [Tq, Tk]
                        // softmax backward per row
                        let mut ds = da.to_owned();
                        for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                            let mut dot = 0.0;
                            for j in 0..row.len() {
                                dot += da[[r, j]] * a[[r, j]];
                            }
                            for j in 0..row.len() {
                                row[j] = a[[r, j]] * (da[[r, j]] - dot);
                            }
                        }
                        ds *= scale;
                        if nq {
                            dqh.index_axis_mut(ndarray::Axis(0), h)
                                .assign(&ds.dot(&kh.index_axis(ndarray::Axis(0), h)));
                        }
                        if nk {
                            dkh.index_axis_mut(ndarray::Axis(0), h)
                                .assign(&ds.t().dot(&qh.index_axis(ndarray::Axis(0), h)));
                        }
                    }
                }
                if nq {
                    acc(grads, q, merge_heads(&dqh).into_dyn());
                }
                if nk {
                    acc(grads, k, merge_heads(&dkh).into_dyn());
                }
                if nv {
                    acc(grads, v, merge_heads(&dvh).into_dyn());
                }
            }) as BackFn
        });
        self.push(out.into_dyn(), back, needs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_normal;

    #[test]
    fn attention_rows_average_values_for_singleton_keys() {
        // one key/value token: output equals that value row for every query
        let q = as2(&seeded_normal(&[3, 8], 1.0, 1)).to_owned();
        let k = as2(&seeded_normal(&[1, 8], 1.0, 2)).to_owned();
        let v = as2(&seeded_normal(&[1, 8], 1.0, 3)).to_owned();
        let (out, w) = attention_with_weights(&q, &k, &v, 2);
        for r in 0..3 {
            for c in 0..8 {
                assert!((out[[r, c]] - v[[0, c]]).abs() < 1e-12);
            }
        }
        assert!((w[[0, 2, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let q = as2(&seeded_normal(&[4, 8], 1.0, 4)).to_owned();
        let k = as2(&seeded_normal(&[6, 8], 1.0, 5)).to_owned();
        let v = as2(&seeded_normal(&[6, 8], 1.0, 6)).to_owned();
        let (_, w) = attention_with_weights(&q, &k, &v, 4);
        for h in 0..4 {
            for r in 0..4 {
                let s: f64 = (0..6).map(|c| w[[h, r, c]]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
