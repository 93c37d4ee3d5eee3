//! Minimal f64 tensor autodiff on top of `ndarray`.
//!
//! A [`Tape`] is a Wengert list built per training step: ops execute eagerly
//! and, when recording, push a backward closure. Everything is
//! single-threaded with a fixed reduction order, so repeated runs are
//! bitwise identical. Gradients flow only into leaves created with
//! `requires_grad = true`; constants (teacher features, targets, frozen
//! modules) never accumulate gradients.

mod attn;
mod conv;
mod loss;
mod norm;
mod shape;

pub use attn::attention_with_weights;
pub use conv::conv2d_infer;
pub use loss::{l2_normalize_positions, NORM_FLOOR};
pub use shape::{bilinear_matrix, rope_apply_raw};

use ndarray::{ArrayD, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

type BackFn = Box<dyn FnOnce(&[Arr], &Arr, &mut [Option<Arr>])>;

pub struct Tape {
    vals: Vec<Arr>,
    needs_grad: Vec<bool>,
    nodes: Vec<Option<BackFn>>,
    recording: bool,
}

pub(crate) fn acc(grads: &mut [Option<Arr>], id: TensorId, g: Arr) {
    match &mut grads[id.0] {
        Some(cur) => *cur += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[1]), v)
}

impl Tape {
    /// Recording tape: ops register backward closures.
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            needs_grad: Vec::new(),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Inference tape: same ops, no backward bookkeeping.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn leaf(&mut self, v: Arr, requires_grad: bool) -> TensorId {
        self.push(v, None, requires_grad && self.recording)
    }

    pub fn constant(&mut self, v: Arr) -> TensorId {
        self.leaf(v, false)
    }

    pub fn value(&self, id: TensorId) -> &Arr {
        &self.vals[id.0]
    }

    pub(crate) fn push(&mut self, v: Arr, back: Option<BackFn>, needs: bool) -> TensorId {
        self.vals.push(v);
        self.needs_grad.push(needs);
        self.nodes.push(if needs { back } else { None });
        TensorId(self.vals.len() - 1)
    }

    pub(crate) fn needs(&self, id: TensorId) -> bool {
        self.needs_grad[id.0]
    }

    pub(crate) fn wants(&self, ids: &[TensorId]) -> bool {
        self.recording && ids.iter().any(|i| self.needs_grad[i.0])
    }

    /// Reverse pass from `loss` (seeded with ones). Returns one gradient slot
    /// per tensor id; only leaves keep theirs, intermediate grads are dropped
    /// as soon as they have been consumed.
    pub fn backward(&mut self, loss: TensorId) -> Vec<Option<Arr>> {
        let n = self.vals.len();
        let mut grads: Vec<Option<Arr>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.vals[loss.0].shape()));
        for i in (0..n).rev() {
            if let Some(f) = self.nodes[i].take() {
                if let Some(g) = grads[i].take() {
                    f(&self.vals, &g, &mut grads);
                }
            }
        }
        grads
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = &self.vals[a.0] + &self.vals[b.0];
        let needs = self.wants(&[a, b]);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                if na {
                    acc(grads, a, g.clone());
                }
                if nb {
                    acc(grads, b, g.clone());
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// a + beta * b
    pub fn add_scaled(&mut self, a: TensorId, b: TensorId, beta: f64) -> TensorId {
        let v = &self.vals[a.0] + &(&self.vals[b.0] * beta);
        let needs = self.wants(&[a, b]);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                if na {
                    acc(grads, a, g.clone());
                }
                if nb {
                    acc(grads, b, g * beta);
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.add_scaled(a, b, -1.0)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = &self.vals[a.0] * &self.vals[b.0];
        let needs = self.wants(&[a, b]);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                if na {
                    acc(grads, a, g * &vals[b.0]);
                }
                if nb {
                    acc(grads, b, g * &vals[a.0]);
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    pub fn scale(&mut self, a: TensorId, s: f64) -> TensorId {
        let v = &self.vals[a.0] * s;
        let needs = self.wants(&[a]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                acc(grads, a, g * s);
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = &self.vals[a.0] + c;
        let needs = self.wants(&[a]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                acc(grads, a, g.clone());
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    // ---- activations ----

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let v = self.vals[a.0].mapv(|x| x * sigmoid(x));
        let needs = self.wants(&[a]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                let dx = vals[a.0].mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                acc(grads, a, g * &dx);
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = self.vals[a.0].mapv(gelu_tanh);
        let needs = self.wants(&[a]);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                let dx = vals[a.0].mapv(gelu_tanh_grad);
                acc(grads, a, g * &dx);
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    // ---- dense algebra ----

    /// `[M, K] x [K, N] -> [M, N]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = as2(&self.vals[a.0]);
        let bv = as2(&self.vals[b.0]);
        let v = av.dot(&bv).into_dyn();
        let needs = self.wants(&[a, b]);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |vals: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                let gm = as2(g);
                if na {
                    let bv = as2(&vals[b.0]);
                    acc(grads, a, gm.dot(&bv.t()).into_dyn());
                }
                if nb {
                    let av = as2(&vals[a.0]);
                    acc(grads, b, av.t().dot(&gm).into_dyn());
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// Rows of `x: [R, D]` each get `b: [D]` added.
    pub fn add_bias_rows(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let xv = as2(&self.vals[x.0]);
        let bv = self.vals[b.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&xv + &bv).into_dyn();
        let needs = self.wants(&[x, b]);
        let (nx, nb) = (self.needs(x), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |_: &[Arr], g: &Arr, grads: &mut [Option<Arr>]| {
                if nx {
                    acc(grads, x, g.clone());
                }
                if nb {
                    let gm = as2(g);
                    acc(grads, b, gm.sum_axis(ndarray::Axis(0)).into_dyn());
                }
            }) as BackFn
        });
        self.push(v, back, needs)
    }

    /// x: [R, D] matmul w: [D, M] plus bias [M].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let h = self.matmul(x, w);
        self.add_bias_rows(h, b)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub(crate) fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("rank-2 tensor")
}

/// Convert an owned dynamic array into `Array2`, panicking on rank mismatch.
pub fn as2_owned(a: Arr) -> ndarray::Array2<f64> {
    a.into_dimensionality::<ndarray::Ix2>().expect("rank-2 tensor")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
pub(crate) mod gradcheck;
