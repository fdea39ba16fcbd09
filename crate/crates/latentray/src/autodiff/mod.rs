//! Minimal reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! Everything is `f64` and strictly sequential, so a forward/backward pass is
//! a pure function of its inputs: two runs with the same seed produce
//! bit-identical results. The graph is a tape of reference-counted nodes;
//! `backward` walks it once in reverse creation order and accumulates
//! gradients into the leaves.

mod conv;

pub use conv::{conv2d, conv2d_input_grad, upsample2x};

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

pub type ArrD = ArrayD<f64>;

/// Gradient rule: given (output value, output gradient), produce one optional
/// gradient per parent, aligned with the node's parent list.
type BackwardFn = Box<dyn Fn(&ArrD, &ArrD) -> Vec<Option<ArrD>>>;

struct Node {
    id: u64,
    value: RefCell<ArrD>,
    grad: RefCell<Option<ArrD>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl Tensor {
    /// Trainable leaf: participates in gradient accumulation.
    pub fn param(value: ArrD) -> Tensor {
        Tensor::leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(value: ArrD) -> Tensor {
        Tensor::leaf(value, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrD::from_elem(IxDyn(&[]), v))
    }

    fn leaf(value: ArrD, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Internal: build an op node. Collapses to a constant when no parent
    /// tracks gradients, so frozen-parameter forward passes stay tape-free.
    fn from_op(parents: Vec<Tensor>, value: ArrD, backward: BackwardFn) -> Tensor {
        if parents.iter().any(|p| p.requires_grad()) {
            Tensor {
                node: Rc::new(Node {
                    id: next_id(),
                    value: RefCell::new(value),
                    grad: RefCell::new(None),
                    requires_grad: Cell::new(true),
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Tensor::constant(value)
        }
    }

    pub fn value(&self) -> Ref<'_, ArrD> {
        self.node.value.borrow()
    }

    pub fn to_array(&self) -> ArrD {
        self.node.value.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        let v = self.node.value.borrow();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Toggle gradient tracking on a leaf (used to freeze/unfreeze modules).
    pub fn set_requires_grad(&self, flag: bool) {
        debug_assert!(self.node.backward.is_none(), "only leaves may be toggled");
        self.node.requires_grad.set(flag);
    }

    pub fn grad(&self) -> Option<ArrD> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.node.grad.replace(None);
    }

    /// Apply an in-place update to a leaf's value (optimizer steps).
    pub fn update_value(&self, f: impl FnOnce(&mut ArrD)) {
        f(&mut self.node.value.borrow_mut());
    }

    /// A constant tensor sharing this tensor's current value.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_array())
    }

    /// Reverse pass from a scalar output. Gradients accumulate into every
    /// reachable leaf with `requires_grad`; intermediate gradients are freed
    /// as soon as they have been consumed.
    pub fn backward(&self) {
        let seed = ArrD::from_elem(self.node.value.borrow().raw_dim(), 1.0);
        assert_eq!(seed.len(), 1, "backward() expects a scalar output");
        self.node.grad.replace(Some(seed));

        // Topological order: ids increase with creation, so descending id
        // guarantees a node is processed after all of its consumers.
        let mut order: Vec<Rc<Node>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![Rc::clone(&self.node)];
        while let Some(n) = stack.pop() {
            if !seen.insert(n.id) {
                continue;
            }
            for p in &n.parents {
                if p.requires_grad() {
                    stack.push(Rc::clone(&p.node));
                }
            }
            order.push(n);
        }
        order.sort_by(|a, b| b.id.cmp(&a.id));

        for n in &order {
            let Some(bw) = &n.backward else { continue };
            let Some(g) = n.grad.borrow_mut().take() else {
                continue;
            };
            let value = n.value.borrow();
            let parent_grads = bw(&value, &g);
            debug_assert_eq!(parent_grads.len(), n.parents.len());
            for (p, pg) in n.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), p.node.value.borrow().shape());
                let mut slot = p.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => *acc += &pg,
                    None => *slot = Some(pg),
                }
            }
        }
    }
}

fn needs(parents: &[&Tensor]) -> Vec<bool> {
    parents.iter().map(|p| p.requires_grad()).collect()
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: operand shapes differ ({:?} vs {:?})",
        a.shape(),
        b.shape()
    );
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "add");
    let value = &*a.value() + &*b.value();
    let nd = needs(&[a, b]);
    Tensor::from_op(
        vec![a.clone(), b.clone()],
        value,
        Box::new(move |_, g| {
            vec![
                nd[0].then(|| g.clone()),
                nd[1].then(|| g.clone()),
            ]
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "sub");
    let value = &*a.value() - &*b.value();
    let nd = needs(&[a, b]);
    Tensor::from_op(
        vec![a.clone(), b.clone()],
        value,
        Box::new(move |_, g| {
            vec![
                nd[0].then(|| g.clone()),
                nd[1].then(|| g.mapv(|x| -x)),
            ]
        }),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "mul");
    let value = &*a.value() * &*b.value();
    let nd = needs(&[a, b]);
    let av = a.to_array();
    let bv = b.to_array();
    Tensor::from_op(
        vec![a.clone(), b.clone()],
        value,
        Box::new(move |_, g| {
            vec![
                nd[0].then(|| g * &bv),
                nd[1].then(|| g * &av),
            ]
        }),
    )
}

pub fn div(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "div");
    let value = &*a.value() / &*b.value();
    let nd = needs(&[a, b]);
    let av = a.to_array();
    let bv = b.to_array();
    Tensor::from_op(
        vec![a.clone(), b.clone()],
        value,
        Box::new(move |_, g| {
            vec![
                nd[0].then(|| g / &bv),
                nd[1].then(|| {
                    let mut d = g * &av;
                    d.zip_mut_with(&bv, |x, &b| *x = -*x / (b * b));
                    d
                }),
            ]
        }),
    )
}

pub fn neg(a: &Tensor) -> Tensor {
    scale(a, -1.0)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let value = a.value().mapv(|x| x * c);
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |_, g| vec![Some(g.mapv(|x| x * c))]),
    )
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let value = a.value().mapv(|x| x + c);
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |_, g| vec![Some(g.clone())]),
    )
}

pub fn abs(a: &Tensor) -> Tensor {
    let value = a.value().mapv(f64::abs);
    let av = a.to_array();
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |_, g| {
            let mut d = g.clone();
            d.zip_mut_with(&av, |x, &a| *x *= if a >= 0.0 { 1.0 } else { -1.0 });
            vec![Some(d)]
        }),
    )
}

pub fn square(a: &Tensor) -> Tensor {
    let value = a.value().mapv(|x| x * x);
    let av = a.to_array();
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |_, g| {
            let mut d = g.clone();
            d.zip_mut_with(&av, |x, &a| *x *= 2.0 * a);
            vec![Some(d)]
        }),
    )
}

pub fn tanh(a: &Tensor) -> Tensor {
    let value = a.value().mapv(f64::tanh);
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |y, g| {
            let mut d = g.clone();
            d.zip_mut_with(y, |x, &y| *x *= 1.0 - y * y);
            vec![Some(d)]
        }),
    )
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(a: &Tensor) -> Tensor {
    let value = a.value().mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
    let av = a.to_array();
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |_, g| {
            let mut d = g.clone();
            // sigmoid(x), stable for both signs
            d.zip_mut_with(&av, |x, &a| {
                let s = if a >= 0.0 {
                    1.0 / (1.0 + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (1.0 + e)
                };
                *x *= s;
            });
            vec![Some(d)]
        }),
    )
}

pub fn leaky_relu(a: &Tensor, alpha: f64) -> Tensor {
    let value = a.value().mapv(|x| if x >= 0.0 { x } else { alpha * x });
    let av = a.to_array();
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |_, g| {
            let mut d = g.clone();
            d.zip_mut_with(&av, |x, &a| *x *= if a >= 0.0 { 1.0 } else { alpha });
            vec![Some(d)]
        }),
    )
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Tensor) -> Tensor {
    let dim = a.value().raw_dim();
    let value = ArrD::from_elem(IxDyn(&[]), a.value().sum());
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |_, g| {
            let gv = g[[]];
            vec![Some(ArrD::from_elem(dim.clone(), gv))]
        }),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    scale(&sum_all(a), 1.0 / n)
}

/// Reduce every axis except the first: `(N, ...) -> (N,)`, summing.
pub fn sum_per_sample(a: &Tensor) -> Tensor {
    let v = a.value();
    let n = v.shape()[0];
    let per = v.len() / n;
    let flat = v.as_standard_layout();
    let mut out = ndarray::Array1::<f64>::zeros(n);
    let slice = flat.as_slice().unwrap();
    for i in 0..n {
        out[i] = slice[i * per..(i + 1) * per].iter().sum();
    }
    let dim = v.raw_dim();
    drop(v);
    Tensor::from_op(
        vec![a.clone()],
        out.into_dyn(),
        Box::new(move |_, g| {
            let mut d = ArrD::zeros(dim.clone());
            {
                let ds = d.as_slice_mut().unwrap();
                for i in 0..n {
                    let gi = g[[i]];
                    for x in &mut ds[i * per..(i + 1) * per] {
                        *x = gi;
                    }
                }
            }
            vec![Some(d)]
        }),
    )
}

/// Reduce every axis except the first: `(N, ...) -> (N,)`, averaging.
pub fn mean_per_sample(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let per = (a.len() / n) as f64;
    scale(&sum_per_sample(a), 1.0 / per)
}

// ---------------------------------------------------------------------------
// Shape & broadcast ops
// ---------------------------------------------------------------------------

pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    let v = a.value();
    assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape size mismatch");
    let data: Vec<f64> = v.as_standard_layout().iter().cloned().collect();
    let value = ArrD::from_shape_vec(IxDyn(shape), data).unwrap();
    let orig = v.raw_dim();
    drop(v);
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |_, g| {
            let data: Vec<f64> = g.as_standard_layout().iter().cloned().collect();
            vec![Some(ArrD::from_shape_vec(orig.clone(), data).unwrap())]
        }),
    )
}

/// Column slice of a 2-D tensor: `(N, M) -> (N, hi-lo)`.
pub fn slice_cols(a: &Tensor, lo: usize, hi: usize) -> Tensor {
    let v = a.value();
    let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
    let (n, m) = v2.dim();
    assert!(lo < hi && hi <= m, "slice_cols out of range");
    let value = v2.slice(ndarray::s![.., lo..hi]).to_owned().into_dyn();
    drop(v);
    Tensor::from_op(
        vec![a.clone()],
        value,
        Box::new(move |_, g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut d = ndarray::Array2::<f64>::zeros((n, m));
            d.slice_mut(ndarray::s![.., lo..hi]).assign(&g2);
            vec![Some(d.into_dyn())]
        }),
    )
}

/// Repeat a `(C, H, W)` tensor `n` times into `(n, C, H, W)`; gradient sums
/// over the batch axis.
pub fn broadcast_sample(t: &Tensor, n: usize) -> Tensor {
    let v = t.value();
    let shape = v.shape().to_vec();
    assert_eq!(shape.len(), 3, "broadcast_sample expects (C, H, W)");
    let mut out_shape = vec![n];
    out_shape.extend_from_slice(&shape);
    let mut out = ArrD::zeros(IxDyn(&out_shape));
    for ni in 0..n {
        out.index_axis_mut(Axis(0), ni).assign(&v);
    }
    drop(v);
    Tensor::from_op(
        vec![t.clone()],
        out,
        Box::new(move |_, g| {
            let mut d = g.index_axis(Axis(0), 0).to_owned();
            for ni in 1..n {
                d += &g.index_axis(Axis(0), ni);
            }
            vec![Some(d)]
        }),
    )
}

/// Repeat a `(1, F)` row `n` times into `(n, F)`; gradient sums over rows.
pub fn broadcast_row(w: &Tensor, n: usize) -> Tensor {
    let v = w.value();
    let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(v2.dim().0, 1, "broadcast_row expects shape (1, F)");
    let f = v2.dim().1;
    let mut out = ndarray::Array2::<f64>::zeros((n, f));
    for mut row in out.rows_mut() {
        row.assign(&v2.row(0));
    }
    drop(v);
    Tensor::from_op(
        vec![w.clone()],
        out.into_dyn(),
        Box::new(move |_, g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let summed = g2.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
            vec![Some(summed.into_dyn())]
        }),
    )
}

/// Fully connected layer: `x (N,K) · wᵀ (K,O) + b -> (N,O)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let xv = x.value().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let wv = w.value().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    assert_eq!(xv.dim().1, wv.dim().1, "linear: inner dimensions differ");
    let mut out = xv.dot(&wv.t());
    if let Some(b) = b {
        let bv = b.value().view().into_dimensionality::<Ix1>().unwrap().to_owned();
        out += &bv;
    }
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    let nd: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
    Tensor::from_op(
        parents,
        out.into_dyn(),
        Box::new(move |_, g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let dx = nd[0].then(|| g2.dot(&wv).into_dyn());
            let dw = nd[1].then(|| g2.t().dot(&xv).into_dyn());
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(nd[2].then(|| g2.sum_axis(ndarray::Axis(0)).into_dyn()));
            }
            grads
        }),
    )
}

/// Per-channel bias over `(N, C, H, W)`.
pub fn add_bias_channels(x: &Tensor, b: &Tensor) -> Tensor {
    let xv = x.value().view().into_dimensionality::<Ix4>().unwrap().to_owned();
    let bv = b.value().view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let (n, c, h, w) = xv.dim();
    assert_eq!(bv.len(), c, "bias length must equal channel count");
    let mut out = xv;
    for ci in 0..c {
        out.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v + bv[ci]);
    }
    let nd = needs(&[x, b]);
    Tensor::from_op(
        vec![x.clone(), b.clone()],
        out.into_dyn(),
        Box::new(move |_, g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let dx = nd[0].then(|| g.clone());
            let db = nd[1].then(|| {
                let mut db = ndarray::Array1::<f64>::zeros(c);
                for ci in 0..c {
                    db[ci] = g4.slice(ndarray::s![.., ci, .., ..]).sum();
                }
                db.into_dyn()
            });
            let _ = (n, h, w);
            vec![dx, db]
        }),
    )
}

/// Per-sample, per-channel affine: `y = x * gamma[n,c] + beta[n,c]`.
pub fn scale_shift_channels(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let xv = x.value().view().into_dimensionality::<Ix4>().unwrap().to_owned();
    let gv = gamma.value().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let bv = beta.value().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let (n, c, _, _) = xv.dim();
    assert_eq!(gv.dim(), (n, c), "gamma must be (N, C)");
    assert_eq!(bv.dim(), (n, c), "beta must be (N, C)");
    let mut out = xv.clone();
    for ni in 0..n {
        for ci in 0..c {
            out.slice_mut(ndarray::s![ni, ci, .., ..])
                .mapv_inplace(|v| v * gv[(ni, ci)] + bv[(ni, ci)]);
        }
    }
    let nd = needs(&[x, gamma, beta]);
    Tensor::from_op(
        vec![x.clone(), gamma.clone(), beta.clone()],
        out.into_dyn(),
        Box::new(move |_, g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let dx = nd[0].then(|| {
                let mut d = g4.to_owned();
                for ni in 0..n {
                    for ci in 0..c {
                        d.slice_mut(ndarray::s![ni, ci, .., ..])
                            .mapv_inplace(|v| v * gv[(ni, ci)]);
                    }
                }
                d.into_dyn()
            });
            let dgamma = nd[1].then(|| {
                let mut d = ndarray::Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let gs = g4.slice(ndarray::s![ni, ci, .., ..]);
                        let xs = xv.slice(ndarray::s![ni, ci, .., ..]);
                        d[(ni, ci)] = (&gs * &xs).sum();
                    }
                }
                d.into_dyn()
            });
            let dbeta = nd[2].then(|| {
                let mut d = ndarray::Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        d[(ni, ci)] = g4.slice(ndarray::s![ni, ci, .., ..]).sum();
                    }
                }
                d.into_dyn()
            });
            vec![dx, dgamma, dbeta]
        }),
    )
}

/// Add a fixed spatial noise map scaled by a learned per-channel strength:
/// `y[n,c,h,w] = x[n,c,h,w] + s[c] * noise[h,w]`. The noise map itself never
/// receives gradients.
pub fn add_scaled_noise(x: &Tensor, strength: &Tensor, noise: &Tensor) -> Tensor {
    let xv = x.value().view().into_dimensionality::<Ix4>().unwrap().to_owned();
    let sv = strength.value().view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let nv = noise.value().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let (n, c, h, w) = xv.dim();
    assert_eq!(sv.len(), c);
    assert_eq!(nv.dim(), (h, w));
    let mut out = xv;
    for ni in 0..n {
        for ci in 0..c {
            let s = sv[ci];
            out.slice_mut(ndarray::s![ni, ci, .., ..])
                .zip_mut_with(&nv, |v, &z| *v += s * z);
        }
    }
    let nd = needs(&[x, strength]);
    let nv2 = nv.clone();
    Tensor::from_op(
        vec![x.clone(), strength.clone(), noise.clone()],
        out.into_dyn(),
        Box::new(move |_, g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let dx = nd[0].then(|| g.clone());
            let ds = nd[1].then(|| {
                let mut d = ndarray::Array1::<f64>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let gs = g4.slice(ndarray::s![ni, ci, .., ..]);
                        d[ci] += (&gs * &nv2).sum();
                    }
                }
                d.into_dyn()
            });
            vec![dx, ds, None]
        }),
    )
}

/// Instance normalization over the spatial axes of `(N, C, H, W)`.
pub fn instance_norm(x: &Tensor, eps: f64) -> Tensor {
    let xv = x.value().view().into_dimensionality::<Ix4>().unwrap().to_owned();
    let (n, c, h, w) = xv.dim();
    let m = (h * w) as f64;
    let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
    let mut istd = ndarray::Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let xs = xv.slice(ndarray::s![ni, ci, .., ..]);
            let mu = xs.sum() / m;
            let var = xs.mapv(|v| (v - mu) * (v - mu)).sum() / m;
            let is = 1.0 / (var + eps).sqrt();
            istd[(ni, ci)] = is;
            out.slice_mut(ndarray::s![ni, ci, .., ..])
                .zip_mut_with(&xs, |o, &v| *o = (v - mu) * is);
        }
    }
    Tensor::from_op(
        vec![x.clone()],
        out.into_dyn(),
        Box::new(move |y, g| {
            let y4 = y.view().into_dimensionality::<Ix4>().unwrap();
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut d = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let ys = y4.slice(ndarray::s![ni, ci, .., ..]);
                    let gs = g4.slice(ndarray::s![ni, ci, .., ..]);
                    let g_mean = gs.sum() / m;
                    let gy_mean = (&gs * &ys).sum() / m;
                    let is = istd[(ni, ci)];
                    let mut ds = d.slice_mut(ndarray::s![ni, ci, .., ..]);
                    ndarray::Zip::from(&mut ds).and(&gs).and(&ys).for_each(|o, &gv, &yv| {
                        *o = is * (gv - g_mean - yv * gy_mean);
                    });
                }
            }
            vec![Some(d.into_dyn())]
        }),
    )
}

/// Global average pooling: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let xv = x.value().view().into_dimensionality::<Ix4>().unwrap().to_owned();
    let (n, c, h, w) = xv.dim();
    let m = (h * w) as f64;
    let mut out = ndarray::Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            out[(ni, ci)] = xv.slice(ndarray::s![ni, ci, .., ..]).sum() / m;
        }
    }
    Tensor::from_op(
        vec![x.clone()],
        out.into_dyn(),
        Box::new(move |_, g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut d = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    d.slice_mut(ndarray::s![ni, ci, .., ..]).fill(g2[(ni, ci)] / m);
                }
            }
            vec![Some(d.into_dyn())]
        }),
    )
}

/// Sum a list of same-shape tensors.
pub fn add_n(ts: &[Tensor]) -> Tensor {
    assert!(!ts.is_empty());
    let mut acc = ts[0].clone();
    for t in &ts[1..] {
        acc = add(&acc, t);
    }
    acc
}

pub fn all_finite(a: &ArrD) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrD {
        ArrD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar function of one array input.
    fn fd_grad(f: &mut dyn FnMut(&ArrD) -> f64, x: &ArrD, step: f64) -> ArrD {
        let mut g = ArrD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let flat = xp.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + step;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - step;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
        }
        g
    }

    fn rel_err(a: &ArrD, b: &ArrD) -> f64 {
        let num = (a - b).mapv(|v| v * v).sum().sqrt();
        let den = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        num / den.max(1e-12)
    }

    /// Checks the analytic gradient of `build` (a scalar-valued graph of one
    /// input) against central differences.
    fn check_grad(build: &dyn Fn(&Tensor) -> Tensor, x0: &ArrD, tol: f64) {
        let x = Tensor::param(x0.clone());
        let y = build(&x);
        y.backward();
        let analytic = x.grad().expect("no gradient reached input");
        let mut f = |xa: &ArrD| {
            let xt = Tensor::constant(xa.clone());
            build(&xt).item()
        };
        let numeric = fd_grad(&mut f, x0, 1e-5);
        let e = rel_err(&analytic, &numeric);
        assert!(e < tol, "gradient mismatch: rel err {e}");
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_arr(&[3, 4], &mut rng);
        let c = rand_arr(&[3, 4], &mut rng);

        check_grad(&|x| mean_all(&square(x)), &x0, 1e-6);
        check_grad(&|x| mean_all(&tanh(x)), &x0, 1e-6);
        check_grad(&|x| mean_all(&softplus(x)), &x0, 1e-6);
        check_grad(&|x| mean_all(&leaky_relu(x, 0.2)), &x0, 1e-6);
        let cc = Tensor::constant(c.clone());
        check_grad(&|x| mean_all(&mul(x, &cc)), &x0, 1e-6);
        let cc2 = Tensor::constant(c.mapv(|v| v + 2.5));
        check_grad(&|x| mean_all(&div(x, &cc2)), &x0, 1e-6);
        check_grad(&|x| sum_all(&div(&cc2, &add_scalar(x, 3.0))), &x0, 1e-6);
    }

    #[test]
    fn abs_grad_away_from_zero() {
        let x0 = ArrD::from_shape_vec(IxDyn(&[4]), vec![1.0, -2.0, 3.0, -0.5]).unwrap();
        check_grad(&|x| sum_all(&abs(x)), &x0, 1e-8);
    }

    #[test]
    fn reduction_and_shape_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand_arr(&[2, 3, 2, 2], &mut rng);
        check_grad(&|x| mean_all(&sum_per_sample(&square(x))), &x0, 1e-6);
        check_grad(&|x| mean_all(&mean_per_sample(x)), &x0, 1e-6);
        check_grad(&|x| mean_all(&square(&reshape(x, &[4, 6]))), &x0, 1e-6);
        check_grad(
            &|x| mean_all(&square(&slice_cols(&reshape(x, &[4, 6]), 1, 4))),
            &x0,
            1e-6,
        );
        check_grad(&|x| mean_all(&global_avg_pool(&square(x))), &x0, 1e-6);
    }

    #[test]
    fn linear_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_arr(&[3, 5], &mut rng);
        let w0 = rand_arr(&[4, 5], &mut rng);
        let b0 = rand_arr(&[4], &mut rng);

        // w.r.t. input
        let w = Tensor::constant(w0.clone());
        let b = Tensor::constant(b0.clone());
        check_grad(&|x| mean_all(&square(&linear(x, &w, Some(&b)))), &x0, 1e-6);

        // w.r.t. weight
        let x = Tensor::constant(x0.clone());
        let b2 = Tensor::constant(b0.clone());
        check_grad(&|w| mean_all(&square(&linear(&x, w, Some(&b2)))), &w0, 1e-6);

        // w.r.t. bias
        let w2 = Tensor::constant(w0.clone());
        check_grad(&|b| mean_all(&square(&linear(&x, &w2, Some(b)))), &b0, 1e-6);

        let r0 = rand_arr(&[1, 6], &mut rng);
        check_grad(&|r| mean_all(&square(&broadcast_row(r, 5))), &r0, 1e-6);
    }

    #[test]
    fn channel_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = rand_arr(&[2, 3, 4, 4], &mut rng);
        let b0 = rand_arr(&[3], &mut rng);
        let g0 = rand_arr(&[2, 3], &mut rng);
        let noise = Tensor::constant(rand_arr(&[4, 4], &mut rng));

        let b = Tensor::constant(b0.clone());
        check_grad(&|x| mean_all(&square(&add_bias_channels(x, &b))), &x0, 1e-6);
        let xc = Tensor::constant(x0.clone());
        check_grad(&|b| mean_all(&square(&add_bias_channels(&xc, b))), &b0, 1e-6);

        let gam = Tensor::constant(g0.clone());
        let bet = Tensor::constant(g0.mapv(|v| v * 0.5));
        check_grad(
            &|x| mean_all(&square(&scale_shift_channels(x, &gam, &bet))),
            &x0,
            1e-6,
        );
        check_grad(
            &|g| mean_all(&square(&scale_shift_channels(&xc, g, &bet))),
            &g0,
            1e-6,
        );
        check_grad(
            &|g| mean_all(&square(&scale_shift_channels(&xc, &gam, g))),
            &g0,
            1e-6,
        );

        let s0 = rand_arr(&[3], &mut rng);
        let s = Tensor::constant(s0.clone());
        check_grad(&|x| mean_all(&square(&add_scaled_noise(x, &s, &noise))), &x0, 1e-6);
        check_grad(&|s| mean_all(&square(&add_scaled_noise(&xc, s, &noise))), &s0, 1e-6);
    }

    #[test]
    fn instance_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_arr(&[2, 2, 4, 4], &mut rng);
        let probe = Tensor::constant(rand_arr(&[2, 2, 4, 4], &mut rng));
        check_grad(
            &|x| mean_all(&mul(&instance_norm(x, 1e-5), &probe)),
            &x0,
            1e-5,
        );
    }

    #[test]
    fn backward_accumulates_through_shared_subexpression() {
        // y = x*x + x*x reuses the same node twice
        let x = Tensor::param(ArrD::from_elem(IxDyn(&[]), 3.0));
        let sq = square(&x);
        let y = add(&sq, &sq);
        y.backward();
        let g = x.grad().unwrap();
        assert!((g[[]] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn constants_produce_no_tape() {
        let a = Tensor::constant(ArrD::from_elem(IxDyn(&[2, 2]), 1.0));
        let b = Tensor::constant(ArrD::from_elem(IxDyn(&[2, 2]), 2.0));
        let c = mul(&a, &b);
        assert!(!c.requires_grad());
        assert!(c.node.backward.is_none());
    }

    #[test]
    fn detach_blocks_gradients() {
        let x = Tensor::param(ArrD::from_elem(IxDyn(&[]), 2.0));
        let y = square(&x);
        let z = square(&y.detach());
        z.backward();
        assert!(x.grad().is_none());
    }
}
