//! The compute tape: eager forward evaluation with recorded backward
//! closures, replayed in reverse topological order.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, ParamId, ParamStore, Scalar};

/// Handle to one node of the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&[Rc<Array2<T>>], &mut [Option<Array2<T>>])>;

/// One forward pass. Ops append nodes; `backward` may run once.
pub struct Graph<T: Scalar> {
    vals: Vec<Rc<Array2<T>>>,
    needs: Vec<bool>,
    backs: Vec<Option<BackFn<T>>>,
    watched: Vec<(ParamId, Var)>,
    param_memo: HashMap<usize, Var>,
    /// Training mode enables dropout; evaluation makes it the identity.
    pub train: bool,
    consumed: bool,
}

/// Gradients produced by one backward pass, addressable by `Var`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Array2<T>>], idx: usize, delta: Array2<T>) {
    match &mut grads[idx] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(train: bool) -> Self {
        Graph {
            vals: Vec::new(),
            needs: Vec::new(),
            backs: Vec::new(),
            watched: Vec::new(),
            param_memo: HashMap::new(),
            train,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.vals[v.0]
    }

    pub fn value_rc(&self, v: Var) -> Rc<Array2<T>> {
        Rc::clone(&self.vals[v.0])
    }

    pub fn scalar(&self, v: Var) -> T {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar: node has shape {:?}", a.dim());
        a[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn push(&mut self, val: Array2<T>, needs: bool, back: Option<BackFn<T>>) -> Var {
        self.vals.push(Rc::new(val));
        self.needs.push(needs);
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, val: Array2<T>) -> Var {
        self.push(val, false, None)
    }

    /// Non-differentiable input shared without copying.
    pub fn constant_shared(&mut self, val: Rc<Array2<T>>) -> Var {
        self.vals.push(val);
        self.needs.push(false);
        self.backs.push(None);
        Var(self.vals.len() - 1)
    }

    /// Differentiable leaf that is not registered in a parameter store.
    pub fn leaf(&mut self, val: Array2<T>) -> Var {
        self.push(val, true, None)
    }

    /// Enter a stored parameter. Repeated calls for the same id return the
    /// same node, so per-pass gradients accumulate once.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_memo.get(&id.0) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), entry.trainable, None);
        if entry.trainable {
            self.watched.push((id, v));
        }
        self.param_memo.insert(id.0, v);
        v
    }

    /// Runs reverse-mode accumulation from a scalar loss. Consumes the tape:
    /// a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, DiffError> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        let dim = self.vals[loss.0].dim();
        if dim != (1, 1) {
            return Err(DiffError::NonScalarLoss(dim.0, dim.1));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                back(&self.vals, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds this pass's parameter gradients into the store.
    pub fn flush_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for &(id, var) in &self.watched {
            if let Some(g) = grads.of(var) {
                store.accumulate_grad(id, g);
            }
        }
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(va.dim(), vb.dim(), "add: shape mismatch {:?} vs {:?}", va.dim(), vb.dim());
        let out = va.as_ref() + vb.as_ref();
        let needs = self.needs[a.0] || self.needs[b.0];
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].clone().unwrap();
            if na {
                acc(grads, a.0, g.clone());
            }
            if nb {
                acc(grads, b.0, g);
            }
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(va.dim(), vb.dim(), "sub: shape mismatch {:?} vs {:?}", va.dim(), vb.dim());
        let out = va.as_ref() - vb.as_ref();
        let needs = self.needs[a.0] || self.needs[b.0];
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].clone().unwrap();
            if na {
                acc(grads, a.0, g.clone());
            }
            if nb {
                acc(grads, b.0, g.mapv(|x| -x));
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(va.dim(), vb.dim(), "mul: shape mismatch {:?} vs {:?}", va.dim(), vb.dim());
        let out = va.as_ref() * vb.as_ref();
        let needs = self.needs[a.0] || self.needs[b.0];
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push_op(out, needs, move |vals, grads, out_idx| {
            let g = grads[out_idx].clone().unwrap();
            if na {
                acc(grads, a.0, &g * vals[b.0].as_ref());
            }
            if nb {
                acc(grads, b.0, &g * vals[a.0].as_ref());
            }
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(va.dim(), vb.dim(), "div: shape mismatch {:?} vs {:?}", va.dim(), vb.dim());
        let out = va.as_ref() / vb.as_ref();
        let needs = self.needs[a.0] || self.needs[b.0];
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push_op(out, needs, move |vals, grads, out_idx| {
            let g = grads[out_idx].clone().unwrap();
            let bv = vals[b.0].as_ref();
            if na {
                acc(grads, a.0, &g / bv);
            }
            if nb {
                let av = vals[a.0].as_ref();
                let mut d = &g * av;
                Zip::from(&mut d).and(bv).for_each(|x, &b| *x = -*x / (b * b));
                acc(grads, b.0, d);
            }
        })
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.vals[a.0].mapv(|x| x * c);
        let needs = self.needs[a.0];
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].clone().unwrap();
            acc(grads, a.0, g.mapv(|x| x * c));
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul: incompatible shapes {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb.as_ref());
        let needs = self.needs[a.0] || self.needs[b.0];
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push_op(out, needs, move |vals, grads, out_idx| {
            let g = grads[out_idx].clone().unwrap();
            if na {
                acc(grads, a.0, g.dot(&vals[b.0].t()));
            }
            if nb {
                acc(grads, b.0, vals[a.0].t().dot(&g));
            }
        })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.vals[a.0].t().to_owned();
        let needs = self.needs[a.0];
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap().t().to_owned();
            acc(grads, a.0, g);
        })
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.vals[a.0].mapv(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs[a.0];
        self.push_op(out, needs, move |vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let mut d = g.clone();
            Zip::from(&mut d).and(vals[a.0].as_ref()).for_each(|x, &v| {
                if v <= T::zero() {
                    *x = T::zero();
                }
            });
            acc(grads, a.0, d);
        })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.vals[a.0].mapv(gelu_fwd);
        let needs = self.needs[a.0];
        self.push_op(out, needs, move |vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let mut d = g.clone();
            Zip::from(&mut d).and(vals[a.0].as_ref()).for_each(|x, &v| {
                *x = *x * gelu_grad(v);
            });
            acc(grads, a.0, d);
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.vals[a.0].mapv(|x| x.exp());
        let needs = self.needs[a.0];
        self.push_op(out, needs, move |vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let d = g * vals[out_idx].as_ref();
            acc(grads, a.0, d);
        })
    }

    /// Row-stable softmax along the given axis (0 = down columns, 1 = across
    /// rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        assert!(axis < 2, "softmax: axis must be 0 or 1, got {axis}");
        let x = self.vals[a.0].as_ref();
        let out = softmax_fwd(x, axis);
        let needs = self.needs[a.0];
        self.push_op(out, needs, move |vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let y = vals[out_idx].as_ref();
            let mut d = g * y;
            let lanes = Axis(1 - axis);
            for (mut drow, yrow) in d.axis_iter_mut(lanes).zip(y.axis_iter(lanes)) {
                let s = drow.sum();
                Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv = *dv - yv * s);
            }
            acc(grads, a.0, d);
        })
    }

    /// Per-row layer normalization with learned gain/bias (both `1 x d`).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::from_f64(1e-5);
        let xv = self.vals[x.0].as_ref();
        let gv = self.vals[gamma.0].as_ref();
        let bv = self.vals[beta.0].as_ref();
        let d = xv.ncols();
        assert_eq!(
            (gv.dim(), bv.dim()),
            ((1, d), (1, d)),
            "layernorm: gain/bias must be 1x{d}, got {:?} and {:?}",
            gv.dim(),
            bv.dim()
        );
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (i, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / T::from_f64(d as f64);
            let var = row.fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / T::from_f64(d as f64);
            let istd = T::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * istd;
            }
        }
        let mut out = Array2::zeros(xv.raw_dim());
        for i in 0..xv.nrows() {
            for j in 0..d {
                out[[i, j]] = xhat[[i, j]] * gv[[0, j]] + bv[[0, j]];
            }
        }
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        let (nx, ng, nb) = (self.needs[x.0], self.needs[gamma.0], self.needs[beta.0]);
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        self.push_op(out, needs, move |vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap().clone();
            let gv = vals[gamma.0].as_ref();
            let dcols = g.ncols();
            if ng {
                let mut dg = Array2::zeros((1, dcols));
                for i in 0..g.nrows() {
                    for j in 0..dcols {
                        dg[[0, j]] = dg[[0, j]] + g[[i, j]] * xhat[[i, j]];
                    }
                }
                acc(grads, gamma.0, dg);
            }
            if nb {
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(grads, beta.0, db);
            }
            if nx {
                let mut dx = Array2::zeros(g.raw_dim());
                let dn = T::from_f64(dcols as f64);
                for i in 0..g.nrows() {
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..dcols {
                        let dxh = g[[i, j]] * gv[[0, j]];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[[i, j]];
                    }
                    mean_dxhat = mean_dxhat / dn;
                    mean_dxhat_xhat = mean_dxhat_xhat / dn;
                    for j in 0..dcols {
                        let dxh = g[[i, j]] * gv[[0, j]];
                        dx[[i, j]] =
                            (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat) * inv_std[i];
                    }
                }
                acc(grads, x.0, dx);
            }
        })
    }

    // ---- structure ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.vals[parts[0].0].ncols();
        let mut rows = 0;
        for &p in parts {
            let d = self.vals[p.0].dim();
            assert_eq!(d.1, cols, "concat_rows: column mismatch {:?} vs {cols}", d);
            rows += d.0;
        }
        let mut out = Array2::zeros((rows, cols));
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.vals[p.0].as_ref();
            out.slice_mut(ndarray::s![offset..offset + v.nrows(), ..])
                .assign(v);
            spans.push((p.0, offset, v.nrows(), self.needs[p.0]));
            offset += v.nrows();
        }
        let needs = parts.iter().any(|&p| self.needs[p.0]);
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap().clone();
            for &(idx, start, len, n) in &spans {
                if n {
                    let part = g.slice(ndarray::s![start..start + len, ..]).to_owned();
                    acc(grads, idx, part);
                }
            }
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.vals[parts[0].0].nrows();
        let mut cols = 0;
        for &p in parts {
            let d = self.vals[p.0].dim();
            assert_eq!(d.0, rows, "concat_cols: row mismatch {:?} vs {rows}", d);
            cols += d.1;
        }
        let mut out = Array2::zeros((rows, cols));
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.vals[p.0].as_ref();
            out.slice_mut(ndarray::s![.., offset..offset + v.ncols()])
                .assign(v);
            spans.push((p.0, offset, v.ncols(), self.needs[p.0]));
            offset += v.ncols();
        }
        let needs = parts.iter().any(|&p| self.needs[p.0]);
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap().clone();
            for &(idx, start, len, n) in &spans {
                if n {
                    let part = g.slice(ndarray::s![.., start..start + len]).to_owned();
                    acc(grads, idx, part);
                }
            }
        })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.vals[a.0].as_ref();
        assert!(
            start <= end && end <= v.nrows(),
            "slice_rows: range {start}..{end} out of {:?}",
            v.dim()
        );
        let out = v.slice(ndarray::s![start..end, ..]).to_owned();
        let needs = self.needs[a.0];
        let full = v.raw_dim();
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let mut d = Array2::zeros(full);
            d.slice_mut(ndarray::s![start..end, ..]).assign(g);
            acc(grads, a.0, d);
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.vals[a.0].as_ref();
        assert!(
            start <= end && end <= v.ncols(),
            "slice_cols: range {start}..{end} out of {:?}",
            v.dim()
        );
        let out = v.slice(ndarray::s![.., start..end]).to_owned();
        let needs = self.needs[a.0];
        let full = v.raw_dim();
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let mut d = Array2::zeros(full);
            d.slice_mut(ndarray::s![.., start..end]).assign(g);
            acc(grads, a.0, d);
        })
    }

    /// Embedding-style row gather: `out[i, :] = a[ids[i], :]`.
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let v = self.vals[a.0].as_ref();
        for &i in ids {
            assert!(i < v.nrows(), "gather_rows: id {i} out of {:?}", v.dim());
        }
        let mut out = Array2::zeros((ids.len(), v.ncols()));
        for (row, &i) in ids.iter().enumerate() {
            out.row_mut(row).assign(&v.row(i));
        }
        let needs = self.needs[a.0];
        let ids = ids.to_vec();
        let full = v.raw_dim();
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let mut d = Array2::zeros(full);
            for (row, &i) in ids.iter().enumerate() {
                let mut target = d.row_mut(i);
                target += &g.row(row);
            }
            acc(grads, a.0, d);
        })
    }

    /// Message aggregation: `out[ids[i], :] += a[i, :]` over `out_rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, ids: &[usize], out_rows: usize) -> Var {
        let v = self.vals[a.0].as_ref();
        assert_eq!(
            v.nrows(),
            ids.len(),
            "scatter_add_rows: {} rows vs {} ids",
            v.nrows(),
            ids.len()
        );
        for &i in ids {
            assert!(i < out_rows, "scatter_add_rows: id {i} out of {out_rows}");
        }
        let mut out = Array2::zeros((out_rows, v.ncols()));
        for (row, &i) in ids.iter().enumerate() {
            let mut target = out.row_mut(i);
            target += &v.row(row);
        }
        let needs = self.needs[a.0];
        let ids = ids.to_vec();
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let mut d = Array2::zeros((ids.len(), g.ncols()));
            for (row, &i) in ids.iter().enumerate() {
                d.row_mut(row).assign(&g.row(i));
            }
            acc(grads, a.0, d);
        })
    }

    /// Scales row `i` of `a` by `s[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (va, vs) = (self.vals[a.0].as_ref(), self.vals[s.0].as_ref());
        assert_eq!(
            (vs.nrows(), vs.ncols()),
            (va.nrows(), 1),
            "scale_rows: scale must be {}x1, got {:?}",
            va.nrows(),
            vs.dim()
        );
        let mut out = va.clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let c = vs[[i, 0]];
            row.mapv_inplace(|x| x * c);
        }
        let needs = self.needs[a.0] || self.needs[s.0];
        let (na, ns) = (self.needs[a.0], self.needs[s.0]);
        self.push_op(out, needs, move |vals, grads, out_idx| {
            let g = grads[out_idx].clone().unwrap();
            if na {
                let vs = vals[s.0].as_ref();
                let mut d = g.clone();
                for (i, mut row) in d.axis_iter_mut(Axis(0)).enumerate() {
                    let c = vs[[i, 0]];
                    row.mapv_inplace(|x| x * c);
                }
                acc(grads, a.0, d);
            }
            if ns {
                let va = vals[a.0].as_ref();
                let mut d = Array2::zeros((va.nrows(), 1));
                for i in 0..va.nrows() {
                    let mut dot = T::zero();
                    for j in 0..va.ncols() {
                        dot = dot + g[[i, j]] * va[[i, j]];
                    }
                    d[[i, 0]] = dot;
                }
                acc(grads, s.0, d);
            }
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.vals[a.0].sum();
        let needs = self.needs[a.0];
        let full = self.vals[a.0].raw_dim();
        self.push_op(Array2::from_elem((1, 1), s), needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap()[[0, 0]];
            acc(grads, a.0, Array2::from_elem(full, g));
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.vals[a.0].len();
        let s = self.sum_all(a);
        self.mul_scalar(s, T::from_f64(1.0 / n as f64))
    }

    /// Column sums: `n x d -> 1 x d`.
    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].as_ref();
        let out = v.sum_axis(Axis(0)).insert_axis(Axis(0));
        let needs = self.needs[a.0];
        let rows = v.nrows();
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let mut d = Array2::zeros((rows, g.ncols()));
            for mut row in d.axis_iter_mut(Axis(0)) {
                row.assign(&g.row(0));
            }
            acc(grads, a.0, d);
        })
    }

    /// Row sums: `n x d -> n x 1`.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].as_ref();
        let out = v.sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs[a.0];
        let cols = v.ncols();
        self.push_op(out, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].as_ref().unwrap();
            let mut d = Array2::zeros((g.nrows(), cols));
            for (i, mut row) in d.axis_iter_mut(Axis(0)).enumerate() {
                row.fill(g[[i, 0]]);
            }
            acc(grads, a.0, d);
        })
    }

    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let rows = self.vals[a.0].nrows();
        let s = self.sum_axis0(a);
        self.mul_scalar(s, T::from_f64(1.0 / rows as f64))
    }

    // ---- stochastic / special ----

    /// Inverted dropout: surviving entries are scaled by `1/(1-rate)` during
    /// training; evaluation is the identity and draws nothing.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout: bad rate {rate}");
        if !self.train || rate == 0.0 {
            return self.identity(a);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let v = self.vals[a.0].as_ref();
        let mut mask = Array2::zeros(v.raw_dim());
        for m in mask.iter_mut() {
            let u: f64 = rng.gen();
            *m = if u >= rate { keep_scale } else { T::zero() };
        }
        let mask_var = self.constant(mask);
        self.mul(a, mask_var)
    }

    fn identity(&mut self, a: Var) -> Var {
        let val = Rc::clone(&self.vals[a.0]);
        let needs = self.needs[a.0];
        self.vals.push(val);
        self.needs.push(needs);
        let out_idx = self.vals.len() - 1;
        let back: Option<BackFn<T>> = if needs {
            Some(Box::new(move |_vals, grads| {
                let g = grads[out_idx].clone().unwrap();
                acc(grads, a.0, g);
            }))
        } else {
            None
        };
        self.backs.push(back);
        Var(out_idx)
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let val = Rc::clone(&self.vals[a.0]);
        self.vals.push(val);
        self.needs.push(false);
        self.backs.push(None);
        Var(self.vals.len() - 1)
    }

    /// Straight-through substitution: the forward value is exactly `hard`,
    /// the backward pass routes gradients to `soft` unchanged. Equivalent to
    /// `soft + hard - stop_gradient(soft)` without the floating-point
    /// round-trip.
    pub fn straight_through(&mut self, soft: Var, hard: Array2<T>) -> Var {
        assert_eq!(
            self.vals[soft.0].dim(),
            hard.dim(),
            "straight_through: shape mismatch {:?} vs {:?}",
            self.vals[soft.0].dim(),
            hard.dim()
        );
        let needs = self.needs[soft.0];
        self.push_op(hard, needs, move |_vals, grads, out_idx| {
            let g = grads[out_idx].clone().unwrap();
            acc(grads, soft.0, g);
        })
    }

    /// Cross entropy of a `1 x C` logit row against a gold class index.
    pub fn cross_entropy_logits(&mut self, z: Var, target: usize) -> Var {
        let v = self.vals[z.0].as_ref();
        assert_eq!(v.nrows(), 1, "cross_entropy_logits: want 1xC, got {:?}", v.dim());
        assert!(
            target < v.ncols(),
            "cross_entropy_logits: target {target} out of {:?}",
            v.dim()
        );
        let row = v.row(0);
        let m = row.fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
        let sum_exp = row.fold(T::zero(), |s, &x| s + (x - m).exp());
        let lse = m + sum_exp.ln();
        let loss = lse - row[target];
        let needs = self.needs[z.0];
        self.push_op(
            Array2::from_elem((1, 1), loss),
            needs,
            move |vals, grads, out_idx| {
                let g = grads[out_idx].as_ref().unwrap()[[0, 0]];
                let v = vals[z.0].as_ref();
                let row = v.row(0);
                let m = row.fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
                let sum_exp = row.fold(T::zero(), |s, &x| s + (x - m).exp());
                let mut d = Array2::zeros(v.raw_dim());
                for (j, &x) in row.iter().enumerate() {
                    let p = (x - m).exp() / sum_exp;
                    let indicator = if j == target { T::one() } else { T::zero() };
                    d[[0, j]] = (p - indicator) * g;
                }
                acc(grads, z.0, d);
            },
        )
    }

    fn push_op<F>(&mut self, val: Array2<T>, needs: bool, back: F) -> Var
    where
        F: Fn(&[Rc<Array2<T>>], &mut [Option<Array2<T>>], usize) + 'static,
    {
        self.vals.push(Rc::new(val));
        self.needs.push(needs);
        let out_idx = self.vals.len() - 1;
        let boxed: Option<BackFn<T>> = if needs {
            Some(Box::new(move |vals, grads| back(vals, grads, out_idx)))
        } else {
            None
        };
        self.backs.push(boxed);
        Var(out_idx)
    }
}

fn softmax_fwd<T: Scalar>(x: &Array2<T>, axis: usize) -> Array2<T> {
    let mut out = x.clone();
    let lanes = Axis(1 - axis);
    for mut lane in out.axis_iter_mut(lanes) {
        let m = lane.fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
        let mut sum = T::zero();
        for v in lane.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        for v in lane.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn graph() -> Graph<f64> {
        Graph::new(false)
    }

    #[test]
    fn stop_gradient_blocks_backward() {
        let mut g = graph();
        let x = g.leaf(array![[1.0, 2.0]]);
        let y = g.stop_gradient(x);
        let z = g.mul_scalar(y, 3.0);
        let loss = g.sum_all(z);
        // The whole chain is constant from the tape's point of view.
        assert!(!g.needs_grad(loss));
        let grads = g.backward(loss).unwrap();
        assert!(grads.of(x).is_none());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = graph();
        let x = g.constant(array![[0.0, 0.0]]);
        let y = g.softmax(x, 1);
        assert_eq!(g.value(y), &array![[0.5, 0.5]]);
    }

    #[test]
    fn scatter_add_merges_messages() {
        let mut g = graph();
        let x = g.constant(array![[1.0], [2.0]]);
        let y = g.scatter_add_rows(x, &[0, 0], 1);
        assert_eq!(g.value(y), &array![[3.0]]);
    }

    #[test]
    fn matmul_grads_match_by_hand() {
        let mut g = graph();
        let w = g.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let x = g.constant(array![[5.0], [6.0]]);
        let y = g.matmul(w, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        // d sum(Wx) / dW = [x^T; x^T]
        assert_eq!(grads.of(w).unwrap(), &array![[5.0, 6.0], [5.0, 6.0]]);
    }

    #[test]
    fn loss_independent_of_leaf_gives_no_grad() {
        let mut g = graph();
        let w = g.leaf(array![[1.0]]);
        let x = g.leaf(array![[2.0]]);
        let loss = g.sum_all(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.of(w).is_none());
        assert_eq!(grads.of(x).unwrap(), &array![[1.0]]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = graph();
        let x = g.leaf(array![[1.0]]);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = graph();
        let x = g.leaf(array![[1.0, 2.0]]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn matmul_shape_mismatch_names_the_op() {
        let mut g = graph();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.constant(array![[1.0, 2.0]]);
        g.matmul(a, b);
    }

    #[test]
    fn dropout_scales_survivors_and_is_identity_in_eval() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new(true);
        let x = g.constant(Array2::ones((4, 8)));
        let y = g.dropout(x, 0.5, &mut rng);
        for &v in g.value(y).iter() {
            assert!(v == 0.0 || v == 2.0);
        }
        let mut ge = Graph::<f64>::new(false);
        let x = ge.constant(Array2::ones((4, 8)));
        let y = ge.dropout(x, 0.5, &mut rng);
        assert!(ge.value(y).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn straight_through_forwards_hard_and_backpropagates_soft() {
        let mut g = graph();
        let z = g.leaf(array![[1.0, -1.0]]);
        let soft = g.softmax(z, 1);
        let hard = array![[1.0, 0.0]];
        let st = g.straight_through(soft, hard.clone());
        assert_eq!(g.value(st), &hard);
        let picked = g.slice_cols(st, 0, 1);
        let loss = g.sum_all(picked);
        let grads = g.backward(loss).unwrap();
        // Same gradient as taking the soft channel directly.
        let mut g2 = graph();
        let z2 = g2.leaf(array![[1.0, -1.0]]);
        let soft2 = g2.softmax(z2, 1);
        let picked2 = g2.slice_cols(soft2, 0, 1);
        let loss2 = g2.sum_all(picked2);
        let grads2 = g2.backward(loss2).unwrap();
        let a = grads.of(z).unwrap();
        let b = grads2.of(z2).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn determinism_same_inputs_bitwise_equal() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut g = Graph::<f64>::new(true);
            let x = g.leaf(Array2::from_shape_fn((3, 4), |(i, j)| {
                (i * 4 + j) as f64 * 0.37 - 1.0
            }));
            let h = g.gelu(x);
            let d = g.dropout(h, 0.2, &mut rng);
            let s = g.softmax(d, 1);
            let loss = g.mean_all(s);
            let value = g.scalar(loss);
            let grads = g.backward(loss).unwrap();
            (value.to_bits(), grads.of(x).unwrap().mapv(|v| v.to_bits()))
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn cross_entropy_matches_manual_value() {
        let mut g = graph();
        let z = g.leaf(array![[2.0, 0.0, -1.0]]);
        let loss = g.cross_entropy_logits(z, 0);
        let expected = -((2.0f64).exp() / ((2.0f64).exp() + 1.0 + (-1.0f64).exp())).ln();
        assert!((g.scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn param_memoization_accumulates_once() {
        use super::super::{ParamGroup, ParamStore};
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", array![[2.0]], true, ParamGroup::Graph);
        let mut g = Graph::new(false);
        let v1 = g.param(&store, w);
        let v2 = g.param(&store, w);
        assert_eq!(v1, v2);
        let doubled = g.add(v1, v2); // 2w
        let loss = g.sum_all(doubled);
        let grads = g.backward(loss).unwrap();
        g.flush_grads(&grads, &mut store);
        assert_eq!(store.grad(w), &array![[2.0]]);
    }
}
