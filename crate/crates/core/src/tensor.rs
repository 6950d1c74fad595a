//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is a cheap handle onto a graph node holding row-major values.
//! Every primitive computes its forward value eagerly and, when gradients
//! are enabled and an input is tracked, registers an exact analytic
//! backward rule. `backward()` on a scalar replays the graph in reverse
//! topological order and accumulates into each tracked node's `grad`
//! buffer. `detach()` severs the graph: the detached value participates in
//! later computation as a constant.
//!
//! Shape contracts are programming errors and panic with a message naming
//! the primitive and the offending shapes. Graph construction and backward
//! are single-threaded; handles are `Rc`-based and not `Send`.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True while gradient recording is on for this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` with gradient recording disabled. Ops inside produce constant
/// tensors with no parents, so inference passes build no graph. Restores
/// the previous state on exit, including on panic.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

struct BackwardCtx<'a> {
    out_data: &'a [f64],
    out_grad: &'a [f64],
    parents: &'a [Tensor],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx)>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    detached: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Handle onto a graph node. Clones share the node.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("detached", &self.node.detached)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        detached: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Self {
        assert_eq!(
            data.len(),
            numel_of(&shape),
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                detached,
                parents,
                backward_fn,
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        Self::from_parts(shape.to_vec(), data, false, false, Vec::new(), None)
    }

    /// Trainable leaf: participates in backward and accumulates `grad`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Self {
        Self::from_parts(shape.to_vec(), data, true, false, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; numel_of(shape)])
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_detached(&self) -> bool {
        self.node.detached
    }

    /// Copy of the values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item: tensor has {} elements", self.numel());
        self.node.data.borrow()[0]
    }

    /// Copy of the accumulated gradient, if any backward reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite the values in place (optimizer updates, finite differences).
    /// Only meaningful on leaves; interior nodes would go stale silently.
    pub fn set_data(&self, data: &[f64]) {
        assert_eq!(
            data.len(),
            self.numel(),
            "set_data: got {} values for shape {:?}",
            data.len(),
            self.node.shape
        );
        self.node.data.borrow_mut().copy_from_slice(data);
    }

    pub fn apply_to_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.node.data.borrow_mut());
    }

    /// Value-identical constant. Backward treats it as a leaf: no gradient
    /// accumulates on it and none flows through it to its producers.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(
            self.node.shape.clone(),
            self.to_vec(),
            false,
            true,
            Vec::new(),
            None,
        )
    }

    fn tracked(&self) -> bool {
        self.node.requires_grad && !self.node.detached
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        if !self.tracked() {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn make_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: impl Fn(&BackwardCtx) + 'static,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(Tensor::tracked);
        if track {
            Self::from_parts(shape, data, true, false, parents, Some(Box::new(backward_fn)))
        } else {
            Self::from_parts(shape, data, false, false, Vec::new(), None)
        }
    }

    /// Reverse-mode sweep from a scalar. Every reachable tracked tensor gets
    /// its `grad` populated; repeated calls without `zero_grad` accumulate.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward: root must be a scalar, got shape {:?}",
            self.node.shape
        );
        self.accumulate_grad_root();
        for tensor in self.topo_order() {
            let node = &tensor.node;
            let Some(backward_fn) = node.backward_fn.as_ref() else {
                continue;
            };
            let out_grad = match node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let out_data = node.data.borrow();
            backward_fn(&BackwardCtx {
                out_data: &out_data,
                out_grad: &out_grad,
                parents: &node.parents,
            });
        }
    }

    fn accumulate_grad_root(&self) {
        // The root may be an interior op node (tracked) or a lone leaf.
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g[0] += 1.0,
            None => *slot = Some(vec![1.0]),
        }
    }

    /// Reverse DFS post-order: a valid topological order with the root
    /// first, so each node's grad is complete before its backward runs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        // (tensor, parents_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.tracked() && !visited.contains(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order.reverse();
        order
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

/// out[m,n] += a[m,k] @ b[k,n], ikj order so the inner loop is contiguous.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T.
fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n].
fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
    }
}

fn mat_dims(name: &str, t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        other => panic!("{name}: expected a 2-d tensor, got shape {other:?}"),
    }
}

fn last_dim(name: &str, t: &Tensor) -> (usize, usize) {
    let shape = t.shape();
    assert!(!shape.is_empty(), "{name}: zero-rank tensor");
    let last = *shape.last().unwrap();
    (t.numel() / last, last)
}

fn assert_same_shape(name: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{name}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

// ── Primitives ───────────────────────────────────────────────────────

impl Tensor {
    /// 2-d matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = mat_dims("matmul", self);
        let (k2, n) = mat_dims("matmul", rhs);
        assert_eq!(
            k, k2,
            "matmul: inner dims disagree, {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.node.data.borrow(), &rhs.node.data.borrow(), &mut out, m, k, n);
        Tensor::make_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                let a = &ctx.parents[0];
                let b = &ctx.parents[1];
                if a.tracked() {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(ctx.out_grad, &b.node.data.borrow(), &mut da, m, n, k);
                    a.accumulate_grad(&da);
                }
                if b.tracked() {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(&a.node.data.borrow(), ctx.out_grad, &mut db, m, k, n);
                    b.accumulate_grad(&db);
                }
            },
        )
    }

    /// `[m,k] @ [n,k]^T -> [m,n]` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = mat_dims("matmul_nt", self);
        let (n, k2) = mat_dims("matmul_nt", rhs);
        assert_eq!(
            k, k2,
            "matmul_nt: inner dims disagree, {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&self.node.data.borrow(), &rhs.node.data.borrow(), &mut out, m, k, n);
        Tensor::make_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                let a = &ctx.parents[0];
                let b = &ctx.parents[1];
                if a.tracked() {
                    // dA = G @ B
                    let mut da = vec![0.0; m * k];
                    matmul_acc(ctx.out_grad, &b.node.data.borrow(), &mut da, m, n, k);
                    a.accumulate_grad(&da);
                }
                if b.tracked() {
                    // dB = G^T @ A
                    let mut db = vec![0.0; n * k];
                    matmul_tn_acc(ctx.out_grad, &a.node.data.borrow(), &mut db, m, n, k);
                    b.accumulate_grad(&db);
                }
            },
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = mat_dims("transpose", self);
        let src = self.node.data.borrow();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Tensor::make_op(vec![c, r], out, vec![self.clone()], move |ctx| {
            let mut d = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    d[i * c + j] = ctx.out_grad[j * r + i];
                }
            }
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_same_shape("add", self, rhs);
        let out = self
            .node
            .data
            .borrow()
            .iter()
            .zip(rhs.node.data.borrow().iter())
            .map(|(x, y)| x + y)
            .collect();
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                ctx.parents[0].accumulate_grad(ctx.out_grad);
                ctx.parents[1].accumulate_grad(ctx.out_grad);
            },
        )
    }

    /// `[r,c] + [c]` with the vector broadcast over rows.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        let (r, c) = mat_dims("add_row", self);
        assert_eq!(
            row.shape(),
            &[c],
            "add_row: row shape {:?} does not match columns of {:?}",
            row.shape(),
            self.shape()
        );
        let lhs = self.node.data.borrow();
        let v = row.node.data.borrow();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = lhs[i * c + j] + v[j];
            }
        }
        drop((lhs, v));
        Tensor::make_op(
            vec![r, c],
            out,
            vec![self.clone(), row.clone()],
            move |ctx| {
                ctx.parents[0].accumulate_grad(ctx.out_grad);
                if ctx.parents[1].tracked() {
                    let mut d = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += ctx.out_grad[i * c + j];
                        }
                    }
                    ctx.parents[1].accumulate_grad(&d);
                }
            },
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        assert_same_shape("sub", self, rhs);
        let out = self
            .node
            .data
            .borrow()
            .iter()
            .zip(rhs.node.data.borrow().iter())
            .map(|(x, y)| x - y)
            .collect();
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                ctx.parents[0].accumulate_grad(ctx.out_grad);
                if ctx.parents[1].tracked() {
                    let neg: Vec<f64> = ctx.out_grad.iter().map(|g| -g).collect();
                    ctx.parents[1].accumulate_grad(&neg);
                }
            },
        )
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        assert_same_shape("mul", self, rhs);
        let out = self
            .node
            .data
            .borrow()
            .iter()
            .zip(rhs.node.data.borrow().iter())
            .map(|(x, y)| x * y)
            .collect();
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                let a = &ctx.parents[0];
                let b = &ctx.parents[1];
                if a.tracked() {
                    let d: Vec<f64> = ctx
                        .out_grad
                        .iter()
                        .zip(b.node.data.borrow().iter())
                        .map(|(g, y)| g * y)
                        .collect();
                    a.accumulate_grad(&d);
                }
                if b.tracked() {
                    let d: Vec<f64> = ctx
                        .out_grad
                        .iter()
                        .zip(a.node.data.borrow().iter())
                        .map(|(g, x)| g * x)
                        .collect();
                    b.accumulate_grad(&d);
                }
            },
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.node.data.borrow().iter().map(|x| x * c).collect();
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], move |ctx| {
            let d: Vec<f64> = ctx.out_grad.iter().map(|g| g * c).collect();
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.node.data.borrow().iter().map(|x| x + c).collect();
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], |ctx| {
            ctx.parents[0].accumulate_grad(ctx.out_grad);
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.node.data.borrow().iter().map(|x| x.exp()).collect();
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], |ctx| {
            let d: Vec<f64> = ctx
                .out_grad
                .iter()
                .zip(ctx.out_data)
                .map(|(g, y)| g * y)
                .collect();
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    pub fn ln(&self) -> Tensor {
        let src = self.node.data.borrow();
        let out: Vec<f64> = src.iter().map(|x| x.ln()).collect();
        drop(src);
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], |ctx| {
            let a = &ctx.parents[0];
            let d: Vec<f64> = ctx
                .out_grad
                .iter()
                .zip(a.node.data.borrow().iter())
                .map(|(g, x)| g / x)
                .collect();
            a.accumulate_grad(&d);
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .node
            .data
            .borrow()
            .iter()
            .map(|&x| stable_sigmoid(x))
            .collect();
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], |ctx| {
            let d: Vec<f64> = ctx
                .out_grad
                .iter()
                .zip(ctx.out_data)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f64> = self.node.data.borrow().iter().map(|x| x.tanh()).collect();
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], |ctx| {
            let d: Vec<f64> = ctx
                .out_grad
                .iter()
                .zip(ctx.out_data)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    /// `ln(1 + e^x)`, computed as `max(x,0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&self) -> Tensor {
        let src = self.node.data.borrow();
        let out: Vec<f64> = src
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        drop(src);
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], |ctx| {
            let a = &ctx.parents[0];
            let d: Vec<f64> = ctx
                .out_grad
                .iter()
                .zip(a.node.data.borrow().iter())
                .map(|(g, &x)| g * stable_sigmoid(x))
                .collect();
            a.accumulate_grad(&d);
        })
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax_last(&self) -> Tensor {
        let (rows, cols) = last_dim("softmax_last", self);
        let src = self.node.data.borrow();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= sum;
            }
        }
        drop(src);
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], move |ctx| {
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let y = &ctx.out_data[r * cols..(r + 1) * cols];
                let g = &ctx.out_grad[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    d[r * cols + j] = y[j] * (g[j] - dot);
                }
            }
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    /// Log-softmax over the last axis with max-subtraction.
    pub fn log_softmax_last(&self) -> Tensor {
        let (rows, cols) = last_dim("log_softmax_last", self);
        let src = self.node.data.borrow();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        drop(src);
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], move |ctx| {
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let y = &ctx.out_data[r * cols..(r + 1) * cols];
                let g = &ctx.out_grad[r * cols..(r + 1) * cols];
                let gsum: f64 = g.iter().sum();
                for j in 0..cols {
                    d[r * cols + j] = g[j] - y[j].exp() * gsum;
                }
            }
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.node.data.borrow().iter().sum();
        Tensor::make_op(vec![1], vec![s], vec![self.clone()], move |ctx| {
            let d = vec![ctx.out_grad[0]; n];
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        assert!(n > 0, "mean_all: empty tensor");
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&self) -> Tensor {
        let (rows, cols) = last_dim("sum_last", self);
        let src = self.node.data.borrow();
        let out: Vec<f64> = (0..rows)
            .map(|r| src[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        drop(src);
        let mut shape = self.node.shape.clone();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::make_op(shape, out, vec![self.clone()], move |ctx| {
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                for j in 0..cols {
                    d[r * cols + j] = ctx.out_grad[r];
                }
            }
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    /// Mean over the last axis.
    pub fn mean_last(&self) -> Tensor {
        let (_, cols) = last_dim("mean_last", self);
        assert!(cols > 0, "mean_last: empty last axis");
        self.sum_last().scale(1.0 / cols as f64)
    }

    /// Mean over the leading axis: `[r, c] -> [c]`.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = mat_dims("mean_rows", self);
        assert!(r > 0, "mean_rows: no rows");
        let src = self.node.data.borrow();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        drop(src);
        Tensor::make_op(vec![c], out, vec![self.clone()], move |ctx| {
            let inv = 1.0 / r as f64;
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = ctx.out_grad[j] * inv;
                }
            }
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    /// Euclidean norm over the last axis, keeping the axis as size 1.
    pub fn l2_norm_last(&self) -> Tensor {
        let (rows, cols) = last_dim("l2_norm_last", self);
        let src = self.node.data.borrow();
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                src[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        drop(src);
        let mut shape = self.node.shape.clone();
        *shape.last_mut().unwrap() = 1;
        Tensor::make_op(shape, out, vec![self.clone()], move |ctx| {
            let a = &ctx.parents[0];
            let x = a.node.data.borrow();
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let norm = ctx.out_data[r];
                if norm == 0.0 {
                    continue;
                }
                let g = ctx.out_grad[r] / norm;
                for j in 0..cols {
                    d[r * cols + j] = g * x[r * cols + j];
                }
            }
            drop(x);
            a.accumulate_grad(&d);
        })
    }

    /// Rows rescaled to unit Euclidean norm.
    pub fn l2_normalize_last(&self) -> Tensor {
        let (rows, cols) = last_dim("l2_normalize_last", self);
        let src = self.node.data.borrow();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(
                norm > 0.0,
                "l2_normalize_last: zero-norm row {r} cannot be normalized"
            );
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x / norm;
            }
        }
        drop(src);
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], move |ctx| {
            let a = &ctx.parents[0];
            let x = a.node.data.borrow();
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let xr = &x[r * cols..(r + 1) * cols];
                let y = &ctx.out_data[r * cols..(r + 1) * cols];
                let g = &ctx.out_grad[r * cols..(r + 1) * cols];
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                for j in 0..cols {
                    d[r * cols + j] = (g[j] - y[j] * dot) / norm;
                }
            }
            drop(x);
            a.accumulate_grad(&d);
        })
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Tensor {
        let (rows, cols) = last_dim("rms_norm", self);
        assert_eq!(
            gain.shape(),
            &[cols],
            "rms_norm: gain shape {:?} does not match last axis of {:?}",
            gain.shape(),
            self.shape()
        );
        let src = self.node.data.borrow();
        let gn = gain.node.data.borrow();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = row[j] * inv * gn[j];
            }
        }
        drop((src, gn));
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone(), gain.clone()],
            move |ctx| {
                let a = &ctx.parents[0];
                let g_t = &ctx.parents[1];
                let x = a.node.data.borrow();
                let gn = g_t.node.data.borrow();
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                for r in 0..rows {
                    let xr = &x[r * cols..(r + 1) * cols];
                    let gr = &ctx.out_grad[r * cols..(r + 1) * cols];
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                    let rms = (ms + eps).sqrt();
                    let inv = 1.0 / rms;
                    // s = sum_j G_j * gain_j * x_j
                    let mut s = 0.0;
                    for j in 0..cols {
                        s += gr[j] * gn[j] * xr[j];
                        dg[j] += gr[j] * xr[j] * inv;
                    }
                    let coef = s / (cols as f64 * rms * rms * rms);
                    for j in 0..cols {
                        dx[r * cols + j] = gr[j] * gn[j] * inv - xr[j] * coef;
                    }
                }
                drop((x, gn));
                a.accumulate_grad(&dx);
                g_t.accumulate_grad(&dg);
            },
        )
    }

    /// Concatenate along the leading axis; trailing dims must agree.
    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows: no tensors given");
        let tail: Vec<usize> = parts[0].shape()[1..].to_vec();
        let mut rows = 0;
        for p in parts {
            assert_eq!(
                &p.shape()[1..],
                tail.as_slice(),
                "concat_rows: trailing shape mismatch {:?} vs {:?}",
                p.shape(),
                parts[0].shape()
            );
            rows += p.shape()[0];
        }
        let mut data = Vec::with_capacity(rows * numel_of(&tail));
        for p in parts {
            data.extend_from_slice(&p.node.data.borrow());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let sizes: Vec<usize> = parts.iter().map(Tensor::numel).collect();
        Tensor::make_op(shape, data, parts.to_vec(), move |ctx| {
            let mut offset = 0;
            for (p, &sz) in ctx.parents.iter().zip(&sizes) {
                if p.tracked() {
                    p.accumulate_grad(&ctx.out_grad[offset..offset + sz]);
                }
                offset += sz;
            }
        })
    }

    /// Concatenate 2-d tensors along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: no tensors given");
        let (rows, _) = mat_dims("concat_cols", &parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = mat_dims("concat_cols", p);
                assert_eq!(
                    r, rows,
                    "concat_cols: row mismatch {:?} vs {:?}",
                    p.shape(),
                    parts[0].shape()
                );
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut col0 = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.node.data.borrow();
            for r in 0..rows {
                data[r * total + col0..r * total + col0 + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col0 += w;
        }
        let widths_bwd = widths.clone();
        Tensor::make_op(vec![rows, total], data, parts.to_vec(), move |ctx| {
            let mut col0 = 0;
            for (p, &w) in ctx.parents.iter().zip(&widths_bwd) {
                if p.tracked() {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w].copy_from_slice(
                            &ctx.out_grad[r * total + col0..r * total + col0 + w],
                        );
                    }
                    p.accumulate_grad(&d);
                }
                col0 += w;
            }
        })
    }

    /// Rows `[r0, r1)` of the leading axis.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Tensor {
        let rows = self.shape()[0];
        assert!(
            r0 <= r1 && r1 <= rows,
            "slice_rows: range {r0}..{r1} out of bounds for shape {:?}",
            self.shape()
        );
        let stride = self.numel() / rows;
        let data = self.node.data.borrow()[r0 * stride..r1 * stride].to_vec();
        let mut shape = self.node.shape.clone();
        shape[0] = r1 - r0;
        let total = self.numel();
        Tensor::make_op(shape, data, vec![self.clone()], move |ctx| {
            let mut d = vec![0.0; total];
            d[r0 * stride..r1 * stride].copy_from_slice(ctx.out_grad);
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    /// Columns `[c0, c1)` of a 2-d tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Tensor {
        let (rows, cols) = mat_dims("slice_cols", self);
        assert!(
            c0 <= c1 && c1 <= cols,
            "slice_cols: range {c0}..{c1} out of bounds for shape {:?}",
            self.shape()
        );
        let w = c1 - c0;
        let src = self.node.data.borrow();
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&src[r * cols + c0..r * cols + c1]);
        }
        drop(src);
        Tensor::make_op(vec![rows, w], data, vec![self.clone()], move |ctx| {
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                d[r * cols + c0..r * cols + c1].copy_from_slice(&ctx.out_grad[r * w..(r + 1) * w]);
            }
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    /// Replace masked positions with `value`; gradient is zero there.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Tensor {
        assert_eq!(
            mask.len(),
            self.numel(),
            "masked_fill: mask length {} does not match shape {:?}",
            mask.len(),
            self.shape()
        );
        let out: Vec<f64> = self
            .node
            .data
            .borrow()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let mask_bwd = mask.to_vec();
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], move |ctx| {
            let d: Vec<f64> = ctx
                .out_grad
                .iter()
                .zip(&mask_bwd)
                .map(|(&g, &m)| if m { 0.0 } else { g })
                .collect();
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    /// Gather rows of an embedding table: `table[ids[i], :] -> out[i, :]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let (rows, cols) = mat_dims("gather_rows", self);
        for &id in ids {
            assert!(
                id < rows,
                "gather_rows: index {id} out of bounds for {rows} rows"
            );
        }
        let src = self.node.data.borrow();
        let mut data = vec![0.0; ids.len() * cols];
        for (i, &id) in ids.iter().enumerate() {
            data[i * cols..(i + 1) * cols].copy_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        drop(src);
        let ids_bwd = ids.to_vec();
        Tensor::make_op(
            vec![ids.len(), cols],
            data,
            vec![self.clone()],
            move |ctx| {
                if !ctx.parents[0].tracked() {
                    return;
                }
                let mut d = vec![0.0; rows * cols];
                for (i, &id) in ids_bwd.iter().enumerate() {
                    for j in 0..cols {
                        d[id * cols + j] += ctx.out_grad[i * cols + j];
                    }
                }
                ctx.parents[0].accumulate_grad(&d);
            },
        )
    }

    /// Elementwise minimum; gradient follows the selected branch (ties go
    /// to `self`).
    pub fn minimum(&self, rhs: &Tensor) -> Tensor {
        assert_same_shape("minimum", self, rhs);
        let take_self: Vec<bool> = self
            .node
            .data
            .borrow()
            .iter()
            .zip(rhs.node.data.borrow().iter())
            .map(|(x, y)| x <= y)
            .collect();
        let out: Vec<f64> = self
            .node
            .data
            .borrow()
            .iter()
            .zip(rhs.node.data.borrow().iter())
            .map(|(x, y)| x.min(*y))
            .collect();
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                if ctx.parents[0].tracked() {
                    let d: Vec<f64> = ctx
                        .out_grad
                        .iter()
                        .zip(&take_self)
                        .map(|(&g, &s)| if s { g } else { 0.0 })
                        .collect();
                    ctx.parents[0].accumulate_grad(&d);
                }
                if ctx.parents[1].tracked() {
                    let d: Vec<f64> = ctx
                        .out_grad
                        .iter()
                        .zip(&take_self)
                        .map(|(&g, &s)| if s { 0.0 } else { g })
                        .collect();
                    ctx.parents[1].accumulate_grad(&d);
                }
            },
        )
    }

    /// Clamp values into `[lo, hi]`; gradient is zero where clamping bit.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp: lo {lo} exceeds hi {hi}");
        let src = self.node.data.borrow();
        let inside: Vec<bool> = src.iter().map(|&x| (lo..=hi).contains(&x)).collect();
        let out: Vec<f64> = src.iter().map(|&x| x.clamp(lo, hi)).collect();
        drop(src);
        Tensor::make_op(self.node.shape.clone(), out, vec![self.clone()], move |ctx| {
            let d: Vec<f64> = ctx
                .out_grad
                .iter()
                .zip(&inside)
                .map(|(&g, &i)| if i { g } else { 0.0 })
                .collect();
            ctx.parents[0].accumulate_grad(&d);
        })
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape: cannot view shape {:?} as {:?}",
            self.shape(),
            shape
        );
        Tensor::make_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |ctx| {
            ctx.parents[0].accumulate_grad(ctx.out_grad);
        })
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&self) -> Tensor {
        let (r, c) = mat_dims("diag", self);
        assert_eq!(r, c, "diag: matrix is not square, shape {:?}", self.shape());
        let src = self.node.data.borrow();
        let data: Vec<f64> = (0..r).map(|i| src[i * c + i]).collect();
        drop(src);
        Tensor::make_op(vec![r], data, vec![self.clone()], move |ctx| {
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c + i] = ctx.out_grad[i];
            }
            ctx.parents[0].accumulate_grad(&d);
        })
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Gradient checking ────────────────────────────────────────────────

/// Failure modes of [`check_gradient`].
#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("function value is not finite at the evaluation point")]
    NonFinite,
    #[error("function output has {0} elements, expected a scalar")]
    NonScalar(usize),
}

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences with step `eps`. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must be a deterministic function of the tensor's current values; it
/// is re-evaluated `2 * numel` times with perturbed data, under `no_grad`.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&Tensor) -> Tensor,
{
    assert!(eps > 0.0, "check_gradient: eps must be positive");
    let y = f(x);
    if y.numel() != 1 {
        return Err(GradCheckError::NonScalar(y.numel()));
    }
    if !y.item().is_finite() {
        return Err(GradCheckError::NonFinite);
    }
    x.zero_grad();
    y.backward();
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut bumped = base.clone();
        bumped[i] = base[i] + eps;
        x.set_data(&bumped);
        let up = no_grad(|| f(x).item());
        bumped[i] = base[i] - eps;
        x.set_data(&bumped);
        let down = no_grad(|| f(x).item());
        x.set_data(&base);
        if !up.is_finite() || !down.is_finite() {
            return Err(GradCheckError::NonFinite);
        }
        let numeric = (up - down) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
