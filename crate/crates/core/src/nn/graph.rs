//! Eager reverse-mode differentiation on a tape.
//!
//! Every operation computes its output immediately and records what the
//! backward pass needs. Gradients are accumulated in place, parents always
//! precede children on the tape, and ties in `max_over_time` route the
//! gradient to the first maximal index.

use thiserror::Error;

use super::tensor::Tensor;

/// Probabilities are clamped to this margin inside the cross-entropy loss so
/// saturated sigmoids cannot produce infinite loss values.
const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("loss is not a finite scalar")]
    NonFiniteLoss,
}

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Node {
    Leaf,
    /// (m,k) x (k,n) -> (m,n)
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// (m,n) + (n,) broadcast over rows.
    AddRow { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    OneMinus { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    /// Same-padded stride-1 convolution: x (N,Cin,L), w (Cout,Cin,K), b (Cout,).
    Conv1d { x: usize, w: usize, b: usize, pad_left: usize },
    /// Training-mode batch norm over (N,C,L); normalizes each channel over NxL.
    BnTrain { x: usize, gamma: usize, beta: usize, xhat: Tensor, inv_std: Vec<f64> },
    /// Eval-mode batch norm using frozen running statistics.
    BnEval { x: usize, gamma: usize, beta: usize, xhat: Tensor, scale: Vec<f64> },
    /// (N,L,D) -> (N,D) at time index t.
    SliceTime { x: usize, t: usize },
    /// L tensors of (N,H) -> (N,L,H).
    StackTime { xs: Vec<usize> },
    /// D tensors of (N,L) -> (N,L,D).
    StackFeatures { xs: Vec<usize> },
    Reshape { x: usize },
    /// (N,L,C) -> (N,C); saves the first maximal index per (n,c).
    MaxOverTime { x: usize, argmax: Vec<usize> },
    /// Mean over rows of the summed per-class binary cross-entropy.
    Bce { probs: usize, targets: Tensor },
}

/// The tape: forward values plus the per-node backward recipe.
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { values: Vec::new(), nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, node: Node) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Node::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(tb.shape().len(), 2, "matmul rhs must be rank 2");
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        {
            let (ad, bd, od) = (ta.data(), tb.data(), out.data_mut());
            for i in 0..m {
                let out_row = &mut od[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = ad[i * k + l];
                    let b_row = &bd[l * n..(l + 1) * n];
                    for (o, bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        self.push(out, Node::MatMul { a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "add shape mismatch");
        let mut out = self.values[a.0].clone();
        out.add_assign(&self.values[b.0]);
        self.push(out, Node::Add { a: a.0, b: b.0 })
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[bias.0]);
        let n = *ta.shape().last().expect("add_row on scalar");
        assert_eq!(tb.shape(), &[n], "bias must match trailing dimension");
        let mut out = ta.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        self.push(out, Node::AddRow { a: a.0, bias: bias.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "mul shape mismatch");
        let mut out = self.values[a.0].clone();
        for (o, bv) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o *= bv;
        }
        self.push(out, Node::Mul { a: a.0, b: b.0 })
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        for o in out.data_mut() {
            *o = 1.0 - *o;
        }
        self.push(out, Node::OneMinus { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        self.push(out, Node::Relu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        for o in out.data_mut() {
            *o = sigmoid(*o);
        }
        self.push(out, Node::Sigmoid { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        for o in out.data_mut() {
            *o = o.tanh();
        }
        self.push(out, Node::Tanh { a: a.0 })
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        assert_eq!(tx.shape().len(), 3, "conv1d input must be (N,Cin,L)");
        assert_eq!(tw.shape().len(), 3, "conv1d weight must be (Cout,Cin,K)");
        let (batch, c_in, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, c_in2, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        assert_eq!(c_in, c_in2, "conv1d channel mismatch");
        assert_eq!(tb.shape(), &[c_out], "conv1d bias mismatch");
        // Same padding for stride 1: total K-1, extra on the right for even K.
        let pad_left = (k - 1) / 2;
        let mut out = Tensor::zeros(&[batch, c_out, len]);
        {
            let (xd, wd, bd, od) = (tx.data(), tw.data(), tb.data(), out.data_mut());
            for n in 0..batch {
                for co in 0..c_out {
                    let out_row = &mut od[(n * c_out + co) * len..(n * c_out + co + 1) * len];
                    out_row.fill(bd[co]);
                    for ci in 0..c_in {
                        let x_row = &xd[(n * c_in + ci) * len..(n * c_in + ci + 1) * len];
                        let w_row = &wd[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                        for (kk, &wv) in w_row.iter().enumerate() {
                            let shift = kk as isize - pad_left as isize;
                            let lo = 0.max(-shift) as usize;
                            let hi = (len as isize).min(len as isize - shift) as usize;
                            let src = &x_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                            for (o, xv) in out_row[lo..hi].iter_mut().zip(src) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Node::Conv1d { x: x.0, w: w.0, b: b.0, pad_left })
    }

    /// Returns the output plus the biased per-channel batch mean and variance
    /// so the caller can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Tensor, Tensor) {
        let tx = &self.values[x.0];
        assert_eq!(tx.shape().len(), 3, "batchnorm input must be (N,C,L)");
        let (batch, chans, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert_eq!(self.values[gamma.0].shape(), &[chans]);
        assert_eq!(self.values[beta.0].shape(), &[chans]);
        let m = (batch * len) as f64;
        let mut mean = Tensor::zeros(&[chans]);
        let mut var = Tensor::zeros(&[chans]);
        let xd = tx.data();
        for c in 0..chans {
            let mut sum = 0.0;
            for n in 0..batch {
                let row = &xd[(n * chans + c) * len..(n * chans + c + 1) * len];
                sum += row.iter().sum::<f64>();
            }
            let mu = sum / m;
            let mut sq = 0.0;
            for n in 0..batch {
                let row = &xd[(n * chans + c) * len..(n * chans + c + 1) * len];
                sq += row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean.data_mut()[c] = mu;
            var.data_mut()[c] = sq / m;
        }
        let mut inv_std = vec![0.0; chans];
        for c in 0..chans {
            inv_std[c] = 1.0 / (var.data()[c] + eps).sqrt();
        }
        let mut xhat = Tensor::zeros(&[batch, chans, len]);
        {
            let xh = xhat.data_mut();
            for n in 0..batch {
                for c in 0..chans {
                    let base = (n * chans + c) * len;
                    let (mu, is) = (mean.data()[c], inv_std[c]);
                    for t in 0..len {
                        xh[base + t] = (xd[base + t] - mu) * is;
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[batch, chans, len]);
        {
            let (gd, bd, od) = (self.values[gamma.0].data(), self.values[beta.0].data(), out.data_mut());
            for n in 0..batch {
                for c in 0..chans {
                    let base = (n * chans + c) * len;
                    for t in 0..len {
                        od[base + t] = gd[c] * xhat.data()[base + t] + bd[c];
                    }
                }
            }
        }
        let node = Node::BnTrain { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std };
        let v = self.push(out, node);
        (v, mean, var)
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Var {
        let tx = &self.values[x.0];
        assert_eq!(tx.shape().len(), 3, "batchnorm input must be (N,C,L)");
        let (batch, chans, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert_eq!(running_mean.shape(), &[chans]);
        assert_eq!(running_var.shape(), &[chans]);
        let mut xhat = Tensor::zeros(&[batch, chans, len]);
        let mut scale = vec![0.0; chans];
        {
            let (xd, xh) = (tx.data(), xhat.data_mut());
            for c in 0..chans {
                let inv = 1.0 / (running_var.data()[c] + eps).sqrt();
                scale[c] = self.values[gamma.0].data()[c] * inv;
                let mu = running_mean.data()[c];
                for n in 0..batch {
                    let base = (n * chans + c) * len;
                    for t in 0..len {
                        xh[base + t] = (xd[base + t] - mu) * inv;
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[batch, chans, len]);
        {
            let (gd, bd, od) = (self.values[gamma.0].data(), self.values[beta.0].data(), out.data_mut());
            for n in 0..batch {
                for c in 0..chans {
                    let base = (n * chans + c) * len;
                    for t in 0..len {
                        od[base + t] = gd[c] * xhat.data()[base + t] + bd[c];
                    }
                }
            }
        }
        self.push(out, Node::BnEval { x: x.0, gamma: gamma.0, beta: beta.0, xhat, scale })
    }

    pub fn slice_time(&mut self, x: Var, t: usize) -> Var {
        let tx = &self.values[x.0];
        assert_eq!(tx.shape().len(), 3, "slice_time input must be (N,L,D)");
        let (batch, len, dim) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert!(t < len);
        let mut out = Tensor::zeros(&[batch, dim]);
        for n in 0..batch {
            let src = &tx.data()[(n * len + t) * dim..(n * len + t + 1) * dim];
            out.data_mut()[n * dim..(n + 1) * dim].copy_from_slice(src);
        }
        self.push(out, Node::SliceTime { x: x.0, t })
    }

    pub fn stack_time(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (batch, dim) = {
            let s = self.values[xs[0].0].shape();
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let len = xs.len();
        let mut out = Tensor::zeros(&[batch, len, dim]);
        for (t, v) in xs.iter().enumerate() {
            let tv = &self.values[v.0];
            assert_eq!(tv.shape(), &[batch, dim], "stack_time shape mismatch at step {t}");
            for n in 0..batch {
                let dst = (n * len + t) * dim;
                out.data_mut()[dst..dst + dim].copy_from_slice(&tv.data()[n * dim..(n + 1) * dim]);
            }
        }
        self.push(out, Node::StackTime { xs: xs.iter().map(|v| v.0).collect() })
    }

    pub fn stack_features(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (batch, len) = {
            let s = self.values[xs[0].0].shape();
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let dim = xs.len();
        let mut out = Tensor::zeros(&[batch, len, dim]);
        for (d, v) in xs.iter().enumerate() {
            let tv = &self.values[v.0];
            assert_eq!(tv.shape(), &[batch, len], "stack_features shape mismatch at head {d}");
            for n in 0..batch {
                for t in 0..len {
                    out.data_mut()[(n * len + t) * dim + d] = tv.data()[n * len + t];
                }
            }
        }
        self.push(out, Node::StackFeatures { xs: xs.iter().map(|v| v.0).collect() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.values[x.0].clone().reshaped(shape);
        self.push(out, Node::Reshape { x: x.0 })
    }

    pub fn max_over_time(&mut self, x: Var) -> Var {
        let tx = &self.values[x.0];
        assert_eq!(tx.shape().len(), 3, "max_over_time input must be (N,L,C)");
        let (batch, len, chans) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert!(len > 0);
        let mut out = Tensor::zeros(&[batch, chans]);
        let mut argmax = vec![0usize; batch * chans];
        for n in 0..batch {
            for c in 0..chans {
                let mut best = tx.at3(n, 0, c);
                let mut best_t = 0;
                for t in 1..len {
                    let v = tx.at3(n, t, c);
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                out.data_mut()[n * chans + c] = best;
                argmax[n * chans + c] = best_t;
            }
        }
        self.push(out, Node::MaxOverTime { x: x.0, argmax })
    }

    /// Binary cross-entropy between per-class probabilities and 0/1 targets,
    /// summed over classes and averaged over the batch.
    pub fn bce_loss(&mut self, probs: Var, targets: &Tensor) -> Var {
        let tp = &self.values[probs.0];
        assert_eq!(tp.shape(), targets.shape(), "bce target shape mismatch");
        assert_eq!(tp.shape().len(), 2, "bce input must be (N,C)");
        let rows = tp.shape()[0] as f64;
        let mut total = 0.0;
        for (&p, &y) in tp.data().iter().zip(targets.data()) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let out = Tensor::scalar(total / rows);
        self.push(out, Node::Bce { probs: probs.0, targets: targets.clone() })
    }

    /// Reverse pass from a scalar loss. Returns gradients for the requested
    /// leaf variables; leaves the graph untouched. Variables that do not
    /// participate in the loss get an exactly-zero gradient.
    pub fn backward(&self, loss: Var, wanted: &[Var]) -> Result<Vec<Tensor>, GraphError> {
        let lv = &self.values[loss.0];
        if lv.len() != 1 || !lv.is_finite() {
            return Err(GraphError::NonFiniteLoss);
        }
        let mut grads: Vec<Tensor> = vec![Tensor::empty(); self.values.len()];
        grads[loss.0] = Tensor::scalar(1.0);
        for id in (0..=loss.0).rev() {
            if grads[id].is_empty() {
                continue;
            }
            if matches!(self.nodes[id], Node::Leaf) {
                continue; // keep leaf grads for the caller
            }
            let g = std::mem::replace(&mut grads[id], Tensor::empty());
            self.propagate(id, &g, &mut grads);
        }
        Ok(wanted
            .iter()
            .map(|v| {
                if grads[v.0].is_empty() {
                    Tensor::zeros(self.values[v.0].shape())
                } else {
                    std::mem::replace(&mut grads[v.0], Tensor::empty())
                }
            })
            .collect())
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Tensor], id: usize) -> &'a mut Tensor {
        if grads[id].is_empty() {
            grads[id] = Tensor::zeros(self.values[id].shape());
        }
        &mut grads[id]
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Tensor]) {
        match &self.nodes[id] {
            Node::Leaf => {}
            Node::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.values[*a].shape();
                    (s[0], s[1])
                };
                let n = self.values[*b].shape()[1];
                {
                    let bd = self.values[*b].data();
                    let da = self.grad_slot(grads, *a).data_mut();
                    for i in 0..m {
                        let g_row = &g.data()[i * n..(i + 1) * n];
                        for l in 0..k {
                            let b_row = &bd[l * n..(l + 1) * n];
                            let mut dot = 0.0;
                            for (gv, bv) in g_row.iter().zip(b_row) {
                                dot += gv * bv;
                            }
                            da[i * k + l] += dot;
                        }
                    }
                }
                {
                    let ad = self.values[*a].data();
                    let db = self.grad_slot(grads, *b).data_mut();
                    for i in 0..m {
                        let g_row = &g.data()[i * n..(i + 1) * n];
                        for l in 0..k {
                            let av = ad[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            let db_row = &mut db[l * n..(l + 1) * n];
                            for (dv, gv) in db_row.iter_mut().zip(g_row) {
                                *dv += av * gv;
                            }
                        }
                    }
                }
            }
            Node::Add { a, b } => {
                self.grad_slot(grads, *a).add_assign(g);
                self.grad_slot(grads, *b).add_assign(g);
            }
            Node::AddRow { a, bias } => {
                self.grad_slot(grads, *a).add_assign(g);
                let n = self.values[*bias].shape()[0];
                let db = self.grad_slot(grads, *bias).data_mut();
                for row in g.data().chunks_exact(n) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
            Node::Mul { a, b } => {
                {
                    let bd = self.values[*b].data();
                    let da = self.grad_slot(grads, *a).data_mut();
                    for ((d, gv), bv) in da.iter_mut().zip(g.data()).zip(bd) {
                        *d += gv * bv;
                    }
                }
                {
                    let ad = self.values[*a].data();
                    let db = self.grad_slot(grads, *b).data_mut();
                    for ((d, gv), av) in db.iter_mut().zip(g.data()).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Node::OneMinus { a } => {
                let da = self.grad_slot(grads, *a).data_mut();
                for (d, gv) in da.iter_mut().zip(g.data()) {
                    *d -= gv;
                }
            }
            Node::Relu { a } => {
                let xv = self.values[*a].data();
                let da = self.grad_slot(grads, *a).data_mut();
                for ((d, gv), xv) in da.iter_mut().zip(g.data()).zip(xv) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Node::Sigmoid { a } => {
                let yv = self.values[id].data();
                let da = self.grad_slot(grads, *a).data_mut();
                for ((d, gv), y) in da.iter_mut().zip(g.data()).zip(yv) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Node::Tanh { a } => {
                let yv = self.values[id].data();
                let da = self.grad_slot(grads, *a).data_mut();
                for ((d, gv), y) in da.iter_mut().zip(g.data()).zip(yv) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Node::Conv1d { x, w, b, pad_left } => {
                let (batch, c_in, len) = {
                    let s = self.values[*x].shape();
                    (s[0], s[1], s[2])
                };
                let (c_out, k) = {
                    let s = self.values[*w].shape();
                    (s[0], s[2])
                };
                {
                    let db = self.grad_slot(grads, *b).data_mut();
                    for n in 0..batch {
                        for co in 0..c_out {
                            let g_row = &g.data()[(n * c_out + co) * len..(n * c_out + co + 1) * len];
                            db[co] += g_row.iter().sum::<f64>();
                        }
                    }
                }
                {
                    let xd = self.values[*x].data();
                    let dw = self.grad_slot(grads, *w).data_mut();
                    for n in 0..batch {
                        for co in 0..c_out {
                            let g_row = &g.data()[(n * c_out + co) * len..(n * c_out + co + 1) * len];
                            for ci in 0..c_in {
                                let x_row = &xd[(n * c_in + ci) * len..(n * c_in + ci + 1) * len];
                                for kk in 0..k {
                                    let shift = kk as isize - *pad_left as isize;
                                    let lo = 0.max(-shift) as usize;
                                    let hi = (len as isize).min(len as isize - shift) as usize;
                                    let src = &x_row
                                        [(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                                    let mut dot = 0.0;
                                    for (gv, xv) in g_row[lo..hi].iter().zip(src) {
                                        dot += gv * xv;
                                    }
                                    dw[(co * c_in + ci) * k + kk] += dot;
                                }
                            }
                        }
                    }
                }
                {
                    let wd = self.values[*w].data();
                    let dx = self.grad_slot(grads, *x).data_mut();
                    for n in 0..batch {
                        for co in 0..c_out {
                            let g_row = &g.data()[(n * c_out + co) * len..(n * c_out + co + 1) * len];
                            for ci in 0..c_in {
                                let dx_row = &mut dx[(n * c_in + ci) * len..(n * c_in + ci + 1) * len];
                                for kk in 0..k {
                                    let wv = wd[(co * c_in + ci) * k + kk];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let shift = kk as isize - *pad_left as isize;
                                    let lo = 0.max(shift) as usize;
                                    let hi = (len as isize).min(len as isize + shift) as usize;
                                    let src = &g_row
                                        [(lo as isize - shift) as usize..(hi as isize - shift) as usize];
                                    for (d, gv) in dx_row[lo..hi].iter_mut().zip(src) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Node::BnTrain { x, gamma, beta, xhat, inv_std } => {
                let (batch, chans, len) = {
                    let s = self.values[*x].shape();
                    (s[0], s[1], s[2])
                };
                let m = (batch * len) as f64;
                let gd = self.values[*gamma].data().to_vec();
                // Per-channel reductions of dy and dy*xhat.
                let mut sum_dy = vec![0.0; chans];
                let mut sum_dy_xhat = vec![0.0; chans];
                for n in 0..batch {
                    for c in 0..chans {
                        let base = (n * chans + c) * len;
                        for t in 0..len {
                            let gv = g.data()[base + t];
                            sum_dy[c] += gv;
                            sum_dy_xhat[c] += gv * xhat.data()[base + t];
                        }
                    }
                }
                {
                    let dbeta = self.grad_slot(grads, *beta).data_mut();
                    for c in 0..chans {
                        dbeta[c] += sum_dy[c];
                    }
                }
                {
                    let dgamma = self.grad_slot(grads, *gamma).data_mut();
                    for c in 0..chans {
                        dgamma[c] += sum_dy_xhat[c];
                    }
                }
                {
                    let dx = self.grad_slot(grads, *x).data_mut();
                    for n in 0..batch {
                        for c in 0..chans {
                            let base = (n * chans + c) * len;
                            let coef = gd[c] * inv_std[c] / m;
                            for t in 0..len {
                                let gv = g.data()[base + t];
                                let xh = xhat.data()[base + t];
                                dx[base + t] += coef * (m * gv - sum_dy[c] - xh * sum_dy_xhat[c]);
                            }
                        }
                    }
                }
            }
            Node::BnEval { x, gamma, beta, xhat, scale } => {
                let (batch, chans, len) = {
                    let s = self.values[*x].shape();
                    (s[0], s[1], s[2])
                };
                let mut sum_dy = vec![0.0; chans];
                let mut sum_dy_xhat = vec![0.0; chans];
                for n in 0..batch {
                    for c in 0..chans {
                        let base = (n * chans + c) * len;
                        for t in 0..len {
                            let gv = g.data()[base + t];
                            sum_dy[c] += gv;
                            sum_dy_xhat[c] += gv * xhat.data()[base + t];
                        }
                    }
                }
                {
                    let dbeta = self.grad_slot(grads, *beta).data_mut();
                    for c in 0..chans {
                        dbeta[c] += sum_dy[c];
                    }
                }
                {
                    let dgamma = self.grad_slot(grads, *gamma).data_mut();
                    for c in 0..chans {
                        dgamma[c] += sum_dy_xhat[c];
                    }
                }
                {
                    let dx = self.grad_slot(grads, *x).data_mut();
                    for n in 0..batch {
                        for c in 0..chans {
                            let base = (n * chans + c) * len;
                            for t in 0..len {
                                dx[base + t] += g.data()[base + t] * scale[c];
                            }
                        }
                    }
                }
            }
            Node::SliceTime { x, t } => {
                let (len, dim) = {
                    let s = self.values[*x].shape();
                    (s[1], s[2])
                };
                let batch = self.values[*x].shape()[0];
                let dx = self.grad_slot(grads, *x).data_mut();
                for n in 0..batch {
                    let dst = (n * len + *t) * dim;
                    for d in 0..dim {
                        dx[dst + d] += g.data()[n * dim + d];
                    }
                }
            }
            Node::StackTime { xs } => {
                let len = xs.len();
                let (batch, dim) = {
                    let s = self.values[xs[0]].shape();
                    (s[0], s[1])
                };
                for (t, xid) in xs.iter().enumerate() {
                    let dxt = self.grad_slot(grads, *xid).data_mut();
                    for n in 0..batch {
                        let src = (n * len + t) * dim;
                        for d in 0..dim {
                            dxt[n * dim + d] += g.data()[src + d];
                        }
                    }
                }
            }
            Node::StackFeatures { xs } => {
                let dim = xs.len();
                let (batch, len) = {
                    let s = self.values[xs[0]].shape();
                    (s[0], s[1])
                };
                for (d, xid) in xs.iter().enumerate() {
                    let dxd = self.grad_slot(grads, *xid).data_mut();
                    for n in 0..batch {
                        for t in 0..len {
                            dxd[n * len + t] += g.data()[(n * len + t) * dim + d];
                        }
                    }
                }
            }
            Node::Reshape { x } => {
                let dx = self.grad_slot(grads, *x);
                for (d, gv) in dx.data_mut().iter_mut().zip(g.data()) {
                    *d += gv;
                }
            }
            Node::MaxOverTime { x, argmax } => {
                let (len, chans) = {
                    let s = self.values[*x].shape();
                    (s[1], s[2])
                };
                let batch = self.values[*x].shape()[0];
                let dx = self.grad_slot(grads, *x).data_mut();
                for n in 0..batch {
                    for c in 0..chans {
                        let t = argmax[n * chans + c];
                        dx[(n * len + t) * chans + c] += g.data()[n * chans + c];
                    }
                }
            }
            Node::Bce { probs, targets } => {
                let rows = self.values[*probs].shape()[0] as f64;
                let gs = g.item();
                let pd = self.values[*probs].data();
                let dp = self.grad_slot(grads, *probs).data_mut();
                for ((d, &p), &y) in dp.iter_mut().zip(pd).zip(targets.data()) {
                    if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                        *d += gs * (p - y) / (p * (1.0 - p)) / rows;
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn activations_hit_known_points() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 3], vec![-2.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
    }

    #[test]
    fn conv1d_same_padding_preserves_length() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 81], vec![1.0; 81]));
        let w = g.leaf(Tensor::from_vec(&[1, 1, 3], vec![1.0, 1.0, 1.0]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv1d(x, w, b);
        assert_eq!(g.value(y).shape(), &[1, 1, 81]);
        // Interior sums three ones, the two edges only two.
        assert_eq!(g.value(y).data()[0], 2.0);
        assert_eq!(g.value(y).data()[40], 3.0);
        assert_eq!(g.value(y).data()[80], 2.0);
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        // loss = sum(w * x) via matmul against a column of ones.
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(&[1, 3], vec![0.3, -0.7, 0.2]));
        let x = g.leaf(Tensor::from_vec(&[3, 1], vec![2.0, 4.0, -1.0]));
        let prod = g.matmul(w, x);
        let grads = g.backward(prod, &[w]).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0, -1.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero_grad() {
        let mut g = Graph::new();
        let used = g.leaf(Tensor::from_vec(&[1, 1], vec![3.0]));
        let unused = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0; 4]));
        let y = g.sigmoid(used);
        let loss = g.reshape(y, &[1]);
        let grads = g.backward(Var(loss.0), &[unused]).unwrap();
        assert!(grads[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_over_time_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 3, 1], vec![0.5, 0.9, 0.9]));
        let y = g.max_over_time(x);
        assert_eq!(g.value(y).data(), &[0.9]);
        let loss = g.reshape(y, &[1]);
        let grads = g.backward(loss, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(f64::NAN));
        assert_eq!(g.backward(x, &[]), Err(GraphError::NonFiniteLoss));
    }
}
