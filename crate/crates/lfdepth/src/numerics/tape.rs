//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`]; insertion order is a
//! topological order of the graph, so [`Tape::backward`] walks the nodes in
//! reverse exactly once, accumulating gradients additively across fan-out.
//! Gradients only flow into subgraphs that contain a trainable leaf.
//!
//! All loops are single-threaded and run in a fixed order, so a fixed seed
//! gives bitwise-identical results across runs.

use crate::error::{LfError, Result};
use crate::numerics::tensor::{Element, Shape, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// `c[m, n] += a[m, k] * b[k, n]`, all row-major.
///
/// Four output rows share each pass over `b`, which breaks the accumulator
/// dependency chains that otherwise leave the FMA units idle.
fn gemm_nn_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        let a0 = &a[i * k..][..k];
        let a1 = &a[(i + 1) * k..][..k];
        let a2 = &a[(i + 2) * k..][..k];
        let a3 = &a[(i + 3) * k..][..k];
        for kk in 0..k {
            let brow = &b[kk * n..][..n];
            let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            for j in 0..n {
                let bv = brow[j];
                c0[j] = c0[j] + v0 * bv;
                c1[j] = c1[j] + v1 * bv;
                c2[j] = c2[j] + v2 * bv;
                c3[j] = c3[j] + v3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..][..n];
        let arow = &a[i * k..][..k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..][..n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
        i += 1;
    }
}

/// `c[m, n] += a^T * b` where `a` is `[k, m]` and `b` is `[k, n]`.
fn gemm_tn_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for kk in 0..k {
            let arow = &a[kk * m..][..m];
            let brow = &b[kk * n..][..n];
            let (v0, v1, v2, v3) = (arow[i], arow[i + 1], arow[i + 2], arow[i + 3]);
            for j in 0..n {
                let bv = brow[j];
                c0[j] = c0[j] + v0 * bv;
                c1[j] = c1[j] + v1 * bv;
                c2[j] = c2[j] + v2 * bv;
                c3[j] = c3[j] + v3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..][..n];
        for kk in 0..k {
            let av = a[kk * m + i];
            let brow = &b[kk * n..][..n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
        i += 1;
    }
}

/// Gather conv windows into a `[B*OH*OW, KH*KW*CI]` patch matrix.
fn im2col<T: Element>(
    xd: &[T],
    b_n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let kdim = kh * kw * ci;
    let mut p = vec![T::zero(); b_n * oh * ow * kdim];
    let mut row = 0usize;
    for b in 0..b_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut p[row * kdim..][..kdim];
                let mut at = 0usize;
                for ky in 0..kh {
                    let src0 = ((b * h + oy + ky) * w + ox) * ci;
                    dst[at..at + kw * ci].copy_from_slice(&xd[src0..src0 + kw * ci]);
                    at += kw * ci;
                }
                row += 1;
            }
        }
    }
    p
}

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Conv2d { x: Var, kernel: Var, bias: Option<Var> },
    Relu { x: Var },
    BnTrain { x: Var, gamma: Var, beta: Var },
    BnEval { x: Var, gamma: Var, beta: Var },
    MatMul { a: Var, b: Var },
    BmmNT { a: Var, b: Var },
    CenterRelations { f3: Var, h: usize, w: usize },
    CenterSlice { x: Var, off_h: usize, off_w: usize },
    Concat { a: Var, b: Var },
    Reshape { x: Var },
    Mae { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    /// Op-specific saved tensors (batch-norm: mean, inv_std).
    saved: Vec<Tensor<T>>,
}

/// Gradients keyed by [`Var`], produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// The recorded op graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool, saved: Vec<Tensor<T>>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record an input tensor. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable, Vec::new())
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(LfError::Shape(format!("add: {} vs {}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs, Vec::new()))
    }

    /// Valid (no padding) stride-1 2-D convolution.
    ///
    /// `x` is `(B, H, W, Cin)`, `kernel` is `(KH, KW, Cin, Cout)`, `bias` is
    /// `(Cout,)`; the output is `(B, H-KH+1, W-KW+1, Cout)`.
    pub fn conv2d_valid(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.rank() != 4 || ks.rank() != 4 {
            return Err(LfError::Shape(format!(
                "conv2d wants rank-4 input and kernel, got {} and {}",
                xs, ks
            )));
        }
        let (b_n, h, w, ci) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
        let (kh, kw, kci, co) = (ks.dim(0), ks.dim(1), ks.dim(2), ks.dim(3));
        if kci != ci {
            return Err(LfError::Shape(format!("conv2d: input has {ci} channels, kernel expects {kci}")));
        }
        if kh > h || kw > w {
            return Err(LfError::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        if let Some(bv) = bias {
            let bs = self.shape(bv);
            if bs.rank() != 1 || bs.dim(0) != co {
                return Err(LfError::Shape(format!("conv2d: bias shape {bs} wants [{co}]")));
            }
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let xd = self.nodes[x.0].value.data();
        let kd = self.nodes[kernel.0].value.data();
        let px_n = b_n * oh * ow;
        let kdim = kh * kw * ci;
        let mut out = vec![T::zero(); px_n * co];
        if let Some(bs) = bias.map(|bv| self.nodes[bv.0].value.data()) {
            for px in 0..px_n {
                out[px * co..][..co].copy_from_slice(bs);
            }
        }
        // the kernel tensor is already the [KH*KW*CI, CO] matrix row-major
        if kh == 1 && kw == 1 {
            gemm_nn_acc(xd, kd, &mut out, px_n, ci, co);
        } else {
            let p = im2col(xd, b_n, h, w, ci, kh, kw, oh, ow);
            gemm_nn_acc(&p, kd, &mut out, px_n, kdim, co);
        }
        let value = Tensor::from_vec(Shape::d4(b_n, oh, ow, co), out)?;
        let needs = self.needs(x) || self.needs(kernel) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(value, Op::Conv2d { x, kernel, bias }, needs, Vec::new()))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::from_vec(tx.shape(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Relu { x }, needs, Vec::new()))
    }

    /// Batch normalization in training mode: per-channel statistics over the
    /// batch and spatial axes. Returns the normalized output plus the batch
    /// mean and (biased) variance for the caller's running-average update.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let xs = self.shape(x);
        if xs.rank() != 4 {
            return Err(LfError::Shape(format!("batchnorm wants rank-4 input, got {xs}")));
        }
        let (b_n, h, w, c_n) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
        if b_n < 2 {
            return Err(LfError::Argument(format!(
                "batchnorm training mode needs batch >= 2, got {b_n}"
            )));
        }
        self.check_bn_params(gamma, beta, c_n)?;
        let n = (b_n * h * w) as f64;
        let xd = self.nodes[x.0].value.data();
        let mut mean = vec![T::zero(); c_n];
        let mut var = vec![T::zero(); c_n];
        for px in 0..b_n * h * w {
            let row = &xd[px * c_n..][..c_n];
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        let inv_n = T::from_f64c(1.0 / n);
        for m in mean.iter_mut() {
            *m = *m * inv_n;
        }
        for px in 0..b_n * h * w {
            let row = &xd[px * c_n..][..c_n];
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(mean.iter()) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        for s in var.iter_mut() {
            *s = *s * inv_n;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64c(eps)).sqrt())
            .collect();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); xd.len()];
        for px in 0..b_n * h * w {
            let src = &xd[px * c_n..][..c_n];
            let dst = &mut out[px * c_n..][..c_n];
            for c in 0..c_n {
                dst[c] = gd[c] * (src[c] - mean[c]) * inv_std[c] + bd[c];
            }
        }
        let mean_t = Tensor::from_vec(Shape::d1(c_n), mean)?;
        let var_t = Tensor::from_vec(Shape::d1(c_n), var)?;
        let inv_std_t = Tensor::from_vec(Shape::d1(c_n), inv_std)?;
        let value = Tensor::from_vec(xs, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var_out = self.push(
            value,
            Op::BnTrain { x, gamma, beta },
            needs,
            vec![mean_t.clone(), inv_std_t],
        );
        Ok((var_out, mean_t, var_t))
    }

    /// Batch normalization in eval mode, using the provided running
    /// statistics as constants.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x);
        if xs.rank() != 4 {
            return Err(LfError::Shape(format!("batchnorm wants rank-4 input, got {xs}")));
        }
        let c_n = xs.dim(3);
        self.check_bn_params(gamma, beta, c_n)?;
        if running_mean.len() != c_n || running_var.len() != c_n {
            return Err(LfError::Shape(format!(
                "running stats have {} / {} entries, want {c_n}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::from_f64c(eps)).sqrt())
            .collect();
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let md = running_mean.data();
        let mut out = vec![T::zero(); xd.len()];
        for px in 0..xd.len() / c_n {
            let src = &xd[px * c_n..][..c_n];
            let dst = &mut out[px * c_n..][..c_n];
            for c in 0..c_n {
                dst[c] = gd[c] * (src[c] - md[c]) * inv_std[c] + bd[c];
            }
        }
        let mean_t = Tensor::from_vec(Shape::d1(c_n), md.to_vec())?;
        let inv_std_t = Tensor::from_vec(Shape::d1(c_n), inv_std)?;
        let value = Tensor::from_vec(xs, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::BnEval { x, gamma, beta }, needs, vec![mean_t, inv_std_t]))
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, c_n: usize) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s.rank() != 1 || s.dim(0) != c_n {
                return Err(LfError::Shape(format!("batchnorm {name} shape {s} wants [{c_n}]")));
            }
        }
        Ok(())
    }

    /// Plain 2-D matrix product `(M, K) x (K, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa.dim(1) != sb.dim(0) {
            return Err(LfError::Shape(format!("matmul: {sa} x {sb}")));
        }
        let (m, k, n) = (sa.dim(0), sa.dim(1), sb.dim(1));
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..][..k];
            let orow = &mut out[i * n..][..n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bd[kk * n..][..n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let value = Tensor::from_vec(Shape::d2(m, n), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs, Vec::new()))
    }

    /// Batched product against the transpose: `(B, M, K) x (B, N, K)` gives
    /// `(B, M, N)` with `out[b, i, j] = dot(a[b, i, :], b[b, j, :])`.
    ///
    /// This is the relation product `E1 * E2^T`; it is also where most of the
    /// training time goes, hence the transposed scratch buffer.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 3 || sb.rank() != 3 || sa.dim(0) != sb.dim(0) || sa.dim(2) != sb.dim(2) {
            return Err(LfError::Shape(format!("bmm_nt: {sa} x {sb}")));
        }
        let (batch, m, k) = (sa.dim(0), sa.dim(1), sa.dim(2));
        let n = sb.dim(1);
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); batch * m * n];
        let mut bt = vec![T::zero(); k * n];
        for bb in 0..batch {
            let asl = &ad[bb * m * k..][..m * k];
            let bsl = &bd[bb * n * k..][..n * k];
            for j in 0..n {
                for kk in 0..k {
                    bt[kk * n + j] = bsl[j * k + kk];
                }
            }
            let osl = &mut out[bb * m * n..][..m * n];
            for i in 0..m {
                let arow = &asl[i * k..][..k];
                let orow = &mut osl[i * n..][..n];
                for (kk, &av) in arow.iter().enumerate() {
                    let btrow = &bt[kk * n..][..n];
                    for (o, &bv) in orow.iter_mut().zip(btrow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(Shape::d3(batch, m, n), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::BmmNT { a, b }, needs, Vec::new()))
    }

    /// From a relation matrix `(B, H*W, H*W)`, gather the relations between
    /// the center angular row and every patch position, arranged as a
    /// `(B, H, W, W)` feature: channel `w` at spatial `(h, x)` is
    /// `f3[(hc, w), (h, x)]` with `hc = (H-1)/2`.
    pub fn center_relations(&mut self, f3: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(f3);
        if s.rank() != 3 || s.dim(1) != h * w || s.dim(2) != h * w {
            return Err(LfError::Shape(format!(
                "center_relations: {s} does not match H*W = {}",
                h * w
            )));
        }
        let batch = s.dim(0);
        let hw = h * w;
        let hc = (h - 1) / 2;
        let fd = self.nodes[f3.0].value.data();
        let mut out = vec![T::zero(); batch * h * w * w];
        for b in 0..batch {
            let fsl = &fd[b * hw * hw..][..hw * hw];
            for hh in 0..h {
                for x in 0..w {
                    let dst = &mut out[((b * h + hh) * w + x) * w..][..w];
                    let col = hh * w + x;
                    for (ww, d) in dst.iter_mut().enumerate() {
                        *d = fsl[(hc * w + ww) * hw + col];
                    }
                }
            }
        }
        let value = Tensor::from_vec(Shape::d4(batch, h, w, w), out)?;
        let needs = self.needs(f3);
        Ok(self.push(value, Op::CenterRelations { f3, h, w }, needs, Vec::new()))
    }

    /// Centered spatial window `(B, out_h, out_w, C)`; the trimmed margins
    /// must be even so the window is exactly centered.
    pub fn center_slice(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 4 {
            return Err(LfError::Shape(format!("center_slice wants rank-4 input, got {s}")));
        }
        let (b_n, h, w, c_n) = (s.dim(0), s.dim(1), s.dim(2), s.dim(3));
        if out_h > h || out_w > w || (h - out_h) % 2 != 0 || (w - out_w) % 2 != 0 {
            return Err(LfError::Shape(format!(
                "center_slice: cannot center {out_h}x{out_w} inside {h}x{w}"
            )));
        }
        let (off_h, off_w) = ((h - out_h) / 2, (w - out_w) / 2);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); b_n * out_h * out_w * c_n];
        for b in 0..b_n {
            for oy in 0..out_h {
                let src = &xd[((b * h + oy + off_h) * w + off_w) * c_n..][..out_w * c_n];
                let dst = &mut out[((b * out_h + oy) * out_w) * c_n..][..out_w * c_n];
                dst.copy_from_slice(src);
            }
        }
        let value = Tensor::from_vec(Shape::d4(b_n, out_h, out_w, c_n), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::CenterSlice { x, off_h, off_w }, needs, Vec::new()))
    }

    /// Concatenate two `(B, H, W, *)` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 4
            || sb.rank() != 4
            || sa.dim(0) != sb.dim(0)
            || sa.dim(1) != sb.dim(1)
            || sa.dim(2) != sb.dim(2)
        {
            return Err(LfError::Shape(format!("concat_channels: {sa} vs {sb}")));
        }
        let (b_n, h, w) = (sa.dim(0), sa.dim(1), sa.dim(2));
        let (ca, cb) = (sa.dim(3), sb.dim(3));
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); b_n * h * w * (ca + cb)];
        for px in 0..b_n * h * w {
            out[px * (ca + cb)..][..ca].copy_from_slice(&ad[px * ca..][..ca]);
            out[px * (ca + cb) + ca..][..cb].copy_from_slice(&bd[px * cb..][..cb]);
        }
        let value = Tensor::from_vec(Shape::d4(b_n, h, w, ca + cb), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat { a, b }, needs, Vec::new()))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs, Vec::new()))
    }

    /// Mean absolute error between two same-shape tensors, as a scalar.
    /// The subgradient at exact ties is 0.
    pub fn mae_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(LfError::Shape(format!("mae_loss: {sp} vs {st}")));
        }
        let pd = self.nodes[pred.0].value.data();
        let td = self.nodes[target.0].value.data();
        let n = T::from_f64c(pd.len() as f64);
        let sum: T = pd.iter().zip(td).map(|(&p, &t)| (p - t).abs()).sum();
        let value = Tensor::scalar(sum / n);
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(value, Op::Mae { pred, target }, needs, Vec::new()))
    }

    /// Walk the tape backwards from a scalar loss, returning one gradient per
    /// reachable node that asked for one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss).len() != 1 {
            return Err(LfError::Shape(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut Vec<Option<Tensor<T>>>,
        v: Var,
    ) -> &'a mut Tensor<T> {
        let shape = self.shape(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(v) {
                        let buf = self.grad_buf(grads, v);
                        for (o, &gv) in buf.data_mut().iter_mut().zip(g.data()) {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(x) {
                    let xd = self.nodes[x.0].value.data();
                    let buf = self.grad_buf(grads, x);
                    for ((o, &gv), &xv) in buf.data_mut().iter_mut().zip(g.data()).zip(xd) {
                        if xv > T::zero() {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(x) {
                    let buf = self.grad_buf(grads, x);
                    for (o, &gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o = *o + gv;
                    }
                }
            }
            Op::Conv2d { x, kernel, bias } => self.backprop_conv(x, kernel, bias, i, g, grads),
            Op::BnTrain { x, gamma, beta } => self.backprop_bn_train(x, gamma, beta, i, g, grads),
            Op::BnEval { x, gamma, beta } => self.backprop_bn_eval(x, gamma, beta, i, g, grads),
            Op::MatMul { a, b } => self.backprop_matmul(a, b, g, grads),
            Op::BmmNT { a, b } => self.backprop_bmm_nt(a, b, g, grads),
            Op::CenterRelations { f3, h, w } => {
                if self.needs(f3) {
                    let batch = self.shape(f3).dim(0);
                    let hw = h * w;
                    let hc = (h - 1) / 2;
                    let gd = g.data();
                    let buf = self.grad_buf(grads, f3);
                    let bd = buf.data_mut();
                    for b in 0..batch {
                        let bsl = &mut bd[b * hw * hw..][..hw * hw];
                        for hh in 0..h {
                            for x in 0..w {
                                let src = &gd[((b * h + hh) * w + x) * w..][..w];
                                let col = hh * w + x;
                                for (ww, &gv) in src.iter().enumerate() {
                                    let at = (hc * w + ww) * hw + col;
                                    bsl[at] = bsl[at] + gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::CenterSlice { x, off_h, off_w } => {
                if self.needs(x) {
                    let xs = self.shape(x);
                    let (b_n, h, w, c_n) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
                    let os = g.shape();
                    let (out_h, out_w) = (os.dim(1), os.dim(2));
                    let gd = g.data();
                    let buf = self.grad_buf(grads, x);
                    let bd = buf.data_mut();
                    for b in 0..b_n {
                        for oy in 0..out_h {
                            let src = &gd[((b * out_h + oy) * out_w) * c_n..][..out_w * c_n];
                            let dst = &mut bd[((b * h + oy + off_h) * w + off_w) * c_n..][..out_w * c_n];
                            for (o, &gv) in dst.iter_mut().zip(src) {
                                *o = *o + gv;
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let ca = self.shape(a).dim(3);
                let cb = self.shape(b).dim(3);
                let px_n = g.len() / (ca + cb);
                let gd = g.data();
                if self.needs(a) {
                    let buf = self.grad_buf(grads, a);
                    let bd = buf.data_mut();
                    for px in 0..px_n {
                        let src = &gd[px * (ca + cb)..][..ca];
                        let dst = &mut bd[px * ca..][..ca];
                        for (o, &gv) in dst.iter_mut().zip(src) {
                            *o = *o + gv;
                        }
                    }
                }
                if self.needs(b) {
                    let buf = self.grad_buf(grads, b);
                    let bd = buf.data_mut();
                    for px in 0..px_n {
                        let src = &gd[px * (ca + cb) + ca..][..cb];
                        let dst = &mut bd[px * cb..][..cb];
                        for (o, &gv) in dst.iter_mut().zip(src) {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::Mae { pred, target } => {
                let pd = self.nodes[pred.0].value.data();
                let td = self.nodes[target.0].value.data();
                let scale = g.item() / T::from_f64c(pd.len() as f64);
                for (v, flip) in [(pred, false), (target, true)] {
                    if self.needs(v) {
                        let buf = self.grad_buf(grads, v);
                        for ((o, &p), &t) in buf.data_mut().iter_mut().zip(pd).zip(td) {
                            let d = p - t;
                            let s = if d > T::zero() {
                                T::one()
                            } else if d < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            let s = if flip { -s } else { s };
                            *o = *o + s * scale;
                        }
                    }
                }
            }
        }
    }

    fn backprop_conv(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        node: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        let os = self.nodes[node].value.shape();
        let (b_n, h, w, ci) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
        let (kh, kw, _, co) = (ks.dim(0), ks.dim(1), ks.dim(2), ks.dim(3));
        let (oh, ow) = (os.dim(1), os.dim(2));
        let gd = g.data();
        if let Some(bv) = bias {
            if self.needs(bv) {
                let buf = self.grad_buf(grads, bv);
                let bd = buf.data_mut();
                for px in 0..b_n * oh * ow {
                    let row = &gd[px * co..][..co];
                    for (o, &gv) in bd.iter_mut().zip(row) {
                        *o = *o + gv;
                    }
                }
            }
        }
        let px_n = b_n * oh * ow;
        let kdim = kh * kw * ci;
        if self.needs(kernel) {
            let xd = self.nodes[x.0].value.data();
            let buf = self.grad_buf(grads, kernel);
            let kd = buf.data_mut();
            // dK[kdim, co] += P^T * G
            if kh == 1 && kw == 1 {
                gemm_tn_acc(xd, gd, kd, ci, px_n, co);
            } else {
                let p = im2col(xd, b_n, h, w, ci, kh, kw, oh, ow);
                gemm_tn_acc(&p, gd, kd, kdim, px_n, co);
            }
        }
        if self.needs(x) {
            let kd = self.nodes[kernel.0].value.data();
            // K^T as a [CO, kdim] matrix
            let mut kt = vec![T::zero(); co * kdim];
            for i in 0..kdim {
                for j in 0..co {
                    kt[j * kdim + i] = kd[i * co + j];
                }
            }
            let buf = self.grad_buf(grads, x);
            let xd = buf.data_mut();
            if kh == 1 && kw == 1 {
                gemm_nn_acc(gd, &kt, xd, px_n, co, ci);
            } else {
                let mut dp = vec![T::zero(); px_n * kdim];
                gemm_nn_acc(gd, &kt, &mut dp, px_n, co, kdim);
                // scatter the patch gradients back into the input
                let mut row = 0usize;
                for b in 0..b_n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let src = &dp[row * kdim..][..kdim];
                            let mut at = 0usize;
                            for ky in 0..kh {
                                let dst0 = ((b * h + oy + ky) * w + ox) * ci;
                                let dst = &mut xd[dst0..dst0 + kw * ci];
                                for (o, &v) in dst.iter_mut().zip(&src[at..at + kw * ci]) {
                                    *o = *o + v;
                                }
                                at += kw * ci;
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
    }

    fn backprop_bn_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        node: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) {
        let xs = self.shape(x);
        let (b_n, h, w, c_n) = (xs.dim(0), xs.dim(1), xs.dim(2), xs.dim(3));
        let n = b_n * h * w;
        let mean = self.nodes[node].saved[0].data();
        let inv_std = self.nodes[node].saved[1].data();
        let xd = self.nodes[x.0].value.data();
        let gd = g.data();
        // per-channel sums of dy and dy * x_hat
        let mut sum_dy = vec![T::zero(); c_n];
        let mut sum_dy_xhat = vec![T::zero(); c_n];
        for px in 0..n {
            let xr = &xd[px * c_n..][..c_n];
            let gr = &gd[px * c_n..][..c_n];
            for c in 0..c_n {
                let xhat = (xr[c] - mean[c]) * inv_std[c];
                sum_dy[c] = sum_dy[c] + gr[c];
                sum_dy_xhat[c] = sum_dy_xhat[c] + gr[c] * xhat;
            }
        }
        if self.needs(beta) {
            let buf = self.grad_buf(grads, beta);
            for (o, &s) in buf.data_mut().iter_mut().zip(&sum_dy) {
                *o = *o + s;
            }
        }
        if self.needs(gamma) {
            let buf = self.grad_buf(grads, gamma);
            for (o, &s) in buf.data_mut().iter_mut().zip(&sum_dy_xhat) {
                *o = *o + s;
            }
        }
        if self.needs(x) {
            let gammad = self.nodes[gamma.0].value.data();
            let inv_n = T::from_f64c(1.0 / n as f64);
            let buf = self.grad_buf(grads, x);
            let bd = buf.data_mut();
            for px in 0..n {
                let xr = &xd[px * c_n..][..c_n];
                let gr = &gd[px * c_n..][..c_n];
                let or = &mut bd[px * c_n..][..c_n];
                for c in 0..c_n {
                    let xhat = (xr[c] - mean[c]) * inv_std[c];
                    let term = gr[c] - inv_n * sum_dy[c] - xhat * inv_n * sum_dy_xhat[c];
                    or[c] = or[c] + gammad[c] * inv_std[c] * term;
                }
            }
        }
    }

    fn backprop_bn_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        node: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) {
        let xs = self.shape(x);
        let c_n = xs.dim(3);
        let n = g.len() / c_n;
        let mean = self.nodes[node].saved[0].data();
        let inv_std = self.nodes[node].saved[1].data();
        let gd = g.data();
        if self.needs(beta) {
            let buf = self.grad_buf(grads, beta);
            let bd = buf.data_mut();
            for px in 0..n {
                let gr = &gd[px * c_n..][..c_n];
                for (o, &gv) in bd.iter_mut().zip(gr) {
                    *o = *o + gv;
                }
            }
        }
        if self.needs(gamma) {
            let xd = self.nodes[x.0].value.data();
            let buf = self.grad_buf(grads, gamma);
            let bd = buf.data_mut();
            for px in 0..n {
                let gr = &gd[px * c_n..][..c_n];
                let xr = &xd[px * c_n..][..c_n];
                for c in 0..c_n {
                    bd[c] = bd[c] + gr[c] * (xr[c] - mean[c]) * inv_std[c];
                }
            }
        }
        if self.needs(x) {
            let gammad = self.nodes[gamma.0].value.data();
            let buf = self.grad_buf(grads, x);
            let bd = buf.data_mut();
            for px in 0..n {
                let gr = &gd[px * c_n..][..c_n];
                let or = &mut bd[px * c_n..][..c_n];
                for c in 0..c_n {
                    or[c] = or[c] + gr[c] * gammad[c] * inv_std[c];
                }
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = (sa.dim(0), sa.dim(1), sb.dim(1));
        let gd = g.data();
        if self.needs(a) {
            let bd = self.nodes[b.0].value.data();
            let buf = self.grad_buf(grads, a);
            let ad = buf.data_mut();
            // da[i, kk] = dot(g[i, :], b[kk, :])
            for i in 0..m {
                let grow = &gd[i * n..][..n];
                let arow = &mut ad[i * k..][..k];
                for (kk, o) in arow.iter_mut().enumerate() {
                    let brow = &bd[kk * n..][..n];
                    let mut acc = T::zero();
                    for (&gv, &bv) in grow.iter().zip(brow) {
                        acc = acc + gv * bv;
                    }
                    *o = *o + acc;
                }
            }
        }
        if self.needs(b) {
            let adv = self.nodes[a.0].value.data();
            let buf = self.grad_buf(grads, b);
            let bd = buf.data_mut();
            // db[kk, :] += a[i, kk] * g[i, :]
            for i in 0..m {
                let grow = &gd[i * n..][..n];
                let arow = &adv[i * k..][..k];
                for (kk, &av) in arow.iter().enumerate() {
                    let brow = &mut bd[kk * n..][..n];
                    for (o, &gv) in brow.iter_mut().zip(grow) {
                        *o = *o + av * gv;
                    }
                }
            }
        }
    }

    fn backprop_bmm_nt(&self, a: Var, b: Var, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k) = (sa.dim(0), sa.dim(1), sa.dim(2));
        let n = sb.dim(1);
        let gd = g.data();
        let need_a = self.needs(a);
        let need_b = self.needs(b);
        if !need_a && !need_b {
            return;
        }
        // Upstream gradients of the relation product are mostly rows of
        // exact zeros (only the center-row relations are consumed), so
        // skipping zero rows is a large win and changes nothing numerically.
        if need_a {
            let bdv = self.nodes[b.0].value.data();
            let buf = self.grad_buf(grads, a);
            let ad = buf.data_mut();
            for bb in 0..batch {
                let gsl = &gd[bb * m * n..][..m * n];
                let bsl = &bdv[bb * n * k..][..n * k];
                let asl = &mut ad[bb * m * k..][..m * k];
                for i in 0..m {
                    let grow = &gsl[i * n..][..n];
                    if grow.iter().all(|&v| v == T::zero()) {
                        continue;
                    }
                    let arow = &mut asl[i * k..][..k];
                    for (j, &gv) in grow.iter().enumerate() {
                        if gv == T::zero() {
                            continue;
                        }
                        let brow = &bsl[j * k..][..k];
                        for (o, &bv) in arow.iter_mut().zip(brow) {
                            *o = *o + gv * bv;
                        }
                    }
                }
            }
        }
        if need_b {
            let adv = self.nodes[a.0].value.data();
            let buf = self.grad_buf(grads, b);
            let bd = buf.data_mut();
            for bb in 0..batch {
                let gsl = &gd[bb * m * n..][..m * n];
                let asl = &adv[bb * m * k..][..m * k];
                let bsl = &mut bd[bb * n * k..][..n * k];
                for i in 0..m {
                    let grow = &gsl[i * n..][..n];
                    if grow.iter().all(|&v| v == T::zero()) {
                        continue;
                    }
                    let arow = &asl[i * k..][..k];
                    for (j, &gv) in grow.iter().enumerate() {
                        if gv == T::zero() {
                            continue;
                        }
                        let brow = &mut bsl[j * k..][..k];
                        for (o, &av) in brow.iter_mut().zip(arow) {
                            *o = *o + gv * av;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::randn(Shape::d4(2, 5, 7, 3), 1.0, &mut rng(0));
        let xv = tape.leaf(x.clone(), false);
        // 1x1 kernel = identity matrix over channels
        let mut k = Tensor::zeros(Shape::d4(1, 1, 3, 3));
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let kv = tape.leaf(k, false);
        let y = tape.conv2d_valid(xv, kv, None).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv2d_output_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::d4(1, 9, 29, 3)), false);
        let k = tape.leaf(Tensor::zeros(Shape::d4(2, 2, 3, 8)), false);
        let y = tape.conv2d_valid(x, k, None).unwrap();
        assert_eq!(tape.shape(y).dims(), &[1, 8, 28, 8]);
    }

    #[test]
    fn conv2d_shape_mismatch_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::d4(1, 4, 4, 3)), false);
        let k = tape.leaf(Tensor::zeros(Shape::d4(2, 2, 4, 8)), false);
        assert!(matches!(tape.conv2d_valid(x, k, None), Err(LfError::Shape(_))));
        let kbig = tape.leaf(Tensor::zeros(Shape::d4(5, 2, 3, 8)), false);
        assert!(tape.conv2d_valid(x, kbig, None).is_err());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::d1(3), vec![-1.0, 0.0, 2.0]).unwrap(),
            false,
        );
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn batchnorm_train_normalizes_to_beta_gamma() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::randn(Shape::d4(4, 3, 5, 2), 3.0, &mut rng(7)), false);
        let gamma = tape.leaf(Tensor::from_vec(Shape::d1(2), vec![1.5, 0.5]).unwrap(), false);
        let beta = tape.leaf(Tensor::from_vec(Shape::d1(2), vec![-0.25, 2.0]).unwrap(), false);
        let (y, _, _) = tape.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        let yd = tape.value(y).data();
        for c in 0..2 {
            let vals: Vec<f64> = yd.iter().skip(c).step_by(2).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let (g, b) = ([1.5, 0.5][c], [-0.25, 2.0][c]);
            assert!((mean - b).abs() < 1e-6, "mean {mean} want {b}");
            assert!((var - g * g).abs() < 1e-5, "var {var} want {}", g * g);
        }
    }

    #[test]
    fn batchnorm_train_requires_batch_of_two() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::d4(1, 2, 2, 1)), false);
        let gamma = tape.leaf(Tensor::filled(Shape::d1(1), 1.0), false);
        let beta = tape.leaf(Tensor::zeros(Shape::d1(1)), false);
        assert!(matches!(
            tape.batchnorm_train(x, gamma, beta, 1e-5),
            Err(LfError::Argument(_))
        ));
    }

    #[test]
    fn batchnorm_eval_uses_initial_running_stats() {
        // with mean 0 / var 1 and unit gamma, eval is (nearly) the identity
        let mut tape = Tape::<f64>::new();
        let xt = Tensor::randn(Shape::d4(2, 2, 2, 3), 1.0, &mut rng(3));
        let x = tape.leaf(xt.clone(), false);
        let gamma = tape.leaf(Tensor::filled(Shape::d1(3), 1.0), false);
        let beta = tape.leaf(Tensor::zeros(Shape::d1(3)), false);
        let rm = Tensor::zeros(Shape::d1(3));
        let rv = Tensor::filled(Shape::d1(3), 1.0);
        let y = tape.batchnorm_eval(x, gamma, beta, &rm, &rv, 0.0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(xt.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_small_known_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(Shape::d2(2, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap(), false);
        let b = tape.leaf(Tensor::from_vec(Shape::d2(3, 2), vec![7., 8., 9., 10., 11., 12.]).unwrap(), false);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn bmm_nt_matches_manual_dot() {
        let mut tape = Tape::<f64>::new();
        let at = Tensor::randn(Shape::d3(2, 4, 3), 1.0, &mut rng(1));
        let bt = Tensor::randn(Shape::d3(2, 5, 3), 1.0, &mut rng(2));
        let a = tape.leaf(at.clone(), false);
        let b = tape.leaf(bt.clone(), false);
        let y = tape.bmm_nt(a, b).unwrap();
        assert_eq!(tape.shape(y).dims(), &[2, 4, 5]);
        let yd = tape.value(y).data();
        for bb in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    let mut dot = 0.0;
                    for k in 0..3 {
                        dot += at.data()[(bb * 4 + i) * 3 + k] * bt.data()[(bb * 5 + j) * 3 + k];
                    }
                    assert!((yd[(bb * 4 + i) * 5 + j] - dot).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn center_slice_identity_and_window() {
        let mut tape = Tape::<f64>::new();
        let xt = Tensor::randn(Shape::d4(1, 9, 29, 2), 1.0, &mut rng(5));
        let x = tape.leaf(xt.clone(), false);
        let same = tape.center_slice(x, 9, 29).unwrap();
        assert_eq!(tape.value(same).data(), xt.data());
        let inner = tape.center_slice(x, 9, 25).unwrap();
        // columns 2..27
        for yy in 0..9 {
            for xx in 0..25 {
                for c in 0..2 {
                    let got = tape.value(inner).data()[((yy) * 25 + xx) * 2 + c];
                    let want = xt.data()[((yy) * 29 + xx + 2) * 2 + c];
                    assert_eq!(got, want);
                }
            }
        }
        assert!(matches!(tape.center_slice(x, 8, 29), Err(LfError::Shape(_))));
    }

    #[test]
    fn concat_and_reshape_round_trip() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::filled(Shape::d4(1, 2, 2, 1), 1.0), false);
        let b = tape.leaf(Tensor::filled(Shape::d4(1, 2, 2, 2), 2.0), false);
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(y).dims(), &[1, 2, 2, 3]);
        assert_eq!(tape.value(y).data()[..3], [1.0, 2.0, 2.0]);
        let r = tape.reshape(y, Shape::d2(4, 3)).unwrap();
        assert_eq!(tape.shape(r).dims(), &[4, 3]);
    }

    #[test]
    fn mae_loss_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(Shape::d1(2), vec![0.4, 0.1]).unwrap(), false);
        let t = tape.leaf(Tensor::from_vec(Shape::d1(2), vec![0.2, 0.3]).unwrap(), false);
        let l = tape.mae_loss(p, t).unwrap();
        assert!((tape.value(l).item() - 0.2).abs() < 1e-15);
        let same = tape.mae_loss(p, p).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn backward_accumulates_across_fanout() {
        // y = x + x: dy/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(Shape::d1(3), 1.0), true);
        let y = tape.add(x, x).unwrap();
        let t = tape.constant(Tensor::zeros(Shape::d1(3)));
        let loss = tape.mae_loss(y, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for &v in gx.data() {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_skips_constant_subgraphs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(Shape::d1(2), 0.5), false);
        let w = tape.leaf(Tensor::filled(Shape::d1(2), 2.0), true);
        let y = tape.add(x, w).unwrap();
        let t = tape.constant(Tensor::zeros(Shape::d1(2)));
        let loss = tape.mae_loss(y, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(Shape::d1(2), 1.0), true);
        assert!(tape.backward(x).is_err());
    }
}
