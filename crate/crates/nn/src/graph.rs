//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products into the
//! nodes that require gradients. Nodes whose ancestors never require gradients
//! are skipped entirely, so evaluating a network with frozen weights and a
//! differentiable input only pays for the input gradient.

use crate::error::{shape_err, NnError, Result};
use crate::resize::{bilinear_taps, resize_plane, resize_plane_adjoint, Tap};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        e: Var,
    },
    Resize {
        x: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factors: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Same-padded 2D convolution. `w` is `[c_out, c_in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc_in, k, k2) = self.value(w).dims4()?;
        if wc_in != c_in || k != k2 || k % 2 == 0 {
            return shape_err(
                "conv2d",
                format!("input {:?} vs kernel {:?}", self.value(x).shape(), self.value(w).shape()),
            );
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return shape_err("conv2d", format!("bias {:?}", self.value(b).shape()));
            }
        }
        let hw = h * wd;
        let kk = c_in * k * k;
        let mut out = Tensor::zeros(&[n, c_out, h, wd]);
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for item in 0..n {
                let xi = &xv[item * c_in * hw..(item + 1) * c_in * hw];
                let src: &[f64] = if k == 1 {
                    xi
                } else {
                    im2col(xi, c_in, h, wd, k, &mut cols);
                    &cols
                };
                let oi = &mut od[item * c_out * hw..(item + 1) * c_out * hw];
                gemm(c_out, kk, hw, wv, (kk, 1), src, (hw, 1), oi, false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for item in 0..n {
                    for co in 0..c_out {
                        let base = (item * c_out + co) * hw;
                        od[base..base + hw].iter_mut().for_each(|v| *v += bv[co]);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b }, rg))
    }

    /// `x: [n, f_in]`, `w: [f_out, f_in]`, `b: [f_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f_in) = self.value(x).dims2()?;
        let (f_out, wf_in) = self.value(w).dims2()?;
        if wf_in != f_in {
            return shape_err(
                "linear",
                format!("input {:?} vs weight {:?}", self.value(x).shape(), self.value(w).shape()),
            );
        }
        let mut out = Tensor::zeros(&[n, f_out]);
        gemm(
            n,
            f_in,
            f_out,
            self.value(x).data(),
            (f_in, 1),
            self.value(w).data(),
            (1, f_in),
            out.data_mut(),
            false,
        );
        if let Some(b) = b {
            if self.value(b).shape() != [f_out] {
                return shape_err("linear", format!("bias {:?}", self.value(b).shape()));
            }
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(f_out) {
                row.iter_mut().zip(&bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(NnError::InvalidArgument(format!(
                "{c} channels cannot be split into {groups} groups"
            )));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err("group_norm", "affine parameters must have one entry per channel");
        }
        let cg = c / groups;
        let m = cg * h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        let od = out.data_mut();
        for item in 0..n {
            for g in 0..groups {
                let start = (item * c + g * cg) * h * w;
                let seg = &xv[start..start + m];
                let mu = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                let rs = 1.0 / (var + EPS).sqrt();
                for ch in 0..cg {
                    let cidx = g * cg + ch;
                    let off = ch * h * w;
                    for p in 0..h * w {
                        od[start + off + p] = (seg[off + p] - mu) * rs * gv[cidx] + bv[cidx];
                    }
                }
                mean.push(mu);
                rstd.push(rs);
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let out = Tensor::from_vec(src.shape(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Silu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Adds `e: [n, c]` to every pixel of channel `c` of `x: [n, c, h, w]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(e).shape() != [n, c] {
            return shape_err(
                "add_channel",
                format!("{:?} vs {:?}", self.value(x).shape(), self.value(e).shape()),
            );
        }
        let mut out = self.value(x).clone();
        let ev = self.value(e).data();
        for (plane, &bias) in out.data_mut().chunks_mut(h * w).zip(ev) {
            plane.iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.any_grad(&[x, e]);
        Ok(self.push(out, Op::AddChannel { x, e }, rg))
    }

    /// Bilinear resize of every plane to `(oh, ow)`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 {
            return Err(NnError::InvalidArgument("resize target must be nonempty".into()));
        }
        if (oh, ow) == (h, w) {
            return Ok(x);
        }
        let rows = bilinear_taps(h, oh);
        let cols = bilinear_taps(w, ow);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let xv = self.value(x).data();
        for (src, dst) in xv.chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            resize_plane(src, h, w, &rows, &cols, dst);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Resize { x, rows, cols }, rg))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(
                "concat",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for item in 0..n {
            data.extend_from_slice(&av[item * ca * hw..(item + 1) * ca * hw]);
            data.extend_from_slice(&bv[item * cb * hw..(item + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Multiplies batch item `i` by the constant `factors[i]`.
    pub fn scale(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let n = self.value(x).shape()[0];
        if factors.len() != n {
            return shape_err("scale", format!("{} factors for batch of {}", factors.len(), n));
        }
        let mut out = self.value(x).clone();
        let per = out.numel() / n.max(1);
        for (chunk, f) in out.data_mut().chunks_mut(per.max(1)).zip(factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::Scale {
                x,
                factors: factors.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates the given output cotangents back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return shape_err(
                    "backward",
                    format!("seed {:?} for node {:?}", g.shape(), self.value(v).shape()),
                );
            }
            accumulate(&mut grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                }
                Op::Conv2d { x, w, b } => self.conv2d_backward(&mut grads, &gout, *x, *w, *b)?,
                Op::Linear { x, w, b } => self.linear_backward(&mut grads, &gout, *x, *w, *b)?,
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => self.group_norm_backward(&mut grads, &gout, *x, *gamma, *beta, *groups, mean, rstd)?,
                Op::Silu { x } => {
                    if self.requires_grad(*x) {
                        let xv = self.value(*x).data();
                        let data = xv
                            .iter()
                            .zip(gout.data())
                            .map(|(&v, &g)| {
                                let s = 1.0 / (1.0 + (-v).exp());
                                g * s * (1.0 + v * (1.0 - s))
                            })
                            .collect();
                        accumulate(&mut grads, *x, Tensor::from_vec(gout.shape(), data)?);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, gout.clone());
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, gout);
                    }
                }
                Op::AddChannel { x, e } => {
                    if self.requires_grad(*e) {
                        let (n, c, h, w) = gout.dims4()?;
                        let data = gout.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                        accumulate(&mut grads, *e, Tensor::from_vec(&[n, c], data)?);
                    }
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, gout);
                    }
                }
                Op::Resize { x, rows, cols } => {
                    if self.requires_grad(*x) {
                        let (n, c, h, w) = self.value(*x).dims4()?;
                        let (oh, ow) = (rows.len(), cols.len());
                        let mut gin = Tensor::zeros(&[n, c, h, w]);
                        for (go, gi) in gout.data().chunks(oh * ow).zip(gin.data_mut().chunks_mut(h * w)) {
                            resize_plane_adjoint(go, w, rows, cols, gi);
                        }
                        accumulate(&mut grads, *x, gin);
                    }
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.value(*a).dims4()?;
                    let cb = self.value(*b).shape()[1];
                    let hw = h * w;
                    let gd = gout.data();
                    if self.requires_grad(*a) {
                        let mut data = Vec::with_capacity(n * ca * hw);
                        for item in 0..n {
                            let base = item * (ca + cb) * hw;
                            data.extend_from_slice(&gd[base..base + ca * hw]);
                        }
                        accumulate(&mut grads, *a, Tensor::from_vec(&[n, ca, h, w], data)?);
                    }
                    if self.requires_grad(*b) {
                        let mut data = Vec::with_capacity(n * cb * hw);
                        for item in 0..n {
                            let base = item * (ca + cb) * hw + ca * hw;
                            data.extend_from_slice(&gd[base..base + cb * hw]);
                        }
                        accumulate(&mut grads, *b, Tensor::from_vec(&[n, cb, h, w], data)?);
                    }
                }
                Op::Scale { x, factors } => {
                    if self.requires_grad(*x) {
                        let mut g = gout;
                        let per = g.numel() / factors.len().max(1);
                        for (chunk, f) in g.data_mut().chunks_mut(per.max(1)).zip(factors) {
                            chunk.iter_mut().for_each(|v| *v *= f);
                        }
                        accumulate(&mut grads, *x, g);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<Tensor>],
        gout: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
    ) -> Result<()> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, _, k, _) = self.value(w).dims4()?;
        let hw = h * wd;
        let kk = c_in * k * k;
        let gd = gout.data();
        if let Some(b) = b.filter(|b| self.requires_grad(*b)) {
            let mut gb = Tensor::zeros(&[c_out]);
            for item in 0..n {
                for co in 0..c_out {
                    let base = (item * c_out + co) * hw;
                    gb.data_mut()[co] += gd[base..base + hw].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, gb);
        }
        let need_w = self.requires_grad(w);
        let need_x = self.requires_grad(x);
        if !need_w && !need_x {
            return Ok(());
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut gw = Tensor::zeros(self.value(w).shape());
        let mut gx = Tensor::zeros(self.value(x).shape());
        let mut cols = vec![0.0; kk * hw];
        let mut dcols = vec![0.0; kk * hw];
        for item in 0..n {
            let gi = &gd[item * c_out * hw..(item + 1) * c_out * hw];
            let xi = &xv[item * c_in * hw..(item + 1) * c_in * hw];
            if need_w {
                let src: &[f64] = if k == 1 {
                    xi
                } else {
                    im2col(xi, c_in, h, wd, k, &mut cols);
                    &cols
                };
                // dW += dOut · colsᵀ
                gemm(c_out, hw, kk, gi, (hw, 1), src, (1, hw), gw.data_mut(), true);
            }
            if need_x {
                let gxi = &mut gx.data_mut()[item * c_in * hw..(item + 1) * c_in * hw];
                if k == 1 {
                    gemm(kk, c_out, hw, wv, (1, kk), gi, (hw, 1), gxi, false);
                } else {
                    // dcols = Wᵀ · dOut, then scatter back to image layout.
                    gemm(kk, c_out, hw, wv, (1, kk), gi, (hw, 1), &mut dcols, false);
                    col2im(&dcols, c_in, h, wd, k, gxi);
                }
            }
        }
        if need_w {
            accumulate(grads, w, gw);
        }
        if need_x {
            accumulate(grads, x, gx);
        }
        Ok(())
    }

    fn linear_backward(
        &self,
        grads: &mut [Option<Tensor>],
        gout: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
    ) -> Result<()> {
        let (n, f_in) = self.value(x).dims2()?;
        let (f_out, _) = self.value(w).dims2()?;
        if let Some(b) = b.filter(|b| self.requires_grad(*b)) {
            let mut gb = Tensor::zeros(&[f_out]);
            for row in gout.data().chunks(f_out) {
                gb.data_mut().iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            accumulate(grads, b, gb);
        }
        if self.requires_grad(w) {
            let mut gw = Tensor::zeros(&[f_out, f_in]);
            gemm(
                f_out,
                n,
                f_in,
                gout.data(),
                (1, f_out),
                self.value(x).data(),
                (f_in, 1),
                gw.data_mut(),
                false,
            );
            accumulate(grads, w, gw);
        }
        if self.requires_grad(x) {
            let mut gx = Tensor::zeros(&[n, f_in]);
            gemm(
                n,
                f_out,
                f_in,
                gout.data(),
                (f_out, 1),
                self.value(w).data(),
                (f_in, 1),
                gx.data_mut(),
                false,
            );
            accumulate(grads, x, gx);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        grads: &mut [Option<Tensor>],
        gout: &Tensor,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[f64],
        rstd: &[f64],
    ) -> Result<()> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let cg = c / groups;
        let hw = h * w;
        let m = (cg * hw) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let gd = gout.data();
        let mut ggamma = Tensor::zeros(&[c]);
        let mut gbeta = Tensor::zeros(&[c]);
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        for item in 0..n {
            for g in 0..groups {
                let gi = item * groups + g;
                let (mu, rs) = (mean[gi], rstd[gi]);
                let start = (item * c + g * cg) * hw;
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ch in 0..cg {
                    let cidx = g * cg + ch;
                    for p in 0..hw {
                        let i = start + ch * hw + p;
                        let xhat = (xv[i] - mu) * rs;
                        ggamma.data_mut()[cidx] += gd[i] * xhat;
                        gbeta.data_mut()[cidx] += gd[i];
                        let dxhat = gd[i] * gv[cidx];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                let gxd = gx.data_mut();
                for ch in 0..cg {
                    let cidx = g * cg + ch;
                    for p in 0..hw {
                        let i = start + ch * hw + p;
                        let xhat = (xv[i] - mu) * rs;
                        let dxhat = gd[i] * gv[cidx];
                        gxd[i] = rs / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        }
        if self.requires_grad(gamma) {
            accumulate(grads, gamma, ggamma);
        }
        if self.requires_grad(beta) {
            accumulate(grads, beta, gbeta);
        }
        if self.requires_grad(x) {
            accumulate(grads, x, gx);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `c (m x n) = a (m x k) · b (k x n)` (+ `c` when `accumulate`), with explicit strides
/// `(row_stride, col_stride)` so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c_in: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, d) in drow.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c_in: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            prow[sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}
