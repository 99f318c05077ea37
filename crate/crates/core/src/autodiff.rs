//! Tape-based reverse-mode automatic differentiation for the handful of
//! operations the encoders and the contrastive loss need.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations append nodes
//! and return [`Var`] handles; [`Tape::backward`] walks the nodes in reverse
//! and accumulates parameter gradients into the [`ParamStore`]. A tape can be
//! differentiated once; a second call fails with [`Error::StaleTape`].
//!
//! Sequence tensors are laid out `[batch, channels, time]`, row-major.

use rand::Rng;

use crate::error::{Error, Result};

/// Threshold on a series' sample standard deviation below which its Pearson
/// similarity is undefined.
pub const SIM_DEGENERATE_SD: f64 = 1e-8;

/// A dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// The parameters of a model, addressed by [`ParamId`] and unique name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let grad = vec![0.0; value.numel()];
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv1d { x: Var, w: Var, b: Option<Var>, kernel: usize, dilation: usize },
    Gelu { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    PearsonSims(Box<PearsonCache>),
    InfoNce { sims: Var, matched: Vec<usize> },
}

#[derive(Debug)]
struct PearsonCache {
    anchor: Var,
    cands: Var,
    index: Vec<Vec<usize>>,
    /// centred, unit-norm copies of each series; zero rows mark degenerate ones
    anchor_unit: Vec<f64>,
    anchor_norm: Vec<f64>,
    cand_unit: Vec<f64>,
    cand_norm: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    degenerate_sims: usize,
}

fn check_3d(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, t] => Ok((b, c, t)),
        _ => Err(Error::ShapeMismatch(format!("{what} must be [batch, channels, time], got {shape:?}"))),
    }
}

/// Standard-normal CDF.
fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `x * Phi(x)` with the exact error-function CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    x * phi_cdf(x)
}

/// Centres `x` and scales it to unit norm; returns the centred norm, or
/// `None` (leaving `out` zeroed) when the sample standard deviation is at or
/// below [`SIM_DEGENERATE_SD`].
fn unit_centred(x: &[f64], out: &mut [f64]) -> Option<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let norm = ss.sqrt();
    if n < 2 || !((ss / (n - 1) as f64).sqrt() > SIM_DEGENERATE_SD) {
        out.iter_mut().for_each(|v| *v = 0.0);
        return None;
    }
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) / norm;
    }
    Some(norm)
}

/// `c[m x n] += a[m x k] * b[k x n]` over strided views.
#[allow(clippy::too_many_arguments)]
#[inline]
unsafe fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    rsa: usize,
    csa: usize,
    b: *const f64,
    rsb: usize,
    csb: usize,
    c: *mut f64,
    rsc: usize,
    csc: usize,
) {
    matrixmultiply::dgemm(
        m, k, n, 1.0, a, rsa as isize, csa as isize, b, rsb as isize, csb as isize, 1.0, c, rsc as isize,
        csc as isize,
    );
}

/// Valid output range `[t0, t1)` for a tap with input shift `shift`.
fn tap_range(t: usize, shift: isize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (t as isize - shift.max(0)).max(0) as usize;
    (t0.min(t1), t1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of degenerate series pairs whose similarity was forced to zero.
    pub fn degenerate_sims(&self) -> usize {
        self.degenerate_sims
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone() }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite forward value");
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; gradients are not propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, false, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.shape.clone(), p.value.data.clone(), true, Op::Param(id))
    }

    /// Pointwise affine map over channels: `y[:, t] = W x[:, t] + b` with
    /// `W: [out, in]`. Shares its kernel with [`Tape::conv1d`] (`K = 1`).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::ShapeMismatch(format!("linear weight must be [out, in], got {ws:?}")));
        }
        self.conv_impl(x, w, b, ws[0], ws[1], 1, 1)
    }

    /// "Same"-padded dilated 1-D cross-correlation, `W: [out, in, K]`, `K` odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let [c_out, c_in, k] = ws[..] else {
            return Err(Error::ShapeMismatch(format!("conv weight must be [out, in, K], got {ws:?}")));
        };
        if k % 2 == 0 || dilation == 0 {
            return Err(Error::ShapeMismatch(format!("kernel {k} must be odd and dilation {dilation} positive")));
        }
        self.conv_impl(x, w, b, c_out, c_in, k, dilation)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_impl(&mut self, x: Var, w: Var, b: Option<Var>, c_out: usize, c_in: usize, k: usize, dil: usize) -> Result<Var> {
        let (bs, cx, t) = check_3d(self.shape(x), "conv input")?;
        if cx != c_in {
            return Err(Error::ShapeMismatch(format!("input has {cx} channels, weight expects {c_in}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::ShapeMismatch(format!("bias shape {:?} != [{c_out}]", self.shape(b))));
            }
        }
        let mut y = vec![0.0; bs * c_out * t];
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            for row in y.chunks_exact_mut(t).enumerate() {
                let bias = bv[row.0 % c_out];
                row.1.iter_mut().for_each(|v| *v = bias);
            }
        }
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let half = (k - 1) / 2;
            for bi in 0..bs {
                for tap in 0..k {
                    let shift = (tap as isize - half as isize) * dil as isize;
                    let (t0, t1) = tap_range(t, shift);
                    if t1 <= t0 {
                        continue;
                    }
                    // SAFETY: all offsets stay within the buffers for the given strides and extents.
                    unsafe {
                        gemm_acc(
                            c_out,
                            c_in,
                            t1 - t0,
                            wv.as_ptr().add(tap),
                            c_in * k,
                            k,
                            xv.as_ptr().add(bi * c_in * t + (t0 as isize + shift) as usize),
                            t,
                            1,
                            y.as_mut_ptr().add(bi * c_out * t + t0),
                            t,
                            1,
                        );
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(vec![bs, c_out, t], y, rg, Op::Conv1d { x, w, b, kernel: k, dilation: dil }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, y, rg, Op::Gelu { x })
    }

    /// Inverted dropout: in training mode each value is kept with
    /// probability `1 - p` and scaled by `1 / (1 - p)`; otherwise identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { scale }).collect();
        let y = self.nodes[x.0].value.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(shape, y, rg, Op::Dropout { x, mask }))
    }

    /// Elementwise sum of two equally shaped tensors (residual connection).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let y = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, y, rg, Op::Add { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.needs(x);
        self.push(vec![], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs(x);
        self.push(vec![], vec![s], rg, Op::Mean { x })
    }

    /// Per-dimension Pearson similarities between anchor latents
    /// `[B, D, T]` and candidate latents `[U, D, T]`.
    ///
    /// `index[b]` lists the candidate rows compared with anchor `b`; the
    /// output is `[B, M, D]` with `M = index[b].len()`. A series with
    /// (near-)zero variance yields similarity 0 and no gradient when
    /// `strict` is false, and an error otherwise.
    pub fn pearson_sims(&mut self, anchor: Var, cands: Var, index: &[Vec<usize>], strict: bool) -> Result<Var> {
        let (b, d, t) = check_3d(self.shape(anchor), "anchor latents")?;
        let (u, dc, tc) = check_3d(self.shape(cands), "candidate latents")?;
        if (d, t) != (dc, tc) {
            return Err(Error::ShapeMismatch(format!("anchor [{d}, {t}] vs candidates [{dc}, {tc}]")));
        }
        if index.len() != b {
            return Err(Error::ShapeMismatch(format!("{} index rows for {b} anchors", index.len())));
        }
        let m = index.first().map_or(0, Vec::len);
        if m == 0 || index.iter().any(|r| r.len() != m || r.iter().any(|&i| i >= u)) {
            return Err(Error::ShapeMismatch("candidate index rows must be equal-length and in range".into()));
        }

        let normalize = |values: &[f64], rows: usize| -> (Vec<f64>, Vec<f64>, Vec<usize>) {
            let mut unit = vec![0.0; rows * t];
            let mut norms = vec![0.0; rows];
            let mut bad = Vec::new();
            for r in 0..rows {
                match unit_centred(&values[r * t..(r + 1) * t], &mut unit[r * t..(r + 1) * t]) {
                    Some(n) => norms[r] = n,
                    None => bad.push(r),
                }
            }
            (unit, norms, bad)
        };
        let (anchor_unit, anchor_norm, bad_a) = normalize(&self.nodes[anchor.0].value, b * d);
        let (cand_unit, cand_norm, bad_c) = normalize(&self.nodes[cands.0].value, u * d);
        if strict {
            if let Some(&r) = bad_a.first().or(bad_c.first()) {
                return Err(Error::DegenerateChannel { channel: r % d, sd: 0.0 });
            }
        }
        self.degenerate_sims += bad_a.len() + bad_c.len();

        let mut out = vec![0.0; b * m * d];
        for bi in 0..b {
            for (j, &ci) in index[bi].iter().enumerate() {
                for di in 0..d {
                    let a = &anchor_unit[(bi * d + di) * t..(bi * d + di + 1) * t];
                    let c = &cand_unit[(ci * d + di) * t..(ci * d + di + 1) * t];
                    out[(bi * m + j) * d + di] = a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
                }
            }
        }
        let rg = self.needs(anchor) || self.needs(cands);
        let cache = PearsonCache { anchor, cands, index: index.to_vec(), anchor_unit, anchor_norm, cand_unit, cand_norm };
        Ok(self.push(vec![b, m, d], out, rg, Op::PearsonSims(Box::new(cache))))
    }

    /// Contrastive loss over similarities `[B, M, D]`:
    /// the batch mean of `sum_d -log softmax_i(s[b, i, d])[matched[b]]`.
    pub fn infonce(&mut self, sims: Var, matched: &[usize]) -> Result<Var> {
        let (b, m, d) = check_3d(self.shape(sims), "similarities")?;
        if matched.len() != b || matched.iter().any(|&p| p >= m) {
            return Err(Error::ShapeMismatch("matched indices must cover the batch and be in range".into()));
        }
        let s = &self.nodes[sims.0].value;
        let mut total = 0.0;
        for bi in 0..b {
            for di in 0..d {
                let at = |i: usize| s[(bi * m + i) * d + di];
                let max = (0..m).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..m).map(|i| (at(i) - max).exp()).sum::<f64>().ln();
                total += lse - at(matched[bi]);
            }
        }
        let rg = self.needs(sims);
        Ok(self.push(vec![], vec![total / b as f64], rg, Op::InfoNce { sims, matched: matched.to_vec() }))
    }

    /// Reverse pass from the scalar `loss`, accumulating into `store` grads.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    for (acc, v) in store.get_mut(*pid).grad.iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::Conv1d { x, w, b, kernel, dilation } => {
                    let (bs, c_out, t) = (node.shape[0], node.shape[1], node.shape[2]);
                    let c_in = self.nodes[x.0].shape[1];
                    let (k, dil) = (*kernel, *dilation);
                    let half = (k - 1) / 2;
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    if let Some(b) = b.filter(|b| self.nodes[b.0].requires_grad) {
                        let gb = grad_slot(&mut grads, b, c_out);
                        for (row, chunk) in g.chunks_exact(t).enumerate() {
                            gb[row % c_out] += chunk.iter().sum::<f64>();
                        }
                    }
                    if self.nodes[w.0].requires_grad {
                        let gw = grad_slot(&mut grads, *w, c_out * c_in * k);
                        for bi in 0..bs {
                            for tap in 0..k {
                                let shift = (tap as isize - half as isize) * dil as isize;
                                let (t0, t1) = tap_range(t, shift);
                                if t1 <= t0 {
                                    continue;
                                }
                                // SAFETY: strided views stay inside g, x and gw.
                                unsafe {
                                    gemm_acc(
                                        c_out,
                                        t1 - t0,
                                        c_in,
                                        g.as_ptr().add(bi * c_out * t + t0),
                                        t,
                                        1,
                                        xv.as_ptr().add(bi * c_in * t + (t0 as isize + shift) as usize),
                                        1,
                                        t,
                                        gw.as_mut_ptr().add(tap),
                                        c_in * k,
                                        k,
                                    );
                                }
                            }
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        let gx = grad_slot(&mut grads, *x, bs * c_in * t);
                        for bi in 0..bs {
                            for tap in 0..k {
                                let shift = (tap as isize - half as isize) * dil as isize;
                                let (t0, t1) = tap_range(t, shift);
                                if t1 <= t0 {
                                    continue;
                                }
                                // SAFETY: strided views stay inside w, g and gx.
                                unsafe {
                                    gemm_acc(
                                        c_in,
                                        c_out,
                                        t1 - t0,
                                        wv.as_ptr().add(tap),
                                        k,
                                        c_in * k,
                                        g.as_ptr().add(bi * c_out * t + t0),
                                        t,
                                        1,
                                        gx.as_mut_ptr().add(bi * c_in * t + (t0 as isize + shift) as usize),
                                        t,
                                        1,
                                    );
                                }
                            }
                        }
                    }
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let gx = grad_slot(&mut grads, *x, xv.len());
                    for ((acc, gi), &v) in gx.iter_mut().zip(&g).zip(xv) {
                        *acc += gi * (phi_cdf(v) + v * phi_pdf(v));
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = grad_slot(&mut grads, *x, mask.len());
                    for ((acc, gi), m) in gx.iter_mut().zip(&g).zip(mask) {
                        *acc += gi * m;
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if self.nodes[v.0].requires_grad {
                            let gv = grad_slot(&mut grads, v, g.len());
                            gv.iter_mut().zip(&g).for_each(|(acc, gi)| *acc += gi);
                        }
                    }
                }
                Op::Sum { x } | Op::Mean { x } => {
                    let n = self.nodes[x.0].value.len();
                    let scale = if matches!(node.op, Op::Mean { .. }) { g[0] / n as f64 } else { g[0] };
                    grad_slot(&mut grads, *x, n).iter_mut().for_each(|acc| *acc += scale);
                }
                Op::PearsonSims(cache) => {
                    let (b, m, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let t = self.nodes[cache.anchor.0].shape[2];
                    let u = self.nodes[cache.cands.0].shape[0];
                    let sims = &node.value;
                    let want_a = self.nodes[cache.anchor.0].requires_grad;
                    let want_c = self.nodes[cache.cands.0].requires_grad;
                    let mut ga = vec![0.0; if want_a { b * d * t } else { 0 }];
                    let mut gc = vec![0.0; if want_c { u * d * t } else { 0 }];
                    for bi in 0..b {
                        for (j, &ci) in cache.index[bi].iter().enumerate() {
                            for di in 0..d {
                                let o = (bi * m + j) * d + di;
                                let (ra, rc) = (bi * d + di, ci * d + di);
                                let (na, nc) = (cache.anchor_norm[ra], cache.cand_norm[rc]);
                                if na == 0.0 || nc == 0.0 || g[o] == 0.0 {
                                    continue;
                                }
                                let r = sims[o];
                                let a = &cache.anchor_unit[ra * t..(ra + 1) * t];
                                let c = &cache.cand_unit[rc * t..(rc + 1) * t];
                                // d r / d a = (c_hat - r a_hat) / |a - mean(a)|
                                if want_a {
                                    let s = g[o] / na;
                                    for ((acc, av), cv) in ga[ra * t..(ra + 1) * t].iter_mut().zip(a).zip(c) {
                                        *acc += s * (cv - r * av);
                                    }
                                }
                                if want_c {
                                    let s = g[o] / nc;
                                    for ((acc, av), cv) in gc[rc * t..(rc + 1) * t].iter_mut().zip(a).zip(c) {
                                        *acc += s * (av - r * cv);
                                    }
                                }
                            }
                        }
                    }
                    if want_a {
                        add_into(&mut grads, cache.anchor, ga);
                    }
                    if want_c {
                        add_into(&mut grads, cache.cands, gc);
                    }
                }
                Op::InfoNce { sims, matched } => {
                    let sh = &self.nodes[sims.0].shape;
                    let (b, m, d) = (sh[0], sh[1], sh[2]);
                    let s = &self.nodes[sims.0].value;
                    let scale = g[0] / b as f64;
                    let gs = grad_slot(&mut grads, *sims, s.len());
                    for bi in 0..b {
                        for di in 0..d {
                            let at = |i: usize| s[(bi * m + i) * d + di];
                            let max = (0..m).map(at).fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = (0..m).map(|i| (at(i) - max).exp()).sum();
                            for i in 0..m {
                                let soft = (at(i) - max).exp() / z;
                                let target = if i == matched[bi] { 1.0 } else { 0.0 };
                                gs[(bi * m + i) * d + di] += scale * (soft - target);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
        slot @ None => *slot = Some(g),
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of `|g_auto - g_fd| / max(1, |g_fd|)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst_param: String,
    pub passed: bool,
}

/// Checks every parameter entry of `store` against central finite
/// differences of `loss_fn` with step `h`.
///
/// `loss_fn` must be deterministic: any randomness (dropout masks) has to be
/// re-seeded identically on every call.
pub fn finite_difference_check<F>(store: &mut ParamStore, mut loss_fn: F, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss_fn(&mut tape, store)?;
        Ok(tape.scalar(l))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, worst_param: String::new(), passed: true };
    for pi in 0..store.len() {
        let id = ParamId(pi);
        for k in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data[k];
            store.get_mut(id).value.data[k] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data[k] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let abs = (analytic[pi][k] - fd).abs();
            let rel = abs / fd.abs().max(1.0);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{}[{k}]", store.get(id).name);
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
