use rand::Rng as _;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_VARIANCE_FLOOR: f64 = 1e-5;

/// Smallest and largest values a probability may take: strictly inside (0, 1).
pub(crate) const PROB_LO: f64 = f64::MIN_POSITIVE;
pub(crate) const PROB_HI: f64 = 1.0 - f64::EPSILON / 2.0;

const LOGIT_CLAMP: f64 = 1e-15;
const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Sigmoid(Var),
    Relu(Var),
    Logit {
        x: Var,
        live: Vec<bool>,
    },
    ClampProb {
        x: Var,
        live: Vec<bool>,
    },
    Maximum(Var, Var),
    Reciprocal {
        x: Var,
        live: Vec<bool>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Rows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: Vec<bool>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SigmoidShift {
        p: Var,
        c: Var,
    },
    Bce {
        p: Var,
        y: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded primitive ops.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    signature: u64,
}

fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(PROB_LO, PROB_HI)
}

/// `σ(logit(p) + c)`; returns `p` bit-for-bit when `c == 0`.
fn sigmoid_shift(p: f64, c: f64) -> f64 {
    let y = if c <= 30.0 {
        let e = c.exp_m1();
        p + p * (1.0 - p) * e / (1.0 + p * e)
    } else {
        p / (p + (1.0 - p) * (-c).exp())
    };
    y.clamp(PROB_LO, PROB_HI)
}

fn sigmoid_shift_dp(p: f64, c: f64) -> f64 {
    if c <= 30.0 {
        let d = 1.0 + p * c.exp_m1();
        c.exp() / (d * d)
    } else {
        let e = (-c).exp();
        let d = p + (1.0 - p) * e;
        e / (d * d)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch decision taken by kinked ops so far.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    fn note_branches(&mut self, bits: impl Iterator<Item = bool>) {
        let mut h = self.signature;
        for b in bits {
            h = (h ^ (b as u64 + 1)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.signature = h;
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient left by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape_of(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    fn unary_map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[x.0].value;
        Tensor::new(t.shape(), t.values().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]: inner dimensions differ"),
            ));
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape_of(a), v)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape_of(a), v)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape_of(a), v)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix("add_row", x)?;
        if self.nodes[b.0].value.len() != n {
            return Err(Error::shape("add_row", format!("[{m}, {n}] + {:?}", self.shape_of(b))));
        }
        let (xv, bv) = (self.vals(x), self.vals(b));
        let v = (0..m * n).map(|i| xv[i] + bv[i % n]).collect();
        let t = Tensor::new(&[m, n], v)?;
        Ok(self.push(t, Op::AddRow(x, b), &[x, b]))
    }

    /// Multiply row `i` of `x[m×n]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.matrix("scale_rows", x)?;
        if self.nodes[s.0].value.len() != m {
            return Err(Error::shape(
                "scale_rows",
                format!("[{m}, {n}] rows vs scale {:?}", self.shape_of(s)),
            ));
        }
        let (xv, sv) = (self.vals(x), self.vals(s));
        let v = (0..m * n).map(|i| xv[i] * sv[i / n]).collect();
        let t = Tensor::new(&[m, n], v)?;
        Ok(self.push(t, Op::ScaleRows(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.unary_map(x, |v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix("transpose", x)?;
        let xv = self.vals(x);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = xv[i * n + j];
            }
        }
        let t = Tensor::new(&[n, m], v)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0]
            .value
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape_of(x))))?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Concatenate matrices along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need at least one part and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.matrix("concat", p)).collect::<Result<_>>()?;
        let t = if axis == 0 {
            let n = dims[0].1;
            if dims.iter().any(|d| d.1 != n) {
                return Err(Error::shape("concat", format!("column counts differ: {dims:?}")));
            }
            let m: usize = dims.iter().map(|d| d.0).sum();
            let v: Vec<f64> = parts.iter().flat_map(|&p| self.vals(p).iter().copied()).collect();
            Tensor::new(&[m, n], v)?
        } else {
            let m = dims[0].0;
            if dims.iter().any(|d| d.0 != m) {
                return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
            }
            let n: usize = dims.iter().map(|d| d.1).sum();
            let mut v = Vec::with_capacity(m * n);
            for i in 0..m {
                for (&p, d) in parts.iter().zip(&dims) {
                    v.extend_from_slice(&self.vals(p)[i * d.1..(i + 1) * d.1]);
                }
            }
            Tensor::new(&[m, n], v)?
        };
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix("gather_rows", x)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::shape(
                "gather_rows",
                format!("indices out of range for {m} rows"),
            ));
        }
        let xv = self.vals(x);
        let v: Vec<f64> = idx
            .iter()
            .flat_map(|&i| xv[i * n..(i + 1) * n].iter().copied())
            .collect();
        let t = Tensor::new(&[idx.len(), n], v)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Sum a matrix over `axis`; the result is a vector.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.matrix("sum_axis", x)?;
        let xv = self.vals(x);
        let v = match axis {
            0 => {
                let mut v = vec![0.0; n];
                for i in 0..m {
                    for (o, &a) in v.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                        *o += a;
                    }
                }
                v
            }
            1 => (0..m).map(|i| xv[i * n..(i + 1) * n].iter().sum()).collect(),
            _ => return Err(Error::shape("sum_axis", format!("axis {axis} on a matrix"))),
        };
        let t = Tensor::vector(v);
        Ok(self.push(t, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.vals(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary_map(x, sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary_map(x, |v| v.max(0.0));
        let bits: Vec<bool> = self.vals(x).iter().map(|&v| v > 0.0).collect();
        self.note_branches(bits.into_iter());
        self.push(t, Op::Relu(x), &[x])
    }

    /// `ln(p / (1 - p))` with `p` clamped to `[1e-15, 1 - 1e-15]`.
    pub fn logit(&mut self, x: Var) -> Var {
        let live: Vec<bool> = self
            .vals(x)
            .iter()
            .map(|&p| (LOGIT_CLAMP..=1.0 - LOGIT_CLAMP).contains(&p))
            .collect();
        let t = self.unary_map(x, |p| {
            let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
            p.ln() - (-p).ln_1p()
        });
        self.note_branches(live.iter().copied());
        self.push(t, Op::Logit { x, live }, &[x])
    }

    /// Clamp into the open unit interval representable in `f64`.
    pub fn clamp_prob(&mut self, x: Var) -> Var {
        let live: Vec<bool> = self.vals(x).iter().map(|&p| (PROB_LO..=PROB_HI).contains(&p)).collect();
        let t = self.unary_map(x, |p| p.clamp(PROB_LO, PROB_HI));
        self.note_branches(live.iter().copied());
        self.push(t, Op::ClampProb { x, live }, &[x])
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let bits: Vec<bool> = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x >= y).collect();
        let v = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let t = Tensor::new(self.shape_of(a), v)?;
        self.note_branches(bits.into_iter());
        Ok(self.push(t, Op::Maximum(a, b), &[a, b]))
    }

    /// `1 / x` with `|x|` raised to at least `floor`, keeping the sign
    /// (zero counts as positive).
    pub fn reciprocal(&mut self, x: Var, floor: f64) -> Var {
        let live: Vec<bool> = self.vals(x).iter().map(|&v| v.abs() >= floor).collect();
        let t = self.unary_map(x, |v| {
            let m = v.abs().max(floor);
            if v < 0.0 {
                -1.0 / m
            } else {
                1.0 / m
            }
        });
        self.note_branches(live.iter().copied());
        self.push(t, Op::Reciprocal { x, live }, &[x])
    }

    /// Softmax along `axis` of a matrix (a vector only has axis 0).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        let (m, n) = match (shape.len(), axis) {
            (1, 0) => (1, shape[0]),
            (2, 0 | 1) => (shape[0], shape[1]),
            _ => return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}"))),
        };
        // Normalize over `len` entries at `start + k * stride`.
        let (groups, len, stride): (Vec<usize>, usize, usize) = if shape.len() == 1 || axis == 1 {
            ((0..m).map(|i| i * n).collect(), n, 1)
        } else {
            ((0..n).collect(), m, n)
        };
        let xv = self.vals(x);
        let mut out = vec![0.0; xv.len()];
        for start in groups {
            let mx = (0..len)
                .map(|k| xv[start + k * stride])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (xv[start + k * stride] - mx).exp();
                out[start + k * stride] = e;
                z += e;
            }
            for k in 0..len {
                out[start + k * stride] /= z;
            }
        }
        let t = Tensor::new(&shape, out)?;
        let axis = if shape.len() == 1 { 1 } else { axis };
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// `x / max(‖x‖₂, eps)`, row by row (a vector is one row).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("l2_normalize eps must be > 0, got {eps}")));
        }
        let (m, n) = self.dims(x);
        let xv = self.vals(x);
        let norms: Vec<f64> = (0..m)
            .map(|i| xv[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let v = (0..m * n).map(|i| xv[i] / norms[i / n].max(eps)).collect();
        let t = Tensor::new(self.shape_of(x), v)?;
        let bits: Vec<bool> = norms.iter().map(|&nr| nr >= eps).collect();
        self.note_branches(bits.into_iter());
        Ok(self.push(t, Op::L2Rows { x, norms, eps }, &[x]))
    }

    /// Batch normalization over the rows of `x[batch×d]`.
    ///
    /// Train mode normalizes by the batch statistics (variance floored at
    /// [`BN_VARIANCE_FLOOR`]) and folds them into `stats` with momentum
    /// [`BN_MOMENTUM`]; Eval mode normalizes by `stats`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BnStats) -> Result<Var> {
        let (b, d) = self.matrix("batch_norm", x)?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[p.0].value.len() != d {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} {:?} vs width {d}", self.shape_of(p)),
                ));
            }
        }
        if stats.mean.len() != d || stats.var.len() != d {
            return Err(Error::shape("batch_norm", format!("running stats width vs {d}")));
        }
        let train = self.mode == Mode::Train;
        if train && b < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("train-mode batch of {b}: batch variance needs at least 2 rows"),
            ));
        }
        let xv = self.vals(x);
        let (mean, var) = if train {
            let mut mean = vec![0.0; d];
            for i in 0..b {
                for j in 0..d {
                    mean[j] += xv[i * d + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; d];
            for i in 0..b {
                for j in 0..d {
                    let c = xv[i * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(BN_VARIANCE_FLOOR).sqrt()).collect();
        // Batch variance participates in the gradient only above the floor.
        let batch_stats: Vec<bool> = var.iter().map(|&v| train && v > BN_VARIANCE_FLOOR).collect();
        let (gv, bv) = (self.vals(gamma), self.vals(beta));
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let h = (xv[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = gv[j] * h + bv[j];
            }
        }
        if train {
            for j in 0..d {
                stats.mean[j] = BN_MOMENTUM * stats.mean[j] + (1.0 - BN_MOMENTUM) * mean[j];
                stats.var[j] = BN_MOMENTUM * stats.var[j] + (1.0 - BN_MOMENTUM) * var[j];
            }
            self.note_branches(batch_stats.clone().into_iter());
        }
        let t = Tensor::new(&[b, d], out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout. Identity in Eval mode or when `keep_prob == 1`.
    pub fn dropout(&mut self, x: Var, keep_prob: f64, rng: &mut Rng) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep_prob must be in (0, 1], got {keep_prob}"
            )));
        }
        if self.mode == Mode::Eval || keep_prob == 1.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.len();
        let scale = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep_prob { scale } else { 0.0 })
            .collect();
        let v = self.vals(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(self.shape_of(x), v)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// `σ(logit(p) + c)` computed without leaving probability space, so a
    /// zero shift returns `p` exactly.
    pub fn sigmoid_shift(&mut self, p: Var, c: Var) -> Result<Var> {
        self.same_shape("sigmoid_shift", p, c)?;
        let v = self
            .vals(p)
            .iter()
            .zip(self.vals(c))
            .map(|(&p, &c)| sigmoid_shift(p, c))
            .collect();
        let t = Tensor::new(self.shape_of(p), v)?;
        Ok(self.push(t, Op::SigmoidShift { p, c }, &[p, c]))
    }

    /// Mean over rows of `Σ_c −[y ln p + (1−y) ln(1−p)]`, `p` clamped to
    /// `[1e-7, 1 − 1e-7]`.
    pub fn bce(&mut self, p: Var, y: Var) -> Result<Var> {
        self.same_shape("bce", p, y)?;
        let (b, _) = self.dims(p);
        let (pv, yv) = (self.vals(p), self.vals(y));
        let mut total = 0.0;
        for (&p, &y) in pv.iter().zip(yv) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * pc.ln() + (1.0 - y) * (-pc).ln_1p();
        }
        let bits: Vec<bool> = pv.iter().map(|&p| (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p)).collect();
        self.note_branches(bits.into_iter());
        let t = Tensor::scalar(total / b as f64);
        Ok(self.push(t, Op::Bce { p, y }, &[p, y]))
    }

    /// Reverse pass from a scalar `loss`. Each recorded op is visited once,
    /// in reverse order; gradients from fan-out accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape_of(loss)),
            ));
        }
        for n in &mut self.nodes {
            n.value.set_grad(None);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let len = node.value.len();
                node.value.set_grad(Some(g.unwrap_or_else(|| vec![0.0; len])));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = out.dims2().1;
                let (av, bv) = (nodes[a.0].value.values(), nodes[b.0].value.values());
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for (o, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.values(), nodes[b.0].value.values());
                acc(*a, &mut |d| {
                    for ((o, x), y) in d.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((o, x), y) in d.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = out.dims2().1;
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*b, &mut |d| {
                    for (idx, v) in g.iter().enumerate() {
                        d[idx % n] += v;
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let n = out.dims2().1;
                let (xv, sv) = (nodes[x.0].value.values(), nodes[s.0].value.values());
                acc(*x, &mut |d| {
                    for (idx, v) in g.iter().enumerate() {
                        d[idx] += v * sv[idx / n];
                    }
                });
                acc(*s, &mut |d| {
                    for (idx, v) in g.iter().enumerate() {
                        d[idx / n] += v * xv[idx];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v * c)),
            Op::Transpose(x) => {
                let (m, n) = nodes[x.0].value.dims2();
                acc(*x, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v)),
            Op::Concat { parts, axis } => {
                let total_cols = out.dims2().1;
                let mut offset = 0;
                for p in parts {
                    let (pm, pn) = nodes[p.0].value.dims2();
                    if *axis == 0 {
                        let start = offset * total_cols;
                        acc(*p, &mut |d| {
                            d.iter_mut().zip(&g[start..start + pm * pn]).for_each(|(o, v)| *o += v)
                        });
                        offset += pm;
                    } else {
                        acc(*p, &mut |d| {
                            for i in 0..pm {
                                for j in 0..pn {
                                    d[i * pn + j] += g[i * total_cols + offset + j];
                                }
                            }
                        });
                        offset += pn;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let n = out.dims2().1;
                acc(*x, &mut |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            d[src * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (m, n) = nodes[x.0].value.dims2();
                acc(*x, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::Sigmoid(x) => {
                let yv = out.values();
                acc(*x, &mut |d| {
                    for ((o, v), y) in d.iter_mut().zip(g).zip(yv) {
                        *o += v * y * (1.0 - y);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.values();
                acc(*x, &mut |d| {
                    for ((o, v), a) in d.iter_mut().zip(g).zip(xv) {
                        if *a > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::Logit { x, live } => {
                let xv = nodes[x.0].value.values();
                acc(*x, &mut |d| {
                    for (idx, v) in g.iter().enumerate() {
                        if live[idx] {
                            let p = xv[idx];
                            d[idx] += v / (p * (1.0 - p));
                        }
                    }
                });
            }
            Op::ClampProb { x, live } => acc(*x, &mut |d| {
                for (idx, v) in g.iter().enumerate() {
                    if live[idx] {
                        d[idx] += v;
                    }
                }
            }),
            Op::Maximum(a, b) => {
                let (av, bv) = (nodes[a.0].value.values(), nodes[b.0].value.values());
                acc(*a, &mut |d| {
                    for idx in 0..g.len() {
                        if av[idx] >= bv[idx] {
                            d[idx] += g[idx];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for idx in 0..g.len() {
                        if av[idx] < bv[idx] {
                            d[idx] += g[idx];
                        }
                    }
                });
            }
            Op::Reciprocal { x, live } => {
                let yv = out.values();
                acc(*x, &mut |d| {
                    for (idx, v) in g.iter().enumerate() {
                        if live[idx] {
                            d[idx] -= v * yv[idx] * yv[idx];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (m, n) = out.dims2();
                let yv = out.values();
                let (groups, len, stride): (Vec<usize>, usize, usize) = if *axis == 1 {
                    ((0..m).map(|i| i * n).collect(), n, 1)
                } else {
                    ((0..n).collect(), m, n)
                };
                acc(*x, &mut |d| {
                    for &start in &groups {
                        let dot: f64 = (0..len).map(|k| g[start + k * stride] * yv[start + k * stride]).sum();
                        for k in 0..len {
                            let at = start + k * stride;
                            d[at] += yv[at] * (g[at] - dot);
                        }
                    }
                });
            }
            Op::L2Rows { x, norms, eps } => {
                let n = out.dims2().1;
                let yv = out.values();
                acc(*x, &mut |d| {
                    for (i, &nr) in norms.iter().enumerate() {
                        let row = i * n..(i + 1) * n;
                        if nr >= *eps {
                            let dot: f64 = g[row.clone()].iter().zip(&yv[row.clone()]).map(|(a, b)| a * b).sum();
                            for at in row {
                                d[at] += (g[at] - yv[at] * dot) / nr;
                            }
                        } else {
                            for at in row {
                                d[at] += g[at] / eps;
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, dd) = out.dims2();
                let gv = nodes[gamma.0].value.values();
                acc(*gamma, &mut |d| {
                    for idx in 0..b * dd {
                        d[idx % dd] += g[idx] * xhat[idx];
                    }
                });
                acc(*beta, &mut |d| {
                    for idx in 0..b * dd {
                        d[idx % dd] += g[idx];
                    }
                });
                let train = self.mode == Mode::Train;
                acc(*x, &mut |d| {
                    for j in 0..dd {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for i in 0..b {
                            let dh = g[i * dd + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * dd + j];
                        }
                        let bf = b as f64;
                        for i in 0..b {
                            let at = i * dd + j;
                            let dh = g[at] * gv[j];
                            d[at] += if !train {
                                dh * inv_std[j]
                            } else if batch_stats[j] {
                                inv_std[j] * (dh - sum_dh / bf - xhat[at] * sum_dh_h / bf)
                            } else {
                                inv_std[j] * (dh - sum_dh / bf)
                            };
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |d| {
                for ((o, v), m) in d.iter_mut().zip(g).zip(mask) {
                    *o += v * m;
                }
            }),
            Op::SigmoidShift { p, c } => {
                let (pv, cv) = (nodes[p.0].value.values(), nodes[c.0].value.values());
                let yv = out.values();
                acc(*p, &mut |d| {
                    for idx in 0..g.len() {
                        d[idx] += g[idx] * sigmoid_shift_dp(pv[idx], cv[idx]);
                    }
                });
                acc(*c, &mut |d| {
                    for idx in 0..g.len() {
                        d[idx] += g[idx] * yv[idx] * (1.0 - yv[idx]);
                    }
                });
            }
            Op::Bce { p, y } => {
                let (b, _) = nodes[p.0].value.dims2();
                let (pv, yv) = (nodes[p.0].value.values(), nodes[y.0].value.values());
                let scale = g[0] / b as f64;
                acc(*p, &mut |d| {
                    for idx in 0..pv.len() {
                        let pr = pv[idx];
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pr) {
                            let t = yv[idx];
                            d[idx] += scale * (-t / pr + (1.0 - t) / (1.0 - pr));
                        }
                    }
                });
                acc(*y, &mut |d| {
                    for idx in 0..pv.len() {
                        let pc = pv[idx].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        d[idx] += scale * (-pc.ln() + (-pc).ln_1p());
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::new(Mode::Eval);
        let i2 = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).values(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(m(&[&[1.0, 2.0]]));
        let col = g.constant(m(&[&[3.0], &[4.0]]));
        let c = g.matmul(r, col).unwrap();
        assert_eq!(g.value(c).values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Tensor::vector(vec![0.0, -1000.0, 1000.0]));
        let y = g.sigmoid(x);
        let v = g.value(y).values();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[1] <= 1e-300);
        assert!(v[2] < 1.0 && v[2] > 0.5);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).values(), &[0.5, 0.5]);

        let a = g.constant(m(&[&[1.0, 3.0, -2.0], &[700.0, 701.0, 699.0]]));
        let b = g.constant(m(&[&[11.0, 13.0, 8.0], &[0.0, 1.0, -1.0]]));
        let ya = g.softmax(a, 1).unwrap();
        let yb = g.softmax(b, 1).unwrap();
        for i in 0..2 {
            let s: f64 = g.value(ya).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for (p, q) in g.value(ya).values().iter().zip(g.value(yb).values()) {
            assert!((p - q).abs() < 1e-12);
        }
        let c = g.softmax(a, 0).unwrap();
        for j in 0..3 {
            let s = g.value(c).at(0, j) + g.value(c).at(1, j);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize(x, 1e-12).unwrap();
        assert_eq!(g.value(y).values(), &[0.6, 0.8]);
        let z = g.constant(Tensor::vector(vec![0.0; 3]));
        let y = g.l2_normalize(z, 1e-12).unwrap();
        assert_eq!(g.value(y).values(), &[0.0; 3]);
        assert!(g.l2_normalize(z, 0.0).is_err());
    }

    #[test]
    fn batch_norm_standardized_input_passes_through() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(m(&[&[1.0, -1.0], &[-1.0, 1.0], &[1.0, 1.0], &[-1.0, -1.0]]));
        let gamma = g.constant(Tensor::filled(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let mut st = BnStats::new(2);
        let y = g.batch_norm(x, gamma, beta, &mut st).unwrap();
        for (a, b) in g.value(y).values().iter().zip(g.value(x).values()) {
            assert!((a - b).abs() < 1e-5);
        }
        // running stats moved 1% toward the batch statistics
        assert!((st.var[0] - 1.0).abs() < 1e-12);
        assert!(st.mean[0].abs() < 1e-12);
    }

    #[test]
    fn batch_norm_constant_column_maps_to_beta() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(m(&[&[5.0, 1.0], &[5.0, 2.0], &[5.0, 3.0]]));
        let gamma = g.constant(Tensor::filled(&[2], 2.0));
        let beta = g.constant(Tensor::vector(vec![0.25, 0.0]));
        let mut st = BnStats::new(2);
        let y = g.batch_norm(x, gamma, beta, &mut st).unwrap();
        for i in 0..3 {
            assert!((g.value(y).at(i, 0) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_rejects_single_row_in_train() {
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let gamma = g.constant(Tensor::filled(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert!(g.batch_norm(x, gamma, beta, &mut BnStats::new(2)).is_err());
        let mut e = Graph::new(Mode::Eval);
        let x = e.constant(Tensor::zeros(&[1, 2]));
        let gamma = e.constant(Tensor::filled(&[2], 1.0));
        let beta = e.constant(Tensor::zeros(&[2]));
        assert!(e.batch_norm(x, gamma, beta, &mut BnStats::new(2)).is_ok());
    }

    #[test]
    fn dropout_modes_and_statistics() {
        let mut rng = seeded(3);
        let mut g = Graph::new(Mode::Train);
        let x = g.constant(Tensor::filled(&[4], 2.0));
        assert_eq!(g.dropout(x, 1.0, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 0.0, &mut rng).is_err());
        assert!(g.dropout(x, 1.5, &mut rng).is_err());

        let mut e = Graph::new(Mode::Eval);
        let xe = e.constant(Tensor::filled(&[4], 2.0));
        assert_eq!(e.dropout(xe, 0.3, &mut rng).unwrap(), xe);

        let n = 100_000;
        let big = g.constant(Tensor::filled(&[n], 1.0));
        let y = g.dropout(big, 0.8, &mut rng).unwrap();
        let v = g.value(y).values();
        let kept = v.iter().filter(|&&a| a != 0.0).count() as f64 / n as f64;
        let mean = v.iter().sum::<f64>() / n as f64;
        assert!((0.79..=0.81).contains(&kept), "{kept}");
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn backward_sum_and_diamond() {
        let mut g = Graph::new(Mode::Train);
        let x = g.param(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        // y = sigmoid(x) + 3x  =>  dy/dx = σ(1−σ) + 3
        let mut g = Graph::new(Mode::Train);
        let x = g.param(Tensor::vector(vec![0.7]));
        let f = g.sigmoid(x);
        let h = g.scale(x, 3.0);
        let y = g.add(f, h).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let s = 1.0 / (1.0 + (-0.7f64).exp());
        assert!((g.grad(x).unwrap()[0] - (s * (1.0 - s) + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new(Mode::Train);
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn sigmoid_shift_zero_is_exact() {
        for &p in &[1e-300, 0.1, 0.3, 0.5, 0.7, 0.999_999, PROB_HI] {
            assert_eq!(sigmoid_shift(p, 0.0), p);
            assert_eq!(sigmoid_shift(p, -0.0), p);
        }
        let p: f64 = 0.3;
        let want = 1.0 / (1.0 + (-((p / (1.0 - p)).ln() + 1.5)).exp());
        assert!((sigmoid_shift(p, 1.5) - want).abs() < 1e-15);
        assert!(sigmoid_shift(0.5, 800.0) < 1.0);
        assert!(sigmoid_shift(0.5, -800.0) > 0.0);
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::new(Mode::Eval);
        let p = g.constant(Tensor::filled(&[2, 3], 0.5));
        let y = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]).unwrap());
        let l = g.bce(p, y).unwrap();
        assert!((g.value(l).values()[0] - 3.0 * 2f64.ln()).abs() < 1e-12);

        let p = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let y = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let l = g.bce(p, y).unwrap();
        let want = -2.0 * (-1e-7f64).ln_1p();
        assert!((g.value(l).values()[0] - want).abs() < 1e-15);
    }
}
