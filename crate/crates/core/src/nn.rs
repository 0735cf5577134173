//! Small reverse-mode autodiff over `f64` vectors, the actor/critic network
//! built on it, and Adam.
//!
//! Operations act on whole vectors, so a tape for one time step holds a few
//! dozen nodes. Parameters live in a [`ParamSet`] referenced by the tape;
//! [`Tape::backward`] returns gradients with the same layout.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite loss ({0})")]
    NonFiniteLoss(f64),
    #[error("parameter {0} not found")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A named row-major tensor (matrix `[rows, cols]` or vector `[n]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Tensor {
        Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn index(&self, name: &str) -> Result<usize, NnError> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        Ok(&self.tensors[self.index(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        let i = self.index(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(&t.name, &t.shape))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// `self += c * other`; shapes must agree.
    pub fn add_scaled(&mut self, other: &ParamSet, c: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.values.iter_mut().for_each(|x| *x *= c);
        }
    }

    fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

pub type Var = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { w: usize, b: Option<usize>, x: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    LogSoftmax(Var),
    Exp(Var),
    Dot(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

/// A recording of vector operations for reverse-mode differentiation.
pub struct Tape<'p> {
    params: &'p ParamSet,
    vals: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Tape<'p> {
        Tape {
            params,
            vals: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, v: Vec<f64>, op: Op) -> Var {
        self.vals.push(v);
        self.ops.push(op);
        self.vals.len() - 1
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.vals[v]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.vals[v][0]
    }

    pub fn constant(&mut self, v: Vec<f64>) -> Var {
        self.push(v, Op::Leaf)
    }

    /// `W x + b` with `W` of shape `[rows, cols]`.
    pub fn affine(&mut self, w: usize, b: Option<usize>, x: Var) -> Result<Var, NnError> {
        let wt = &self.params.tensors[w];
        let (rows, cols) = (wt.rows(), wt.cols());
        let xv = &self.vals[x];
        if xv.len() != cols {
            return Err(NnError::Shape {
                what: wt.name.clone(),
                expected: cols,
                got: xv.len(),
            });
        }
        let mut y = match b {
            Some(b) => self.params.tensors[b].values.clone(),
            None => vec![0.0; rows],
        };
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &wt.values[r * cols..(r + 1) * cols];
            *yr += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push(y, Op::Affine { w, b, x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.vals[a].iter().zip(&self.vals[b]).map(|(x, y)| x + y).collect();
        self.push(y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.vals[a].iter().zip(&self.vals[b]).map(|(x, y)| x * y).collect();
        self.push(y, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.vals[a].iter().map(|x| x.max(0.0)).collect();
        self.push(y, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.vals[a].iter().map(|&x| sigmoid(x)).collect();
        self.push(y, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.vals[a].iter().map(|x| x.tanh()).collect();
        self.push(y, Op::Tanh(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let y = parts.iter().flat_map(|&p| self.vals[p].iter().copied()).collect();
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let y = self.vals[a][start..start + len].to_vec();
        self.push(y, Op::Slice(a, start))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let y = log_softmax(&self.vals[a]);
        self.push(y, Op::LogSoftmax(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.vals[a].iter().map(|x| x.exp()).collect();
        self.push(y, Op::Exp(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let y = self.vals[a].iter().zip(&self.vals[b]).map(|(x, y)| x * y).sum();
        self.push(vec![y], Op::Dot(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.vals[a].iter().map(|x| x * c).collect();
        self.push(y, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = self.vals[a].iter().sum();
        self.push(vec![y], Op::Sum(a))
    }

    /// Sum of several scalar nodes.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        let c = self.concat(xs);
        self.sum(c)
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<ParamSet, NnError> {
        let lv = self.vals[loss][0];
        if !lv.is_finite() {
            return Err(NnError::NonFiniteLoss(lv));
        }
        let mut pg = self.params.zeros_like();
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        g[loss] = Some(vec![1.0]);

        fn acc(g: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            g[v].get_or_insert_with(|| vec![0.0; len])
        }

        for n in (0..=loss).rev() {
            let Some(dy) = g[n].take() else { continue };
            let y = &self.vals[n];
            match &self.ops[n] {
                Op::Leaf => {}
                Op::Affine { w, b, x } => {
                    let wt = &self.params.tensors[*w];
                    let cols = wt.cols();
                    let xv = &self.vals[*x];
                    {
                        let gw = &mut pg.tensors[*w].values;
                        for (r, &d) in dy.iter().enumerate() {
                            if d != 0.0 {
                                let row = &mut gw[r * cols..(r + 1) * cols];
                                row.iter_mut().zip(xv).for_each(|(a, xi)| *a += d * xi);
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = &mut pg.tensors[*b].values;
                        gb.iter_mut().zip(&dy).for_each(|(a, d)| *a += d);
                    }
                    if matches!(self.ops[*x], Op::Leaf) {
                        continue;
                    }
                    let gx = acc(&mut g, *x, cols);
                    for (r, &d) in dy.iter().enumerate() {
                        if d != 0.0 {
                            let row = &wt.values[r * cols..(r + 1) * cols];
                            gx.iter_mut().zip(row).for_each(|(a, wi)| *a += d * wi);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let ga = acc(&mut g, v, dy.len());
                        ga.iter_mut().zip(&dy).for_each(|(s, d)| *s += d);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.vals[*a].clone(), self.vals[*b].clone());
                    let ga = acc(&mut g, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * bv[i];
                    }
                    let gb = acc(&mut g, *b, dy.len());
                    for i in 0..dy.len() {
                        gb[i] += dy[i] * av[i];
                    }
                }
                Op::Relu(a) => {
                    let ga = acc(&mut g, *a, dy.len());
                    for i in 0..dy.len() {
                        if y[i] > 0.0 {
                            ga[i] += dy[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut g, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut g, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.vals[p].len();
                        let gp = acc(&mut g, p, len);
                        for i in 0..len {
                            gp[i] += dy[off + i];
                        }
                        off += len;
                    }
                }
                Op::Slice(a, start) => {
                    let len = self.vals[*a].len();
                    let ga = acc(&mut g, *a, len);
                    for (i, d) in dy.iter().enumerate() {
                        ga[start + i] += d;
                    }
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = dy.iter().sum();
                    let ga = acc(&mut g, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] - y[i].exp() * total;
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut g, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * y[i];
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.vals[*a].clone(), self.vals[*b].clone());
                    let d = dy[0];
                    let ga = acc(&mut g, *a, av.len());
                    for i in 0..av.len() {
                        ga[i] += d * bv[i];
                    }
                    let gb = acc(&mut g, *b, bv.len());
                    for i in 0..bv.len() {
                        gb[i] += d * av[i];
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut g, *a, dy.len());
                    ga.iter_mut().zip(&dy).for_each(|(s, d)| *s += c * d);
                }
                Op::Sum(a) => {
                    let len = self.vals[*a].len();
                    let ga = acc(&mut g, *a, len);
                    ga.iter_mut().for_each(|s| *s += dy[0]);
                }
            }
        }
        Ok(pg)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Recurrent layer flavor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Lstm,
    /// 64-unit ReLU layer in place of the LSTM; the cell state stays zero.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Policy,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub arch: Arch,
    pub head: Head,
    pub obs_dim: usize,
    pub fp_dim: usize,
    pub obs_hidden: usize,
    pub fp_hidden: usize,
    pub recurrent: usize,
    pub actions: usize,
}

impl NetSpec {
    pub fn new(arch: Arch, head: Head) -> NetSpec {
        NetSpec {
            arch,
            head,
            obs_dim: 110,
            fp_dim: 32,
            obs_hidden: 128,
            fp_hidden: 64,
            recurrent: 64,
            actions: 8,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.head {
            Head::Policy => self.actions,
            Head::Value => 1,
        }
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let z = self.obs_hidden + self.fp_hidden;
        let r = self.recurrent;
        let mut v = vec![
            ("obs.w", vec![self.obs_hidden, self.obs_dim]),
            ("obs.b", vec![self.obs_hidden]),
            ("fp.w", vec![self.fp_hidden, self.fp_dim]),
            ("fp.b", vec![self.fp_hidden]),
        ];
        match self.arch {
            Arch::Lstm => {
                v.push(("lstm.wx", vec![4 * r, z]));
                v.push(("lstm.wh", vec![4 * r, r]));
                v.push(("lstm.b", vec![4 * r]));
            }
            Arch::Dense => {
                v.push(("dense.w", vec![r, z]));
                v.push(("dense.b", vec![r]));
            }
        }
        v.push(("head.w", vec![self.outputs(), r]));
        v.push(("head.b", vec![self.outputs()]));
        v
    }

    pub fn zeros(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .shapes()
                .into_iter()
                .map(|(n, s)| Tensor::zeros(n, &s))
                .collect(),
        }
    }

    /// Weights drawn from N(0, std^2), biases zero.
    pub fn init(&self, seed: u64, std: f64) -> ParamSet {
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let mut p = self.zeros();
        for t in &mut p.tensors {
            if t.shape.len() == 2 {
                t.values.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        p
    }
}

/// Hidden and cell vectors of the recurrent layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(width: usize) -> RecurrentState {
        RecurrentState {
            h: vec![0.0; width],
            c: vec![0.0; width],
        }
    }
}

/// Parameter indices resolved once per network layout.
#[derive(Clone, Copy, Debug)]
struct Idx {
    obs_w: usize,
    obs_b: usize,
    fp_w: usize,
    fp_b: usize,
    rec_w: usize,
    rec_h: Option<usize>,
    rec_b: usize,
    head_w: usize,
    head_b: usize,
}

/// The actor or critic network with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: NetSpec,
    pub params: ParamSet,
}

/// Tape variables of a recurrent state.
#[derive(Clone, Copy, Debug)]
pub struct RecVars {
    pub h: Var,
    pub c: Var,
}

impl Model {
    pub fn new(spec: NetSpec, seed: u64) -> Model {
        Model {
            spec,
            params: spec.init(seed, 0.1),
        }
    }

    pub fn from_params(spec: NetSpec, params: ParamSet) -> Result<Model, NnError> {
        if !spec.zeros().same_layout(&params) {
            return Err(NnError::Checkpoint("parameter layout does not match the network".into()));
        }
        Ok(Model { spec, params })
    }

    fn idx(&self) -> Result<Idx, NnError> {
        let p = &self.params;
        let lstm = self.spec.arch == Arch::Lstm;
        Ok(Idx {
            obs_w: p.index("obs.w")?,
            obs_b: p.index("obs.b")?,
            fp_w: p.index("fp.w")?,
            fp_b: p.index("fp.b")?,
            rec_w: p.index(if lstm { "lstm.wx" } else { "dense.w" })?,
            rec_h: if lstm { Some(p.index("lstm.wh")?) } else { None },
            rec_b: p.index(if lstm { "lstm.b" } else { "dense.b" })?,
            head_w: p.index("head.w")?,
            head_b: p.index("head.b")?,
        })
    }

    pub fn state_vars(&self, tape: &mut Tape, s: &RecurrentState) -> RecVars {
        RecVars {
            h: tape.constant(s.h.clone()),
            c: tape.constant(s.c.clone()),
        }
    }

    /// One time step on `tape`. Returns the head output (log-probabilities
    /// for a policy head, a length-1 vector for a value head) and the next
    /// recurrent state.
    pub fn step(
        &self,
        tape: &mut Tape,
        obs: &[f64],
        fp: &[f64],
        state: RecVars,
    ) -> Result<(Var, RecVars), NnError> {
        let check = |what: &str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(NnError::Shape {
                    what: what.to_string(),
                    expected,
                    got,
                })
            }
        };
        check("observation", self.spec.obs_dim, obs.len())?;
        check("fingerprint", self.spec.fp_dim, fp.len())?;
        let ix = self.idx()?;
        let r = self.spec.recurrent;

        let o = tape.constant(obs.to_vec());
        let o = tape.affine(ix.obs_w, Some(ix.obs_b), o)?;
        let o = tape.relu(o);
        let f = tape.constant(fp.to_vec());
        let f = tape.affine(ix.fp_w, Some(ix.fp_b), f)?;
        let f = tape.relu(f);
        let z = tape.concat(&[o, f]);

        let next = match ix.rec_h {
            Some(wh) => {
                let gx = tape.affine(ix.rec_w, Some(ix.rec_b), z)?;
                let gh = tape.affine(wh, None, state.h)?;
                let gates = tape.add(gx, gh);
                let i = tape.slice(gates, 0, r);
                let i = tape.sigmoid(i);
                let fg = tape.slice(gates, r, r);
                let fg = tape.sigmoid(fg);
                let g = tape.slice(gates, 2 * r, r);
                let g = tape.tanh(g);
                let og = tape.slice(gates, 3 * r, r);
                let og = tape.sigmoid(og);
                let keep = tape.mul(fg, state.c);
                let write = tape.mul(i, g);
                let c = tape.add(keep, write);
                let tc = tape.tanh(c);
                let h = tape.mul(og, tc);
                RecVars { h, c }
            }
            None => {
                let h = tape.affine(ix.rec_w, Some(ix.rec_b), z)?;
                let h = tape.relu(h);
                RecVars { h, c: state.c }
            }
        };
        let out = tape.affine(ix.head_w, Some(ix.head_b), next.h)?;
        let out = match self.spec.head {
            Head::Policy => tape.log_softmax(out),
            Head::Value => out,
        };
        Ok((out, next))
    }

    fn infer(
        &self,
        obs: &[f64],
        fp: &[f64],
        state: &RecurrentState,
    ) -> Result<(Vec<f64>, RecurrentState), NnError> {
        let mut tape = Tape::new(&self.params);
        let s = self.state_vars(&mut tape, state);
        let (out, next) = self.step(&mut tape, obs, fp, s)?;
        Ok((
            tape.value(out).to_vec(),
            RecurrentState {
                h: tape.value(next.h).to_vec(),
                c: tape.value(next.c).to_vec(),
            },
        ))
    }

    /// Action probabilities and the next recurrent state.
    pub fn forward_policy(
        &self,
        obs: &[f64],
        fp: &[f64],
        state: &RecurrentState,
    ) -> Result<(Vec<f64>, RecurrentState), NnError> {
        debug_assert_eq!(self.spec.head, Head::Policy);
        let (logp, s) = self.infer(obs, fp, state)?;
        Ok((logp.iter().map(|l| l.exp()).collect(), s))
    }

    pub fn forward_value(
        &self,
        obs: &[f64],
        fp: &[f64],
        state: &RecurrentState,
    ) -> Result<(f64, RecurrentState), NnError> {
        debug_assert_eq!(self.spec.head, Head::Value);
        let (v, s) = self.infer(obs, fp, state)?;
        Ok((v[0], s))
    }
}

/// Draw an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut seed::Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Adam with per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(like: &ParamSet) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut().zip(self.v.tensors.iter_mut()))
        {
            for i in 0..p.values.len() {
                let gi = g.values[i];
                m.values[i] = self.beta1 * m.values[i] + (1.0 - self.beta1) * gi;
                v.values[i] = self.beta2 * v.values[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.values[i] / b1t;
                let vh = v.values[i] / b2t;
                p.values[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Linearly decayed learning rate after `done` of `total` updates.
pub fn linear_decay(lr0: f64, done: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - done as f64 / total as f64).max(0.0)
}

/// Versioned JSON tensor dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub body: T,
}

pub const CHECKPOINT_FORMAT: &str = "emvlab-params";
pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Serialize + serde::de::DeserializeOwned> Checkpoint<T> {
    pub fn new(body: T) -> Checkpoint<T> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            body,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<T, NnError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let c: Checkpoint<T> = serde_json::from_reader(f)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        Ok(c.body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(arch: Arch, head: Head) -> NetSpec {
        NetSpec {
            arch,
            head,
            obs_dim: 5,
            fp_dim: 3,
            obs_hidden: 4,
            fp_hidden: 3,
            recurrent: 4,
            actions: 3,
        }
    }

    fn input(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()
    }

    /// Scalar loss of a 3-step unroll: sum of outputs weighted by fixed coefficients.
    fn unroll_loss(m: &Model) -> (f64, ParamSet) {
        let mut tape = Tape::new(&m.params);
        let init = RecurrentState {
            h: input(m.spec.recurrent, 0.3),
            c: input(m.spec.recurrent, 0.7),
        };
        let mut s = m.state_vars(&mut tape, &init);
        let mut terms = Vec::new();
        for t in 0..3 {
            let (out, next) = m
                .step(&mut tape, &input(m.spec.obs_dim, 1.1 + t as f64), &input(m.spec.fp_dim, 0.5 + t as f64), s)
                .unwrap();
            let w = tape.constant(input(m.spec.outputs(), 2.3 + t as f64));
            terms.push(tape.dot(out, w));
            s = next;
        }
        let c = tape.dot(s.c, s.h);
        terms.push(c);
        let loss = tape.sum_scalars(&terms);
        (tape.scalar(loss), tape.backward(loss).unwrap())
    }

    fn fd_check(arch: Arch, head: Head) {
        let m = Model::new(small(arch, head), 11);
        let m = Model {
            params: {
                let mut p = m.params.clone();
                // nonzero biases so every path is exercised
                for t in &mut p.tensors {
                    if t.shape.len() == 1 {
                        t.values = input(t.values.len(), 0.9).iter().map(|v| 0.1 * v).collect();
                    }
                }
                p
            },
            ..m
        };
        let (_, g) = unroll_loss(&m);
        let h = 1e-6;
        for (ti, t) in m.params.tensors.iter().enumerate() {
            for i in 0..t.values.len() {
                let mut plus = m.clone();
                plus.params.tensors[ti].values[i] += h;
                let mut minus = m.clone();
                minus.params.tensors[ti].values[i] -= h;
                let fd = (unroll_loss(&plus).0 - unroll_loss(&minus).0) / (2.0 * h);
                let an = g.tensors[ti].values[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "{} [{i}]: analytic {an} fd {fd}", t.name);
            }
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        fd_check(Arch::Lstm, Head::Policy);
        fd_check(Arch::Lstm, Head::Value);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        fd_check(Arch::Dense, Head::Policy);
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        // loss = sum (W x - a)^2 with x = [1], so dL/dW = 2 (W - a)
        let mut p = ParamSet {
            tensors: vec![Tensor {
                name: "w".into(),
                shape: vec![3, 1],
                values: vec![0.5, -1.0, 2.0],
            }],
        };
        let a = [1.0, 1.0, -3.0];
        let tape_grad = {
            let mut tape = Tape::new(&p);
            let x = tape.constant(vec![1.0]);
            let y = tape.affine(0, None, x).unwrap();
            let na = tape.constant(a.iter().map(|v| -v).collect());
            let d = tape.add(y, na);
            let sq = tape.dot(d, d);
            tape.backward(sq).unwrap()
        };
        for i in 0..3 {
            assert_eq!(tape_grad.tensors[0].values[i], 2.0 * (p.tensors[0].values[i] - a[i]));
        }
        p.tensors[0].values[0] = f64::NAN;
        let mut tape = Tape::new(&p);
        let x = tape.constant(vec![1.0]);
        let y = tape.affine(0, None, x).unwrap();
        let s = tape.sum(y);
        assert!(matches!(tape.backward(s), Err(NnError::NonFiniteLoss(_))));
    }

    #[test]
    fn zero_params_give_uniform_policy_and_zero_value() {
        let spec = NetSpec::new(Arch::Lstm, Head::Policy);
        let m = Model::from_params(spec, spec.zeros()).unwrap();
        let (p, s) = m
            .forward_policy(&[0.3; 110], &[0.125; 32], &RecurrentState::zeros(64))
            .unwrap();
        assert!(p.iter().all(|&x| (x - 0.125).abs() < 1e-15));
        assert!(s.h.iter().all(|&x| x == 0.0));
        let vspec = NetSpec::new(Arch::Lstm, Head::Value);
        let v = Model::from_params(vspec, vspec.zeros()).unwrap();
        let (val, _) = v
            .forward_value(&[0.3; 110], &[0.125; 32], &RecurrentState::zeros(64))
            .unwrap();
        assert_eq!(val, 0.0);
    }

    #[test]
    fn value_is_linear_in_head_weights() {
        let spec = NetSpec::new(Arch::Lstm, Head::Value);
        let m = Model::new(spec, 3);
        let obs: Vec<f64> = input(110, 0.37);
        let fp = vec![0.125; 32];
        let s0 = RecurrentState::zeros(64);
        let (v1, _) = m.forward_value(&obs, &fp, &s0).unwrap();
        let mut m2 = m.clone();
        m2.params.get_mut("head.w").unwrap().values.iter_mut().for_each(|w| *w *= 2.0);
        let (v2, _) = m2.forward_value(&obs, &fp, &s0).unwrap();
        assert!((v2 - 2.0 * v1).abs() < 1e-12);
    }

    #[test]
    fn policy_is_a_simplex_and_reproducible() {
        let spec = NetSpec::new(Arch::Lstm, Head::Policy);
        let a = Model::new(spec, 42);
        let b = Model::new(spec, 42);
        assert_eq!(a, b);
        let obs = input(110, 0.21);
        let fp = vec![0.125; 32];
        let (p, s) = a.forward_policy(&obs, &fp, &RecurrentState::zeros(64)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
        assert!(s.c.iter().all(|x| x.is_finite()));
        assert_eq!(p, b.forward_policy(&obs, &fp, &RecurrentState::zeros(64)).unwrap().0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let m = Model::new(NetSpec::new(Arch::Dense, Head::Policy), 1);
        let e = m.forward_policy(&[0.0; 10], &[0.0; 32], &RecurrentState::zeros(64));
        assert!(matches!(e, Err(NnError::Shape { expected: 110, got: 10, .. })));
    }

    #[test]
    fn adam_single_step_closed_form() {
        let mut p = ParamSet {
            tensors: vec![Tensor {
                name: "x".into(),
                shape: vec![2],
                values: vec![1.0, -2.0],
            }],
        };
        let g = ParamSet {
            tensors: vec![Tensor {
                name: "x".into(),
                shape: vec![2],
                values: vec![0.5, 0.0],
            }],
        };
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.01);
        // m̂ = g, v̂ = g², update = lr * g / (|g| + eps)
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.tensors[0].values[0] - expected).abs() < 1e-15);
        assert_eq!(p.tensors[0].values[1], -2.0);
    }

    #[test]
    fn adam_descends_under_constant_gradient() {
        let mut p = ParamSet {
            tensors: vec![Tensor::zeros("x", &[1])],
        };
        let mut g = p.zeros_like();
        g.tensors[0].values[0] = 3.0;
        let mut adam = Adam::new(&p);
        for _ in 0..50 {
            adam.step(&mut p, &g, 1e-3);
        }
        assert!(p.tensors[0].values[0] < 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(NetSpec::new(Arch::Dense, Head::Value), 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::new(m.clone()).save(&path).unwrap();
        let back: Model = Checkpoint::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn linear_decay_endpoints() {
        assert_eq!(linear_decay(1e-3, 0, 10), 1e-3);
        assert_eq!(linear_decay(1e-3, 10, 10), 0.0);
        assert!((linear_decay(1e-3, 5, 10) - 5e-4).abs() < 1e-18);
    }
}
