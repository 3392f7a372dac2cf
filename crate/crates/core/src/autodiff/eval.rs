use std::collections::{BTreeMap, BTreeSet};

use super::graph::{Graph, NodeId, Op};
use super::{Feed, Params};
use crate::align::ctc_forward_backward;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Which leaves receive gradients.
#[derive(Clone, Debug)]
pub enum ParamSelect {
    All,
    None,
    Prefix(String),
    Names(BTreeSet<String>),
}

impl ParamSelect {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            ParamSelect::All => true,
            ParamSelect::None => false,
            ParamSelect::Prefix(p) => name.starts_with(p.as_str()),
            ParamSelect::Names(set) => set.contains(name),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Wrt {
    pub params: ParamSelect,
    pub inputs: BTreeSet<String>,
}

impl Wrt {
    pub fn all_params() -> Self {
        Self {
            params: ParamSelect::All,
            inputs: BTreeSet::new(),
        }
    }

    pub fn params_with_prefix(prefix: &str) -> Self {
        Self {
            params: ParamSelect::Prefix(prefix.to_string()),
            inputs: BTreeSet::new(),
        }
    }

    pub fn with_input(mut self, name: &str) -> Self {
        self.inputs.insert(name.to_string());
        self
    }
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Matrix>,
    pub inputs: BTreeMap<String, Matrix>,
}

impl Gradients {
    /// Element-wise accumulation of another gradient set.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (dst, src) in [
            (&mut self.params, &other.params),
            (&mut self.inputs, &other.inputs),
        ] {
            for (name, g) in src {
                match dst.get_mut(name) {
                    Some(acc) => acc.add_scaled(g, weight),
                    None => {
                        dst.insert(name.clone(), g.scale(weight));
                    }
                }
            }
        }
    }
}

/// Node values from one forward pass over a graph.
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Matrix>,
    // d(loss)/d(logits) for CTC nodes, filled during the forward pass
    ctc_grads: BTreeMap<NodeId, Matrix>,
}

fn lookup<'a>(params: &[&'a Params], name: &str) -> Option<&'a Matrix> {
    params.iter().find_map(|p| p.get(name))
}

pub fn rotary_inv_freq(width: usize, base: f64) -> Vec<f64> {
    (0..width / 2)
        .map(|i| base.powf(-(2.0 * i as f64) / width as f64))
        .collect()
}

/// Rotates adjacent column pairs; `sign = -1` applies the inverse rotation.
pub(crate) fn rotate_rows(x: &Matrix, positions: &[usize], base: f64, sign: f64) -> Matrix {
    let inv = rotary_inv_freq(x.cols(), base);
    let mut out = x.clone();
    for (t, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(t);
        for (i, f) in inv.iter().enumerate() {
            let (s, c) = (sign * pos as f64 * f).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Evaluates every node of `graph`. Parameters are looked up in `params` in
/// order, so an adapter store can sit beside the base weights.
pub fn forward_eval<'g>(graph: &'g Graph, params: &[&Params], feed: &Feed) -> Result<Evaluation<'g>> {
    let mut values: Vec<Matrix> = Vec::with_capacity(graph.len());
    let mut ctc_grads = BTreeMap::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        let arg = |k: usize| &values[node.inputs[k]];
        let value = match &node.op {
            Op::Param(name) => lookup(params, name)
                .ok_or_else(|| Error::Missing {
                    kind: "parameter",
                    name: name.clone(),
                })?
                .clone(),
            Op::Input(name) => feed
                .get(name)
                .ok_or_else(|| Error::Missing {
                    kind: "input",
                    name: name.clone(),
                })?
                .clone(),
            Op::Const(m) => m.clone(),
            Op::MatMul => arg(0).matmul(arg(1)),
            Op::MatMulBt => arg(0).matmul_bt(arg(1)),
            Op::Add => arg(0).add(arg(1)),
            Op::Sub => arg(0).sub(arg(1)),
            Op::Mul => arg(0).hadamard(arg(1)),
            Op::AddRow | Op::MulRow => {
                let (a, r) = (arg(0), arg(1).row(0));
                let mut out = a.clone();
                let add = matches!(node.op, Op::AddRow);
                for i in 0..out.rows() {
                    for (v, b) in out.row_mut(i).iter_mut().zip(r) {
                        if add {
                            *v += b;
                        } else {
                            *v *= b;
                        }
                    }
                }
                out
            }
            Op::Scale(c) => arg(0).scale(*c),
            Op::Gelu => arg(0).map(gelu),
            Op::SoftmaxRows => softmax_rows(arg(0)),
            Op::LayerNorm { eps } => {
                let mut out = arg(0).clone();
                for i in 0..out.rows() {
                    let row = out.row_mut(i);
                    let (mean, inv) = layer_norm_stats(row, *eps);
                    for v in row.iter_mut() {
                        *v = (*v - mean) * inv;
                    }
                }
                out
            }
            Op::SliceCols { start, len } => arg(0).slice_cols(*start, *len),
            Op::ConcatCols => {
                let parts: Vec<&Matrix> = node.inputs.iter().map(|&i| &values[i]).collect();
                Matrix::concat_cols(&parts)?
            }
            Op::Sum => Matrix::scalar(arg(0).sum()),
            Op::Mean => Matrix::scalar(arg(0).sum() / arg(0).len() as f64),
            Op::Embedding { ids } => {
                let table = arg(0);
                let mut out = Matrix::zeros(ids.len(), table.cols());
                for (t, &i) in ids.iter().enumerate() {
                    out.row_mut(t).copy_from_slice(table.row(i));
                }
                out
            }
            Op::Rotary { positions, base } => rotate_rows(arg(0), positions, *base, 1.0),
            Op::CtcLoss { target } => {
                let logp = log_softmax_rows(arg(0));
                let (nll, occupancy) = ctc_forward_backward(&logp, target)?;
                let probs = logp.map(f64::exp);
                ctc_grads.insert(id, probs.sub(&occupancy));
                Matrix::scalar(nll)
            }
        };
        if value.shape() != node.shape {
            return Err(Error::Shape {
                node: id,
                detail: format!(
                    "{} produced {:?}, declared {:?}",
                    node.op.kind(),
                    value.shape(),
                    node.shape
                ),
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id });
        }
        values.push(value);
    }
    Ok(Evaluation {
        graph,
        values,
        ctc_grads,
    })
}

impl<'g> Evaluation<'g> {
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id]
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = &self.values[id];
        if v.shape() != (1, 1) {
            return Err(Error::NotScalar(id));
        }
        Ok(v.get(0, 0))
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// Reverse pass from a scalar output seeded with 1.
    pub fn backward(&self, output: NodeId, wrt: &Wrt) -> Result<Gradients> {
        self.backward_seeded(output, 1.0, wrt)
    }

    pub fn backward_seeded(&self, output: NodeId, seed: f64, wrt: &Wrt) -> Result<Gradients> {
        let nodes = self.graph.nodes();
        if nodes[output].shape != (1, 1) {
            return Err(Error::NotScalar(output));
        }
        // a node needs a gradient if a requested leaf lies beneath it
        let mut needs = vec![false; output + 1];
        for (id, node) in nodes.iter().enumerate().take(output + 1) {
            needs[id] = match &node.op {
                Op::Param(name) => wrt.params.contains(name),
                Op::Input(name) => wrt.inputs.contains(name),
                Op::Const(_) => false,
                _ => node.inputs.iter().any(|&i| needs[i]),
            };
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; output + 1];
        if needs[output] {
            grads[output] = Some(Matrix::scalar(seed));
        }
        for id in (0..=output).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            let x = |k: usize| &self.values[node.inputs[k]];
            let want = |k: usize| needs[node.inputs[k]];
            let push = |k: usize, g: Matrix, grads: &mut Vec<Option<Matrix>>| {
                let slot = &mut grads[node.inputs[k]];
                match slot {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Param(_) | Op::Input(_) | Op::Const(_) => {
                    // leaves keep their gradient for collection below
                    grads[id] = Some(dy);
                    continue;
                }
                Op::MatMul => {
                    if want(0) {
                        push(0, dy.matmul_bt(x(1)), &mut grads);
                    }
                    if want(1) {
                        push(1, x(0).matmul_at(&dy), &mut grads);
                    }
                }
                Op::MatMulBt => {
                    if want(0) {
                        push(0, dy.matmul(x(1)), &mut grads);
                    }
                    if want(1) {
                        push(1, dy.matmul_at(x(0)), &mut grads);
                    }
                }
                Op::Add => {
                    if want(1) {
                        push(1, dy.clone(), &mut grads);
                    }
                    if want(0) {
                        push(0, dy, &mut grads);
                    }
                }
                Op::Sub => {
                    if want(1) {
                        push(1, dy.scale(-1.0), &mut grads);
                    }
                    if want(0) {
                        push(0, dy, &mut grads);
                    }
                }
                Op::Mul => {
                    if want(0) {
                        push(0, dy.hadamard(x(1)), &mut grads);
                    }
                    if want(1) {
                        push(1, dy.hadamard(x(0)), &mut grads);
                    }
                }
                Op::AddRow => {
                    if want(1) {
                        let mut g = Matrix::zeros(1, dy.cols());
                        for i in 0..dy.rows() {
                            for (acc, v) in g.row_mut(0).iter_mut().zip(dy.row(i)) {
                                *acc += v;
                            }
                        }
                        push(1, g, &mut grads);
                    }
                    if want(0) {
                        push(0, dy, &mut grads);
                    }
                }
                Op::MulRow => {
                    let (a, r) = (x(0), x(1));
                    if want(1) {
                        let mut g = Matrix::zeros(1, dy.cols());
                        for i in 0..dy.rows() {
                            let gr = g.row_mut(0);
                            for ((acc, d), v) in gr.iter_mut().zip(dy.row(i)).zip(a.row(i)) {
                                *acc += d * v;
                            }
                        }
                        push(1, g, &mut grads);
                    }
                    if want(0) {
                        let mut g = dy;
                        for i in 0..g.rows() {
                            for (v, s) in g.row_mut(i).iter_mut().zip(r.row(0)) {
                                *v *= s;
                            }
                        }
                        push(0, g, &mut grads);
                    }
                }
                Op::Scale(c) => push(0, dy.scale(*c), &mut grads),
                Op::Gelu => push(0, dy.zip_map(x(0), |d, v| d * gelu_grad(v)), &mut grads),
                Op::SoftmaxRows => {
                    let y = &self.values[id];
                    let mut g = dy;
                    for i in 0..g.rows() {
                        let yr = y.row(i);
                        let dot: f64 = g.row(i).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (v, p) in g.row_mut(i).iter_mut().zip(yr) {
                            *v = p * (*v - dot);
                        }
                    }
                    push(0, g, &mut grads);
                }
                Op::LayerNorm { eps } => {
                    let xin = x(0);
                    let y = &self.values[id];
                    let n = xin.cols() as f64;
                    let mut g = dy;
                    for i in 0..g.rows() {
                        let (_, inv) = layer_norm_stats(xin.row(i), *eps);
                        let yr = y.row(i);
                        let mean_d = g.row(i).iter().sum::<f64>() / n;
                        let mean_dy: f64 =
                            g.row(i).iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (v, yy) in g.row_mut(i).iter_mut().zip(yr) {
                            *v = inv * (*v - mean_d - yy * mean_dy);
                        }
                    }
                    push(0, g, &mut grads);
                }
                Op::SliceCols { start, len } => {
                    let (rows, cols) = self.graph.shape(node.inputs[0]);
                    let mut g = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        g.row_mut(i)[*start..start + len].copy_from_slice(dy.row(i));
                    }
                    push(0, g, &mut grads);
                }
                Op::ConcatCols => {
                    let mut offset = 0;
                    for k in 0..node.inputs.len() {
                        let w = self.graph.shape(node.inputs[k]).1;
                        if want(k) {
                            push(k, dy.slice_cols(offset, w), &mut grads);
                        }
                        offset += w;
                    }
                }
                Op::Sum | Op::Mean => {
                    let (rows, cols) = self.graph.shape(node.inputs[0]);
                    let mut d = dy.get(0, 0);
                    if matches!(node.op, Op::Mean) {
                        d /= (rows * cols) as f64;
                    }
                    push(0, Matrix::filled(rows, cols, d), &mut grads);
                }
                Op::Embedding { ids } => {
                    let (rows, cols) = self.graph.shape(node.inputs[0]);
                    let mut g = Matrix::zeros(rows, cols);
                    for (t, &i) in ids.iter().enumerate() {
                        for (acc, v) in g.row_mut(i).iter_mut().zip(dy.row(t)) {
                            *acc += v;
                        }
                    }
                    push(0, g, &mut grads);
                }
                Op::Rotary { positions, base } => {
                    push(0, rotate_rows(&dy, positions, *base, -1.0), &mut grads)
                }
                Op::CtcLoss { .. } => {
                    let g = self.ctc_grads[&id].scale(dy.get(0, 0));
                    push(0, g, &mut grads);
                }
            }
        }

        let mut out = Gradients::default();
        for (id, node) in nodes.iter().enumerate() {
            let (map, name) = match &node.op {
                Op::Param(name) if wrt.params.contains(name) => (&mut out.params, name),
                Op::Input(name) if wrt.inputs.contains(name) => (&mut out.inputs, name),
                _ => continue,
            };
            let g = grads
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| Matrix::zeros(node.shape.0, node.shape.1));
            match map.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    map.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}
