//! Graph construction with eager shape inference.
//!
//! A [`Graph`] is a topologically ordered list of nodes. Leaves are named
//! parameters, named inputs, or constants; every other node is an op over
//! earlier nodes. Shapes are checked as nodes are appended, so a built graph
//! is always shape-consistent.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub type NodeId = usize;
pub type Shape = (usize, usize);

#[derive(Clone, Debug)]
pub enum Op {
    Param(String),
    Input(String),
    Const(Matrix),
    /// `a · b`
    MatMul,
    /// `a · bᵀ`
    MatMulBt,
    Add,
    /// `a + 1·b` where `b` is a single row broadcast over the rows of `a`.
    AddRow,
    Sub,
    Mul,
    /// Row-broadcast element-wise product.
    MulRow,
    Scale(f64),
    Gelu,
    SoftmaxRows,
    /// Per-row standardization without affine terms.
    LayerNorm {
        eps: f64,
    },
    SliceCols {
        start: usize,
        len: usize,
    },
    ConcatCols,
    Sum,
    Mean,
    /// Row lookup into a table node.
    Embedding {
        ids: Vec<usize>,
    },
    /// Pairwise rotation of adjacent columns `(2i, 2i+1)` by
    /// `position · base^(-2i/d)`.
    Rotary {
        positions: Vec<usize>,
        base: f64,
    },
    /// Negative log-likelihood of `target` under CTC with the last column as
    /// blank; the input holds unnormalized logits.
    CtcLoss {
        target: Vec<usize>,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::MatMul => "matmul",
            Op::MatMulBt => "matmul_bt",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MulRow => "mul_row",
            Op::Scale(_) => "scale",
            Op::Gelu => "gelu",
            Op::SoftmaxRows => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Embedding { .. } => "embedding",
            Op::Rotary { .. } => "rotary",
            Op::CtcLoss { .. } => "ctc_loss",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id].shape
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Shape) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        self.nodes.len() - 1
    }

    fn mismatch(&self, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            detail,
        }
    }

    fn check_ids(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.nodes.len()) {
            Some(id) => Err(self.mismatch(format!("unknown input node {id}"))),
            None => Ok(()),
        }
    }

    pub fn param(&mut self, name: impl Into<String>, shape: Shape) -> NodeId {
        self.push(Op::Param(name.into()), vec![], shape)
    }

    pub fn input(&mut self, name: impl Into<String>, shape: Shape) -> NodeId {
        self.push(Op::Input(name.into()), vec![], shape)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        let shape = value.shape();
        self.push(Op::Const(value), vec![], shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(self.mismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul, vec![a, b], (sa.0, sb.1)))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(self.mismatch(format!("matmul_bt {sa:?} x {sb:?}ᵀ")));
        }
        Ok(self.push(Op::MatMulBt, vec![a, b], (sa.0, sb.0)))
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.mismatch(format!("{} {sa:?} vs {sb:?}", op.kind())));
        }
        Ok(self.push(op, vec![a, b], sa))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Mul, a, b)
    }

    fn row_broadcast(&mut self, op: Op, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_ids(&[a, row])?;
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(self.mismatch(format!("{} {sa:?} with row {sr:?}", op.kind())));
        }
        Ok(self.push(op, vec![a, row], sa))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast(Op::AddRow, a, row)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast(Op::MulRow, a, row)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let s = self.shape(a);
        Ok(self.push(op, vec![a], s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Scale(c), a)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Gelu, a)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::SoftmaxRows, a)
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.unary(Op::LayerNorm { eps }, a)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let s = self.shape(a);
        if start + len > s.1 || len == 0 {
            return Err(self.mismatch(format!("slice {start}..{} of {s:?}", start + len)));
        }
        Ok(self.push(Op::SliceCols { start, len }, vec![a], (s.0, len)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check_ids(parts)?;
        let Some(&first) = parts.first() else {
            return Err(self.mismatch("concat of nothing".into()));
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(self.mismatch(format!("concat rows {} vs {rows}", s.0)));
            }
            cols += s.1;
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), (rows, cols)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids(&[a])?;
        Ok(self.push(Op::Sum, vec![a], (1, 1)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids(&[a])?;
        Ok(self.push(Op::Mean, vec![a], (1, 1)))
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        self.check_ids(&[table])?;
        let s = self.shape(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= s.0) {
            return Err(self.mismatch(format!("token id {bad} outside table of {} rows", s.0)));
        }
        let rows = ids.len();
        Ok(self.push(Op::Embedding { ids }, vec![table], (rows, s.1)))
    }

    pub fn rotary(&mut self, a: NodeId, positions: Vec<usize>, base: f64) -> Result<NodeId> {
        self.check_ids(&[a])?;
        let s = self.shape(a);
        if s.1 % 2 != 0 {
            return Err(self.mismatch(format!("rotary needs an even width, got {}", s.1)));
        }
        if positions.len() != s.0 {
            return Err(self.mismatch(format!(
                "{} positions for {} rows",
                positions.len(),
                s.0
            )));
        }
        Ok(self.push(Op::Rotary { positions, base }, vec![a], s))
    }

    pub fn ctc_loss(&mut self, logits: NodeId, target: Vec<usize>) -> Result<NodeId> {
        self.check_ids(&[logits])?;
        let (frames, classes) = self.shape(logits);
        if classes < 2 {
            return Err(self.mismatch("ctc needs at least one token plus blank".into()));
        }
        if let Some(bad) = target.iter().find(|&&v| v + 1 >= classes) {
            return Err(self.mismatch(format!("target token {bad} is blank or out of range")));
        }
        let needed = crate::align::ctc_min_frames(&target);
        if needed > frames {
            return Err(Error::InfeasibleTarget {
                target: target.len(),
                frames,
            });
        }
        Ok(self.push(Op::CtcLoss { target }, vec![logits], (1, 1)))
    }

    /// Affine map `x · Wᵀ + b` for a `d_out × d_in` weight.
    pub fn dense(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul_bt(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Names of every parameter leaf, in first-use order without repeats.
    pub fn param_names(&self) -> Vec<&str> {
        let mut seen = std::collections::BTreeSet::new();
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) if seen.insert(name.as_str()) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_matmul_naming_the_node() {
        let mut g = Graph::new();
        let a = g.input("a", (2, 3));
        let b = g.input("b", (2, 3));
        match g.matmul(a, b) {
            Err(Error::Shape { node, .. }) => assert_eq!(node, 2),
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(g.matmul_bt(a, b).is_ok());
    }

    #[test]
    fn rotary_rejects_odd_width() {
        let mut g = Graph::new();
        let a = g.input("a", (2, 3));
        assert!(g.rotary(a, vec![0, 1], 10_000.0).is_err());
    }
}
