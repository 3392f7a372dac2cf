use lorp::autodiff::{finite_diff_check, Feed, Graph, NodeId, Params, Wrt};
use lorp::seed;
use lorp::Matrix;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

struct Case {
    g: Graph,
    params: Params,
    feed: Feed,
}

impl Case {
    fn new() -> Self {
        Self {
            g: Graph::new(),
            params: Params::new(),
            feed: Feed::new(),
        }
    }

    fn param(&mut self, name: &str, rows: usize, cols: usize, s: u64) -> NodeId {
        let m = Matrix::randn(rows, cols, 1.0, &mut seed::rng(s));
        self.params.insert(name.into(), m);
        self.g.param(name, (rows, cols))
    }

    /// Weighted sum so that every output coordinate carries a distinct
    /// gradient.
    fn reduce(&mut self, out: NodeId, s: u64) -> NodeId {
        let (r, c) = self.g.shape(out);
        let w = self.g.constant(Matrix::randn(r, c, 1.0, &mut seed::rng(s ^ 0xabc)));
        let p = self.g.mul(out, w).unwrap();
        self.g.sum(p).unwrap()
    }

    fn check(&self, loss: NodeId, wrt: &Wrt) -> f64 {
        finite_diff_check(&self.g, &[&self.params], &self.feed, loss, wrt, 1e-5, 500, 3).unwrap()
    }
}

fn unary(build: impl Fn(&mut Graph, NodeId) -> NodeId, rows: usize, cols: usize) -> f64 {
    let mut c = Case::new();
    let a = c.param("a", rows, cols, 1);
    let out = build(&mut c.g, a);
    let loss = c.reduce(out, 2);
    c.check(loss, &Wrt::all_params())
}

fn binary(build: impl Fn(&mut Graph, NodeId, NodeId) -> NodeId, a: (usize, usize), b: (usize, usize)) -> f64 {
    let mut c = Case::new();
    let x = c.param("a", a.0, a.1, 1);
    let y = c.param("b", b.0, b.1, 2);
    let out = build(&mut c.g, x, y);
    let loss = c.reduce(out, 3);
    c.check(loss, &Wrt::all_params())
}

#[test]
fn matmul_and_transposed() {
    assert!(binary(|g, a, b| g.matmul(a, b).unwrap(), (3, 4), (4, 2)) < TOL);
    assert!(binary(|g, a, b| g.matmul_bt(a, b).unwrap(), (3, 4), (5, 4)) < TOL);
}

#[test]
fn elementwise() {
    assert!(binary(|g, a, b| g.add(a, b).unwrap(), (3, 4), (3, 4)) < TOL);
    assert!(binary(|g, a, b| g.sub(a, b).unwrap(), (3, 4), (3, 4)) < TOL);
    assert!(binary(|g, a, b| g.mul(a, b).unwrap(), (3, 4), (3, 4)) < TOL);
    assert!(binary(|g, a, b| g.add_row(a, b).unwrap(), (3, 4), (1, 4)) < TOL);
    assert!(binary(|g, a, b| g.mul_row(a, b).unwrap(), (3, 4), (1, 4)) < TOL);
    assert!(unary(|g, a| g.scale(a, -1.7).unwrap(), 3, 4) < TOL);
    // same node on both sides
    assert!(unary(|g, a| g.mul(a, a).unwrap(), 3, 4) < TOL);
}

#[test]
fn nonlinearities() {
    assert!(unary(|g, a| g.gelu(a).unwrap(), 4, 5) < TOL);
    assert!(unary(|g, a| g.softmax_rows(a).unwrap(), 4, 5) < TOL);
    assert!(unary(|g, a| g.layer_norm(a, 1e-5).unwrap(), 4, 6) < TOL);
}

#[test]
fn structural() {
    assert!(unary(|g, a| g.slice_cols(a, 1, 3).unwrap(), 3, 5) < TOL);
    assert!(binary(|g, a, b| g.concat_cols(&[a, b, a]).unwrap(), (3, 2), (3, 4)) < TOL);
    assert!(unary(|g, a| g.embedding(a, vec![2, 0, 2, 3]).unwrap(), 5, 3) < TOL);
    assert!(unary(|g, a| g.rotary(a, vec![0, 3, 7], 10.0).unwrap(), 3, 6) < TOL);
}

#[test]
fn reductions() {
    let mut c = Case::new();
    let a = c.param("a", 3, 4, 1);
    let g1 = c.g.gelu(a).unwrap();
    let loss = c.g.mean(g1).unwrap();
    assert!(c.check(loss, &Wrt::all_params()) < TOL);
    let loss = c.g.sum(g1).unwrap();
    assert!(c.check(loss, &Wrt::all_params()) < TOL);
}

#[test]
fn ctc_loss_node() {
    let mut c = Case::new();
    let logits = c.param("logits", 7, 4, 5);
    let loss = c.g.ctc_loss(logits, vec![0, 2, 2, 1]).unwrap();
    assert!(c.check(loss, &Wrt::all_params()) < TOL);
}

#[test]
fn input_gradients() {
    let mut c = Case::new();
    let w = c.param("w", 3, 4, 1);
    let x = c.g.input("x", (2, 4));
    c.feed.insert("x".into(), Matrix::randn(2, 4, 1.0, &mut seed::rng(9)));
    let y = c.g.matmul_bt(x, w).unwrap();
    let y = c.g.gelu(y).unwrap();
    let loss = c.reduce(y, 4);
    assert!(c.check(loss, &Wrt::all_params().with_input("x")) < TOL);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Width starts at 4: layer norm over two columns saturates at ±1 and its
    // near-zero gradients sit below finite-difference round-off.
    #[test]
    fn attention_block_gradients(rows in 1usize..5, half in 2usize..5, s in 0u64..1000) {
        let cols = 2 * half;
        let mut c = Case::new();
        let q = c.param("q", rows, cols, s);
        let k = c.param("k", rows, cols, s + 1);
        let v = c.param("v", rows, cols, s + 2);
        let pos: Vec<usize> = (0..rows).collect();
        let qr = c.g.rotary(q, pos.clone(), 100.0).unwrap();
        let kr = c.g.rotary(k, pos, 100.0).unwrap();
        let scores = c.g.matmul_bt(qr, kr).unwrap();
        let scores = c.g.scale(scores, 1.0 / (cols as f64).sqrt()).unwrap();
        let attn = c.g.softmax_rows(scores).unwrap();
        let out = c.g.matmul(attn, v).unwrap();
        let out = c.g.layer_norm(out, 1e-5).unwrap();
        let loss = c.reduce(out, s);
        prop_assert!(c.check(loss, &Wrt::all_params()) < TOL);
    }
}
