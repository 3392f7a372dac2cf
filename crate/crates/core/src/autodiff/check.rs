use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{forward_eval, Feed, Graph, NodeId, Op, Params, Wrt};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Coord {
    Param { store: usize, name: String, idx: usize },
    Input { name: String, idx: usize },
}

/// Compares reverse-mode gradients against central differences.
///
/// Returns the maximum over sampled coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    graph: &Graph,
    params: &[&Params],
    feed: &Feed,
    output: NodeId,
    wrt: &Wrt,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-2]")));
    }
    let eval = forward_eval(graph, params, feed)?;
    let grads = eval.backward(output, wrt)?;
    drop(eval);

    let mut coords = Vec::new();
    for name in graph.param_names() {
        if !wrt.params.contains(name) {
            continue;
        }
        let Some(store) = params.iter().position(|p| p.contains_key(name)) else {
            continue;
        };
        for idx in 0..params[store][name].len() {
            coords.push(Coord::Param {
                store,
                name: name.to_string(),
                idx,
            });
        }
    }
    for node in graph.nodes() {
        if let Op::Input(name) = &node.op {
            if wrt.inputs.contains(name) && !coords.iter().any(|c| matches!(c, Coord::Input { name: n, .. } if n == name)) {
                for idx in 0..feed.get(name).map_or(0, |m| m.len()) {
                    coords.push(Coord::Input {
                        name: name.clone(),
                        idx,
                    });
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<Coord> = if samples >= coords.len() {
        coords
    } else {
        coords.into_iter().choose_multiple(&mut rng, samples)
    };

    let mut stores: Vec<Params> = params.iter().map(|p| (*p).clone()).collect();
    let mut feed = feed.clone();
    let mut worst: f64 = 0.0;
    for c in &picked {
        let analytic = match c {
            Coord::Param { name, idx, .. } => grads.params[name].data()[*idx],
            Coord::Input { name, idx } => grads.inputs[name].data()[*idx],
        };
        let probe = |delta: f64, stores: &mut Vec<Params>, feed: &mut Feed| -> Result<f64> {
            let cell = match c {
                Coord::Param { store, name, idx } => {
                    &mut stores[*store].get_mut(name).expect("present").data_mut()[*idx]
                }
                Coord::Input { name, idx } => &mut feed.get_mut(name).expect("present").data_mut()[*idx],
            };
            let orig = *cell;
            *cell = orig + delta;
            let refs: Vec<&Params> = stores.iter().collect();
            let value = forward_eval(graph, &refs, feed).and_then(|e| e.scalar(output));
            let cell = match c {
                Coord::Param { store, name, idx } => {
                    &mut stores[*store].get_mut(name).expect("present").data_mut()[*idx]
                }
                Coord::Input { name, idx } => &mut feed.get_mut(name).expect("present").data_mut()[*idx],
            };
            *cell = orig;
            value
        };
        let plus = probe(eps, &mut stores, &mut feed)?;
        let minus = probe(-eps, &mut stores, &mut feed)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
