//! Central finite-difference validation of tape gradients, in f64.

use crate::tensor::{Mode, NodeId, ParamStore, Shape, Tape};

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Relative disagreement with an absolute floor so near-zero pairs do not
/// blow up the ratio.
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1.0e-8 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Checks d(loss)/d(input) for a graph rebuilt by `build`, which receives a
/// differentiable leaf holding `data` and must return a scalar loss node.
/// Every coordinate is perturbed by ±step.
pub fn check_input_grads(
    mode: Mode,
    shape: Shape,
    data: &[f64],
    step: f64,
    mut build: impl FnMut(&mut Tape<f64>, NodeId) -> NodeId,
) -> FdReport {
    let eval = |d: Vec<f64>, build: &mut dyn FnMut(&mut Tape<f64>, NodeId) -> NodeId| -> f64 {
        let mut tape: Tape<f64> = Tape::new(mode);
        let x = tape.constant(shape, d);
        let loss = build(&mut tape, x);
        tape.value(loss)[0]
    };
    let mut tape: Tape<f64> = Tape::new(mode);
    let x = tape.variable(shape, data.to_vec());
    let loss = build(&mut tape, x);
    assert_eq!(tape.shape(loss).count(), 1, "loss must be scalar");
    tape.backward(loss).expect("backward");
    let analytic = tape.grad(x).expect("input gradient").to_vec();

    let mut max_rel: f64 = 0.0;
    for i in 0..data.len() {
        let mut plus = data.to_vec();
        plus[i] += step;
        let mut minus = data.to_vec();
        minus[i] -= step;
        let fd = (eval(plus, &mut build) - eval(minus, &mut build)) / (2.0 * step);
        max_rel = max_rel.max(rel_err(analytic[i], fd));
    }
    FdReport { max_rel, checked: data.len() }
}

/// Checks d(loss)/d(store entry `ix`) for a forward pass rebuilt by `build`
/// from a parameter store. Only the listed coordinates are perturbed, so
/// large models stay affordable.
pub fn check_param_grads(
    store: &ParamStore<f64>,
    ix: usize,
    coords: &[usize],
    step: f64,
    mut build: impl FnMut(&mut Tape<f64>, &ParamStore<f64>) -> NodeId,
) -> FdReport {
    let mut tape: Tape<f64> = Tape::new(Mode::Train { seed: 3 });
    let loss = build(&mut tape, store);
    assert_eq!(tape.shape(loss).count(), 1, "loss must be scalar");
    tape.backward(loss).expect("backward");
    let node = tape
        .param_links()
        .iter()
        .find(|&&(i, _)| i == ix)
        .map(|&(_, id)| id)
        .expect("entry unused in forward");
    let analytic = tape.grad(node).expect("parameter gradient").to_vec();

    let perturbed = |delta: f64, coord: usize, build: &mut dyn FnMut(&mut Tape<f64>, &ParamStore<f64>) -> NodeId| -> f64 {
        let mut alt = store.convert::<f64>();
        alt.entries[ix].data[coord] += delta;
        let mut tape: Tape<f64> = Tape::new(Mode::Train { seed: 3 });
        let loss = build(&mut tape, &alt);
        tape.value(loss)[0]
    };
    let mut max_rel: f64 = 0.0;
    for &coord in coords {
        let fd = (perturbed(step, coord, &mut build) - perturbed(-step, coord, &mut build))
            / (2.0 * step);
        max_rel = max_rel.max(rel_err(analytic[coord], fd));
    }
    FdReport { max_rel, checked: coords.len() }
}

/// Evenly spread sample of `k` coordinate indices in [0, len).
pub fn spread_coords(len: usize, k: usize) -> Vec<usize> {
    let k = k.min(len);
    (0..k).map(|i| i * len / k).collect()
}

/// Deterministic test tensor with values in (-1, 1), decorrelated across
/// coordinates; `salt` picks the sequence.
pub fn fill(count: usize, salt: u64) -> Vec<f64> {
    let mut rng = crate::det::DetRng::seeded(crate::det::subseed(0x6fd_c0de, salt));
    (0..count).map(|_| rng.range_f64(-1.0, 1.0)).collect()
}

/// Smooth scalar head for checking ops whose raw output is a tensor:
/// loss = mean_c(mean_hw(out ⊙ r)) with a fixed random r, reduced to 1x1x1x1.
pub fn smooth_scalar_head(tape: &mut Tape<f64>, out: NodeId, salt: u64) -> NodeId {
    let s = tape.shape(out);
    let r = tape.constant(s, fill(s.count(), salt));
    let prod = tape.mul_broadcast(out, r).expect("same-shape product");
    let pooled = tape.gap_spatial(prod);
    let merged = tape.avg_over_channels(pooled);
    assert_eq!(tape.shape(merged).count(), 1, "head expects a single sample");
    merged
}
