//! Central finite-difference oracle shared by gradient tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use newvision_core::model::forward::Bound;
use newvision_core::model::MedParams;
use newvision_core::tensor::{NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Denominator floor so entries whose true gradient is ~0 are judged by
/// absolute error instead of amplifying finite-difference noise.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative error between backprop and central differences of the
/// scalar built by `f` over every element of every input. `coords` limits
/// how many elements per input are probed (all when `None`).
pub fn max_rel_error<F>(inputs: &[Tensor<f64>], coords: Option<usize>, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();
    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &ids);
        tape.value(out).item().unwrap()
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let g = grads.get(*id).expect("every input reaches the loss");
        let n = inputs[i].numel();
        let stride = coords.map_or(1, |c| (n / c.max(1)).max(1));
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - STEP;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(g.data()[j], numeric));
        }
    }
    worst
}

/// Model parameters as f64 tensors, in name order.
pub fn params_f64(params: &MedParams) -> (Vec<String>, Vec<Tensor<f64>>) {
    params.iter().map(|(n, t)| (n.clone(), t.cast::<f64>())).unzip()
}

pub fn bound(names: &[String], ids: &[NodeId]) -> Bound {
    Bound::from_ids(names.iter().cloned().zip(ids.iter().copied()).collect::<BTreeMap<_, _>>())
}
