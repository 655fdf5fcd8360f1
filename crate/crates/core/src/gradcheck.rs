//! Central finite-difference checks of the analytic BPR gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SplitDataset;
use crate::embedding::init_embeddings;
use crate::error::Result;
use crate::graph::{build_adjacency_with, AdjacencyOptions};
use crate::model::{ModelState, SolverConfig, TrainableModel};
use crate::solver::SolverMethod;
use crate::train::{batch_loss, loss_and_gradients, sample_triplets, TripletBatch};

/// Differences below this magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckCase {
    pub method: SolverMethod,
    pub n_hops: usize,
    pub use_weights: bool,
    pub max_rel_error: f64,
    pub n_params: usize,
}

/// A random leave-one-out dataset with every user holding at least one
/// negative item.
pub fn random_dataset(n_users: usize, n_items: usize, seed: u64) -> Result<SplitDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_users);
    let mut val = Vec::with_capacity(n_users);
    let mut test = Vec::with_capacity(n_users);
    let max_len = (n_items - 1).clamp(3, 6);
    for _ in 0..n_users {
        let len = rng.random_range(3..=max_len);
        let items: Vec<u32> = sample(&mut rng, n_items, len).into_iter().map(|i| i as u32).collect();
        test.push(items[len - 1]);
        val.push(items[len - 2]);
        train.push(items[..len - 2].to_vec());
    }
    SplitDataset::from_parts(n_items, train, val, test, None, None)
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter of `model`.
pub fn max_relative_error<M: TrainableModel>(model: &M, batch: &TripletBatch, l2_lambda: f64, h: f64) -> Result<f64> {
    let (_, g) = loss_and_gradients(model, batch, l2_lambda)?;
    let loss = |m: &M| -> Result<f64> { batch_loss(&m.forward()?, m.e0(), batch, l2_lambda) };
    let rel = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(RELATIVE_FLOOR);
    let mut worst: f64 = 0.0;
    for k in 0..model.e0().as_slice().len() {
        let mut plus = model.clone();
        plus.e0_mut().as_mut_slice()[k] += h;
        let mut minus = model.clone();
        minus.e0_mut().as_mut_slice()[k] -= h;
        let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        worst = worst.max(rel(g.grad_e0.as_slice()[k], fd));
    }
    for k in 0..model.extra_params().len() {
        let mut plus = model.clone();
        plus.extra_params_mut()[k] += h;
        let mut minus = model.clone();
        minus.extra_params_mut()[k] -= h;
        let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        worst = worst.max(rel(g.grad_hop_weights[k], fd));
    }
    Ok(worst)
}

/// Runs the check for every solver x hop count (1..=3) x weight setting on
/// one random instance (8 users, 12 items, D=4).
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let ds = random_dataset(8, 12, seed)?;
    let adjacency = Arc::new(build_adjacency_with(&ds, AdjacencyOptions { allow_isolated: true })?);
    let e0 = init_embeddings(ds.n_users() + ds.n_items(), 4, 0.5, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let batch = sample_triplets(&ds, 16, &mut rng)?;
    let mut cases = Vec::new();
    for method in [SolverMethod::Euler, SolverMethod::Rk4] {
        for n_hops in 1..=3 {
            for use_weights in [false, true] {
                let solver = SolverConfig { method, t1: 0.9, steps: 2, n_hops, use_weights };
                let mut model = ModelState::new(e0.clone(), adjacency.clone(), solver)?;
                for w in model.hop_weights.iter_mut() {
                    *w = rng.random_range(0.5..1.5);
                }
                let max_rel_error = max_relative_error(&model, &batch, 0.01, 1e-5)?;
                cases.push(GradCheckCase {
                    method,
                    n_hops,
                    use_weights,
                    max_rel_error,
                    n_params: e0.as_slice().len() + model.hop_weights.len(),
                });
            }
        }
    }
    Ok(cases)
}
