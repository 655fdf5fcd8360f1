//! BPR training of the initial embeddings through the forward map, with
//! uniform negative sampling, Adam and early stopping on validation NDCG@20.

use std::io::Write;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SplitDataset;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::model::{dot, FinalEmbeddings, TrainableModel};

/// Cutoff used for model selection.
pub const SELECTION_CUTOFF: usize = 20;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub users: Vec<u32>,
    pub pos_items: Vec<u32>,
    pub neg_items: Vec<u32>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Rows `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TripletBatch {
        TripletBatch {
            users: self.users[range.clone()].to_vec(),
            pos_items: self.pos_items[range.clone()].to_vec(),
            neg_items: self.neg_items[range].to_vec(),
        }
    }
}

fn check_samplable(ds: &SplitDataset) -> Result<()> {
    for u in 0..ds.n_users() {
        if ds.train_sorted(u).len() >= ds.n_items() {
            return Err(Error::NoNegativeCandidate { user: u });
        }
    }
    Ok(())
}

/// Uniform draw from `0..n_items` minus `positives` (sorted ascending), by
/// rejection.
pub fn sample_negative<R: Rng>(positives: &[u32], n_items: usize, rng: &mut R) -> Option<u32> {
    if positives.len() >= n_items {
        return None;
    }
    loop {
        let i = rng.random_range(0..n_items as u32);
        if positives.binary_search(&i).is_err() {
            return Some(i);
        }
    }
}

fn draw_negative<R: Rng>(ds: &SplitDataset, user: usize, rng: &mut R) -> u32 {
    sample_negative(ds.train_sorted(user), ds.n_items(), rng).expect("checked by check_samplable")
}

/// `count` triplets whose (user, positive) pairs are drawn uniformly, with
/// replacement, from the train interactions.
pub fn sample_triplets<R: Rng>(ds: &SplitDataset, count: usize, rng: &mut R) -> Result<TripletBatch> {
    check_samplable(ds)?;
    let pairs = ds.train_pairs();
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("dataset has no train interactions".into()));
    }
    let mut batch = TripletBatch::default();
    for _ in 0..count {
        let (u, i) = pairs[rng.random_range(0..pairs.len())];
        batch.users.push(u);
        batch.pos_items.push(i);
        batch.neg_items.push(draw_negative(ds, u as usize, rng));
    }
    Ok(batch)
}

/// One triplet per train interaction, in shuffled order.
pub fn epoch_triplets<R: Rng>(ds: &SplitDataset, rng: &mut R) -> Result<TripletBatch> {
    check_samplable(ds)?;
    let mut pairs = ds.train_pairs();
    pairs.shuffle(rng);
    let mut batch = TripletBatch {
        users: Vec::with_capacity(pairs.len()),
        pos_items: Vec::with_capacity(pairs.len()),
        neg_items: Vec::with_capacity(pairs.len()),
    };
    for (u, i) in pairs {
        batch.users.push(u);
        batch.pos_items.push(i);
        batch.neg_items.push(draw_negative(ds, u as usize, rng));
    }
    Ok(batch)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// `mean(-ln sigmoid(pos - neg)) + l2_lambda * params_l2`.
pub fn bpr_loss(pos_scores: &[f64], neg_scores: &[f64], params_l2: f64, l2_lambda: f64) -> Result<f64> {
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} positive vs {} negative scores",
            pos_scores.len(),
            neg_scores.len()
        )));
    }
    if pos_scores.is_empty() {
        return Ok(l2_lambda * params_l2);
    }
    let sum: f64 = pos_scores
        .iter()
        .zip(neg_scores)
        .map(|(p, n)| softplus(n - p))
        .sum();
    Ok(sum / pos_scores.len() as f64 + l2_lambda * params_l2)
}

/// Per-batch mean of the squared norms of the sampled `e0` rows
/// (user + positive + negative).
pub fn batch_l2(e0: &EmbeddingMatrix, n_users: usize, batch: &TripletBatch) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let sq = |r: usize| e0.row(r).iter().map(|v| v * v).sum::<f64>();
    let total: f64 = (0..batch.len())
        .map(|b| {
            sq(batch.users[b] as usize)
                + sq(n_users + batch.pos_items[b] as usize)
                + sq(n_users + batch.neg_items[b] as usize)
        })
        .sum();
    total / batch.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub grad_e0: EmbeddingMatrix,
    pub grad_hop_weights: Vec<f64>,
}

impl GradientSet {
    pub fn is_finite(&self) -> bool {
        self.grad_e0.is_finite() && self.grad_hop_weights.iter().all(|v| v.is_finite())
    }
}

/// BPR loss of `batch` under `fe`, including the L2 term on `e0`.
pub fn batch_loss(fe: &FinalEmbeddings, e0: &EmbeddingMatrix, batch: &TripletBatch, l2_lambda: f64) -> Result<f64> {
    let (pos, neg) = batch_scores(fe, batch);
    bpr_loss(&pos, &neg, batch_l2(e0, fe.n_users, batch), l2_lambda)
}

fn batch_scores(fe: &FinalEmbeddings, batch: &TripletBatch) -> (Vec<f64>, Vec<f64>) {
    (0..batch.len())
        .map(|b| {
            let u = fe.user(batch.users[b] as usize);
            (
                dot(u, fe.item(batch.pos_items[b] as usize)),
                dot(u, fe.item(batch.neg_items[b] as usize)),
            )
        })
        .unzip()
}

/// Gradient of the batch loss w.r.t. the final embeddings (BPR part only).
fn bpr_grad_final(fe: &FinalEmbeddings, batch: &TripletBatch) -> EmbeddingMatrix {
    let n_users = fe.n_users;
    let mut g = EmbeddingMatrix::zeros(fe.e_final.rows(), fe.e_final.dims());
    let scale = 1.0 / batch.len() as f64;
    for b in 0..batch.len() {
        let (u, p, n) = (
            batch.users[b] as usize,
            n_users + batch.pos_items[b] as usize,
            n_users + batch.neg_items[b] as usize,
        );
        let eu = fe.e_final.row(u);
        let ep = fe.e_final.row(p);
        let en = fe.e_final.row(n);
        let x = dot(eu, ep) - dot(eu, en);
        // d softplus(-x) / dx = -sigmoid(-x)
        let c = -sigmoid(-x) * scale;
        let du: Vec<f64> = ep.iter().zip(en).map(|(a, b)| c * (a - b)).collect();
        let dp: Vec<f64> = eu.iter().map(|v| c * v).collect();
        for (d, v) in g.row_mut(u).iter_mut().zip(&du) {
            *d += v;
        }
        for (d, v) in g.row_mut(p).iter_mut().zip(&dp) {
            *d += v;
        }
        for (d, v) in g.row_mut(n).iter_mut().zip(&dp) {
            *d -= v;
        }
    }
    g
}

/// Exact gradient of [`batch_loss`] w.r.t. `e0` and the model's extra
/// parameters, using the tape of the forward pass that produced `fe`.
pub fn backward<M: TrainableModel>(
    model: &M,
    batch: &TripletBatch,
    fe: &FinalEmbeddings,
    tape: Option<&M::Tape>,
    l2_lambda: f64,
) -> Result<GradientSet> {
    let grad_final = if batch.is_empty() {
        EmbeddingMatrix::zeros(fe.e_final.rows(), fe.e_final.dims())
    } else {
        bpr_grad_final(fe, batch)
    };
    let (mut grad_e0, grad_hop_weights) = model.backward(tape, &grad_final)?;
    if l2_lambda != 0.0 && !batch.is_empty() {
        let n_users = model.n_users();
        let c = 2.0 * l2_lambda / batch.len() as f64;
        let e0 = model.e0();
        for b in 0..batch.len() {
            for r in [
                batch.users[b] as usize,
                n_users + batch.pos_items[b] as usize,
                n_users + batch.neg_items[b] as usize,
            ] {
                let src = e0.row(r);
                for (d, v) in grad_e0.row_mut(r).iter_mut().zip(src) {
                    *d += c * v;
                }
            }
        }
    }
    Ok(GradientSet {
        grad_e0,
        grad_hop_weights,
    })
}

/// Forward pass with a tape, loss, and backward pass in one call.
pub fn loss_and_gradients<M: TrainableModel>(
    model: &M,
    batch: &TripletBatch,
    l2_lambda: f64,
) -> Result<(f64, GradientSet)> {
    let mut tape = M::Tape::default();
    let fe = model.forward_taped(Some(&mut tape))?;
    let loss = batch_loss(&fe, model.e0(), batch, l2_lambda)?;
    let grads = backward(model, batch, &fe, Some(&tape), l2_lambda)?;
    Ok((loss, grads))
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update over `params` (any number of slices, concatenated in
/// order) given `grads` laid out the same way.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], opt: &mut OptimizerState, lr: f64) -> Result<()> {
    let n: usize = params.iter().map(|p| p.len()).sum();
    let ng: usize = grads.iter().map(|g| g.len()).sum();
    if n != ng || n != opt.first_moment.len() {
        return Err(Error::DimensionMismatch(format!(
            "{n} parameters, {ng} gradients, {} optimizer slots",
            opt.first_moment.len()
        )));
    }
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.epsilon);
    let p_iter = params.iter_mut().flat_map(|p| p.iter_mut());
    let g_iter = grads.iter().flat_map(|g| g.iter());
    for (((p, &g), m), v) in p_iter
        .zip(g_iter)
        .zip(opt.first_moment.iter_mut())
        .zip(opt.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

fn apply_adam<M: TrainableModel>(model: &mut M, grads: &GradientSet, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    // Borrow e0 and the extra parameters disjointly via a copy of the extras.
    let mut extra = model.extra_params().to_vec();
    adam_step(
        &mut [model.e0_mut().as_mut_slice(), extra.as_mut_slice()],
        &[grads.grad_e0.as_slice(), grads.grad_hop_weights.as_slice()],
        opt,
        lr,
    )?;
    model.extra_params_mut().copy_from_slice(&extra);
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            l2_lambda: 1e-4,
            batch_size: 2048,
            max_epochs: 1000,
            patience: 50,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean BPR loss (with L2 term) over the epoch's triplets.
    pub loss: f64,
    pub recall20: f64,
    pub ndcg20: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<M> {
    pub history: Vec<EpochRecord>,
    /// Parameters at the best validation epoch (initial parameters when no
    /// epoch ran).
    pub best: M,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_ndcg20: f64,
    pub stop_reason: StopReason,
}

/// Writes the training log as `epoch,loss,recall20,ndcg20,seconds`. With
/// `with_timing` false the seconds column is written as 0 so that logs of
/// identical runs compare byte for byte.
pub fn write_training_log<W: Write>(mut w: W, history: &[EpochRecord], with_timing: bool) -> Result<()> {
    writeln!(w, "epoch,loss,recall20,ndcg20,seconds")?;
    for r in history {
        let secs = if with_timing { r.seconds } else { 0.0 };
        writeln!(w, "{},{},{},{},{}", r.epoch, r.loss, r.recall20, r.ndcg20, secs)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains `model` on `ds`. After every epoch `eval_hook` scores the current
/// final embeddings (normally on the validation items); the parameters with
/// the highest NDCG@20 are returned.
pub fn fit<M, H>(ds: &SplitDataset, model: M, cfg: &TrainConfig, mut eval_hook: H) -> Result<FitOutcome<M>>
where
    M: TrainableModel,
    H: FnMut(&FinalEmbeddings) -> Result<MetricsReport>,
{
    cfg.validate()?;
    if model.n_users() != ds.n_users() || model.e0().rows() != ds.n_users() + ds.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} rows for {} users, dataset has {} users and {} items",
            model.e0().rows(),
            model.n_users(),
            ds.n_users(),
            ds.n_items()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_params = model.e0().as_slice().len() + model.extra_params().len();
    let mut opt = OptimizerState::new(n_params);
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut model = model;
    let mut stop_reason = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let triplets = epoch_triplets(ds, &mut rng)?;
        let mut loss_sum = 0.0;
        let mut tape = M::Tape::default();
        for start in (0..triplets.len()).step_by(cfg.batch_size) {
            let batch = triplets.slice(start..(start + cfg.batch_size).min(triplets.len()));
            let step = model.forward_taped(Some(&mut tape)).and_then(|fe| {
                let loss = batch_loss(&fe, model.e0(), &batch, cfg.l2_lambda)?;
                let grads = backward(&model, &batch, &fe, Some(&tape), cfg.l2_lambda)?;
                Ok((loss, grads))
            });
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::DivergentIntegration { step }) => {
                    warn!("epoch {epoch}: integration diverged at step {step}, keeping last good checkpoint");
                    stop_reason = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.is_finite() {
                warn!("epoch {epoch}: non-finite loss, keeping last good checkpoint");
                stop_reason = StopReason::Diverged;
                break 'epochs;
            }
            loss_sum += loss * batch.len() as f64;
            apply_adam(&mut model, &grads, &mut opt, cfg.learning_rate)?;
        }
        let loss = loss_sum / triplets.len().max(1) as f64;

        let fe = match model.forward() {
            Ok(fe) => fe,
            Err(Error::DivergentIntegration { .. }) => {
                stop_reason = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        let report = eval_hook(&fe)?;
        let (recall20, ndcg20) = report.at(SELECTION_CUTOFF).ok_or_else(|| {
            Error::InvalidConfig(format!("evaluation hook must report N={SELECTION_CUTOFF}"))
        })?;
        let seconds = started.elapsed().as_secs_f64();
        history.push(EpochRecord {
            epoch,
            loss,
            recall20,
            ndcg20,
            seconds,
        });
        debug!("epoch {epoch}: loss={loss:.6} recall@20={recall20:.6} ndcg@20={ndcg20:.6} ({seconds:.2}s)");

        if ndcg20 > best_ndcg {
            best_ndcg = ndcg20;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                info!("early stop at epoch {epoch}, best epoch {best_epoch}");
                stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }

    Ok(FitOutcome {
        history,
        best,
        best_epoch,
        best_ndcg20: if best_epoch == 0 { 0.0 } else { best_ndcg },
        stop_reason,
    })
}
