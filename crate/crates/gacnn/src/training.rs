//! Optimization: the Adam update rule, a step-halving learning-rate
//! schedule, block sampling from scene tiles, and the batched training loop.
//!
//! The loop is fully deterministic: a single seeded ChaCha12 stream drives
//! tile choice, point sampling, and dropout, so two runs with the same seed,
//! data, and initial model produce bitwise-identical parameters.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::network::GacnnModel;
use crate::tensor::{Scalar, Tape};

/// Exponential decay rate for the first-moment (mean) estimate.
pub const ADAM_BETA1: f64 = 0.9;
/// Exponential decay rate for the second-moment (uncentered variance) estimate.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator guard added to the square root of the second moment.
pub const ADAM_EPSILON: f64 = 1e-8;

// ── Configuration ───────────────────────────────────────────────────────────

/// Hyper-parameters of the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Learning rate at step zero.
    pub base_lr: f64,
    /// The learning rate halves once per this many completed steps.
    pub lr_halving_interval: usize,
    /// Blocks per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    /// Points sampled from a tile to form one block, before dropout.
    pub points_per_block: usize,
    /// Fraction of each sampled block discarded uniformly at random.
    pub drop_fraction: f64,
    /// Full passes over the tile list.
    pub epochs: usize,
    /// Seed for every stochastic choice the loop makes.
    pub rng_seed: u64,
    /// Optional per-class loss weights, one per class.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            lr_halving_interval: 3000,
            batch_size: 8,
            points_per_block: 8192,
            drop_fraction: 0.125,
            epochs: 1,
            rng_seed: 42,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if self.lr_halving_interval == 0 {
            return Err(Error::Config("lr_halving_interval must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.points_per_block == 0 {
            return Err(Error::Config("points_per_block must be at least 1".into()));
        }
        if !self.drop_fraction.is_finite() || !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::Config(format!(
                "drop_fraction must lie in [0, 1), got {}",
                self.drop_fraction
            )));
        }
        if let Some(w) = &self.class_weights {
            if let Some(&bad) = w.iter().find(|&&x| !x.is_finite() || x < 0.0) {
                return Err(Error::Config(format!(
                    "class weights must be finite and non-negative, got {bad}"
                )));
            }
        }
        Ok(())
    }

    /// Points left in one block after dropout:
    /// `points_per_block - floor(drop_fraction * points_per_block)`.
    pub fn block_len(&self) -> usize {
        let dropped = (self.drop_fraction * self.points_per_block as f64).floor() as usize;
        self.points_per_block - dropped
    }
}

/// Learning rate at a zero-based step: the base rate halved once per
/// completed interval (integer division).
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let halvings = (step / config.lr_halving_interval) as i32;
    config.base_lr / 2f64.powi(halvings)
}

// ── Adam ────────────────────────────────────────────────────────────────────

/// First and second moment accumulators for one flat parameter vector.
/// Moments are kept in `f64` regardless of the model's storage type.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            steps: 0,
        }
    }

    /// Number of completed updates.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// One bias-corrected Adam update on a parameter slice. `step` counts
/// updates one-based, including this one. All arithmetic runs in `f64`.
pub fn adam_update_slice<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), m.len());
    debug_assert_eq!(params.len(), v.len());
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i].to_f64();
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let p = params[i].to_f64() - lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        params[i] = T::from_f64(p);
    }
}

/// Applies one Adam update across every model parameter, in canonical
/// parameter order. `grads` maps parameter names to gradient slices; names
/// absent from the map act as zero gradients (their moments still decay).
/// A non-finite gradient anywhere aborts before any parameter moves.
pub fn adam_step<T: Scalar>(
    model: &mut GacnnModel<T>,
    state: &mut AdamState,
    grads: &HashMap<String, Vec<T>>,
    lr: f64,
) -> Result<()> {
    if state.m.len() != model.param_count() {
        return Err(Error::Contract(format!(
            "optimizer state covers {} values but the model has {}",
            state.m.len(),
            model.param_count()
        )));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Training {
            step: state.steps,
            message: format!("invalid learning rate {lr}"),
        });
    }
    // Validate every gradient before mutating anything, so a bad batch
    // cannot leave the model half-updated.
    let mut problem: Option<Error> = None;
    model.for_each_param(&mut |name, values, _shape| {
        if problem.is_some() {
            return;
        }
        if let Some(g) = grads.get(name) {
            if g.len() != values.len() {
                problem = Some(Error::Contract(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    values.len()
                )));
            } else if g.iter().any(|x| !x.is_finite()) {
                problem = Some(Error::Training {
                    step: state.steps,
                    message: format!("non-finite gradient in {name}"),
                });
            }
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }

    let step = state.steps + 1;
    let mut cursor = 0usize;
    let (m, v) = (&mut state.m, &mut state.v);
    model.for_each_param_mut(&mut |name, values, _shape| {
        let len = values.len();
        let zeros;
        let g: &[T] = match grads.get(name) {
            Some(g) => g,
            None => {
                zeros = vec![T::zero(); len];
                &zeros
            }
        };
        adam_update_slice(
            values,
            g,
            &mut m[cursor..cursor + len],
            &mut v[cursor..cursor + len],
            step,
            lr,
        );
        cursor += len;
    });
    state.steps = step;
    Ok(())
}

// ── Block sampling ──────────────────────────────────────────────────────────

/// Draws one training block from a tile: `points_per_block` points sampled
/// uniformly (without replacement when the tile is large enough, with
/// replacement otherwise), then `floor(drop_fraction * points_per_block)`
/// of them discarded uniformly at random.
pub fn sample_training_block(
    tile: &PointCloud,
    config: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<PointCloud> {
    if tile.is_empty() {
        return Err(Error::Contract("cannot sample a block from an empty tile".into()));
    }
    let ppb = config.points_per_block;
    let mut picked: Vec<usize> = if tile.len() < ppb {
        (0..ppb).map(|_| rng.gen_range(0..tile.len())).collect()
    } else {
        rand::seq::index::sample(rng, tile.len(), ppb).into_vec()
    };
    let keep = config.block_len();
    if keep < picked.len() {
        let keep_idx = rand::seq::index::sample(rng, picked.len(), keep);
        picked = keep_idx.iter().map(|i| picked[i]).collect();
    }
    tile.select(&picked)
}

// ── Batched gradients ───────────────────────────────────────────────────────

/// Mean loss and mean parameter gradients over a batch of labeled blocks.
/// Per-block gradients are accumulated in `f64`, so the result is invariant
/// (to rounding) under splitting the batch.
pub fn batch_gradients<T: Scalar>(
    model: &GacnnModel<T>,
    blocks: &[PointCloud],
    class_weights: Option<&[T]>,
) -> Result<(f64, HashMap<String, Vec<T>>)> {
    if blocks.is_empty() {
        return Err(Error::Contract("gradient batch must contain at least one block".into()));
    }
    let mut loss_sum = 0.0f64;
    let mut sums: HashMap<String, Vec<f64>> = HashMap::new();
    for block in blocks {
        let mut tape = Tape::new();
        let (loss, _trace) = model.forward_loss(&mut tape, block, class_weights)?;
        let grads = tape.backward(loss)?;
        loss_sum += tape.scalar(loss).to_f64();
        for (name, g) in tape.parameter_gradients(&grads) {
            let entry = sums.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (acc, &x) in entry.iter_mut().zip(&g) {
                *acc += x.to_f64();
            }
        }
    }
    let inv = 1.0 / blocks.len() as f64;
    let means = sums
        .into_iter()
        .map(|(name, sum)| {
            let mean = sum.into_iter().map(|x| T::from_f64(x * inv)).collect();
            (name, mean)
        })
        .collect();
    Ok((loss_sum * inv, means))
}

// ── Training loop ───────────────────────────────────────────────────────────

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Zero-based optimizer step.
    pub step: usize,
    /// Learning rate used at this step.
    pub lr: f64,
    /// Mean batch loss at this step, before the update.
    pub loss: f64,
}

impl StepRecord {
    /// Canonical log line for this step.
    pub fn to_line(&self) -> String {
        format!("step={} lr={} loss={}", self.step, self.lr, self.loss)
    }
}

/// Trains the model in place and returns the per-step log.
/// See [`train_with_callback`] for the loop contract.
pub fn train<T: Scalar>(
    model: &mut GacnnModel<T>,
    tiles: &[PointCloud],
    config: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    train_with_callback(model, tiles, config, |_, _| Ok(()))
}

/// Runs `epochs * ceil(tiles / batch_size)` optimizer steps. Each step picks
/// `batch_size` tiles uniformly at random (with replacement), samples one
/// block from each, translates every block so its minimum corner sits at the
/// origin, averages block gradients, and applies one Adam update with the
/// halving learning-rate schedule. `on_step` fires after every update with
/// the step record and the updated model, for checkpointing or progress
/// output. A non-finite loss or gradient aborts with the failing step index.
pub fn train_with_callback<T: Scalar>(
    model: &mut GacnnModel<T>,
    tiles: &[PointCloud],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &GacnnModel<T>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if tiles.is_empty() {
        return Err(Error::Contract("training needs at least one tile".into()));
    }
    for (index, tile) in tiles.iter().enumerate() {
        if tile.labels.is_none() {
            return Err(Error::Data {
                index,
                message: "training tile carries no labels".into(),
            });
        }
        if tile.feature_count != model.config.input_feature_count {
            return Err(Error::Data {
                index,
                message: format!(
                    "tile has {} feature columns, model expects {}",
                    tile.feature_count, model.config.input_feature_count
                ),
            });
        }
    }
    let weights: Option<Vec<T>> = match &config.class_weights {
        Some(w) => {
            if w.len() != model.config.num_classes {
                return Err(Error::Config(format!(
                    "{} class weights for {} classes",
                    w.len(),
                    model.config.num_classes
                )));
            }
            Some(w.iter().map(|&x| T::from_f64(x)).collect())
        }
        None => None,
    };

    let steps_per_epoch = tiles.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut rng = ChaCha12Rng::seed_from_u64(config.rng_seed);
    let mut state = AdamState::new(model.param_count());
    let mut log = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let mut blocks = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let tile = &tiles[rng.gen_range(0..tiles.len())];
            let block = sample_training_block(tile, config, &mut rng)?;
            blocks.push(block.recentered_to_min());
        }
        let (loss, grads) = batch_gradients(model, &blocks, weights.as_deref())?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss {loss}"),
            });
        }
        let lr = lr_at(step, config);
        adam_step(model, &mut state, &grads, lr)?;
        let record = StepRecord { step, lr, loss };
        on_step(&record, model)?;
        log.push(record);
    }
    Ok(log)
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::GacnnConfig;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Labeled synthetic cloud: three height bands so the labels are
    /// geometrically learnable.
    fn banded_cloud(n: usize, feature_count: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut coords = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * feature_count);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x = rng.gen_range(0.0..10.0);
            let y = rng.gen_range(0.0..10.0);
            let z = rng.gen_range(0.0..9.0);
            coords.push([x, y, z]);
            labels.push((z / 3.0) as u32);
            for c in 0..feature_count {
                let v = if c == 0 { (z / 9.0) as f32 } else { rng.gen_range(0.0..1.0) };
                features.push(v);
            }
        }
        PointCloud::new(coords, features, feature_count, Some(labels)).unwrap()
    }

    #[test]
    fn lr_schedule_halves_every_interval() {
        let config = TrainConfig::default();
        approx(lr_at(0, &config), 0.01, 0.0);
        approx(lr_at(1, &config), 0.01, 0.0);
        approx(lr_at(2999, &config), 0.01, 0.0);
        approx(lr_at(3000, &config), 0.005, 0.0);
        approx(lr_at(5999, &config), 0.005, 0.0);
        approx(lr_at(6000, &config), 0.0025, 0.0);
        approx(lr_at(9000, &config), 0.00125, 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for broken in [
            TrainConfig { base_lr: 0.0, ..ok.clone() },
            TrainConfig { base_lr: f64::NAN, ..ok.clone() },
            TrainConfig { lr_halving_interval: 0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { points_per_block: 0, ..ok.clone() },
            TrainConfig { drop_fraction: 1.0, ..ok.clone() },
            TrainConfig { drop_fraction: -0.1, ..ok.clone() },
            TrainConfig { drop_fraction: f64::NAN, ..ok.clone() },
            TrainConfig { class_weights: Some(vec![1.0, -1.0]), ..ok.clone() },
        ] {
            assert!(broken.validate().is_err(), "{broken:?} should be rejected");
        }
    }

    #[test]
    fn default_block_len_is_seven_eighths_of_block() {
        let config = TrainConfig::default();
        assert_eq!(config.block_len(), 7168);
        let no_drop = TrainConfig { drop_fraction: 0.0, ..config };
        assert_eq!(no_drop.block_len(), 8192);
    }

    #[test]
    fn adam_first_step_moves_by_signed_learning_rate() {
        let mut params = vec![0.5f64, -0.2, 1.0];
        let grads = vec![0.3f64, -0.7, 0.001];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        let lr = 0.01;
        let before = params.clone();
        adam_update_slice(&mut params, &grads, &mut m, &mut v, 1, lr);
        for i in 0..3 {
            let expected = before[i] - lr * grads[i].signum();
            approx(params[i], expected, 1e-6);
        }
    }

    #[test]
    fn adam_matches_reference_implementation() {
        // Independent straight-line reference using powf and a different
        // evaluation order.
        fn reference(params: &mut [f64], grad_steps: &[Vec<f64>], lr: f64) {
            let n = params.len();
            let mut m = vec![0.0; n];
            let mut v = vec![0.0; n];
            for (t, grads) in grad_steps.iter().enumerate() {
                let t1 = (t + 1) as f64;
                for i in 0..n {
                    m[i] += (1.0 - ADAM_BETA1) * (grads[i] - m[i]);
                    v[i] += (1.0 - ADAM_BETA2) * (grads[i] * grads[i] - v[i]);
                    let m_hat = m[i] / (1.0 - ADAM_BETA1.powf(t1));
                    let v_hat = v[i] / (1.0 - ADAM_BETA2.powf(t1));
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                }
            }
        }

        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 40;
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad_steps: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let lr = 0.05;

        let mut expected = init.clone();
        reference(&mut expected, &grad_steps, lr);

        let mut actual = init;
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        for (t, grads) in grad_steps.iter().enumerate() {
            adam_update_slice(&mut actual, grads, &mut m, &mut v, t + 1, lr);
        }
        for i in 0..n {
            approx(actual[i], expected[i], 1e-7);
        }
    }

    #[test]
    fn adam_zero_gradient_from_fresh_state_changes_nothing() {
        let mut params = vec![0.25f32, -1.5, 3.0];
        let before = params.clone();
        let grads = vec![0.0f32; 3];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        adam_update_slice(&mut params, &grads, &mut m, &mut v, 1, 0.1);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_constant_gradient_update_magnitude_never_grows() {
        // With bias correction, a constant gradient yields equal-magnitude
        // updates; the magnitude must never increase.
        let mut params = vec![1.0f64];
        let grads = vec![0.4f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update_slice(&mut params, &grads, &mut m, &mut v, 1, 0.01);
        let delta1 = (params[0] - 1.0).abs();
        let mid = params[0];
        adam_update_slice(&mut params, &grads, &mut m, &mut v, 2, 0.01);
        let delta2 = (params[0] - mid).abs();
        assert!(delta2 <= delta1 * (1.0 + 1e-12), "{delta2} > {delta1}");
    }

    #[test]
    fn adam_step_updates_named_parameters_only() {
        let config = GacnnConfig::micro(2, 3);
        let mut model = GacnnModel::<f64>::init(config, 11).unwrap();
        let before = model.param_vector();
        let mut state = AdamState::new(model.param_count());

        let name = "enc0.fuse.bias";
        let mut dim = 0;
        model.for_each_param(&mut |n, values, _| {
            if n == name {
                dim = values.len();
            }
        });
        assert!(dim > 0, "missing parameter {name}");
        let mut grads = HashMap::new();
        grads.insert(name.to_string(), vec![1.0f64; dim]);
        adam_step(&mut model, &mut state, &grads, 0.01).unwrap();
        assert_eq!(state.steps(), 1);

        let mut offset = 0;
        let mut touched = (0, 0);
        model.for_each_param(&mut |n, values, _| {
            if n == name {
                touched = (offset, values.len());
            }
            offset += values.len();
        });
        let after = model.param_vector();
        for (i, (&a, &b)) in before.iter().zip(&after).enumerate() {
            if i >= touched.0 && i < touched.0 + touched.1 {
                approx(b - a, -0.01, 1e-8);
            } else {
                assert_eq!(a, b, "untouched parameter {i} moved");
            }
        }
    }

    #[test]
    fn adam_step_rejects_nonfinite_gradient() {
        let config = GacnnConfig::micro(2, 3);
        let mut model = GacnnModel::<f64>::init(config, 11).unwrap();
        let before = model.param_vector();
        let mut state = AdamState::new(model.param_count());
        let mut dim = 0;
        model.for_each_param(&mut |n, values, _| {
            if n == "head.weight" {
                dim = values.len();
            }
        });
        let mut grads = HashMap::new();
        let mut g = vec![0.0f64; dim];
        g[dim / 2] = f64::NAN;
        grads.insert("head.weight".to_string(), g);
        let err = adam_step(&mut model, &mut state, &grads, 0.01).unwrap_err();
        match err {
            Error::Training { step, message } => {
                assert_eq!(step, 0);
                assert!(message.contains("head.weight"), "{message}");
            }
            other => panic!("expected a training error, got {other:?}"),
        }
        // Nothing may move on a rejected step.
        assert_eq!(model.param_vector(), before);
        assert_eq!(state.steps(), 0);
    }

    #[test]
    fn block_sampling_produces_configured_lengths() {
        let tile = banded_cloud(10_000, 2, 1);
        let config = TrainConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let block = sample_training_block(&tile, &config, &mut rng).unwrap();
        assert_eq!(block.len(), 7168);
        assert_eq!(block.feature_count, 2);
        assert!(block.labels.is_some());

        let no_drop = TrainConfig { drop_fraction: 0.0, ..TrainConfig::default() };
        let block = sample_training_block(&tile, &no_drop, &mut rng).unwrap();
        assert_eq!(block.len(), 8192);

        // Undersized tiles sample with replacement but yield the same count.
        let small = banded_cloud(100, 2, 2);
        let block = sample_training_block(&small, &config, &mut rng).unwrap();
        assert_eq!(block.len(), 7168);
    }

    #[test]
    fn block_sampling_without_replacement_keeps_points_distinct() {
        // Distinct x coordinates let us detect duplicates in the output.
        let n = 600;
        let coords: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
        let tile = PointCloud::new(coords, vec![], 0, Some(vec![0; n])).unwrap();
        let config = TrainConfig {
            points_per_block: 512,
            drop_fraction: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let block = sample_training_block(&tile, &config, &mut rng).unwrap();
        let mut xs: Vec<i64> = block.coords.iter().map(|c| c[0] as i64).collect();
        xs.sort_unstable();
        xs.dedup();
        assert_eq!(xs.len(), 512, "sampled points must be distinct");
    }

    #[test]
    fn block_sampling_is_seed_deterministic() {
        let tile = banded_cloud(2_000, 2, 9);
        let config = TrainConfig {
            points_per_block: 256,
            ..TrainConfig::default()
        };
        let a = sample_training_block(&tile, &config, &mut ChaCha12Rng::seed_from_u64(4)).unwrap();
        let b = sample_training_block(&tile, &config, &mut ChaCha12Rng::seed_from_u64(4)).unwrap();
        let c = sample_training_block(&tile, &config, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.coords, b.coords);
        assert_eq!(a.features, b.features);
        assert_ne!(a.coords, c.coords);
    }

    #[test]
    fn batch_gradient_is_mean_of_per_block_gradients() {
        let config = GacnnConfig::micro(2, 3);
        let model = GacnnModel::<f64>::init(config, 21).unwrap();
        let block_a = banded_cloud(24, 2, 31);
        let block_b = banded_cloud(24, 2, 32);

        let (loss_a, grads_a) = batch_gradients(&model, &[block_a.clone()], None).unwrap();
        let (loss_b, grads_b) = batch_gradients(&model, &[block_b.clone()], None).unwrap();
        let (loss_ab, grads_ab) = batch_gradients(&model, &[block_a, block_b], None).unwrap();

        approx(loss_ab, 0.5 * (loss_a + loss_b), 1e-6);
        assert_eq!(grads_ab.len(), grads_a.len());
        for (name, g) in &grads_ab {
            let a = &grads_a[name];
            let b = &grads_b[name];
            for i in 0..g.len() {
                approx(g[i], 0.5 * (a[i] + b[i]), 1e-6);
            }
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            points_per_block: 48,
            drop_fraction: 0.125,
            epochs: 1,
            rng_seed: 42,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leaves_model_untouched() {
        let config = GacnnConfig::micro(2, 3);
        let mut model = GacnnModel::<f32>::init(config, 8).unwrap();
        let before = model.param_vector();
        let tiles = [banded_cloud(64, 2, 40)];
        let train_config = TrainConfig { epochs: 0, ..tiny_train_config() };
        let log = train(&mut model, &tiles, &train_config).unwrap();
        assert!(log.is_empty());
        assert_eq!(model.param_vector(), before);
    }

    #[test]
    fn step_count_is_epochs_times_ceil_tiles_over_batch() {
        let config = GacnnConfig::micro(2, 3);
        let mut model = GacnnModel::<f32>::init(config, 8).unwrap();
        let tiles = [
            banded_cloud(48, 2, 41),
            banded_cloud(48, 2, 42),
            banded_cloud(48, 2, 43),
        ];
        let train_config = TrainConfig { epochs: 2, ..tiny_train_config() };
        let log = train(&mut model, &tiles, &train_config).unwrap();
        // ceil(3 / 2) = 2 steps per epoch, 2 epochs.
        assert_eq!(log.len(), 4);
        for (i, record) in log.iter().enumerate() {
            assert_eq!(record.step, i);
            approx(record.lr, lr_at(i, &train_config), 0.0);
            assert!(record.loss.is_finite());
        }
    }

    #[test]
    fn training_reduces_loss_on_learnable_scene() {
        let config = GacnnConfig::micro(2, 3);
        let mut model = GacnnModel::<f32>::init(config, 3).unwrap();
        let scene = banded_cloud(96, 2, 50).recentered_to_min();
        let tiles = [scene.clone()];

        let loss_before = {
            let mut tape = Tape::new();
            let (loss, _) = model.forward_loss(&mut tape, &scene, None).unwrap();
            tape.scalar(loss) as f64
        };
        let train_config = TrainConfig { epochs: 30, ..tiny_train_config() };
        let log = train(&mut model, &tiles, &train_config).unwrap();
        assert_eq!(log.len(), 30);
        let loss_after = {
            let mut tape = Tape::new();
            let (loss, _) = model.forward_loss(&mut tape, &scene, None).unwrap();
            tape.scalar(loss) as f64
        };
        assert!(
            loss_after < loss_before,
            "loss did not decrease: {loss_before} -> {loss_after}"
        );
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let tiles = [banded_cloud(64, 2, 60), banded_cloud(64, 2, 61)];
        let run = || {
            let config = GacnnConfig::micro(2, 3);
            let mut model = GacnnModel::<f32>::init(config, 13).unwrap();
            let train_config = TrainConfig { epochs: 5, ..tiny_train_config() };
            let log = train(&mut model, &tiles, &train_config).unwrap();
            (model.param_vector(), log)
        };
        let (params_a, log_a) = run();
        let (params_b, log_b) = run();
        assert_eq!(params_a, params_b);
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn training_aborts_on_nonfinite_loss() {
        let config = GacnnConfig::micro(2, 3);
        let mut model = GacnnModel::<f32>::init(config, 8).unwrap();
        // Poison one parameter so the first forward pass yields a NaN loss.
        model.for_each_param_mut(&mut |name, values, _| {
            if name == "head.weight" {
                values[0] = f32::NAN;
            }
        });
        let tiles = [banded_cloud(64, 2, 70)];
        let err = train(&mut model, &tiles, &tiny_train_config()).unwrap_err();
        match err {
            Error::Training { step, message } => {
                assert_eq!(step, 0);
                assert!(message.contains("non-finite"), "{message}");
            }
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn training_rejects_unlabeled_or_mismatched_tiles() {
        let config = GacnnConfig::micro(2, 3);
        let mut model = GacnnModel::<f32>::init(config, 8).unwrap();
        let mut unlabeled = banded_cloud(64, 2, 80);
        unlabeled.labels = None;
        assert!(matches!(
            train(&mut model, &[unlabeled], &tiny_train_config()),
            Err(Error::Data { index: 0, .. })
        ));
        let wrong_features = banded_cloud(64, 3, 81);
        assert!(matches!(
            train(&mut model, &[wrong_features], &tiny_train_config()),
            Err(Error::Data { index: 0, .. })
        ));
        let weights = TrainConfig {
            class_weights: Some(vec![1.0, 2.0]),
            ..tiny_train_config()
        };
        let labeled = banded_cloud(64, 2, 82);
        assert!(matches!(
            train(&mut model, &[labeled], &weights),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn step_callback_sees_every_update_and_can_abort() {
        let config = GacnnConfig::micro(2, 3);
        let mut model = GacnnModel::<f32>::init(config, 8).unwrap();
        let tiles = [banded_cloud(64, 2, 90)];
        let train_config = TrainConfig { epochs: 3, ..tiny_train_config() };
        let mut seen = Vec::new();
        train_with_callback(&mut model, &tiles, &train_config, |record, _| {
            seen.push(record.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);

        let err = train_with_callback(&mut model, &tiles, &train_config, |record, _| {
            if record.step == 1 {
                Err(Error::Contract("stop".into()))
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn log_line_format_is_stable() {
        let record = StepRecord { step: 12, lr: 0.005, loss: 1.25 };
        assert_eq!(record.to_line(), "step=12 lr=0.005 loss=1.25");
    }
}
