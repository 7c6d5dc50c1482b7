//! The full classifier: a four-stage encoder (farthest-point sampling +
//! graph attention convolution), a four-stage decoder (inverse-distance
//! interpolation + skip concatenation + graph attention convolution without
//! the global branch), and a per-point affine classification head.
//!
//! [`GacnnConfig`] fixes every width and neighborhood size; [`GacnnModel`]
//! owns the parameters and runs forward passes on a caller-provided tape so
//! training can differentiate through the whole pipeline.

use crate::attention::{gac_forward, AttentionFlags, GacModuleParams, GacTrace};
use crate::error::{Error, Result};
use crate::geometry::{
    default_bandwidth, farthest_point_sample, idw_plan, kde_density, knn_graph, KnnGraph,
    PointCloud,
};
use crate::tensor::{Activation, Linear, Scalar, Tape, TensorId};
use rand::{Rng, SeedableRng};

/// Seed for the internal resampling used to pad undersized prediction
/// inputs; fixed so prediction is a pure function of (model, cloud).
const PAD_SEED: u64 = 0x1d872b41;

// ── Configuration ───────────────────────────────────────────────────────────

/// Architecture hyperparameters. `encoder_dims` entries are the per-module
/// hidden widths `(C1, C2, C3)`; `decoder_dims` entries are `(C2, C3)` — the
/// decoder has no global branch and its attention hidden width reuses `C2`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GacnnConfig {
    pub sample_sizes: [usize; 4],
    pub encoder_dims: [(usize, usize, usize); 4],
    pub decoder_dims: [(usize, usize); 4],
    pub k_encoder: usize,
    pub k_decoder: usize,
    pub num_classes: usize,
    pub input_feature_count: usize,
    pub use_global: bool,
    pub use_edge: bool,
    pub use_density: bool,
    pub idw_neighbors: usize,
    pub idw_power: f64,
    pub fps_seed_index: usize,
    /// Fixed kernel bandwidth; `None` selects a per-level default (mean
    /// K-th-neighbor distance).
    pub kde_bandwidth: Option<f64>,
}

impl Default for GacnnConfig {
    fn default() -> Self {
        GacnnConfig {
            sample_sizes: [1024, 512, 64, 16],
            encoder_dims: [
                (32, 32, 64),
                (64, 64, 128),
                (128, 128, 256),
                (256, 256, 512),
            ],
            decoder_dims: [(512, 512), (256, 256), (256, 128), (128, 128)],
            k_encoder: 32,
            k_decoder: 16,
            num_classes: 9,
            input_feature_count: 2,
            use_global: true,
            use_edge: true,
            use_density: true,
            idw_neighbors: 3,
            idw_power: 2.0,
            fps_seed_index: 0,
            kde_bandwidth: None,
        }
    }
}

impl GacnnConfig {
    /// Desk-scale configuration for tests: the same topology with every
    /// width at 8 or below, accepting inputs of 16+ points.
    pub fn micro(input_feature_count: usize, num_classes: usize) -> Self {
        GacnnConfig {
            sample_sizes: [16, 8, 4, 2],
            encoder_dims: [(4, 4, 8), (4, 4, 8), (8, 8, 8), (8, 8, 8)],
            decoder_dims: [(8, 8), (8, 8), (8, 4), (4, 4)],
            k_encoder: 6,
            k_decoder: 4,
            num_classes,
            input_feature_count,
            ..GacnnConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.sample_sizes.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(format!(
                    "sample sizes must strictly decrease, got {:?}",
                    self.sample_sizes
                )));
            }
        }
        if self.sample_sizes[3] == 0 {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        let dims_ok = self
            .encoder_dims
            .iter()
            .all(|&(a, b, c)| a > 0 && b > 0 && c > 0)
            && self.decoder_dims.iter().all(|&(a, b)| a > 0 && b > 0);
        if !dims_ok {
            return Err(Error::Config("module widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.k_encoder == 0 || self.k_decoder == 0 || self.idw_neighbors == 0 {
            return Err(Error::Config("neighbor counts must be positive".into()));
        }
        if !(self.idw_power > 0.0) || !self.idw_power.is_finite() {
            return Err(Error::Config(format!(
                "interpolation power must be a positive real, got {}",
                self.idw_power
            )));
        }
        if let Some(h) = self.kde_bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::Config(format!(
                    "kernel bandwidth must be a positive real, got {h}"
                )));
            }
        }
        Ok(())
    }

    fn encoder_flags(&self) -> AttentionFlags {
        AttentionFlags {
            use_global: self.use_global,
            use_edge: self.use_edge,
            use_density: self.use_density,
        }
    }

    fn decoder_flags(&self) -> AttentionFlags {
        AttentionFlags {
            use_global: false,
            use_edge: self.use_edge,
            use_density: self.use_density,
        }
    }

    /// Feature width entering encoder module `t`.
    fn encoder_input_width(&self, t: usize) -> usize {
        if t == 0 {
            self.input_feature_count
        } else {
            self.encoder_dims[t - 1].2
        }
    }

    /// Feature width entering decoder module `s` (interpolated ‖ skip).
    fn decoder_input_width(&self, s: usize) -> usize {
        let interp = if s == 0 {
            self.encoder_dims[3].2
        } else {
            self.decoder_dims[s - 1].1
        };
        let skip = match s {
            0 => self.encoder_dims[2].2,
            1 => self.encoder_dims[1].2,
            2 => self.encoder_dims[0].2,
            _ => self.input_feature_count,
        };
        interp + skip
    }
}

// ── Model ───────────────────────────────────────────────────────────────────

/// All learned parameters of the network, laid out per [`GacnnConfig`].
#[derive(Clone, Debug)]
pub struct GacnnModel<T> {
    pub config: GacnnConfig,
    pub encoders: Vec<GacModuleParams<T>>,
    pub decoders: Vec<GacModuleParams<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> GacnnModel<T> {
    /// Randomly initialized model; the seed fully determines all parameters.
    pub fn init(config: GacnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let encoders = (0..4)
            .map(|t| {
                let (c1, c2, c3) = config.encoder_dims[t];
                GacModuleParams::init(
                    config.encoder_input_width(t),
                    c1,
                    c2,
                    c3,
                    config.encoder_flags(),
                    &mut rng,
                )
            })
            .collect();
        let decoders = (0..4)
            .map(|s| {
                let (c2, c3) = config.decoder_dims[s];
                GacModuleParams::init(
                    config.decoder_input_width(s),
                    c2,
                    c2,
                    c3,
                    config.decoder_flags(),
                    &mut rng,
                )
            })
            .collect();
        let head = Linear::init(config.decoder_dims[3].1, config.num_classes, &mut rng);
        Ok(GacnnModel {
            config,
            encoders,
            decoders,
            head,
        })
    }

    /// All-zero model with the same parameter layout as [`GacnnModel::init`];
    /// used as a shape template when loading checkpoints.
    pub fn zeros(config: GacnnConfig) -> Result<Self> {
        config.validate()?;
        let encoders = (0..4)
            .map(|t| {
                let (c1, c2, c3) = config.encoder_dims[t];
                GacModuleParams::zeros(
                    config.encoder_input_width(t),
                    c1,
                    c2,
                    c3,
                    config.encoder_flags(),
                )
            })
            .collect();
        let decoders = (0..4)
            .map(|s| {
                let (c2, c3) = config.decoder_dims[s];
                GacModuleParams::zeros(
                    config.decoder_input_width(s),
                    c2,
                    c2,
                    c3,
                    config.decoder_flags(),
                )
            })
            .collect();
        let head = Linear::zeros(config.decoder_dims[3].1, config.num_classes);
        Ok(GacnnModel {
            config,
            encoders,
            decoders,
            head,
        })
    }

    /// Visit every parameter tensor in a fixed canonical order.
    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &[T], &[usize])) {
        for (t, enc) in self.encoders.iter().enumerate() {
            enc.visit(&format!("enc{t}"), f);
        }
        for (s, dec) in self.decoders.iter().enumerate() {
            dec.visit(&format!("dec{s}"), f);
        }
        self.head.visit("head", f);
    }

    /// Mutable visit in the same order as [`GacnnModel::for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut Vec<T>, &[usize])) {
        for (t, enc) in self.encoders.iter_mut().enumerate() {
            enc.visit_mut(&format!("enc{t}"), f);
        }
        for (s, dec) in self.decoders.iter_mut().enumerate() {
            dec.visit_mut(&format!("dec{s}"), f);
        }
        self.head.visit_mut("head", f);
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, v, _| n += v.len());
        n
    }

    /// All parameters flattened in canonical order.
    pub fn param_vector(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.for_each_param(&mut |_, v, _| out.extend_from_slice(v));
        out
    }

    /// Overwrite all parameters from a flat vector in canonical order.
    pub fn set_param_vector(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut cursor = 0;
        self.for_each_param_mut(&mut |_, v, _| {
            let len = v.len();
            v.copy_from_slice(&values[cursor..cursor + len]);
            cursor += len;
        });
        Ok(())
    }

    /// Run the full encoder–decoder–head pipeline on `cloud`, which must
    /// have at least `sample_sizes[0]` points (see [`GacnnModel::predict`]
    /// for automatic padding). Returns tape handles for the logits and all
    /// per-level attention maps.
    pub fn forward(&self, tape: &mut Tape<T>, cloud: &PointCloud) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if cloud.feature_count != cfg.input_feature_count {
            return Err(Error::Config(format!(
                "model expects {} feature columns, cloud has {}",
                cfg.input_feature_count, cloud.feature_count
            )));
        }
        let n = cloud.len();
        if n < cfg.sample_sizes[0] {
            return Err(Error::Parameter {
                name: "cloud",
                message: format!(
                    "level 1 samples {} points but the input has only {n}",
                    cfg.sample_sizes[0]
                ),
            });
        }

        // Level 0: the raw input.
        let input_features = if cfg.input_feature_count > 0 {
            let data: Vec<T> = cloud.features.iter().map(|&v| T::from_f64(v as f64)).collect();
            Some(tape.constant(data, vec![n, cfg.input_feature_count])?)
        } else {
            None
        };
        let mut level_coords: Vec<Vec<[f64; 3]>> = vec![cloud.coords.clone()];
        let mut encoder_traces: Vec<GacTrace> = Vec::with_capacity(4);
        let mut encoder_graphs: Vec<KnnGraph> = Vec::with_capacity(4);
        let mut cur_features = input_features;

        for t in 0..4 {
            let m = cfg.sample_sizes[t];
            let prev = PointCloud::from_coords(level_coords[t].clone())?;
            let seed = if t == 0 {
                cfg.fps_seed_index.min(prev.len() - 1)
            } else {
                0
            };
            let idx = farthest_point_sample(&prev, m, seed)?;
            let coords: Vec<[f64; 3]> = idx.iter().map(|&i| prev.coords[i]).collect();
            let sampled_features = match cur_features {
                Some(f) => Some(tape.gather_rows(f, &idx, &[m])?),
                None => None,
            };
            let level = PointCloud::from_coords(coords.clone())?;
            let k = cfg.k_encoder.min(m - 1);
            let graph = knn_graph(&level, k)?;
            let density = if cfg.use_density {
                let h = cfg
                    .kde_bandwidth
                    .unwrap_or_else(|| default_bandwidth(&level, &graph));
                Some(kde_density(&level, &graph, h)?)
            } else {
                None
            };
            let trace = gac_forward(
                tape,
                &self.encoders[t],
                &coords,
                sampled_features,
                &graph,
                density.as_ref(),
                &format!("enc{t}"),
            )?;
            cur_features = Some(trace.output);
            encoder_traces.push(trace);
            encoder_graphs.push(graph);
            level_coords.push(coords);
        }

        // Decoder: coarse-to-fine interpolation with skip connections.
        let mut decoder_traces: Vec<GacTrace> = Vec::with_capacity(4);
        let mut decoder_graphs: Vec<KnnGraph> = Vec::with_capacity(4);
        let mut features = encoder_traces[3].output;
        for s in 0..4 {
            let dst_level = 3 - s;
            let src_coords = &level_coords[dst_level + 1];
            let dst_coords = level_coords[dst_level].clone();
            let plan = idw_plan(
                src_coords,
                &dst_coords,
                cfg.idw_neighbors.min(src_coords.len()),
                cfg.idw_power,
            )?;
            let weights: Vec<T> = plan.weights.iter().map(|&w| T::from_f64(w)).collect();
            let interpolated = tape.weighted_gather(features, &plan.indices, &weights, plan.k)?;
            let skip = if dst_level == 0 {
                input_features
            } else {
                Some(encoder_traces[dst_level - 1].output)
            };
            let combined = match skip {
                Some(sk) => tape.concat_last(interpolated, sk)?,
                None => interpolated,
            };
            let level = PointCloud::from_coords(dst_coords.clone())?;
            let k = cfg.k_decoder.min(dst_coords.len() - 1);
            let graph = knn_graph(&level, k)?;
            let density = if cfg.use_density {
                let h = cfg
                    .kde_bandwidth
                    .unwrap_or_else(|| default_bandwidth(&level, &graph));
                Some(kde_density(&level, &graph, h)?)
            } else {
                None
            };
            let trace = gac_forward(
                tape,
                &self.decoders[s],
                &dst_coords,
                Some(combined),
                &graph,
                density.as_ref(),
                &format!("dec{s}"),
            )?;
            features = trace.output;
            decoder_traces.push(trace);
            decoder_graphs.push(graph);
        }

        let logits = self.head.forward(tape, features, "head", Activation::None)?;
        Ok(ForwardTrace {
            level_coords,
            encoder_traces,
            encoder_graphs,
            decoder_traces,
            decoder_graphs,
            logits,
        })
    }

    /// Forward plus the mean cross-entropy against the cloud's labels.
    pub fn forward_loss(
        &self,
        tape: &mut Tape<T>,
        cloud: &PointCloud,
        class_weights: Option<&[T]>,
    ) -> Result<(TensorId, ForwardTrace)> {
        let labels = cloud
            .labels
            .as_ref()
            .ok_or_else(|| Error::Contract("training cloud carries no labels".into()))?
            .clone();
        let trace = self.forward(tape, cloud)?;
        let loss = tape.cross_entropy(trace.logits, &labels, class_weights)?;
        Ok((loss, trace))
    }

    /// Class probabilities and argmax labels for every point of `cloud`.
    /// Inputs smaller than the first sampling width are padded by seeded
    /// resampling with replacement; padded rows are dropped from the output,
    /// so the result always has exactly `cloud.len()` rows.
    pub fn predict(&self, cloud: &PointCloud) -> Result<Prediction<T>> {
        let n = cloud.len();
        let s0 = self.config.sample_sizes[0];
        let padded;
        let run_cloud = if n < s0 {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(PAD_SEED);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.extend((n..s0).map(|_| rng.gen_range(0..n)));
            padded = cloud.select(&idx)?;
            &padded
        } else {
            cloud
        };
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, run_cloud)?;
        let probs = tape.softmax_last(trace.logits)?;
        let c = self.config.num_classes;
        let data = &tape.data(probs)[..n * c];
        let labels = argmax_rows(data, c);
        Ok(Prediction {
            probabilities: data.to_vec(),
            num_classes: c,
            labels,
        })
    }
}

/// Tape handles produced by one full forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    /// Coordinates at levels 0 (input) through 4 (coarsest).
    pub level_coords: Vec<Vec<[f64; 3]>>,
    pub encoder_traces: Vec<GacTrace>,
    pub encoder_graphs: Vec<KnnGraph>,
    pub decoder_traces: Vec<GacTrace>,
    pub decoder_graphs: Vec<KnnGraph>,
    /// `[N, num_classes]` pre-softmax scores.
    pub logits: TensorId,
}

/// Output of [`GacnnModel::predict`].
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// Row-major `N × num_classes`; every row sums to 1.
    pub probabilities: Vec<T>,
    pub num_classes: usize,
    /// Per-point argmax class, lowest index on ties.
    pub labels: Vec<u32>,
}

/// Row-wise argmax with lowest-index tie-breaking.
pub fn argmax_rows<T: Scalar>(data: &[T], width: usize) -> Vec<u32> {
    data.chunks(width)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

// ── Tests ───────────────────────────────────────────────────────────────────
