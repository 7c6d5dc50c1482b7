//! Edge, density, and global attention, and their assembly into the graph
//! attention convolution module.
//!
//! A module call works on one point set with a fixed neighbor graph:
//!
//! 1. gather each point's neighbor rows (coordinates ‖ features),
//! 2. optionally mix in global context — per-channel products between an
//!    all-pairs attention map and per-neighbor projections,
//! 3. fuse with an MLP,
//! 4. optionally reweight by edge attention (softmax over neighbors) and by
//!    density attention (a learned scalar per neighbor),
//! 5. project and max-pool over the neighbor axis.
//!
//! All learned layers live in [`GacModuleParams`]; the forward functions
//! register them on the caller's [`Tape`] so gradients flow end to end.

use crate::error::{Error, Result};
use crate::geometry::{DensityField, KnnGraph};
use crate::tensor::{Activation, Linear, Scalar, Tape, TensorId};

// ── Parameter containers ────────────────────────────────────────────────────

/// Which attention branches a module applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionFlags {
    pub use_global: bool,
    pub use_edge: bool,
    pub use_density: bool,
}

impl AttentionFlags {
    pub fn all_on() -> Self {
        AttentionFlags {
            use_global: true,
            use_edge: true,
            use_density: true,
        }
    }

    pub fn all_off() -> Self {
        AttentionFlags {
            use_global: false,
            use_edge: false,
            use_density: false,
        }
    }
}

/// Two-layer MLP scoring each neighbor offset: 3 → hidden (ReLU) → width
/// (no activation; a softmax over neighbors follows).
#[derive(Clone, Debug)]
pub struct EdgeAttentionParams<T> {
    pub layer1: Linear<T>,
    pub layer2: Linear<T>,
}

/// Two-layer MLP on the normalized inverse density of each neighbor:
/// 1 → hidden (ReLU) → 1 (no activation).
#[derive(Clone, Debug)]
pub struct DensityAttentionParams<T> {
    pub layer1: Linear<T>,
    pub layer2: Linear<T>,
}

/// Single affine layer mapping normalized all-pairs offsets to per-channel
/// attention: 3 → width (no activation).
#[derive(Clone, Debug)]
pub struct GlobalAttentionParams<T> {
    pub layer: Linear<T>,
}

/// All parameters of one graph attention convolution module.
///
/// `global` and `neighbor_mlp` are present exactly when
/// `flags.use_global` is set; `fuse_mlp`'s input width is `3 + C + C1` in
/// that case and `3 + C` otherwise. Edge and density parameters always
/// exist so ablated models keep a stable parameter layout.
#[derive(Clone, Debug)]
pub struct GacModuleParams<T> {
    pub edge: EdgeAttentionParams<T>,
    pub density: DensityAttentionParams<T>,
    pub global: Option<GlobalAttentionParams<T>>,
    pub neighbor_mlp: Option<Linear<T>>,
    pub fuse_mlp: Linear<T>,
    pub out_mlp: Linear<T>,
    pub flags: AttentionFlags,
}

impl<T: Scalar> GacModuleParams<T> {
    /// Randomly initialized module for `feature_count` input feature columns
    /// and hidden widths `(c1, c2, c3)`.
    pub fn init(
        feature_count: usize,
        c1: usize,
        c2: usize,
        c3: usize,
        flags: AttentionFlags,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let fuse_in = 3 + feature_count + if flags.use_global { c1 } else { 0 };
        GacModuleParams {
            edge: EdgeAttentionParams {
                layer1: Linear::init(3, c1, rng),
                layer2: Linear::init(c1, c2, rng),
            },
            density: DensityAttentionParams {
                layer1: Linear::init(1, c1, rng),
                layer2: Linear::init(c1, 1, rng),
            },
            global: flags.use_global.then(|| GlobalAttentionParams {
                layer: Linear::init(3, c1, rng),
            }),
            neighbor_mlp: flags
                .use_global
                .then(|| Linear::init(3 + feature_count, c1, rng)),
            fuse_mlp: Linear::init(fuse_in, c2, rng),
            out_mlp: Linear::init(c2, c3, rng),
            flags,
        }
    }

    /// All-zero module with the same layout as [`GacModuleParams::init`].
    pub fn zeros(feature_count: usize, c1: usize, c2: usize, c3: usize, flags: AttentionFlags) -> Self {
        let fuse_in = 3 + feature_count + if flags.use_global { c1 } else { 0 };
        GacModuleParams {
            edge: EdgeAttentionParams {
                layer1: Linear::zeros(3, c1),
                layer2: Linear::zeros(c1, c2),
            },
            density: DensityAttentionParams {
                layer1: Linear::zeros(1, c1),
                layer2: Linear::zeros(c1, 1),
            },
            global: flags
                .use_global
                .then(|| GlobalAttentionParams { layer: Linear::zeros(3, c1) }),
            neighbor_mlp: flags.use_global.then(|| Linear::zeros(3 + feature_count, c1)),
            fuse_mlp: Linear::zeros(fuse_in, c2),
            out_mlp: Linear::zeros(c2, c3),
            flags,
        }
    }

    /// Output feature width (the out-MLP's output dimension).
    pub fn output_width(&self) -> usize {
        self.out_mlp.out_dim
    }

    /// Input feature width this module expects (excluding coordinates).
    pub fn input_feature_count(&self) -> usize {
        let extra = if self.flags.use_global {
            self.fuse_mlp.in_dim - 3 - self.neighbor_width()
        } else {
            self.fuse_mlp.in_dim - 3
        };
        extra
    }

    fn neighbor_width(&self) -> usize {
        self.neighbor_mlp.as_ref().map_or(0, |l| l.out_dim)
    }

    /// Visit every layer in canonical order under `name`.
    pub fn visit(&self, name: &str, f: &mut impl FnMut(&str, &[T], &[usize])) {
        self.edge.layer1.visit(&format!("{name}.edge1"), f);
        self.edge.layer2.visit(&format!("{name}.edge2"), f);
        self.density.layer1.visit(&format!("{name}.dens1"), f);
        self.density.layer2.visit(&format!("{name}.dens2"), f);
        if let Some(g) = &self.global {
            g.layer.visit(&format!("{name}.global"), f);
        }
        if let Some(nm) = &self.neighbor_mlp {
            nm.visit(&format!("{name}.neighbor"), f);
        }
        self.fuse_mlp.visit(&format!("{name}.fuse"), f);
        self.out_mlp.visit(&format!("{name}.out"), f);
    }

    /// Mutable visit in the same order as [`GacModuleParams::visit`].
    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(&str, &mut Vec<T>, &[usize])) {
        self.edge.layer1.visit_mut(&format!("{name}.edge1"), f);
        self.edge.layer2.visit_mut(&format!("{name}.edge2"), f);
        self.density.layer1.visit_mut(&format!("{name}.dens1"), f);
        self.density.layer2.visit_mut(&format!("{name}.dens2"), f);
        if let Some(g) = &mut self.global {
            g.layer.visit_mut(&format!("{name}.global"), f);
        }
        if let Some(nm) = &mut self.neighbor_mlp {
            nm.visit_mut(&format!("{name}.neighbor"), f);
        }
        self.fuse_mlp.visit_mut(&format!("{name}.fuse"), f);
        self.out_mlp.visit_mut(&format!("{name}.out"), f);
    }
}

// ── Attention inputs (pure precomputation) ──────────────────────────────────

/// Neighbor offsets `out[i][k] = p_i − p_{neighbor k of i}`, flattened to
/// `N × K × 3`.
pub fn edge_features<T: Scalar>(coords: &[[f64; 3]], graph: &KnnGraph) -> Vec<T> {
    let k = graph.k;
    let mut out = Vec::with_capacity(coords.len() * k * 3);
    for (i, pi) in coords.iter().enumerate() {
        for &j in graph.row(i) {
            let pj = &coords[j];
            out.push(T::from_f64(pi[0] - pj[0]));
            out.push(T::from_f64(pi[1] - pj[1]));
            out.push(T::from_f64(pi[2] - pj[2]));
        }
    }
    out
}

/// Signed componentwise offsets between all point pairs,
/// `out[i][j] = p_i − p_j`, flattened to `N × N × 3`.
pub fn signed_difference_matrix<T: Scalar>(coords: &[[f64; 3]]) -> Vec<T> {
    let n = coords.len();
    let mut out = Vec::with_capacity(n * n * 3);
    for pi in coords {
        for pj in coords {
            out.push(T::from_f64(pi[0] - pj[0]));
            out.push(T::from_f64(pi[1] - pj[1]));
            out.push(T::from_f64(pi[2] - pj[2]));
        }
    }
    out
}

/// Inverse density of each neighbor, normalized per row by the row maximum.
/// Values lie in `(0, 1]` with the row maximum exactly 1. Flattened `N × K`.
pub fn normalized_inverse_densities(density: &DensityField, graph: &KnnGraph) -> Result<Vec<f64>> {
    let n = graph.len();
    let k = graph.k;
    if density.values.len() != n {
        return Err(Error::Contract(format!(
            "{} density values for a {n}-point graph",
            density.values.len()
        )));
    }
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let row_start = out.len();
        let mut max = f64::NEG_INFINITY;
        for &j in graph.row(i) {
            let f = density.values[j];
            if !(f > 0.0) {
                return Err(Error::Contract(format!(
                    "non-positive density {f} at point {j}"
                )));
            }
            let inv = 1.0 / f;
            out.push(inv);
            if inv > max {
                max = inv;
            }
        }
        for v in &mut out[row_start..] {
            *v /= max;
        }
    }
    Ok(out)
}

// ── Taped attention operators ───────────────────────────────────────────────

/// Edge attention over precomputed neighbor offsets `edges` of shape
/// `[N, K, 3]`: two-layer MLP then softmax across the K axis, independently
/// per output channel. Every `(point, channel)` slice sums to 1.
pub fn edge_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &EdgeAttentionParams<T>,
    edges: TensorId,
    name: &str,
) -> Result<TensorId> {
    let h = params
        .layer1
        .forward(tape, edges, &format!("{name}.edge1"), Activation::Relu)?;
    let logits = params
        .layer2
        .forward(tape, h, &format!("{name}.edge2"), Activation::None)?;
    tape.softmax_axis(logits, 1)
}

/// Density attention on normalized inverse densities of shape `[N, K, 1]`:
/// two-layer MLP producing one weight per neighbor (no normalization — the
/// inputs are already scaled to `(0, 1]`).
pub fn density_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DensityAttentionParams<T>,
    normalized_inverse: TensorId,
    name: &str,
) -> Result<TensorId> {
    let h = params.layer1.forward(
        tape,
        normalized_inverse,
        &format!("{name}.dens1"),
        Activation::Relu,
    )?;
    params
        .layer2
        .forward(tape, h, &format!("{name}.dens2"), Activation::None)
}

/// Global attention over all-pairs offsets `diff` of shape `[N, N, 3]`:
/// softmax across the second (neighbor) axis per component, then an affine
/// map to the attention width. Output `[N, N, width]`.
pub fn global_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &GlobalAttentionParams<T>,
    diff: TensorId,
    name: &str,
) -> Result<TensorId> {
    let norm = tape.softmax_axis(diff, 1)?;
    params
        .layer
        .forward(tape, norm, &format!("{name}.global"), Activation::None)
}

// ── Module forward ──────────────────────────────────────────────────────────

/// Tape handles produced by one module invocation; the attention maps are
/// kept for inspection tooling.
#[derive(Clone, Copy, Debug)]
pub struct GacTrace {
    /// Final `[N, C3]` features.
    pub output: TensorId,
    /// `[N, K, C2]` edge attention weights, when the branch ran.
    pub edge_weights: Option<TensorId>,
    /// `[N, K, 1]` density attention weights, when the branch ran.
    pub density_weights: Option<TensorId>,
    /// `[N, N, C1]` global attention weights, when the branch ran.
    pub global_weights: Option<TensorId>,
}

/// One full graph attention convolution over a point set.
///
/// `features` is an optional `[N, C]` tape tensor (omit when the cloud has
/// no feature columns); `coords` are differentiation constants. `density`
/// must be supplied when the module's density branch is on. Parameters are
/// registered under `name`, so each module invocation on a tape needs a
/// distinct name.
pub fn gac_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &GacModuleParams<T>,
    coords: &[[f64; 3]],
    features: Option<TensorId>,
    graph: &KnnGraph,
    density: Option<&DensityField>,
    name: &str,
) -> Result<GacTrace> {
    let n = coords.len();
    let k = graph.k;
    if graph.len() != n {
        return Err(Error::Contract(format!(
            "graph covers {} points but module input has {n}",
            graph.len()
        )));
    }
    let feat_width = match features {
        Some(f) => {
            let s = tape.shape(f).to_vec();
            if s.len() != 2 || s[0] != n {
                return Err(Error::Dimension {
                    op: "module features",
                    lhs: s,
                    rhs: vec![n, params.input_feature_count()],
                });
            }
            s[1]
        }
        None => 0,
    };
    if feat_width != params.input_feature_count() {
        return Err(Error::Config(format!(
            "module {name:?} expects {} feature columns, got {feat_width}",
            params.input_feature_count()
        )));
    }
    if params.flags.use_density && density.is_none() {
        return Err(Error::Config(format!(
            "module {name:?} has density attention on but no density field was provided"
        )));
    }

    // Per-point rows: coordinates ‖ features.
    let coord_data: Vec<T> = coords
        .iter()
        .flat_map(|c| c.iter().map(|&v| T::from_f64(v)))
        .collect();
    let coords_t = tape.constant(coord_data, vec![n, 3])?;
    let input = match features {
        Some(f) => tape.concat_last(coords_t, f)?,
        None => coords_t,
    };

    // Neighborhood tensor 𝒢: [N, K, 3 + C].
    let gathered = tape.gather_rows(input, &graph.indices, &[n, k])?;

    // Global branch: all-pairs attention contracted against per-point
    // neighbor projections.
    let mut global_weights = None;
    let fused_input = if params.flags.use_global {
        let neighbor = params
            .neighbor_mlp
            .as_ref()
            .expect("global flag set but neighbor projection missing");
        let gp = params
            .global
            .as_ref()
            .expect("global flag set but global parameters missing");
        let projected = neighbor.forward(tape, gathered, &format!("{name}.neighbor"), Activation::Relu)?;
        let diff = tape.constant(signed_difference_matrix(coords), vec![n, n, 3])?;
        let g = global_attention(tape, gp, diff, name)?;
        global_weights = Some(g);
        let mixed = tape.channel_matmul(g, projected)?;
        tape.concat_last(gathered, mixed)?
    } else {
        gathered
    };

    let fused = params
        .fuse_mlp
        .forward(tape, fused_input, &format!("{name}.fuse"), Activation::Relu)?;

    // Edge branch: reweight each neighbor/channel by softmax attention.
    let mut edge_weights = None;
    let edge_scaled = if params.flags.use_edge {
        let edges = tape.constant(edge_features(coords, graph), vec![n, k, 3])?;
        let w = edge_attention(tape, &params.edge, edges, name)?;
        edge_weights = Some(w);
        tape.mul(w, fused)?
    } else {
        fused
    };

    // Density branch: one learned weight per neighbor, broadcast over
    // channels.
    let mut density_weights = None;
    let density_scaled = if params.flags.use_density {
        let field = density.expect("checked above");
        let norm = normalized_inverse_densities(field, graph)?;
        let norm_t: Vec<T> = norm.into_iter().map(T::from_f64).collect();
        let inv = tape.constant(norm_t, vec![n, k, 1])?;
        let w = density_attention(tape, &params.density, inv, name)?;
        density_weights = Some(w);
        tape.mul_broadcast_last(edge_scaled, w)?
    } else {
        edge_scaled
    };

    let projected = params
        .out_mlp
        .forward(tape, density_scaled, &format!("{name}.out"), Activation::Relu)?;
    let output = tape.max_axis(projected, 1)?;

    Ok(GacTrace {
        output,
        edge_weights,
        density_weights,
        global_weights,
    })
}

// ── Tests ───────────────────────────────────────────────────────────────────
