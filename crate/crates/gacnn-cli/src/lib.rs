//! Command-line front end for the `gacnn` point-cloud classifier.
//!
//! Four subcommands cover the full workflow: `train` fits a model on a
//! directory of labeled point files, `predict` classifies one file with a
//! saved checkpoint, `evaluate` scores a prediction file against ground
//! truth, and `inspect-attention` dumps one level's attention maps as text.
//!
//! Every failure prints a single `error[<module>]: <message>` line to
//! stderr and exits nonzero: 2 for command-line usage problems, 1 for
//! everything else.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use gacnn::config::RunConfig;
use gacnn::data_io::{
    build_feature_cloud, load_checkpoint, parse_point_file, read_label_column, save_checkpoint,
    write_predictions,
};
use gacnn::evaluation::{format_report, ConfusionMatrix, ISPRS_CLASS_NAMES};
use gacnn::geometry::tile_indices;
use gacnn::network::{GacnnModel, Prediction};
use gacnn::tensor::Tape;
use gacnn::training::train_with_callback;
use gacnn::Error;

#[derive(Parser)]
#[command(
    name = "gacnn",
    version,
    about = "Airborne-LiDAR point cloud classification with a graph attention convolution network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of labeled point files.
    Train {
        /// Directory holding the training scenes, one point file each.
        data_dir: PathBuf,
        /// TOML run configuration; every key is optional and defaults apply
        /// when the flag is omitted entirely.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the model checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Disable the global attention branch.
        #[arg(long = "no-global")]
        no_global: bool,
        /// Disable the edge attention branch.
        #[arg(long = "no-edge-attn")]
        no_edge_attn: bool,
        /// Disable the density attention branch.
        #[arg(long = "no-density-attn")]
        no_density_attn: bool,
    },
    /// Classify every point of a file with a trained model.
    Predict {
        /// Checkpoint written by `train`.
        ckpt: PathBuf,
        /// Point file to classify; a label column, if present, adds a
        /// correctness flag to each output line.
        file: PathBuf,
        /// Where to write the predictions.
        #[arg(long)]
        out: PathBuf,
        /// Append per-class probabilities to every output line.
        #[arg(long)]
        probs: bool,
    },
    /// Score a prediction file against a labeled truth file.
    Evaluate {
        /// File whose label column holds the predictions.
        pred: PathBuf,
        /// File whose label column holds the ground truth.
        truth: PathBuf,
        /// Optional run configuration supplying the class count and names.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump one encoder level's attention maps and output features as text.
    InspectAttention {
        /// Checkpoint written by `train`.
        ckpt: PathBuf,
        /// Point file to analyze as a single point set.
        file: PathBuf,
        /// Encoder level to dump.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4))]
        level: u32,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the selected
/// command, returning the process exit status: 0 on success, 1 on any
/// pipeline failure, 2 on a usage error.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = i32::from(e.use_stderr()) * 2;
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train {
            data_dir,
            config,
            out,
            no_global,
            no_edge_attn,
            no_density_attn,
        } => cmd_train(
            &data_dir,
            config.as_deref(),
            &out,
            no_global,
            no_edge_attn,
            no_density_attn,
        ),
        Command::Predict {
            ckpt,
            file,
            out,
            probs,
        } => cmd_predict(&ckpt, &file, &out, probs),
        Command::Evaluate {
            pred,
            truth,
            config,
        } => cmd_evaluate(&pred, &truth, config.as_deref()),
        Command::InspectAttention {
            ckpt,
            file,
            level,
            out,
        } => cmd_inspect(&ckpt, &file, level as usize, &out),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.module, e.message);
            1
        }
    }
}

// ── Error plumbing ──────────────────────────────────────────────────────────

/// A pipeline failure tagged with the library module it came from.
struct CmdError {
    module: &'static str,
    message: String,
}

/// Collapses a possibly multi-line error display into one diagnostic line.
fn one_line(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

trait StageExt<V> {
    /// Tags an error with the originating module name.
    fn stage(self, module: &'static str) -> Result<V, CmdError>;
    /// [`StageExt::stage`], prefixing the message with `path` when the
    /// message does not already name it.
    fn stage_at(self, module: &'static str, path: &Path) -> Result<V, CmdError>;
}

impl<V> StageExt<V> for gacnn::Result<V> {
    fn stage(self, module: &'static str) -> Result<V, CmdError> {
        self.map_err(|e| CmdError {
            module,
            message: one_line(&e.to_string()),
        })
    }

    fn stage_at(self, module: &'static str, path: &Path) -> Result<V, CmdError> {
        self.map_err(|e| {
            let message = one_line(&e.to_string());
            let shown = path.display().to_string();
            CmdError {
                module,
                message: if message.contains(&shown) {
                    message
                } else {
                    format!("{shown}: {message}")
                },
            }
        })
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ── train ───────────────────────────────────────────────────────────────────

fn cmd_train(
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    no_global: bool,
    no_edge_attn: bool,
    no_density_attn: bool,
) -> Result<(), CmdError> {
    let mut run = match config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
    .stage("config")?;
    if no_global {
        run.network.use_global = false;
    }
    if no_edge_attn {
        run.network.use_edge_attention = false;
    }
    if no_density_attn {
        run.network.use_density_attention = false;
    }
    run.validate().stage("config")?;

    let selection = run.to_feature_selection();
    let geometry = &run.geometry;
    let mut tiles = Vec::new();
    for path in point_files(data_dir)? {
        let raw = parse_point_file(&path).stage_at("data_io", &path)?;
        if raw.labels.is_none() {
            return Err(CmdError {
                module: "data_io",
                message: format!(
                    "{}: no label column; training needs labeled points",
                    path.display()
                ),
            });
        }
        let cloud = build_feature_cloud(&raw, &selection).stage_at("data_io", &path)?;
        let scene_tiles = gacnn::geometry::tile_scene(
            &cloud,
            geometry.tile_x,
            geometry.tile_y,
            geometry.tile_z,
            geometry.min_tile_points,
        )
        .stage_at("geometry", &path)?;
        tiles.extend(scene_tiles);
    }

    let mut model =
        GacnnModel::<f32>::init(run.to_gacnn_config(), run.training.rng_seed).stage("network")?;
    let train_config = run.to_train_config();
    let interval = run.training.checkpoint_interval;
    train_with_callback(&mut model, &tiles, &train_config, |record, snapshot| {
        println!("{}", record.to_line());
        if interval > 0 && (record.step + 1) % interval == 0 {
            save_checkpoint(snapshot, &run, out)?;
        }
        Ok(())
    })
    .stage("training")?;
    save_checkpoint(&model, &run, out).stage("data_io")?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Regular files in `dir`, sorted by name; dotfiles are skipped.
fn point_files(dir: &Path) -> Result<Vec<PathBuf>, CmdError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))
        .stage("data_io")?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_error(dir, e)).stage("data_io")?;
        let path = entry.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if path.is_file() && !hidden {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CmdError {
            module: "data_io",
            message: format!("no point files in {}", dir.display()),
        });
    }
    Ok(paths)
}

// ── predict ─────────────────────────────────────────────────────────────────

fn cmd_predict(ckpt: &Path, file: &Path, out: &Path, probs: bool) -> Result<(), CmdError> {
    let (model, run): (GacnnModel<f32>, RunConfig) = load_checkpoint(ckpt).stage("data_io")?;
    let raw = parse_point_file(file).stage_at("data_io", file)?;
    let cloud = build_feature_cloud(&raw, &run.to_feature_selection()).stage("data_io")?;

    let geometry = &run.geometry;
    let parts = tile_indices(
        &cloud,
        geometry.tile_x,
        geometry.tile_y,
        geometry.tile_z,
        geometry.min_tile_points,
    )
    .stage("geometry")?;

    // Tiles run one at a time; each result is scattered back to the input
    // order, so the output file matches the input line for line.
    let classes = model.config.num_classes;
    let mut probabilities = vec![0.0f32; cloud.len() * classes];
    let mut labels = vec![0u32; cloud.len()];
    for indices in &parts {
        let tile = cloud.select(indices).stage("geometry")?.recentered_to_min();
        let prediction = model.predict(&tile).stage("network")?;
        for (row, &original) in indices.iter().enumerate() {
            labels[original] = prediction.labels[row];
            probabilities[original * classes..(original + 1) * classes]
                .copy_from_slice(&prediction.probabilities[row * classes..(row + 1) * classes]);
        }
    }

    let merged = Prediction {
        probabilities,
        num_classes: classes,
        labels,
    };
    write_predictions(out, &raw.coords, &merged, raw.labels.as_deref(), probs)
        .stage("data_io")?;
    println!("wrote {}", out.display());
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────────

fn cmd_evaluate(pred: &Path, truth: &Path, config: Option<&Path>) -> Result<(), CmdError> {
    let predicted = read_label_column(pred).stage_at("data_io", pred)?;
    let actual = read_label_column(truth).stage_at("data_io", truth)?;
    if predicted.len() != actual.len() {
        return Err(CmdError {
            module: "evaluation",
            message: format!(
                "{} predictions against {} truth points",
                predicted.len(),
                actual.len()
            ),
        });
    }

    let run = match config {
        Some(path) => {
            let run = RunConfig::load(path).stage("config")?;
            run.validate().stage("config")?;
            Some(run)
        }
        None => None,
    };
    // Without a configuration the class count comes from the labels seen.
    let num_classes = match &run {
        Some(run) => run.network.num_classes,
        None => {
            let top = predicted.iter().chain(&actual).max().copied().unwrap_or(0);
            top as usize + 1
        }
    };
    let names: Vec<String> = match &run {
        Some(run) => run.class_names(),
        None if num_classes == ISPRS_CLASS_NAMES.len() => {
            ISPRS_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
        }
        None => (0..num_classes).map(|i| format!("class{i}")).collect(),
    };

    let mut matrix = ConfusionMatrix::new(num_classes).stage("evaluation")?;
    matrix.accumulate(&actual, &predicted).stage("evaluation")?;
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    print!(
        "{}",
        format_report(&matrix, &name_refs).stage("evaluation")?
    );
    Ok(())
}

// ── inspect-attention ───────────────────────────────────────────────────────

fn cmd_inspect(ckpt: &Path, file: &Path, level: usize, out: &Path) -> Result<(), CmdError> {
    let (model, run): (GacnnModel<f32>, RunConfig) = load_checkpoint(ckpt).stage("data_io")?;
    let raw = parse_point_file(file).stage_at("data_io", file)?;
    let cloud = build_feature_cloud(&raw, &run.to_feature_selection())
        .stage("data_io")?
        .recentered_to_min();

    // The whole file is analyzed as one point set so that every attention
    // map covers it; keep inspection inputs tile-sized.
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &cloud).stage("network")?;
    std::fs::create_dir_all(out)
        .map_err(|e| io_error(out, e))
        .stage("data_io")?;

    let coords = &trace.level_coords[level];
    let mut text = String::new();
    let _ = writeln!(text, "# shape: {} 3", coords.len());
    for c in coords {
        let _ = writeln!(text, "{:.6} {:.6} {:.6}", c[0], c[1], c[2]);
    }
    let points_path = out.join("points.txt");
    std::fs::write(&points_path, text)
        .map_err(|e| io_error(&points_path, e))
        .stage("data_io")?;
    println!("wrote {}", points_path.display());

    let module_trace = &trace.encoder_traces[level - 1];
    let mut dumps = vec![("features.txt", Some(module_trace.output))];
    dumps.push(("edge_attention.txt", module_trace.edge_weights));
    dumps.push(("density_attention.txt", module_trace.density_weights));
    dumps.push(("global_attention.txt", module_trace.global_weights));
    for (name, id) in dumps {
        let Some(id) = id else { continue };
        let path = out.join(name);
        write_tensor_text(&path, tape.shape(id), tape.data(id)).stage("data_io")?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Writes a tensor as text: a `# shape:` header, then one line per
/// first-axis slice with the remaining axes flattened row-major.
fn write_tensor_text(path: &Path, shape: &[usize], data: &[f32]) -> gacnn::Result<()> {
    let mut text = String::new();
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(text, "# shape: {}", dims.join(" "));
    let row: usize = shape[1..].iter().product::<usize>().max(1);
    for chunk in data.chunks(row) {
        let values: Vec<String> = chunk.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(text, "{}", values.join(" "));
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}
