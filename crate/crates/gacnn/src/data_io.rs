//! File formats: whitespace-separated LiDAR point files, derived feature
//! construction (including height above ground), prediction dumps, and the
//! binary model checkpoint.
//!
//! Point files hold one point per line — `x y z intensity return_number
//! num_returns` plus an optional trailing class label — with `#` comments
//! and blank lines ignored. Checkpoints are written atomically: the file is
//! staged in the target directory and renamed into place.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::network::{GacnnModel, Prediction};
use crate::tensor::Scalar;

// ── Point file parsing ──────────────────────────────────────────────────────

/// Column-wise contents of a point file. Either every line carried a label
/// or none did.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPoints {
    pub coords: Vec<[f64; 3]>,
    pub intensity: Vec<f64>,
    pub return_number: Vec<u32>,
    pub num_returns: Vec<u32>,
    pub labels: Option<Vec<u32>>,
}

impl RawPoints {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

fn parse_field<T: std::str::FromStr>(token: &str, field: &str, line: usize) -> Result<T> {
    token.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {field} '{token}'"),
    })
}

fn parse_finite(token: &str, field: &str, line: usize) -> Result<f64> {
    let v: f64 = parse_field(token, field, line)?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("non-finite {field} '{token}'"),
        });
    }
    Ok(v)
}

/// Parses point-file text. Lines hold 6 whitespace-separated fields
/// (`x y z intensity return_number num_returns`) or 7 (a trailing label);
/// the first data line fixes which, and `1 <= return_number <= num_returns`
/// must hold. Line numbers in errors are 1-based and count comments and
/// blank lines.
pub fn parse_points(text: &str) -> Result<RawPoints> {
    let mut coords = Vec::new();
    let mut intensity = Vec::new();
    let mut return_number = Vec::new();
    let mut num_returns = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut has_labels: Option<bool> = None;

    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let labeled = match fields.len() {
            6 => false,
            7 => true,
            n => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 6 or 7 fields, got {n}"),
                })
            }
        };
        match has_labels {
            None => has_labels = Some(labeled),
            Some(first) if first != labeled => {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "expected {} fields as on earlier lines, got {}",
                        if first { 7 } else { 6 },
                        fields.len()
                    ),
                })
            }
            _ => {}
        }
        let x = parse_finite(fields[0], "x coordinate", line)?;
        let y = parse_finite(fields[1], "y coordinate", line)?;
        let z = parse_finite(fields[2], "z coordinate", line)?;
        let inten = parse_finite(fields[3], "intensity", line)?;
        let rn: u32 = parse_field(fields[4], "return_number", line)?;
        let nr: u32 = parse_field(fields[5], "num_returns", line)?;
        if rn < 1 || rn > nr {
            return Err(Error::Parse {
                line,
                message: format!("return_number {rn} outside 1..={nr}"),
            });
        }
        if labeled {
            labels.push(parse_field(fields[6], "label", line)?);
        }
        coords.push([x, y, z]);
        intensity.push(inten);
        return_number.push(rn);
        num_returns.push(nr);
    }

    if coords.is_empty() {
        return Err(Error::Format("point file contains no points".into()));
    }
    Ok(RawPoints {
        coords,
        intensity,
        return_number,
        num_returns,
        labels: if has_labels == Some(true) { Some(labels) } else { None },
    })
}

/// Reads and parses a point file from disk.
pub fn parse_point_file(path: impl AsRef<Path>) -> Result<RawPoints> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text)
}

/// Writes points in the same format [`parse_points`] reads. Real-valued
/// fields are written with 6 decimal places.
pub fn write_point_file(path: impl AsRef<Path>, points: &RawPoints) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..points.len() {
        let [x, y, z] = points.coords[i];
        let _ = write!(
            out,
            "{x:.6} {y:.6} {z:.6} {:.6} {} {}",
            points.intensity[i], points.return_number[i], points.num_returns[i]
        );
        if let Some(labels) = &points.labels {
            let _ = write!(out, " {}", labels[i]);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ── Feature construction ────────────────────────────────────────────────────

/// Which per-point input features the model sees. Enabled columns always
/// appear in the fixed order: intensity, height above ground, return number,
/// number of returns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSelection {
    pub intensity: bool,
    pub height_above_ground: bool,
    pub return_number: bool,
    pub num_returns: bool,
    /// XY grid cell edge length (meters) for the ground estimate.
    pub hag_cell_size: f64,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        FeatureSelection {
            intensity: true,
            height_above_ground: true,
            return_number: false,
            num_returns: false,
            hag_cell_size: 2.0,
        }
    }
}

impl FeatureSelection {
    pub fn feature_count(&self) -> usize {
        usize::from(self.intensity)
            + usize::from(self.height_above_ground)
            + usize::from(self.return_number)
            + usize::from(self.num_returns)
    }

    /// Names of the enabled columns, in the order they appear.
    pub fn column_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.intensity {
            names.push("intensity");
        }
        if self.height_above_ground {
            names.push("height_above_ground");
        }
        if self.return_number {
            names.push("return_number");
        }
        if self.num_returns {
            names.push("num_returns");
        }
        names
    }
}

/// Per-point height above the local ground estimate: points are binned into
/// an XY grid of `cell_size`-sized cells anchored at the cloud's minimum
/// corner, and each point's height is its z minus the minimum z in its cell.
/// Results are non-negative and invariant under translating all points.
pub fn compute_height_above_ground(coords: &[[f64; 3]], cell_size: f64) -> Result<Vec<f64>> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::Config(format!(
            "ground grid cell size must be a positive real, got {cell_size}"
        )));
    }
    if coords.is_empty() {
        return Ok(Vec::new());
    }
    let min_x = coords.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
    let min_y = coords.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
    let cell_of = |c: &[f64; 3]| {
        (
            ((c[0] - min_x) / cell_size).floor() as i64,
            ((c[1] - min_y) / cell_size).floor() as i64,
        )
    };
    let mut ground: HashMap<(i64, i64), f64> = HashMap::new();
    for c in coords {
        let e = ground.entry(cell_of(c)).or_insert(f64::INFINITY);
        *e = e.min(c[2]);
    }
    Ok(coords.iter().map(|c| c[2] - ground[&cell_of(c)]).collect())
}

/// Assembles the model input cloud from parsed points: coordinates, the
/// selected feature columns, and the labels when present.
pub fn build_feature_cloud(points: &RawPoints, selection: &FeatureSelection) -> Result<PointCloud> {
    let n = points.len();
    let hag = if selection.height_above_ground {
        compute_height_above_ground(&points.coords, selection.hag_cell_size)?
    } else {
        Vec::new()
    };
    let width = selection.feature_count();
    let mut features = Vec::with_capacity(n * width);
    for i in 0..n {
        if selection.intensity {
            features.push(points.intensity[i] as f32);
        }
        if selection.height_above_ground {
            features.push(hag[i] as f32);
        }
        if selection.return_number {
            features.push(points.return_number[i] as f32);
        }
        if selection.num_returns {
            features.push(points.num_returns[i] as f32);
        }
    }
    PointCloud::new(points.coords.clone(), features, width, points.labels.clone())
}

// ── Prediction output ───────────────────────────────────────────────────────

/// Writes one line per point: `x y z predicted_label`, then a 1/0
/// correctness flag when `truth` is given, then the per-class probabilities
/// when requested. Real values use 6 decimal places.
pub fn write_predictions<T: Scalar>(
    path: impl AsRef<Path>,
    coords: &[[f64; 3]],
    prediction: &Prediction<T>,
    truth: Option<&[u32]>,
    include_probabilities: bool,
) -> Result<()> {
    let path = path.as_ref();
    let n = coords.len();
    if prediction.labels.len() != n || prediction.probabilities.len() != n * prediction.num_classes
    {
        return Err(Error::Contract(format!(
            "prediction covers {} points, coordinates have {n}",
            prediction.labels.len()
        )));
    }
    if let Some(t) = truth {
        if t.len() != n {
            return Err(Error::Contract(format!(
                "{} truth labels for {n} points",
                t.len()
            )));
        }
    }
    let mut out = String::new();
    for i in 0..n {
        let [x, y, z] = coords[i];
        let _ = write!(out, "{x:.6} {y:.6} {z:.6} {}", prediction.labels[i]);
        if let Some(t) = truth {
            let _ = write!(out, " {}", u8::from(prediction.labels[i] == t[i]));
        }
        if include_probabilities {
            let row = &prediction.probabilities
                [i * prediction.num_classes..(i + 1) * prediction.num_classes];
            for &p in row {
                let _ = write!(out, " {:.6}", p.to_f64());
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Extracts per-point class labels from a labeled file, sniffing the layout
/// from the column count: prediction dumps (4, 5, or more than 7 columns)
/// keep the label in column 4; labeled point files (7 columns) keep it in
/// column 7. A 6-column point file carries no labels and is rejected.
pub fn parse_label_column(text: &str) -> Result<Vec<u32>> {
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} fields as on earlier lines, got {}", fields.len()),
                })
            }
            _ => {}
        }
        let column = match fields.len() {
            4 | 5 => 3,
            6 => {
                return Err(Error::Format(
                    "6-column point file carries no labels".into(),
                ))
            }
            7 => 6,
            n if n > 7 => 3,
            n => {
                return Err(Error::Format(format!(
                    "cannot locate a label column in {n}-field lines"
                )))
            }
        };
        labels.push(parse_field(fields[column], "label", line)?);
    }
    if labels.is_empty() {
        return Err(Error::Format("label file contains no points".into()));
    }
    Ok(labels)
}

/// [`parse_label_column`] for a file on disk.
pub fn read_label_column(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_column(&text)
}

// ── Checkpoints ─────────────────────────────────────────────────────────────

/// First eight bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GACNNCKP";
/// Current checkpoint layout version.
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes the model: magic, version, the full run configuration as
/// TOML, then every parameter in canonical order as `(name, shape, f32
/// values)`, all integers and floats little-endian. Embedding the whole
/// configuration lets prediction and inspection run from the checkpoint
/// alone; it must describe this model's architecture. The file is written
/// atomically.
pub fn save_checkpoint<T: Scalar>(
    model: &GacnnModel<T>,
    run: &RunConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if run.to_gacnn_config() != model.config {
        return Err(Error::Contract(
            "run configuration does not describe this model's architecture".into(),
        ));
    }
    let config_toml = run.to_toml_string()?;

    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, config_toml.len() as u32);
    buf.extend_from_slice(config_toml.as_bytes());
    model.for_each_param(&mut |name, values, shape| {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, shape.len() as u32);
        for &d in shape {
            push_u32(&mut buf, d as u32);
        }
        for &v in values {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    });

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(&buf).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint truncated while reading {what}"
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint back into a model plus the run configuration it was
/// saved with. The architecture comes from the embedded configuration;
/// every parameter record must match that architecture's canonical name and
/// shape sequence exactly, with no bytes left over.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(GacnnModel<T>, RunConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };

    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_len = r.u32("configuration length")? as usize;
    let config_text = std::str::from_utf8(r.take(config_len, "configuration")?)
        .map_err(|_| Error::Corrupt("configuration block is not UTF-8".into()))?;
    let run = RunConfig::from_toml_str(config_text)
        .map_err(|e| Error::Corrupt(format!("bad configuration block: {e}")))?;
    run.validate()?;
    let config = run.to_gacnn_config();

    let mut model = GacnnModel::<T>::zeros(config)?;
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    model.for_each_param(&mut |name, _, shape| expected.push((name.to_string(), shape.to_vec())));

    let mut loaded: Vec<Vec<T>> = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let name_len = r.u32("parameter name length")? as usize;
        let stored_name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
        if stored_name != name {
            return Err(Error::Corrupt(format!(
                "parameter order mismatch: expected {name}, found {stored_name}"
            )));
        }
        let rank = r.u32("parameter rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("parameter dimension")? as usize);
        }
        if dims != *shape {
            return Err(Error::Corrupt(format!(
                "parameter {name} has shape {dims:?}, expected {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel, "parameter values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        loaded.push(values);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }

    let mut it = loaded.into_iter();
    model.for_each_param_mut(&mut |_, values, _| {
        *values = it.next().expect("record count matches parameter count");
    });
    Ok((model, run))
}

// ── Tests ───────────────────────────────────────────────────────────────────
