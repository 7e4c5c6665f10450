//! Trajectory, dataset and model files.
//!
//! Trajectories are CSV (`t,x0,x1,...`, one frame per row) or a small binary
//! format: magic `MSLD`, `u16` version, `u32` frame count, `u32` dimension,
//! then the frames as little-endian `f64`, row-major. A dataset is a
//! directory of such files, optionally listed in `manifest.json`.
//! Every file is written to a temporary sibling and renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MsldsError, Result};
use crate::model::{FirstFrame, ModelParams, StateDynamics, StateGaussian, Trajectory};

const MAGIC: &[u8; 4] = b"MSLD";
const VERSION: u16 = 1;

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| MsldsError::Io(e.error))?;
    Ok(())
}

pub fn write_trajectory_csv(path: &Path, data: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..data.ncols()).map(|j| format!("x{j}")));
        out.write_record(&header)?;
        for t in 0..data.nrows() {
            let mut rec = vec![t.to_string()];
            rec.extend(data.row(t).iter().map(|v| format!("{v:e}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    })
}

/// Hidden-state sequence as CSV with header `t,state`.
pub fn write_states_csv(path: &Path, states: &[usize]) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "state"])?;
        for (t, s) in states.iter().enumerate() {
            out.write_record([t.to_string(), s.to_string()])?;
        }
        out.flush()?;
        Ok(())
    })
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let d = header.len().saturating_sub(1);
    let expected = (0..d).map(|j| format!("x{j}"));
    if header.get(0) != Some("t") || !header.iter().skip(1).eq(expected) {
        return Err(MsldsError::Data(format!("{}: header must be t,x0,x1,...", path.display())));
    }
    if d == 0 {
        return Err(MsldsError::Data(format!("{}: no coordinate columns", path.display())));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(MsldsError::Data(format!("{}: row {} has {} fields", path.display(), line + 1, rec.len())));
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                MsldsError::Data(format!("{}: row {}: cannot parse {field:?}", path.display(), line + 1))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Trajectory::new(DMatrix::from_row_slice(rows, d, &values), path.display().to_string())
}

pub fn write_trajectory_bin(path: &Path, data: &DMatrix<f64>) -> Result<()> {
    let t = u32::try_from(data.nrows()).map_err(|_| MsldsError::Data("too many frames for the binary format".into()))?;
    let d = u32::try_from(data.ncols()).map_err(|_| MsldsError::Data("dimension too large for the binary format".into()))?;
    write_atomic(path, |w| {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&t.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        for i in 0..data.nrows() {
            for v in data.row(i).iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

pub fn read_trajectory_bin(path: &Path) -> Result<Trajectory> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |what: &str| MsldsError::Data(format!("{}: {what}", path.display()));
    if bytes.len() < 14 || &bytes[0..4] != MAGIC {
        return Err(bad("not an MSLD trajectory file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let body = &bytes[14..];
    if body.len() != t * d * 8 {
        return Err(bad(&format!("expected {} data bytes for {t}×{d}, found {}", t * d * 8, body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Trajectory::new(DMatrix::from_row_slice(t, d, &values), path.display().to_string())
}

/// Reads a `.csv` or `.msld` trajectory by extension.
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_trajectory_csv(path),
        Some("msld") => read_trajectory_bin(path),
        _ => Err(MsldsError::Data(format!("{}: unknown trajectory extension", path.display()))),
    }
}

pub fn write_trajectory(path: &Path, data: &DMatrix<f64>) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("msld") => write_trajectory_bin(path, data),
        _ => write_trajectory_csv(path, data),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

/// Trajectories with their per-trajectory weights.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub weights: Vec<f64>,
}

impl Dataset {
    pub fn unweighted(trajectories: Vec<Trajectory>) -> Self {
        let weights = vec![1.0; trajectories.len()];
        Self { trajectories, weights }
    }

    pub fn dim(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::dim)
    }

    pub fn n_frames(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Loads a dataset from a directory (manifest or every `.csv`/`.msld` file,
/// sorted by name) or from a single trajectory file.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let entries: Vec<(PathBuf, f64)> = if path.is_dir() {
        let manifest = path.join("manifest.json");
        if manifest.is_file() {
            let m: Manifest = serde_json::from_reader(fs::File::open(&manifest)?)?;
            m.files.into_iter().map(|e| (path.join(e.path), e.weight)).collect()
        } else {
            let mut files: Vec<PathBuf> = fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "msld")))
                .collect();
            files.sort();
            files.into_iter().map(|p| (p, 1.0)).collect()
        }
    } else if path.is_file() {
        vec![(path.to_path_buf(), 1.0)]
    } else {
        return Err(MsldsError::Data(format!("{}: no such file or directory", path.display())));
    };
    if entries.is_empty() {
        return Err(MsldsError::EmptyInput(format!("{}: no trajectory files", path.display())));
    }
    let mut trajectories = Vec::with_capacity(entries.len());
    let mut weights = Vec::with_capacity(entries.len());
    for (p, w) in entries {
        if !(w > 0.0 && w.is_finite()) {
            return Err(MsldsError::Data(format!("{}: weight must be positive, got {w}", p.display())));
        }
        let t = read_trajectory(&p)?;
        if let Some(first) = trajectories.first() {
            crate::error::check_dim(Trajectory::dim(first), t.dim())?;
        }
        trajectories.push(t);
        weights.push(w);
    }
    Ok(Dataset { trajectories, weights })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateRecord {
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelRecord {
    n_states: usize,
    dim: usize,
    trans: Vec<Vec<f64>>,
    pi: Vec<f64>,
    states: Vec<StateRecord>,
    #[serde(default)]
    first_frame: FirstFrame,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>> {
    if r.len() != n || r.iter().any(|row| row.len() != n) {
        return Err(MsldsError::Data(format!("model file: {what} must be {n}×{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| r[i][j]))
}

/// Floats as `{:.16e}`: 17 significant digits, enough to round-trip any `f64`.
struct SignificantDigits;

impl serde_json::ser::Formatter for SignificantDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn model_to_json(params: &ModelParams) -> Result<String> {
    let rec = ModelRecord {
        n_states: params.n_states(),
        dim: params.dim(),
        trans: rows(params.trans()),
        pi: params.pi().iter().copied().collect(),
        states: params
            .dynamics()
            .iter()
            .zip(params.gaussians())
            .map(|(dy, g)| StateRecord {
                mu: g.mu().iter().copied().collect(),
                sigma: rows(g.sigma()),
                a: rows(dy.a()),
                b: dy.b().iter().copied().collect(),
                q: rows(dy.q()),
            })
            .collect(),
        first_frame: params.first_frame(),
    };
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SignificantDigits);
    rec.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

pub fn model_from_json(text: &str) -> Result<ModelParams> {
    let rec: ModelRecord = serde_json::from_str(text)?;
    let (k, d) = (rec.n_states, rec.dim);
    if rec.states.len() != k || rec.pi.len() != k {
        return Err(MsldsError::Data(format!("model file: expected {k} states")));
    }
    let trans = from_rows(&rec.trans, k, "trans")?;
    let mut dynamics = Vec::with_capacity(k);
    let mut gaussians = Vec::with_capacity(k);
    for s in &rec.states {
        if s.mu.len() != d || s.b.len() != d {
            return Err(MsldsError::Data(format!("model file: vectors must have length {d}")));
        }
        gaussians.push(StateGaussian::new(DVector::from_vec(s.mu.clone()), from_rows(&s.sigma, d, "sigma")?)?);
        dynamics.push(StateDynamics::new(from_rows(&s.a, d, "a")?, DVector::from_vec(s.b.clone()), from_rows(&s.q, d, "q")?)?);
    }
    Ok(ModelParams::new(trans, DVector::from_vec(rec.pi), dynamics, gaussians)?.with_first_frame(rec.first_frame))
}

pub fn write_model(path: &Path, params: &ModelParams) -> Result<()> {
    let text = model_to_json(params)?;
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

pub fn read_model(path: &Path) -> Result<ModelParams> {
    model_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 2, &[0.1, -2.5, 1.0 / 3.0, 1e-300, -0.0, 7.25e12])
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_trajectory_csv(&p, &sample()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,x0,x1\n0,"));
        assert_eq!(read_trajectory(&p).unwrap().data(), &sample());
    }

    #[test]
    fn binary_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.msld");
        write_trajectory(&p, &sample()).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"MSLD");
        assert_eq!(bytes.len(), 14 + 6 * 8);
        assert_eq!(f64::from_le_bytes(bytes[22..30].try_into().unwrap()), -2.5);
        assert_eq!(read_trajectory(&p).unwrap().data(), &sample());
    }

    #[test]
    fn truncated_binary_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.msld");
        write_trajectory(&p, &sample()).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_trajectory(&p), Err(MsldsError::Data(_))));
    }

    #[test]
    fn bad_csv_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "time,x0\n0,1\n1,2\n").unwrap();
        assert!(read_trajectory(&p).is_err());
    }

    #[test]
    fn dataset_directory_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&dir.path().join("b.csv"), &sample()).unwrap();
        write_trajectory(&dir.path().join("a.msld"), &(sample() * 2.0)).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.trajectories.len(), 2);
        assert_eq!(ds.trajectories[0].data(), &(sample() * 2.0));
        fs::write(dir.path().join("manifest.json"), r#"{"files": [{"path": "b.csv", "weight": 2.5}]}"#).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.trajectories.len(), 1);
        assert_eq!(ds.weights, vec![2.5]);
    }
}
