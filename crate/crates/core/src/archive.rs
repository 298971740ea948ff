//! Binary storage for fitted models and value functions.
//!
//! Both formats are `magic | u32 version | u32 header length | JSON header |
//! little-endian f64 payload`. A solution records the SHA-256 digest of the
//! model file it was computed from and refuses to load against any other model.

use std::path::Path;
use std::sync::Arc;

use faer::{Col, Mat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::hjb::HjbSolution;
use crate::kernels::KernelSpec;
use crate::penalty::ControlPenalty;
use crate::points::PointSet;

const MODEL_MAGIC: &[u8; 8] = b"KHJBMODL";
const SOLUTION_MAGIC: &[u8; 8] = b"KHJBSOLN";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    config_hash: String,
    n: usize,
    n_x: usize,
    n_u: usize,
    kernel: KernelSpec,
    gamma: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolutionHeader {
    config_hash: String,
    n: usize,
    model_sha256: String,
    penalty: ControlPenalty,
    /// Number of stored iterates beyond `v_0` (0 when no trajectory was kept).
    trajectory_len: usize,
}

fn encode(magic: &[u8; 8], header: &impl Serialize, payload: impl Iterator<Item = f64>) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Decoded<H> {
    header: H,
    payload: Vec<f64>,
}

fn decode<H: for<'de> Deserialize<'de>>(bytes: &[u8], magic: &[u8; 8], kind: &'static str, path: &Path) -> Result<Decoded<H>> {
    let bad = |reason: String| Error::Format {
        kind,
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(bad("missing magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[16..];
    if rest.len() < len {
        return Err(bad("truncated header".into()));
    }
    let header = serde_json::from_slice(&rest[..len]).map_err(|e| bad(format!("header: {e}")))?;
    let body = &rest[len..];
    if body.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values".into()));
    }
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Decoded { header, payload })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mat_values(m: &Mat<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.ncols()).flat_map(move |j| (0..m.nrows()).map(move |i| m[(i, j)]))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A model read back from disk.
#[derive(Debug)]
pub struct ModelArchive {
    pub model: GeneratorModel,
    /// Digest of the file bytes; solutions are bound to it.
    pub sha256: String,
    pub config_hash: String,
}

/// A value function read back from disk.
#[derive(Debug)]
pub struct SolutionArchive {
    pub solution: HjbSolution,
    pub penalty: ControlPenalty,
    pub config_hash: String,
}

pub fn encode_model(model: &GeneratorModel, config_hash: &str) -> Vec<u8> {
    let header = ModelHeader {
        config_hash: config_hash.to_owned(),
        n: model.len(),
        n_x: model.n_x(),
        n_u: model.n_u(),
        kernel: model.kernel,
        gamma: model.gamma,
        epsilon: model.epsilon,
    };
    let payload = model
        .points
        .as_flat()
        .iter()
        .copied()
        .chain(mat_values(model.a_hat()))
        .chain(model.b_hat().iter().flat_map(mat_values))
        .chain(model.q_coeff().iter().copied());
    encode(MODEL_MAGIC, &header, payload)
}

/// Writes the model and returns the SHA-256 digest of the written file.
pub fn save_model(path: &Path, model: &GeneratorModel, config_hash: &str) -> Result<String> {
    let bytes = encode_model(model, config_hash);
    write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a model (refactorizing its Gram matrix) and returns it with its file digest.
pub fn load_model(path: &Path) -> Result<ModelArchive> {
    let bytes = read(path)?;
    let d: Decoded<ModelHeader> = decode(&bytes, MODEL_MAGIC, "model", path)?;
    let h = &d.header;
    let n = h.n;
    let expected = n * h.n_x + n * n * (1 + h.n_u) + n;
    if d.payload.len() != expected || n == 0 || h.n_x == 0 || h.n_u == 0 {
        return Err(Error::Format {
            kind: "model",
            path: path.to_path_buf(),
            reason: format!("payload has {} values, header implies {expected}", d.payload.len()),
        });
    }
    let (pts, rest) = d.payload.split_at(n * h.n_x);
    let square = |s: &[f64]| Mat::from_fn(n, n, |i, j| s[i + n * j]);
    let a_hat = square(&rest[..n * n]);
    let b_hat = (0..h.n_u)
        .map(|k| square(&rest[n * n * (k + 1)..n * n * (k + 2)]))
        .collect();
    let q = &rest[n * n * (1 + h.n_u)..];
    let model = GeneratorModel::from_parts(
        PointSet::new(h.n_x, pts.to_vec())?,
        h.kernel,
        h.gamma,
        h.epsilon,
        a_hat,
        b_hat,
        Col::from_fn(n, |i| q[i]),
    )?;
    Ok(ModelArchive {
        model,
        sha256: sha256_hex(&bytes),
        config_hash: d.header.config_hash,
    })
}

/// Writes a solution bound to the model file with digest `model_sha256`.
pub fn save_solution(
    path: &Path,
    sol: &HjbSolution,
    penalty: &ControlPenalty,
    model_sha256: &str,
    config_hash: &str,
) -> Result<()> {
    let traj = sol.trajectory().unwrap_or(&[]);
    let header = SolutionHeader {
        config_hash: config_hash.to_owned(),
        n: sol.v0().nrows(),
        model_sha256: model_sha256.to_owned(),
        penalty: penalty.clone(),
        trajectory_len: traj.len(),
    };
    let payload = sol
        .v0()
        .iter()
        .copied()
        .chain(traj.iter().flat_map(|w| w.iter().copied()));
    write(path, &encode(SOLUTION_MAGIC, &header, payload))
}

/// Loads a solution for `model`, whose file digest must match the stored one.
pub fn load_solution(path: &Path, model: Arc<GeneratorModel>, model_sha256: &str) -> Result<SolutionArchive> {
    let bytes = read(path)?;
    let d: Decoded<SolutionHeader> = decode(&bytes, SOLUTION_MAGIC, "solution", path)?;
    let bad = |reason: String| Error::Format {
        kind: "solution",
        path: path.to_path_buf(),
        reason,
    };
    if d.header.model_sha256 != model_sha256 {
        return Err(bad(format!(
            "computed from model {}, but the supplied model is {model_sha256}",
            d.header.model_sha256
        )));
    }
    let n = d.header.n;
    if n != model.len() || d.payload.len() != n * (1 + d.header.trajectory_len) {
        return Err(bad("payload size does not match the model".into()));
    }
    d.header.penalty.validate()?;
    let col = |k: usize| Col::from_fn(n, |i| d.payload[k * n + i]);
    let trajectory = (d.header.trajectory_len > 0).then(|| (1..=d.header.trajectory_len).map(col).collect());
    Ok(SolutionArchive {
        solution: HjbSolution::new(model, col(0), trajectory),
        penalty: d.header.penalty,
        config_hash: d.header.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, ControlAffineSystem, GridAxis, LabelMode, StageCost, StateGridSpec};
    use crate::generator::fit;
    use crate::hjb::{solve_fvp, HjbConfig};

    fn small_model() -> GeneratorModel {
        let sys = ControlAffineSystem::linear(vec![vec![1.0]], vec![vec![1.0]], 1.0, 0.0).unwrap();
        let grid = StateGridSpec::new(vec![GridAxis::new(-1.0, 1.0, 7)]);
        let cost = StageCost::Quadratic { weights: vec![1.5] };
        let data = generate_dataset(&sys, &grid, &cost, LabelMode::Analytic, 0).unwrap();
        fit(&data, &KernelSpec::squared_exponential(1.0).unwrap(), 1e-6, 0.0).unwrap()
    }

    #[test]
    fn model_and_solution_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Arc::new(small_model());
        let pen = ControlPenalty::uniform(1, 0.5, 10.0).unwrap();
        let sol = solve_fvp(&model, &pen, &HjbConfig::new(0.01, 20).recording()).unwrap();

        let mpath = dir.path().join("model.bin");
        let digest = save_model(&mpath, &model, "cfg").unwrap();
        let ModelArchive {
            model: loaded,
            sha256: digest2,
            config_hash,
        } = load_model(&mpath).unwrap();
        assert_eq!(digest, digest2);
        assert_eq!(config_hash, "cfg");
        assert_eq!(loaded.a_hat(), model.a_hat());
        assert_eq!(loaded.b_hat(), model.b_hat());
        assert_eq!(loaded.q_coeff(), model.q_coeff());
        assert_eq!(loaded.points, model.points);
        assert_eq!(loaded.kernel, model.kernel);

        let spath = dir.path().join("solution.bin");
        save_solution(&spath, &sol, &pen, &digest, "cfg").unwrap();
        let arch = load_solution(&spath, Arc::new(loaded), &digest).unwrap();
        assert_eq!(arch.penalty, pen);
        assert_eq!(arch.config_hash, "cfg");
        let back = arch.solution;
        assert_eq!(back.v0(), sol.v0());
        assert_eq!(back.trajectory().unwrap().len(), 21);
        assert_eq!(back.evaluate(&[0.3]).unwrap(), sol.evaluate(&[0.3]).unwrap());
    }

    #[test]
    fn mismatched_or_corrupt_files_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let model = Arc::new(small_model());
        let pen = ControlPenalty::uniform(1, 0.5, 10.0).unwrap();
        let sol = solve_fvp(&model, &pen, &HjbConfig::new(0.01, 5)).unwrap();
        let spath = dir.path().join("s.bin");
        save_solution(&spath, &sol, &pen, "aaaa", "cfg").unwrap();
        let err = load_solution(&spath, model.clone(), "bbbb").unwrap_err();
        assert!(matches!(err, Error::Format { kind: "solution", .. }));

        let mpath = dir.path().join("m.bin");
        save_model(&mpath, &model, "cfg").unwrap();
        let mut bytes = std::fs::read(&mpath).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&mpath, &bytes).unwrap();
        assert!(matches!(load_model(&mpath), Err(Error::Format { .. })));
        std::fs::write(&mpath, b"not a model").unwrap();
        assert!(matches!(load_model(&mpath), Err(Error::Format { .. })));
        assert!(matches!(load_model(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
