//! On-disk formats shared repo-wide.
//!
//! Tensor files ("MILB"): 4 magic bytes, u32 LE rows, u32 LE cols, then
//! rows·cols f32 LE values. Weights are down-cast to f32 on disk and up-cast
//! on load. Checkpoints are a directory with a `manifest.json` plus one MILB
//! file per tensor, listed in parameter order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mil::{MILArch, MILParams, MIL_PARAM_NAMES};
use crate::tensor::{Matrix, Shape};
use crate::transfer::{GatedPoolParams, MHFAParams, PTSConfig, SHAParams};

pub const MILB_MAGIC: [u8; 4] = *b"MILB";
pub const MILB_HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes, not a MILB tensor file")]
    BadMagic { path: String },
    #[error("{path}: file holds {got} bytes, a {rows}x{cols} tensor needs {expected}")]
    BadLength { path: String, rows: usize, cols: usize, expected: usize, got: usize },
    #[error("{path}: invalid tensor dims {rows}x{cols}")]
    BadDims { path: String, rows: usize, cols: usize },
    #[error("{path}: non-finite value at element {index}")]
    NonFinite { path: String, index: usize },
    #[error("{path}: invalid manifest: {reason}")]
    BadManifest { path: String, reason: String },
    #[error("tensor `{name}` has shape {got}, expected {expected}")]
    TensorShape { name: String, expected: Shape, got: Shape },
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io { path: path.display().to_string(), source }
}

/// Write one matrix as a MILB tensor file (values down-cast to f32).
pub fn write_milb(path: &Path, m: &Matrix) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(MILB_HEADER_LEN + 4 * m.data().len());
    buf.extend_from_slice(&MILB_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Read a MILB tensor file, validating magic, dims and exact length.
pub fn read_milb(path: &Path) -> Result<Matrix, IoError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < MILB_HEADER_LEN || bytes[..4] != MILB_MAGIC {
        return Err(IoError::BadMagic { path: display });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(IoError::BadDims { path: display, rows, cols });
    }
    let expected = MILB_HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(IoError::BadLength { path: display, rows, cols, expected, got: bytes.len() });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in bytes[MILB_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(IoError::NonFinite { path: display, index: i });
        }
        data.push(v);
    }
    Ok(Matrix::from_vec(rows, cols, data).expect("length checked"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| IoError::BadManifest { path: path.display().to_string(), reason: e.to_string() })?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| IoError::BadManifest { path: path.display().to_string(), reason: e.to_string() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MILManifest {
    pub arch: MILArch,
    pub seed: u64,
    pub tensors: Vec<String>,
}

/// Checkpoint directory: `manifest.json` plus one MILB file per tensor in
/// [`MIL_PARAM_NAMES`] order.
pub fn save_mil_checkpoint(dir: &Path, arch: &MILArch, seed: u64, params: &MILParams) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tensors = Vec::new();
    for (name, m) in params.param_list() {
        let file = format!("{name}.milb");
        write_milb(&dir.join(&file), m)?;
        tensors.push(file);
    }
    let manifest = MILManifest { arch: arch.clone(), seed, tensors };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_mil_checkpoint(dir: &Path) -> Result<(MILArch, u64, MILParams), IoError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: MILManifest = read_json(&manifest_path)?;
    if manifest.tensors.len() != MIL_PARAM_NAMES.len() {
        return Err(IoError::BadManifest {
            path: manifest_path.display().to_string(),
            reason: format!("expected {} tensors, found {}", MIL_PARAM_NAMES.len(), manifest.tensors.len()),
        });
    }
    let mut loaded = Vec::with_capacity(MIL_PARAM_NAMES.len());
    for file in &manifest.tensors {
        loaded.push(read_milb(&dir.join(file))?);
    }
    let arch = manifest.arch;
    let params = MILParams {
        w_embed: loaded[0].clone(),
        b_embed: loaded[1].clone(),
        attn_v: loaded[2].clone(),
        attn_u: loaded[3].clone(),
        attn_w: loaded[4].clone(),
        w_cls: loaded[5].clone(),
        b_cls: loaded[6].clone(),
    };
    if !params.shapes_match_arch(&arch) {
        for ((name, m), expected) in params.param_list().iter().zip(expected_mil_shapes(&arch)) {
            if m.shape() != expected {
                return Err(IoError::TensorShape {
                    name: (*name).to_string(),
                    expected,
                    got: m.shape(),
                });
            }
        }
    }
    Ok((arch, manifest.seed, params))
}

fn expected_mil_shapes(arch: &MILArch) -> [Shape; 7] {
    [
        Shape(arch.d_in, arch.d_embed),
        Shape(1, arch.d_embed),
        Shape(arch.d_embed, arch.d_attn),
        Shape(arch.d_embed, arch.d_attn),
        Shape(arch.d_attn, 1),
        Shape(arch.d_embed, arch.n_classes),
        Shape(1, arch.n_classes),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MHFAManifest {
    pub m: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub d_k: usize,
    pub d_prime: usize,
    pub temperature: f64,
    pub power: f64,
    pub tensors: Vec<String>,
}

pub fn save_mhfa_checkpoint(dir: &Path, params: &MHFAParams) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tensors = Vec::new();
    for (name, m) in params.param_list() {
        let file = format!("{name}.milb");
        write_milb(&dir.join(&file), m)?;
        tensors.push(file);
    }
    let manifest = MHFAManifest {
        m: params.n_heads(),
        d_t: params.d_t(),
        d_s: params.d_s(),
        d_k: params.d_k(),
        d_prime: params.pool_hidden(),
        temperature: params.pts.temperature,
        power: params.pts.power,
        tensors,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_mhfa_checkpoint(dir: &Path) -> Result<MHFAParams, IoError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: MHFAManifest = read_json(&manifest_path)?;
    let expected_count = manifest.m * 3 + 3;
    if manifest.m == 0 || manifest.tensors.len() != expected_count {
        return Err(IoError::BadManifest {
            path: manifest_path.display().to_string(),
            reason: format!("expected {expected_count} tensors for m={}, found {}", manifest.m, manifest.tensors.len()),
        });
    }
    let mut heads = Vec::with_capacity(manifest.m);
    for i in 0..manifest.m {
        let w_q = read_milb(&dir.join(&manifest.tensors[i * 3]))?;
        let w_k = read_milb(&dir.join(&manifest.tensors[i * 3 + 1]))?;
        let w_v = read_milb(&dir.join(&manifest.tensors[i * 3 + 2]))?;
        check_shape(&format!("head{i}.W_Q"), &w_q, Shape(manifest.d_t, manifest.d_k))?;
        check_shape(&format!("head{i}.W_K"), &w_k, Shape(manifest.d_t, manifest.d_k))?;
        check_shape(&format!("head{i}.W_V"), &w_v, Shape(manifest.d_t, manifest.d_s))?;
        heads.push(SHAParams { w_q, w_k, w_v });
    }
    let base = manifest.m * 3;
    let w_v_gate = read_milb(&dir.join(&manifest.tensors[base]))?;
    let w_u_gate = read_milb(&dir.join(&manifest.tensors[base + 1]))?;
    let w_gate = read_milb(&dir.join(&manifest.tensors[base + 2]))?;
    check_shape("pool.W_V_gate", &w_v_gate, Shape(manifest.d_s, manifest.d_prime))?;
    check_shape("pool.W_U_gate", &w_u_gate, Shape(manifest.d_s, manifest.d_prime))?;
    check_shape("pool.w_gate", &w_gate, Shape(manifest.d_prime, 1))?;
    Ok(MHFAParams {
        heads,
        pool: GatedPoolParams { w_v_gate, w_u_gate, w_gate },
        pts: PTSConfig { temperature: manifest.temperature, power: manifest.power },
    })
}

fn check_shape(name: &str, m: &Matrix, expected: Shape) -> Result<(), IoError> {
    if m.shape() != expected {
        return Err(IoError::TensorShape { name: name.to_string(), expected, got: m.shape() });
    }
    Ok(())
}
