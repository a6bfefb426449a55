//! Checkpoint persistence.
//!
//! A checkpoint is a pair of files sharing one stem:
//!
//! * `<stem>.manifest` — text: a format tag, the fully resolved run
//!   configuration as `key = value` lines, and one line per tensor giving
//!   its name, shape, and element offset into the binary blob.
//! * `<stem>.bin` — every parameter's elements as little-endian f64,
//!   concatenated in manifest order.
//!
//! The manifest carries the configuration, so loading needs no separate
//! config file.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Array, ParamSet};

const FORMAT_TAG: &str = "convemo checkpoint v1";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("manifest"), stem.with_extension("bin"))
}

/// Write `model` under `<stem>.manifest` + `<stem>.bin`.
pub fn save(stem: &Path, model: &Model) -> Result<()> {
    let (manifest_path, bin_path) = paths(stem);
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }

    let mut manifest = String::new();
    manifest.push_str(FORMAT_TAG);
    manifest.push('\n');
    manifest.push_str("[config]\n");
    for (k, v) in model.config().to_kv() {
        manifest.push_str(&format!("{k} = {v}\n"));
    }
    manifest.push_str("[tensors]\n");

    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize; // in f64 elements
    for (name, array) in model.params.iter() {
        let dims: Vec<String> = array.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} {} {offset}\n", dims.join("x")));
        for v in array.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += array.data().len();
    }

    std::fs::File::create(&manifest_path)?.write_all(manifest.as_bytes())?;
    std::fs::File::create(&bin_path)?.write_all(&blob)?;
    Ok(())
}

/// Load a model from `<stem>.manifest` + `<stem>.bin`, validating every
/// tensor name and shape against a fresh build of the stored configuration.
pub fn load(stem: &Path) -> Result<Model> {
    let (manifest_path, bin_path) = paths(stem);
    let manifest = std::fs::read_to_string(&manifest_path)?;
    let bytes = std::fs::read(&bin_path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "{} has {} bytes, not a whole number of f64 values",
            bin_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let mut lines = manifest.lines();
    match lines.next() {
        Some(tag) if tag.trim() == FORMAT_TAG => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "unrecognized checkpoint format tag {:?} in {}",
                other.unwrap_or(""),
                manifest_path.display()
            )))
        }
    }

    #[derive(PartialEq)]
    enum Section {
        Preamble,
        Config,
        Tensors,
    }
    let mut section = Section::Preamble;
    let mut config_kv = String::new();
    let mut params = ParamSet::new();
    for (line_no, raw) in lines.enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[config]" => {
                section = Section::Config;
                continue;
            }
            "[tensors]" => {
                section = Section::Tensors;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Preamble => {
                return Err(Error::Checkpoint(format!(
                    "unexpected content before [config] at manifest line {}",
                    line_no + 2
                )))
            }
            Section::Config => {
                config_kv.push_str(line);
                config_kv.push('\n');
            }
            Section::Tensors => {
                let mut parts = line.split_whitespace();
                let (name, dims, offset) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                    (Some(n), Some(d), Some(o), None) => (n, d, o),
                    _ => {
                        return Err(Error::Checkpoint(format!(
                            "malformed tensor line at manifest line {}: {line:?}",
                            line_no + 2
                        )))
                    }
                };
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| {
                        d.parse::<usize>().map_err(|_| {
                            Error::Checkpoint(format!("bad dimension {d:?} for tensor {name}"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let offset: usize = offset.parse().map_err(|_| {
                    Error::Checkpoint(format!("bad offset {offset:?} for tensor {name}"))
                })?;
                let numel: usize = shape.iter().product();
                let end = offset.checked_add(numel).ok_or_else(|| {
                    Error::Checkpoint(format!("tensor {name} extent overflows"))
                })?;
                if end > values.len() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} spans elements {offset}..{end} but the blob holds {}",
                        values.len()
                    )));
                }
                params.insert(name, Array::new(shape, values[offset..end].to_vec())?)?;
            }
        }
    }

    let mut config = RunConfig::default();
    config.apply_kv_text(&config_kv)?;
    config.validate()?;
    Model::from_parts(config, params)
}

// ===== Tests =====
