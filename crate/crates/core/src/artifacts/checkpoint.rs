//! Checkpoint directory: `manifest.txt` (text) + `weights.bin` (little-endian
//! f32 values, concatenated in manifest order).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{hex, ParamStore, Tensor};
use crate::classifier::{McArch, MortalityClassifier};
use crate::error::{Error, Result};
use crate::model::{DualSight, DualSightConfig, ModelKind};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "weights.bin";

const KIND_DM: &str = "dm";
const KIND_MC: &str = "mc";

fn err(field: &str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn blob_of(params: &ParamStore<f32>) -> Vec<u8> {
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    for (_, t) in params.iter() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    blob
}

fn write(dir: &Path, header: &[(&str, String)], params: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let blob = blob_of(params);
    let mut m = String::new();
    let _ = writeln!(m, "version {FORMAT_VERSION}");
    for (k, v) in header {
        let _ = writeln!(m, "{k} {v}");
    }
    let mut offset = 0;
    for (name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(m, "param {name} {} {offset} {}", shape.join("x"), t.len());
        offset += t.len();
    }
    let _ = writeln!(m, "hash {}", hex(&Sha256::digest(&blob)));
    fs::write(dir.join(BLOB), &blob)?;
    fs::write(dir.join(MANIFEST), m)?;
    Ok(())
}

struct Parsed {
    fields: Vec<(String, String)>,
    params: ParamStore<f32>,
}

impl Parsed {
    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| err(key, "missing from manifest"))
    }
}

fn read(dir: &Path, expected_kind: &str) -> Result<Parsed> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut fields = Vec::new();
    let mut table = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key == "param" {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, shape, offset, len] = parts[..] else {
                return Err(err("param", format!("malformed entry `{rest}`")));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|s| s.parse().map_err(|_| err(&format!("param {name}"), "bad shape")))
                .collect::<Result<_>>()?;
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(&format!("param {name}"), "bad offset"));
            table.push((name.to_string(), shape, num(offset)?, num(len)?));
        } else {
            fields.push((key.to_string(), rest.to_string()));
        }
    }
    let parsed = Parsed {
        fields,
        params: ParamStore::new(),
    };
    let version = parsed.get("version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(err("version", format!("found {version}, expected {FORMAT_VERSION}")));
    }
    let kind = parsed.get("kind")?;
    if kind != expected_kind {
        return Err(err("kind", format!("checkpoint holds `{kind}`, expected `{expected_kind}`")));
    }
    let hash = parsed.get("hash")?;
    if hash != hex(&Sha256::digest(&blob)) {
        return Err(err("hash", "weights blob does not match the manifest hash"));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for (name, shape, offset, len) in table {
        let field = format!("param {name}");
        if shape.iter().product::<usize>() != len || offset != expected_offset || offset + len > values.len() {
            return Err(err(&field, "shape/offset table is inconsistent with the blob"));
        }
        params.push(name, Tensor::new(shape, values[offset..offset + len].to_vec()).map_err(|e| err(&field, e.to_string()))?);
        expected_offset += len;
    }
    if expected_offset != values.len() || blob.len() % 4 != 0 {
        return Err(err("param", "blob holds values not listed in the manifest"));
    }
    Ok(Parsed { params, ..parsed })
}

pub fn save_model(model: &DualSight, dir: impl AsRef<Path>) -> Result<()> {
    write(
        dir.as_ref(),
        &[
            ("kind", KIND_DM.to_string()),
            ("model", model.kind().as_str().to_string()),
            ("state_head_trained", model.state_head_trained().to_string()),
            ("config", serde_json::to_string(model.config())?),
        ],
        model.params(),
    )
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<DualSight> {
    let p = read(dir.as_ref(), KIND_DM)?;
    let kind: ModelKind = p.get("model")?.parse().map_err(|e: Error| err("model", e.to_string()))?;
    let config: DualSightConfig = serde_json::from_str(p.get("config")?).map_err(|e| err("config", e.to_string()))?;
    let trained = match p.get("state_head_trained")? {
        "true" => true,
        "false" => false,
        other => return Err(err("state_head_trained", format!("`{other}` is not a boolean"))),
    };
    DualSight::from_params(config, kind, p.params, trained).map_err(|e| err("param", e.to_string()))
}

pub fn save_classifier(mc: &MortalityClassifier, dir: impl AsRef<Path>) -> Result<()> {
    write(
        dir.as_ref(),
        &[("kind", KIND_MC.to_string()), ("config", serde_json::to_string(mc.arch())?)],
        mc.params(),
    )
}

/// Loads an unfrozen classifier; call `freeze` before using it as feedback.
pub fn load_classifier(dir: impl AsRef<Path>) -> Result<MortalityClassifier> {
    let p = read(dir.as_ref(), KIND_MC)?;
    let arch: McArch = serde_json::from_str(p.get("config")?).map_err(|e| err("config", e.to_string()))?;
    MortalityClassifier::from_params(arch, p.params).map_err(|e| err("param", e.to_string()))
}
