//! Checkpoint containers for the base model and adapters: JSON documents
//! holding every tensor as plain f64 arrays (shortest-round-trip printing
//! makes the round trip bit-exact), a sha256 checksum over the name-sorted
//! tensor payload, and a config hash that binds adapter checkpoints to the
//! base architecture they were trained against.

use crate::error::{Error, Result};
use crate::model::{GatedLora, LoraLayer, LoraSite, Model, ModelConfig};
use crate::tensor::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorBlob {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TensorBlob {
    fn from_mat(m: &Mat) -> Self {
        TensorBlob { rows: m.rows, cols: m.cols, data: m.data.clone() }
    }

    fn to_mat(&self) -> Result<Mat> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::Corruption {
                field: "tensor".into(),
                detail: format!(
                    "{}x{} declared but {} values present",
                    self.rows,
                    self.cols,
                    self.data.len()
                ),
            });
        }
        Ok(Mat::new(self.rows, self.cols, self.data.clone()))
    }
}

/// Where a merged adapter came from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MergeProvenance {
    pub sources: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelContainer {
    format_version: u32,
    kind: String,
    config: ModelConfig,
    tensors: Vec<(String, TensorBlob)>,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct LoraContainer {
    format_version: u32,
    kind: String,
    rank: usize,
    scale: f64,
    base_config_hash: String,
    base_weights_checksum: String,
    provenance: Option<MergeProvenance>,
    tensors: Vec<(String, TensorBlob)>,
    checksum: String,
}

/// Adapter checkpoint metadata that travels alongside the weights.
#[derive(Debug, Clone)]
pub struct LoraMeta {
    pub base_config_hash: String,
    pub base_weights_checksum: String,
    pub provenance: Option<MergeProvenance>,
}

// ── hashing ─────────────────────────────────────────────────────────────────

fn tensor_checksum(tensors: &[(String, TensorBlob)]) -> String {
    let mut sorted: Vec<&(String, TensorBlob)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (name, blob) in sorted {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(blob.rows.to_le_bytes());
        h.update(blob.cols.to_le_bytes());
        for v in &blob.data {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Hash of the architecture config; adapter checkpoints only load onto a
/// base whose config hashes identically.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serialization is infallible");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    format!("{:x}", h.finalize())
}

/// Checksum of the base model's trained weights. Same-architecture bases
/// with different training hash differently, so adapters can't be scored
/// against a base they were never trained on.
pub fn weights_checksum(model: &Model) -> String {
    let tensors: Vec<(String, TensorBlob)> = model
        .named_params()
        .into_iter()
        .map(|(name, m)| (name, TensorBlob::from_mat(m)))
        .collect();
    tensor_checksum(&tensors)
}

// ── save / load ─────────────────────────────────────────────────────────────

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Corruption {
        field: "container".into(),
        detail: format!("{}: {e}", path.display()),
    })
}

fn check_header(version: u32, kind: &str, want_kind: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Corruption {
            field: "format_version".into(),
            detail: format!("found {version}, this build reads {FORMAT_VERSION}"),
        });
    }
    if kind != want_kind {
        return Err(Error::Corruption {
            field: "kind".into(),
            detail: format!("found {kind:?}, expected {want_kind:?}"),
        });
    }
    Ok(())
}

fn check_sum(tensors: &[(String, TensorBlob)], stored: &str) -> Result<()> {
    let actual = tensor_checksum(tensors);
    if actual != stored {
        return Err(Error::Corruption {
            field: "checksum".into(),
            detail: format!("stored {stored}, computed {actual}"),
        });
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let tensors: Vec<(String, TensorBlob)> = model
        .named_params()
        .into_iter()
        .map(|(name, m)| (name, TensorBlob::from_mat(m)))
        .collect();
    let container = ModelContainer {
        format_version: FORMAT_VERSION,
        kind: "model".into(),
        config: model.cfg.clone(),
        checksum: tensor_checksum(&tensors),
        tensors,
    };
    std::fs::write(path, serde_json::to_string(&container)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let c: ModelContainer = parse(path)?;
    check_header(c.format_version, &c.kind, "model")?;
    check_sum(&c.tensors, &c.checksum)?;
    c.config.validate()?;

    let mut model = Model::init(c.config.clone(), 0)?;
    let mut blobs: std::collections::BTreeMap<&str, &TensorBlob> =
        c.tensors.iter().map(|(n, b)| (n.as_str(), b)).collect();
    if blobs.len() != c.tensors.len() {
        return Err(Error::Corruption {
            field: "tensors".into(),
            detail: "duplicate tensor name".into(),
        });
    }
    let mut flat = Vec::with_capacity(model.num_params());
    for (name, mat) in model.named_params() {
        let blob = blobs.remove(name.as_str()).ok_or_else(|| Error::Corruption {
            field: name.clone(),
            detail: "tensor missing from checkpoint".into(),
        })?;
        if blob.rows != mat.rows || blob.cols != mat.cols {
            return Err(Error::Corruption {
                field: name.clone(),
                detail: format!(
                    "shape {}x{} in checkpoint, model expects {}x{}",
                    blob.rows, blob.cols, mat.rows, mat.cols
                ),
            });
        }
        flat.extend_from_slice(&blob.to_mat()?.data);
    }
    if let Some((name, _)) = blobs.into_iter().next() {
        return Err(Error::Corruption {
            field: name.to_string(),
            detail: "unexpected extra tensor in checkpoint".into(),
        });
    }
    model.apply_flat(&flat);
    Ok(model)
}

pub fn save_lora(
    path: &Path,
    lora: &GatedLora,
    base: &Model,
    provenance: Option<MergeProvenance>,
) -> Result<()> {
    let mut tensors = Vec::new();
    for (name, site) in lora.named_sites() {
        tensors.push((format!("{name}.down"), TensorBlob::from_mat(&site.down)));
        tensors.push((format!("{name}.up"), TensorBlob::from_mat(&site.up)));
    }
    let container = LoraContainer {
        format_version: FORMAT_VERSION,
        kind: "lora".into(),
        rank: lora.rank,
        scale: lora.scale,
        base_config_hash: config_hash(&base.cfg),
        base_weights_checksum: weights_checksum(base),
        provenance,
        checksum: tensor_checksum(&tensors),
        tensors,
    };
    std::fs::write(path, serde_json::to_string(&container)?)?;
    Ok(())
}

pub fn load_lora(path: &Path) -> Result<(GatedLora, LoraMeta)> {
    let c: LoraContainer = parse(path)?;
    check_header(c.format_version, &c.kind, "lora")?;
    check_sum(&c.tensors, &c.checksum)?;
    if !c.scale.is_finite() {
        return Err(Error::Corruption {
            field: "scale".into(),
            detail: format!("{}", c.scale),
        });
    }

    let blobs: std::collections::BTreeMap<&str, &TensorBlob> =
        c.tensors.iter().map(|(n, b)| (n.as_str(), b)).collect();
    if blobs.len() != c.tensors.len() {
        return Err(Error::Corruption {
            field: "tensors".into(),
            detail: "duplicate tensor name".into(),
        });
    }
    let n_layers = c.tensors.len() / 6;
    if n_layers == 0 || c.tensors.len() != n_layers * 6 {
        return Err(Error::Corruption {
            field: "tensors".into(),
            detail: format!("{} tensors cannot form whole layers of 6", c.tensors.len()),
        });
    }
    let mut layers = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let site = |name: &str| -> Result<LoraSite> {
            let get = |suffix: &str| -> Result<Mat> {
                let key = format!("layers.{li}.{name}.{suffix}");
                blobs
                    .get(key.as_str())
                    .ok_or_else(|| Error::Corruption {
                        field: key.clone(),
                        detail: "tensor missing from checkpoint".into(),
                    })?
                    .to_mat()
            };
            let down = get("down")?;
            let up = get("up")?;
            if down.cols != c.rank || up.rows != c.rank {
                return Err(Error::Corruption {
                    field: format!("layers.{li}.{name}"),
                    detail: format!(
                        "factor ranks {} / {} disagree with declared rank {}",
                        down.cols, up.rows, c.rank
                    ),
                });
            }
            Ok(LoraSite { down, up })
        };
        layers.push(LoraLayer { q: site("q")?, k: site("k")?, v: site("v")? });
    }
    Ok((
        GatedLora { rank: c.rank, scale: c.scale, layers },
        LoraMeta {
            base_config_hash: c.base_config_hash,
            base_weights_checksum: c.base_weights_checksum,
            provenance: c.provenance,
        },
    ))
}

/// Refuses an adapter whose base does not match `model`: first by
/// architecture hash, then by trained-weights checksum, so a same-shaped
/// but differently trained base cannot be scored silently.
pub fn check_compat(meta: &LoraMeta, model: &Model) -> Result<()> {
    let want = config_hash(&model.cfg);
    if meta.base_config_hash != want {
        return Err(Error::config(format!(
            "adapter was trained against base architecture {} but this base hashes to {}",
            &meta.base_config_hash[..12.min(meta.base_config_hash.len())],
            &want[..12]
        )));
    }
    let want = weights_checksum(model);
    if meta.base_weights_checksum != want {
        return Err(Error::config(format!(
            "adapter was trained against base weights {} but this base's weights hash to {}",
            &meta.base_weights_checksum[..12.min(meta.base_weights_checksum.len())],
            &want[..12]
        )));
    }
    Ok(())
}
