//! Checkpoint bundles: one parameter blob per network, the shared block
//! stored once, optional optimizer state and a JSON manifest.
//!
//! Blob format (little endian): magic `LCPB`, entry count `u32`, then per
//! entry a `u32` name length, the UTF-8 name, a `u32` rank, `u64` dims and
//! the `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{IdentityModel, ModelConfig, NetworkSet, PairEnsemble, TranslationModel};
use crate::params::ParamGroup;
use crate::tensor::Tensor;
use crate::trainer::{Regime, TrainConfig, Trainer, TransplantPolicy};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LCPB";

pub fn encode_blob<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad blob magic".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 entry name".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in blob".into()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated blob".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a model config's canonical JSON.
pub fn config_hash(cfg: &ModelConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub file: String,
    pub group: ParamGroup,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransplantRecord {
    /// Content hashes of the two source checkpoints.
    pub sources: [String; 2],
    pub policy: TransplantPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub config_hash: String,
    pub domain_names: Vec<String>,
    pub regime: Regime,
    pub step: usize,
    pub train: Option<TrainConfig>,
    pub blobs: Vec<BlobRecord>,
    pub optimizer_blobs: Option<[BlobRecord; 2]>,
    pub shared_digest: String,
    pub transplant: Option<TransplantRecord>,
    /// Hash over the config hash and every blob hash.
    pub content_hash: String,
}

type OptimizerState = (Vec<(String, Tensor)>, Vec<(String, Tensor)>);

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: NetworkSet,
    pub manifest: CheckpointManifest,
    /// Discriminator and generator optimizer state.
    pub optimizer: Option<OptimizerState>,
}

struct Encoded {
    files: Vec<(String, Vec<u8>)>,
    blobs: Vec<BlobRecord>,
    optimizer_blobs: Option<[BlobRecord; 2]>,
}

fn encode_net(net: &NetworkSet, optimizer: Option<&OptimizerState>) -> Encoded {
    let store = net.params();
    let mut files = Vec::new();
    let mut blobs = Vec::new();
    for group in store.groups() {
        let ids = store.ids_where(|g| g == group);
        let bytes = encode_blob(
            ids.iter()
                .map(|&id| (store.entry(id).name.as_str(), store.get(id))),
        );
        let file = format!("{}.bin", group.blob_name());
        blobs.push(BlobRecord {
            file: file.clone(),
            group,
            sha256: sha256_hex(&bytes),
        });
        files.push((file, bytes));
    }
    let optimizer_blobs = optimizer.map(|(d, g)| {
        let rec =
            |file: &str, entries: &Vec<(String, Tensor)>, files: &mut Vec<(String, Vec<u8>)>| {
                let bytes = encode_blob(entries.iter().map(|(n, t)| (n.as_str(), t)));
                let r = BlobRecord {
                    file: file.to_string(),
                    group: ParamGroup::Shared,
                    sha256: sha256_hex(&bytes),
                };
                files.push((file.to_string(), bytes));
                r
            };
        [
            rec("optimizer_d.bin", d, &mut files),
            rec("optimizer_g.bin", g, &mut files),
        ]
    });
    Encoded {
        files,
        blobs,
        optimizer_blobs,
    }
}

fn content_hash(config_hash: &str, blobs: &[BlobRecord]) -> String {
    let mut h = Sha256::new();
    h.update(config_hash.as_bytes());
    for b in blobs {
        h.update(b.file.as_bytes());
        h.update(b.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    /// Wraps a bare network set (no optimizer state).
    pub fn from_net(
        net: NetworkSet,
        domain_names: Vec<String>,
        regime: Regime,
        step: usize,
    ) -> Self {
        Self::build(net, domain_names, regime, step, None, None, None)
    }

    pub fn from_trainer(
        trainer: &Trainer,
        domain_names: Vec<String>,
        regime: Regime,
        transplant: Option<TransplantRecord>,
    ) -> Self {
        let (d, g) = trainer.optimizers();
        let store = trainer.net.params();
        let state = (d.state_entries(store), g.state_entries(store));
        Self::build(
            trainer.net.clone(),
            domain_names,
            regime,
            trainer.step(),
            Some(trainer.cfg.clone()),
            Some(state),
            transplant,
        )
    }

    fn build(
        net: NetworkSet,
        domain_names: Vec<String>,
        regime: Regime,
        step: usize,
        train: Option<TrainConfig>,
        optimizer: Option<OptimizerState>,
        transplant: Option<TransplantRecord>,
    ) -> Self {
        let enc = encode_net(&net, optimizer.as_ref());
        let config_hash = config_hash(net.config());
        let manifest = CheckpointManifest {
            schema_version: SCHEMA_VERSION,
            model: net.config().clone(),
            content_hash: content_hash(&config_hash, &enc.blobs),
            config_hash,
            domain_names,
            regime,
            step,
            train,
            blobs: enc.blobs,
            optimizer_blobs: enc.optimizer_blobs,
            shared_digest: net.shared_block_digest(),
            transplant,
        };
        Self {
            net,
            manifest,
            optimizer,
        }
    }

    /// Writes the bundle into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let enc = encode_net(&self.net, self.optimizer.as_ref());
        for (file, bytes) in &enc.files {
            let tmp = dir.join(format!("{file}.tmp"));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, dir.join(file))?;
        }
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::rename(&tmp, dir.join("manifest.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| {
            Error::Checkpoint(format!("{}: {e}", dir.join("manifest.json").display()))
        })?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        if config_hash(&manifest.model) != manifest.config_hash {
            return Err(Error::Checkpoint(
                "model config does not match its recorded hash".into(),
            ));
        }
        if manifest.domain_names.len() != manifest.model.num_domains {
            return Err(Error::Checkpoint(format!(
                "{} domain names for {} domains",
                manifest.domain_names.len(),
                manifest.model.num_domains
            )));
        }
        let read = |rec: &BlobRecord| -> Result<Vec<(String, Tensor)>> {
            let bytes = fs::read(dir.join(&rec.file))
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", rec.file)))?;
            if sha256_hex(&bytes) != rec.sha256 {
                return Err(Error::Checkpoint(format!(
                    "{} does not match its recorded hash",
                    rec.file
                )));
            }
            decode_blob(&bytes)
        };

        let mut net = NetworkSet::new(manifest.model.clone(), 0)?;
        let mut seen = 0;
        for rec in &manifest.blobs {
            for (name, value) in read(rec)? {
                let id = net.find_param(rec.group, &name).ok_or_else(|| {
                    Error::Checkpoint(format!("unexpected parameter {}/{name}", rec.file))
                })?;
                let slot = net.params_mut().get_mut(id);
                if slot.shape() != value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{}/{name}: shape {:?} but the model config implies {:?}",
                        rec.file,
                        value.shape(),
                        slot.shape()
                    )));
                }
                *slot = value;
                seen += 1;
            }
        }
        if seen != net.params().len() {
            return Err(Error::Checkpoint(format!(
                "{seen} parameters stored, model config implies {}",
                net.params().len()
            )));
        }
        if net.shared_block_digest() != manifest.shared_digest {
            return Err(Error::Checkpoint("shared block digest mismatch".into()));
        }
        let optimizer = match &manifest.optimizer_blobs {
            Some([d, g]) => Some((read(d)?, read(g)?)),
            None => None,
        };
        Ok(Self {
            net,
            manifest,
            optimizer,
        })
    }

    /// Loads and insists on a specific model config.
    pub fn load_expecting(dir: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(dir)?;
        if &ck.manifest.model != expected {
            let a = serde_json::to_value(&ck.manifest.model)?;
            let b = serde_json::to_value(expected)?;
            let fields: Vec<String> = match (a, b) {
                (serde_json::Value::Object(a), serde_json::Value::Object(b)) => a
                    .iter()
                    .filter(|(k, v)| b.get(*k) != Some(v))
                    .map(|(k, _)| k.clone())
                    .collect(),
                _ => vec![],
            };
            return Err(Error::Checkpoint(format!(
                "checkpoint model config differs in: {}",
                fields.join(", ")
            )));
        }
        Ok(ck)
    }

    /// Blob bytes keyed by file name, for byte-level comparisons.
    pub fn blob_bytes(&self) -> BTreeMap<String, Vec<u8>> {
        encode_net(&self.net, self.optimizer.as_ref())
            .files
            .into_iter()
            .collect()
    }
}

/// Manifest of a debug checkpoint whose networks are identity maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityManifest {
    pub architecture: String,
    pub domain_names: Vec<String>,
    pub image_shape: [usize; 3],
}

pub fn save_identity_checkpoint(
    dir: &Path,
    domain_names: Vec<String>,
    image_shape: [usize; 3],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = IdentityManifest {
        architecture: "identity".into(),
        domain_names,
        image_shape,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

/// A translation model assembled from checkpoint directories.
pub struct LoadedModel {
    pub model: Box<dyn TranslationModel>,
    pub domain_names: Vec<String>,
    /// Content hashes of the loaded checkpoints (empty for identity).
    pub sources: Vec<String>,
}

/// One directory loads a joint model (or an identity debug checkpoint);
/// several 2-domain directories form a pair ensemble in the given order.
pub fn load_translation_model(dirs: &[&Path]) -> Result<LoadedModel> {
    match dirs {
        [] => Err(Error::Checkpoint("no checkpoint given".into())),
        [one] => {
            let text = fs::read_to_string(one.join("manifest.json")).map_err(|e| {
                Error::Checkpoint(format!("{}: {e}", one.join("manifest.json").display()))
            })?;
            if let Ok(m) = serde_json::from_str::<IdentityManifest>(&text) {
                if m.architecture == "identity" {
                    return Ok(LoadedModel {
                        model: Box::new(IdentityModel::new(m.domain_names.len(), m.image_shape, 1)),
                        domain_names: m.domain_names,
                        sources: vec![],
                    });
                }
            }
            let ck = Checkpoint::load(one)?;
            Ok(LoadedModel {
                domain_names: ck.manifest.domain_names.clone(),
                sources: vec![ck.manifest.content_hash.clone()],
                model: Box::new(ck.net),
            })
        }
        many => {
            let mut nets = Vec::new();
            let mut names = Vec::new();
            let mut sources = Vec::new();
            for dir in many {
                let ck = Checkpoint::load(dir)?;
                if ck.manifest.model.num_domains != 2 {
                    return Err(Error::Checkpoint(format!(
                        "{}: only 2-domain checkpoints can be combined",
                        dir.display()
                    )));
                }
                names.extend(ck.manifest.domain_names.iter().cloned());
                sources.push(ck.manifest.content_hash.clone());
                nets.push(ck.net);
            }
            Ok(LoadedModel {
                model: Box::new(PairEnsemble::new(nets)?),
                domain_names: names,
                sources,
            })
        }
    }
}
