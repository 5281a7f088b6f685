//! The `NOTC` checkpoint container for donor organs and whole models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NOTC"  u32 format_version  u64 meta_len  meta (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u16 name_len, name, u8 dtype (0 = f32), u8 ndim, u64 dims[ndim],
//!             u64 offset, u64 byte_len, [u8; 32] sha256(payload bytes)
//! payload: f32 LE, row-major, offsets relative to the payload start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use transplant_core::model::{LayerNorm, Linear};
use transplant_core::surgery::{compatibility_report, DonorOrgan};
use transplant_core::{
    Adapters, Bridge, BridgeSlot, Embedding, Head, LowRank, ModelConfig, ParamSet, Rescale, Tensor, TrainConfig,
    TransformerLayer, TransformerModel, ACTIVATION_KIND, LAYERNORM_KIND,
};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"NOTC";
pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[FORMAT_VERSION];
const DTYPE_F32: u8 = 0;

/// Architecture fields a donor must share with its recipient, plus a
/// SHA-256 digest over their canonical encoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatibilitySignature {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub layernorm_kind: String,
    pub activation_kind: String,
    pub digest: String,
}

impl CompatibilitySignature {
    pub fn new(hidden_dim: usize, num_heads: usize, layernorm_kind: &str, activation_kind: &str) -> Self {
        let digest = Self::compute(hidden_dim, num_heads, layernorm_kind, activation_kind);
        Self {
            hidden_dim,
            num_heads,
            layernorm_kind: layernorm_kind.to_owned(),
            activation_kind: activation_kind.to_owned(),
            digest,
        }
    }

    pub fn of(config: &ModelConfig) -> Self {
        Self::new(config.hidden_dim, config.num_heads, LAYERNORM_KIND, ACTIVATION_KIND)
    }

    fn compute(hidden_dim: usize, num_heads: usize, ln: &str, act: &str) -> String {
        let canonical = format!("hidden_dim={hidden_dim}\nnum_heads={num_heads}\nlayernorm_kind={ln}\nactivation_kind={act}\n");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The stored digest matches the fields.
    pub fn is_consistent(&self) -> bool {
        self.digest == Self::compute(self.hidden_dim, self.num_heads, &self.layernorm_kind, &self.activation_kind)
    }
}

/// Every field on which `meta` and `recipient` disagree; empty when
/// compatible.
pub fn validate_compatibility(meta: &CompatibilitySignature, recipient: &TransformerModel) -> Vec<String> {
    compatibility_report(
        meta.hidden_dim,
        meta.num_heads,
        &meta.layernorm_kind,
        &meta.activation_kind,
        recipient,
    )
}

/// How a donor was trained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub dataset: String,
    pub train_config: Option<TrainConfig>,
    pub final_loss: Option<f64>,
    pub final_ppl: Option<f64>,
}

/// Metadata document of a donor checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DonorMeta {
    pub kind: String,
    pub source_model: String,
    pub source_config: ModelConfig,
    pub extraction_start: usize,
    pub extraction_indices: Vec<usize>,
    pub hidden_dim: usize,
    pub num_params: usize,
    pub training: TrainingMeta,
    pub signature: CompatibilitySignature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdapterMeta {
    layer: usize,
    lora_q_scale: Option<f32>,
    lora_v_scale: Option<f32>,
}

/// Metadata document of a whole-model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub config: ModelConfig,
    pub description: String,
    bridges: Vec<(usize, usize)>,
    adapters: Vec<AdapterMeta>,
}

/// Decoded container: metadata JSON plus named tensors in file order.
struct Container {
    meta: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

fn encode(meta: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let meta_bytes = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&bytes));
        payload.extend_from_slice(&bytes);
    }
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }
}

fn decode(buf: &[u8]) -> Result<Container> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("missing NOTC magic".into()));
    }
    let version = r.u32()?;
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(Error::Format(format!(
            "format_version {version} is not supported (supported: {SUPPORTED_VERSIONS:?})"
        )));
    }
    let meta_len = r.len()?;
    let meta: serde_json::Value =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut index = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor {name}: unknown dtype tag {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let offset = r.len()?;
        let byte_len = r.len()?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        index.push((name, shape, offset, byte_len, digest));
    }
    let payload = &buf[r.pos..];
    let mut tensors = Vec::with_capacity(index.len());
    for (name, shape, offset, byte_len, digest) in index {
        let n: usize = shape.iter().product();
        if byte_len != n * 4 {
            return Err(Error::Format(format!("tensor {name}: {byte_len} bytes for shape {shape:?}")));
        }
        let bytes = offset
            .checked_add(byte_len)
            .and_then(|end| payload.get(offset..end))
            .ok_or_else(|| Error::Format(format!("tensor {name}: payload out of bounds")))?;
        if Sha256::digest(bytes).as_slice() != digest {
            return Err(Error::Integrity(format!("tensor {name}: checksum mismatch")));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::from_vec(&shape, data).unwrap()));
    }
    Ok(Container { meta, tensors })
}

fn read(path: &Path) -> Result<Container> {
    let buf = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode(&buf)
}

/// Named tensors consumed by prefix while rebuilding a model.
struct Named(BTreeMap<String, Tensor>);

impl Named {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    fn norm(&mut self, p: &str) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.take(&format!("{p}.gamma"))?,
            beta: self.take(&format!("{p}.beta"))?,
        })
    }

    fn linear(&mut self, p: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.take(&format!("{p}.weight"))?,
            bias: self.take(&format!("{p}.bias"))?,
        })
    }

    fn layer(&mut self, p: &str) -> Result<TransformerLayer> {
        Ok(TransformerLayer {
            ln1: self.norm(&format!("{p}.ln1"))?,
            wq: self.linear(&format!("{p}.attn.wq"))?,
            wk: self.linear(&format!("{p}.attn.wk"))?,
            wv: self.linear(&format!("{p}.attn.wv"))?,
            wo: self.linear(&format!("{p}.attn.wo"))?,
            ln2: self.norm(&format!("{p}.ln2"))?,
            ffn_in: self.linear(&format!("{p}.ffn.in"))?,
            ffn_out: self.linear(&format!("{p}.ffn.out"))?,
        })
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(extra) => Err(Error::Format(format!("unexpected tensor {extra}"))),
            None => Ok(()),
        }
    }
}

fn prefixed<'a>(prefix: &str, set: &'a dyn ParamSet) -> Vec<(String, &'a Tensor)> {
    set.tensors().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

fn meta_from<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Format(format!("metadata: {e}")))
}

/// Bytes of a donor checkpoint for `organ`.
pub fn encode_donor(organ: &DonorOrgan, source_model: &str, training: &TrainingMeta) -> Result<Vec<u8>> {
    organ.validate()?;
    let meta = DonorMeta {
        kind: "donor".into(),
        source_model: source_model.to_owned(),
        source_config: organ.source_config,
        extraction_start: organ.extraction_start,
        extraction_indices: organ.extraction_indices.clone(),
        hidden_dim: organ.hidden_dim(),
        num_params: organ.num_params(),
        training: training.clone(),
        signature: CompatibilitySignature::of(&organ.source_config),
    };
    let tensors: Vec<(String, &Tensor)> = organ
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| prefixed(&format!("layers.{i}."), l))
        .collect();
    Ok(encode(&serde_json::to_value(&meta).unwrap(), &tensors))
}

/// Writes a donor checkpoint atomically.
pub fn save_checkpoint(organ: &DonorOrgan, source_model: &str, training: &TrainingMeta, path: &Path) -> Result<DonorMeta> {
    let bytes = encode_donor(organ, source_model, training)?;
    write_atomic(path, &bytes)?;
    let c = decode(&bytes)?;
    meta_from(c.meta)
}

fn decode_donor(c: Container) -> Result<(DonorOrgan, DonorMeta)> {
    let meta: DonorMeta = meta_from(c.meta)?;
    if meta.kind != "donor" {
        return Err(Error::Format(format!("expected a donor checkpoint, found {:?}", meta.kind)));
    }
    if !meta.signature.is_consistent() {
        return Err(Error::Integrity("compatibility signature digest does not match its fields".into()));
    }
    let k = meta.extraction_indices.len();
    let mut named = Named(c.tensors.into_iter().collect());
    let layers = (0..k).map(|i| named.layer(&format!("layers.{i}"))).collect::<Result<Vec<_>>>()?;
    named.finish()?;
    let organ = DonorOrgan {
        layers,
        source_config: meta.source_config,
        extraction_start: meta.extraction_start,
        extraction_indices: meta.extraction_indices.clone(),
    };
    organ.validate()?;
    Ok((organ, meta))
}

/// Reads a donor checkpoint without a recipient at hand.
pub fn read_checkpoint(path: &Path) -> Result<(DonorOrgan, DonorMeta)> {
    decode_donor(read(path)?)
}

/// Reads a donor checkpoint and checks it against `recipient`.
pub fn load_checkpoint(path: &Path, recipient: &TransformerModel) -> Result<(DonorOrgan, DonorMeta)> {
    let (organ, meta) = read_checkpoint(path)?;
    let mismatch = validate_compatibility(&meta.signature, recipient);
    if !mismatch.is_empty() {
        return Err(transplant_core::Error::Compatibility(mismatch).into());
    }
    Ok((organ, meta))
}

/// Bytes of a whole-model checkpoint.
pub fn encode_model(model: &TransformerModel, description: &str) -> Result<Vec<u8>> {
    model.validate()?;
    let meta = ModelMeta {
        kind: "model".into(),
        config: model.config,
        description: description.to_owned(),
        bridges: model.bridges.iter().map(|s| (s.start, s.end)).collect(),
        adapters: model
            .adapters
            .iter()
            .map(|(&i, a)| AdapterMeta {
                layer: i,
                lora_q_scale: a.lora_q.as_ref().map(|l| l.scale),
                lora_v_scale: a.lora_v.as_ref().map(|l| l.scale),
            })
            .collect(),
    };
    let mut tensors = prefixed("", &model.embedding);
    for (i, l) in model.layers.iter().enumerate() {
        tensors.extend(prefixed(&format!("layers.{i}."), l));
    }
    for (i, a) in &model.adapters {
        tensors.extend(prefixed(&format!("adapters.{i}."), a));
    }
    for (j, s) in model.bridges.iter().enumerate() {
        tensors.extend(prefixed(&format!("bridges.{j}."), &s.bridge));
    }
    tensors.extend(prefixed("", &model.head));
    Ok(encode(&serde_json::to_value(&meta).unwrap(), &tensors))
}

pub fn save_model(model: &TransformerModel, description: &str, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model, description)?)
}

pub fn decode_model(bytes: &[u8]) -> Result<(TransformerModel, ModelMeta)> {
    let c = decode(bytes)?;
    let meta: ModelMeta = meta_from(c.meta)?;
    if meta.kind != "model" {
        return Err(Error::Format(format!("expected a model checkpoint, found {:?}", meta.kind)));
    }
    let mut n = Named(c.tensors.into_iter().collect());
    let embedding = Embedding {
        tokens: n.take("embed.tokens")?,
        positions: n.take("embed.positions")?,
    };
    let layers = (0..meta.config.num_layers)
        .map(|i| n.layer(&format!("layers.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let mut adapters = BTreeMap::new();
    for a in &meta.adapters {
        let p = format!("adapters.{}", a.layer);
        let mut low_rank = |tag: &str, scale: Option<f32>| -> Result<Option<LowRank>> {
            scale
                .map(|scale| {
                    Ok(LowRank {
                        b: n.take(&format!("{p}.{tag}.b"))?,
                        a: n.take(&format!("{p}.{tag}.a"))?,
                        scale,
                    })
                })
                .transpose()
        };
        let lora_q = low_rank("lora_q", a.lora_q_scale)?;
        let lora_v = low_rank("lora_v", a.lora_v_scale)?;
        let rescale = if n.has(&format!("{p}.ia3.keys")) {
            Some(Rescale {
                keys: n.take(&format!("{p}.ia3.keys"))?,
                values: n.take(&format!("{p}.ia3.values"))?,
                ffn: n.take(&format!("{p}.ia3.ffn"))?,
            })
        } else {
            None
        };
        adapters.insert(a.layer, Adapters { lora_q, lora_v, rescale });
    }
    let bridges = meta
        .bridges
        .iter()
        .enumerate()
        .map(|(j, &(start, end))| {
            Ok(BridgeSlot {
                start,
                end,
                bridge: Bridge {
                    input: n.linear(&format!("bridges.{j}.bridge.in"))?,
                    output: n.linear(&format!("bridges.{j}.bridge.out"))?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head = Head {
        ln_f: n.norm("head.ln_f")?,
        lm_head: if n.has("head.lm_head") { Some(n.take("head.lm_head")?) } else { None },
    };
    n.finish()?;
    let model = TransformerModel {
        config: meta.config,
        embedding,
        layers,
        head,
        bridges,
        adapters,
    };
    model.validate()?;
    Ok((model, meta))
}

pub fn load_model(path: &Path) -> Result<(TransformerModel, ModelMeta)> {
    let buf = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_model(&buf)
}

/// Hex SHA-256 of a file's bytes, used to cite a checkpoint in reports.
pub fn file_digest(path: &Path) -> Result<String> {
    let buf = fs::read(path).map_err(|e| Error::storage(path, e))?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use transplant_core::baselines::{add_ia3, add_lora};
    use transplant_core::surgery::extract;

    fn model(d: usize, heads: usize) -> TransformerModel {
        TransformerModel::new(
            ModelConfig {
                num_layers: 4,
                hidden_dim: d,
                num_heads: heads,
                ffn_dim: 2 * d,
                vocab_size: 12,
                max_seq_len: 8,
                layernorm_eps: 1e-5,
                tied_head: true,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn signature_digest_is_stable_and_checked() {
        let a = CompatibilitySignature::new(8, 2, LAYERNORM_KIND, ACTIVATION_KIND);
        assert_eq!(a, CompatibilitySignature::of(&model(8, 2).config));
        assert!(a.is_consistent());
        assert_eq!(a.digest.len(), 64);
        let mut b = a.clone();
        b.num_heads = 4;
        assert!(!b.is_consistent());
    }

    #[test]
    fn compatibility_reports_every_field() {
        let m = model(8, 2);
        assert!(validate_compatibility(&CompatibilitySignature::of(&m.config), &m).is_empty());
        let heads = validate_compatibility(&CompatibilitySignature::new(8, 4, LAYERNORM_KIND, ACTIVATION_KIND), &m);
        assert_eq!(heads.len(), 1);
        assert!(heads[0].contains("num_heads"));
        let all = validate_compatibility(&CompatibilitySignature::new(16, 4, "post_layernorm", "relu"), &m);
        assert_eq!(all.len(), 4);
        for f in ["hidden_dim", "num_heads", "layernorm_kind", "activation_kind"] {
            assert!(all.iter().any(|s| s.contains(f)), "{f}");
        }
    }

    #[test]
    fn donor_bytes_round_trip() {
        let m = model(8, 2);
        let organ = extract(&m, 1, 2).unwrap();
        let bytes = encode_donor(&organ, "base", &TrainingMeta::default()).unwrap();
        let (back, meta) = decode_donor(decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, organ);
        assert_eq!(meta.extraction_indices, [1, 2]);
        assert_eq!(encode_donor(&back, "base", &TrainingMeta::default()).unwrap(), bytes);
    }

    #[test]
    fn grafted_model_round_trips() {
        let mut m = add_ia3(&add_lora(&model(8, 2), 2, 4.0, 1).unwrap());
        m.head.lm_head = Some(Tensor::zeros(&[8, 12]));
        m.config.tied_head = false;
        m.bridges.push(BridgeSlot {
            start: 1,
            end: 3,
            bridge: Bridge::identity(8),
        });
        let bytes = encode_model(&m, "grafted").unwrap();
        let (back, _) = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corruption_and_versions() {
        let organ = extract(&model(8, 2), 0, 1).unwrap();
        let bytes = encode_donor(&organ, "base", &TrainingMeta::default()).unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(Error::Integrity(_))));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        match decode(&v2) {
            Err(Error::Format(msg)) => assert!(msg.contains("supported: [1]"), "{msg}"),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("accepted unknown version"),
        }
        assert!(matches!(decode(b"NOPE"), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn files_are_checked_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("donor.notc");
        let m = model(8, 2);
        let organ = extract(&m, 1, 3).unwrap();
        let meta = save_checkpoint(&organ, "base", &TrainingMeta::default(), &path).unwrap();
        assert_eq!(meta.num_params, organ.num_params());
        let (back, _) = load_checkpoint(&path, &m).unwrap();
        assert_eq!(back, organ);

        let wide = model(16, 2);
        match load_checkpoint(&path, &wide) {
            Err(Error::Core(transplant_core::Error::Compatibility(f))) => assert!(f[0].contains("hidden_dim")),
            other => panic!("{other:?}"),
        }

        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, &m), Err(Error::Integrity(_))));
        assert!(matches!(read_checkpoint(&dir.path().join("missing.notc")), Err(Error::Storage { .. })));
    }

    #[test]
    fn gpt2_shaped_organ_parameter_count() {
        // three d=768, ffn=3072 layers with biases
        let cfg = ModelConfig {
            num_layers: 3,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            vocab_size: 4,
            max_seq_len: 2,
            layernorm_eps: 1e-5,
            tied_head: true,
        };
        let m = TransformerModel::new(cfg, 0).unwrap();
        let organ = extract(&m, 0, 3).unwrap();
        let bytes = encode_donor(&organ, "gpt2-shaped", &TrainingMeta::default()).unwrap();
        let meta: DonorMeta = meta_from(decode(&bytes).unwrap().meta).unwrap();
        assert_eq!(meta.num_params, 21_263_616);
        assert_eq!((meta.num_params as f64 / 1e5).round() / 10.0, 21.3);
    }
}
