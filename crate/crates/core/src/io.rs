//! Binary file formats and run configuration.
//!
//! Every file starts with the magic `HICM`, a little-endian `u16` format
//! version, a little-endian `u32` manifest length and a JSON manifest,
//! followed by a little-endian payload whose size the manifest fixes.
//! Motion values are stored as `f32`; soft anchors and network parameters
//! as `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HicError, Result};
use crate::motion::{Domain, Modality, MotionClip, MotionSequence, CHANNELS, ROOT_JOINT, SHAPE_PARAMS};
use crate::numeric::NdBuffer;
use crate::prompting::{Anchor, AnchorSet, SamplingMethod, SoftAnchor, TieBreak};
use crate::synth::{Dataset, SynthConfig};
use crate::training::TrainConfig;
use crate::xfusion::{LossWeights, ViewOrder, XFusionConfig, XFusionParams};

pub const MAGIC: &[u8; 4] = b"HICM";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 10;

/// Writes `bytes` to `path` through a temporary file in the same directory
/// that is renamed into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| HicError::Io(e.error))?;
    Ok(())
}

fn encode<M: Serialize>(manifest: &M, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

/// Parses the header and manifest; returns the manifest and the payload
/// offset.
fn decode<M: DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<(M, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(HicError::format(
            bytes.len() as u64,
            format!("file is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(HicError::format(
            0,
            format!("bad magic {:?}, expected \"HICM\"", String::from_utf8_lossy(&bytes[..4])),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(HicError::format(
            4,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let end = HEADER_LEN + len;
    if bytes.len() < end {
        return Err(HicError::format(
            6,
            format!("manifest length {len} runs past end of file ({} bytes)", bytes.len()),
        ));
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes[HEADER_LEN..end])
        .map_err(|e| HicError::format(HEADER_LEN as u64, format!("manifest is not JSON: {e}")))?;
    let found = value.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(HicError::format(
            HEADER_LEN as u64,
            format!("file kind `{found}`, expected `{kind}`"),
        ));
    }
    let manifest = serde_json::from_value(value)
        .map_err(|e| HicError::format(HEADER_LEN as u64, format!("invalid {kind} manifest: {e}")))?;
    Ok((manifest, end))
}

struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Payload<'a> {
    fn new(bytes: &'a [u8], start: usize, expected_len: usize) -> Result<Self> {
        let actual = bytes.len() - start;
        if actual != expected_len {
            return Err(HicError::format(
                start as u64,
                format!("payload is {actual} bytes, manifest implies {expected_len}"),
            ));
        }
        Ok(Payload { bytes, pos: start })
    }

    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let at = self.pos;
        let out: Vec<f64> = self
            .take(4 * n)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        check_finite(&out, at, 4)?;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let at = self.pos;
        let out: Vec<f64> = self
            .take(8 * n)
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        check_finite(&out, at, 8)?;
        Ok(out)
    }
}

fn check_finite(v: &[f64], at: usize, width: usize) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(HicError::format(
            (at + i * width) as u64,
            "non-finite value in payload",
        )),
        None => Ok(()),
    }
}

fn put_f32(out: &mut Vec<u8>, v: &[f64]) {
    for &x in v {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn put_f64(out: &mut Vec<u8>, v: &[f64]) {
    for &x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClipManifest {
    id: u64,
    source: String,
    /// Availability of 2D, 3D and mesh data.
    modalities: [bool; 3],
    native_joints: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    kind: String,
    version: u16,
    /// Clip length `2F`.
    frames: usize,
    joints: usize,
    channels: usize,
    shape_params: usize,
    root_joint: usize,
    length_unit_mm: f64,
    clips: Vec<ClipManifest>,
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let frames = 2 * ds.frames;
    let manifest = DatasetManifest {
        kind: "dataset".into(),
        version: FORMAT_VERSION,
        frames,
        joints: ds.joints,
        channels: CHANNELS,
        shape_params: SHAPE_PARAMS,
        root_joint: ROOT_JOINT,
        length_unit_mm: ds.length_unit_mm,
        clips: ds
            .clips
            .iter()
            .map(|c| ClipManifest {
                id: c.id,
                source: c.source.clone(),
                modalities: [true; 3],
                native_joints: c.pose3d.native_joints(),
            })
            .collect(),
    };
    let mut payload = Vec::new();
    for c in &ds.clips {
        for s in [&c.pose2d, &c.pose3d, &c.mesh] {
            put_f32(&mut payload, s.values().data());
        }
    }
    for c in &ds.clips {
        put_f32(&mut payload, c.mesh.shape_params());
    }
    encode(&manifest, &payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (m, start): (DatasetManifest, usize) = decode(bytes, "dataset")?;
    let at = HEADER_LEN as u64;
    if m.channels != CHANNELS || m.shape_params != SHAPE_PARAMS || m.root_joint != ROOT_JOINT {
        return Err(HicError::format(
            at,
            format!(
                "manifest has C={}, S={}, root={}; expected {CHANNELS}, {SHAPE_PARAMS}, {ROOT_JOINT}",
                m.channels, m.shape_params, m.root_joint
            ),
        ));
    }
    if m.clips.is_empty() || m.frames == 0 || m.joints == 0 || m.frames % 2 != 0 {
        return Err(HicError::format(at, "dataset manifest describes no usable clips"));
    }
    let seq_len = m.frames * m.joints * CHANNELS;
    let clips = m.clips.len();
    let expected = (clips * 3 * seq_len + clips * SHAPE_PARAMS) * 4;
    let mut p = Payload::new(bytes, start, expected)?;
    let mut raw = Vec::with_capacity(clips);
    for c in &m.clips {
        if c.modalities != [true; 3] {
            return Err(HicError::format(at, format!("clip {} lacks a modality", c.id)));
        }
        let vals = [p.f32s(seq_len)?, p.f32s(seq_len)?, p.f32s(seq_len)?];
        raw.push(vals);
    }
    let shape = vec![m.frames, m.joints, CHANNELS];
    let mut out = Vec::with_capacity(clips);
    for (c, [v2, v3, vm]) in m.clips.iter().zip(raw) {
        let beta = p.f32s(SHAPE_PARAMS)?;
        let seq = |v: Vec<f64>, modality, beta: Vec<f64>| {
            MotionSequence::new(NdBuffer::new(shape.clone(), v)?, modality, c.native_joints, beta)
        };
        out.push(MotionClip::new(
            c.id,
            c.source.clone(),
            seq(v2, Modality::Pose2D, vec![0.0; SHAPE_PARAMS])?,
            seq(v3, Modality::Pose3D, vec![0.0; SHAPE_PARAMS])?,
            seq(vm, Modality::MeshParams, beta)?,
        )?);
    }
    Dataset::new(out, m.length_unit_mm)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnchorManifest {
    domain: Option<Domain>,
    source_index: Option<usize>,
    input_modality: Modality,
    target_modality: Modality,
    input_native_joints: usize,
    target_native_joints: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnchorSetManifest {
    kind: String,
    version: u16,
    k: usize,
    requested_k: usize,
    method: SamplingMethod,
    tie_break: TieBreak,
    fingerprint: String,
    frames: usize,
    joints: usize,
    hidden: usize,
    anchors: Vec<AnchorManifest>,
}

pub fn encode_anchors(set: &AnchorSet) -> Result<Vec<u8>> {
    if set.is_empty() {
        return Err(HicError::State("cannot store an empty anchor set".into()));
    }
    let manifest = AnchorSetManifest {
        kind: "anchors".into(),
        version: FORMAT_VERSION,
        k: set.len(),
        requested_k: set.requested_k,
        method: set.method,
        tie_break: set.tie_break,
        fingerprint: set.fingerprint.clone(),
        frames: set.frames(),
        joints: set.joints(),
        hidden: set.hidden(),
        anchors: set
            .anchors
            .iter()
            .map(|a| AnchorManifest {
                domain: a.domain,
                source_index: a.source_index,
                input_modality: a.input.modality(),
                target_modality: a.target.modality(),
                input_native_joints: a.input.native_joints(),
                target_native_joints: a.target.native_joints(),
            })
            .collect(),
    };
    let mut payload = Vec::new();
    for a in &set.anchors {
        put_f32(&mut payload, a.input.values().data());
        put_f32(&mut payload, a.input.shape_params());
        put_f32(&mut payload, a.target.values().data());
        put_f32(&mut payload, a.target.shape_params());
    }
    for s in &set.soft {
        put_f64(&mut payload, s.w1.data());
        put_f64(&mut payload, s.w2.data());
    }
    Ok(encode(&manifest, &payload))
}

pub fn decode_anchors(bytes: &[u8]) -> Result<AnchorSet> {
    let (m, start): (AnchorSetManifest, usize) = decode(bytes, "anchors")?;
    let (f, j, h, k) = (m.frames, m.joints, m.hidden, m.anchors.len());
    if k == 0 || k != m.k || f == 0 || j == 0 || h == 0 {
        return Err(HicError::format(
            HEADER_LEN as u64,
            format!("anchor manifest lists {k} anchors for K = {} at [{f}, {j}], H = {h}", m.k),
        ));
    }
    let seq_len = f * j * CHANNELS;
    let expected = k * 2 * (seq_len + SHAPE_PARAMS) * 4 + k * (f * j + h) * 8;
    let mut p = Payload::new(bytes, start, expected)?;
    let shape = vec![f, j, CHANNELS];
    let mut anchors = Vec::with_capacity(k);
    for a in &m.anchors {
        let (iv, ib) = (p.f32s(seq_len)?, p.f32s(SHAPE_PARAMS)?);
        let (tv, tb) = (p.f32s(seq_len)?, p.f32s(SHAPE_PARAMS)?);
        anchors.push(Anchor {
            input: MotionSequence::new(NdBuffer::new(shape.clone(), iv)?, a.input_modality, a.input_native_joints, ib)?,
            target: MotionSequence::new(NdBuffer::new(shape.clone(), tv)?, a.target_modality, a.target_native_joints, tb)?,
            domain: a.domain,
            source_index: a.source_index,
        });
    }
    let mut soft = Vec::with_capacity(k);
    for _ in 0..k {
        soft.push(SoftAnchor {
            w1: NdBuffer::new(vec![f, j, 1], p.f64s(f * j)?)?,
            w2: NdBuffer::new(vec![1, 1, h], p.f64s(h)?)?,
        });
    }
    Ok(AnchorSet {
        anchors,
        soft,
        requested_k: m.requested_k,
        method: m.method,
        tie_break: m.tie_break,
        fingerprint: m.fingerprint,
    })
}

pub fn write_anchors(path: &Path, set: &AnchorSet) -> Result<()> {
    write_atomic(path, &encode_anchors(set)?)
}

pub fn read_anchors(path: &Path) -> Result<AnchorSet> {
    decode_anchors(&read_file(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorManifest {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    version: u16,
    config: XFusionConfig,
    step: usize,
    tensors: Vec<TensorManifest>,
    /// Soft-anchor factor count; each pair is `[F, J, 1]` and `[1, 1, H]`.
    soft_anchors: usize,
}

/// Network parameters with the soft-anchor factors trained alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: XFusionParams,
    pub soft: Vec<SoftAnchor>,
    pub step: usize,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let manifest = CheckpointManifest {
        kind: "checkpoint".into(),
        version: FORMAT_VERSION,
        config: ck.params.config.clone(),
        step: ck.step,
        tensors: ck
            .params
            .names
            .iter()
            .zip(&ck.params.tensors)
            .map(|(n, t)| TensorManifest {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        soft_anchors: ck.soft.len(),
    };
    let mut payload = Vec::new();
    for t in &ck.params.tensors {
        put_f64(&mut payload, t.data());
    }
    for s in &ck.soft {
        put_f64(&mut payload, s.w1.data());
        put_f64(&mut payload, s.w2.data());
    }
    encode(&manifest, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (m, start): (CheckpointManifest, usize) = decode(bytes, "checkpoint")?;
    let c = &m.config;
    c.validate()
        .map_err(|e| HicError::format(HEADER_LEN as u64, format!("checkpoint config: {e}")))?;
    let tensor_len: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let soft_len = m.soft_anchors * (c.frames * c.joints + c.hidden);
    let mut p = Payload::new(bytes, start, (tensor_len + soft_len) * 8)?;
    let mut named = Vec::with_capacity(m.tensors.len());
    for t in &m.tensors {
        let n = t.shape.iter().product();
        named.push((t.name.clone(), NdBuffer::new(t.shape.clone(), p.f64s(n)?)?));
    }
    let params = XFusionParams::from_tensors(c.clone(), named)
        .map_err(|e| HicError::format(HEADER_LEN as u64, e.to_string()))?;
    let mut soft = Vec::with_capacity(m.soft_anchors);
    for _ in 0..m.soft_anchors {
        soft.push(SoftAnchor {
            w1: NdBuffer::new(vec![c.frames, c.joints, 1], p.f64s(c.frames * c.joints)?)?,
            w2: NdBuffer::new(vec![1, 1, c.hidden], p.f64s(c.hidden)?)?,
        });
    }
    Ok(Checkpoint {
        params,
        soft,
        step: m.step,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

/// Flat run configuration read from TOML. Unset keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub clips: usize,
    pub frames: usize,
    pub joints: usize,
    pub families: usize,
    pub k: usize,
    pub method: SamplingMethod,
    pub domains: String,
    pub hidden: usize,
    pub layers: usize,
    pub view_order: ViewOrder,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub shape_weight: f64,
    pub mask_ratio: f64,
    pub train_soft_anchors: bool,
    pub domain_filter_retrieval: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let x = XFusionConfig::default();
        let s = SynthConfig::default();
        RunConfig {
            seed: 0,
            clips: s.clips,
            frames: s.frames,
            joints: s.joints,
            families: s.families,
            k: 16,
            method: SamplingMethod::Sps,
            domains: "all".into(),
            hidden: x.hidden,
            layers: x.layers,
            view_order: x.view_order,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            steps: t.steps,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            position_weight: t.loss.position,
            velocity_weight: t.loss.velocity,
            shape_weight: t.loss.shape,
            mask_ratio: t.mask_ratio,
            train_soft_anchors: t.train_soft_anchors,
            domain_filter_retrieval: t.domain_filter_retrieval,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            HicError::config(field, msg)
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::from_toml(&text)
    }

    pub fn domain_list(&self) -> Result<Vec<Domain>> {
        if self.domains.trim().eq_ignore_ascii_case("all") {
            return Ok(Domain::ALL.to_vec());
        }
        Domain::parse_list(&self.domains).map_err(|e| HicError::config("domains", e.to_string()))
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            clips: self.clips,
            frames: self.frames,
            joints: self.joints,
            families: self.families,
            seed: self.seed,
        }
    }

    pub fn network(&self, frames: usize, joints: usize) -> XFusionConfig {
        XFusionConfig {
            frames,
            joints,
            hidden: self.hidden,
            layers: self.layers,
            skeleton_joints: joints.min(24),
            view_order: self.view_order,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            steps: self.steps,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            loss: LossWeights {
                position: self.position_weight,
                velocity: self.velocity_weight,
                shape: self.shape_weight,
            },
            seed: self.seed,
            domains: self.domain_list()?,
            mask_ratio: self.mask_ratio,
            train_soft_anchors: self.train_soft_anchors,
            domain_filter_retrieval: self.domain_filter_retrieval,
            ..TrainConfig::default()
        };
        t.validate()?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthesize;

    fn small() -> Dataset {
        synthesize(&SynthConfig {
            clips: 2,
            frames: 2,
            joints: 3,
            families: 1,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn dataset_payload_size() {
        let ds = synthesize(&SynthConfig {
            clips: 64,
            frames: 16,
            joints: 24,
            families: 4,
            seed: 0,
        })
        .unwrap();
        let bytes = encode_dataset(&ds);
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let payload = bytes.len() - HEADER_LEN - mlen;
        assert_eq!(payload, 64 * 3 * (32 * 24 * 3) * 4 + 64 * SHAPE_PARAMS * 4);
    }

    #[test]
    fn header_errors_name_expectations() {
        let mut bytes = encode_dataset(&small());
        bytes[4] = 9;
        let msg = decode_dataset(&bytes).unwrap_err().to_string();
        assert!(msg.contains("expected 1"), "{msg}");
        bytes[0] = b'X';
        let msg = decode_dataset(&bytes).unwrap_err().to_string();
        assert!(msg.contains("HICM"), "{msg}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode_dataset(&small());
        let err = decode_dataset(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, HicError::Format { offset, .. } if offset > HEADER_LEN as u64));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn wrong_kind_rejected() {
        let bytes = encode_dataset(&small());
        let msg = decode_anchors(&bytes).unwrap_err().to_string();
        assert!(msg.contains("expected `anchors`"), "{msg}");
    }

    #[test]
    fn config_unknown_key_is_config_error() {
        let err = RunConfig::from_toml("learnin_rate = 0.1").unwrap_err();
        assert!(matches!(err, HicError::Config { .. }));
        assert_eq!(err.exit_code(), 1);
        let ok = RunConfig::from_toml("steps = 3\ndomains = \"PE,MP(P)\"").unwrap();
        assert_eq!(ok.steps, 3);
        assert_eq!(ok.domain_list().unwrap(), vec![Domain::PE, Domain::MPPose]);
    }
}
