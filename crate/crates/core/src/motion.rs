//! Unified cross-modal motion representation and task derivation.
//!
//! Every modality is stored as an `F × J × 3` buffer: 2D poses gain a zero
//! z channel, SMPL rotation vectors are regrouped per joint, and sequences
//! with fewer joints are padded with all-zero virtual joints. Frame and
//! joint indices are 0-based throughout; frame 0 and frame `F − 1` are the
//! first and last frames, joint 0 is the root.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HicError, Result};
use crate::numeric::NdBuffer;

/// Channels per joint after unification.
pub const CHANNELS: usize = 3;
/// Length of the SMPL shape vector.
pub const SHAPE_PARAMS: usize = 10;
/// Root joint index (SMPL pelvis).
pub const ROOT_JOINT: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Pose2D,
    Pose3D,
    MeshParams,
}

impl Modality {
    pub fn is_pose(self) -> bool {
        !matches!(self, Modality::MeshParams)
    }
}

/// The ten in-context task domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    /// Pose estimation.
    PE,
    /// Future pose estimation.
    FPE,
    /// Mesh recovery.
    MR,
    /// Future mesh recovery.
    FMR,
    /// Motion prediction on 3D poses.
    MPPose,
    /// Motion in-between on 3D poses.
    MIBPose,
    /// Joint completion on 3D poses.
    JCPose,
    /// Motion prediction on mesh parameters.
    MPMesh,
    /// Motion in-between on mesh parameters.
    MIBMesh,
    /// Joint completion on mesh parameters.
    JCMesh,
}

/// Which half of a `2F`-frame clip a task reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Current,
    Future,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Time,
    Joint,
}

/// One row of the task table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskDefinition {
    pub input: Modality,
    pub input_window: Window,
    pub target: Modality,
    pub target_window: Window,
    pub mask: Option<MaskKind>,
}

impl Domain {
    pub const ALL: [Domain; 10] = [
        Domain::PE,
        Domain::FPE,
        Domain::MR,
        Domain::FMR,
        Domain::MPPose,
        Domain::MIBPose,
        Domain::JCPose,
        Domain::MPMesh,
        Domain::MIBMesh,
        Domain::JCMesh,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Domain::PE => "PE",
            Domain::FPE => "FPE",
            Domain::MR => "MR",
            Domain::FMR => "FMR",
            Domain::MPPose => "MP(P)",
            Domain::MIBPose => "MIB(P)",
            Domain::JCPose => "JC(P)",
            Domain::MPMesh => "MP(M)",
            Domain::MIBMesh => "MIB(M)",
            Domain::JCMesh => "JC(M)",
        }
    }

    /// Position in [`Domain::ALL`], used as the on-disk id.
    pub fn index(self) -> usize {
        Domain::ALL.iter().position(|&d| d == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<Domain> {
        Domain::ALL
            .get(i)
            .copied()
            .ok_or_else(|| HicError::Domain(format!("unknown domain id {i}")))
    }

    pub fn definition(self) -> TaskDefinition {
        use Modality::*;
        use Window::*;
        let def = |input, input_window, target, target_window, mask| TaskDefinition {
            input,
            input_window,
            target,
            target_window,
            mask,
        };
        match self {
            Domain::PE => def(Pose2D, Current, Pose3D, Current, None),
            Domain::FPE => def(Pose2D, Current, Pose3D, Future, None),
            Domain::MR => def(Pose2D, Current, MeshParams, Current, None),
            Domain::FMR => def(Pose2D, Current, MeshParams, Future, None),
            Domain::MPPose => def(Pose3D, Current, Pose3D, Future, None),
            Domain::MIBPose => def(Pose3D, Current, Pose3D, Current, Some(MaskKind::Time)),
            Domain::JCPose => def(Pose3D, Current, Pose3D, Current, Some(MaskKind::Joint)),
            Domain::MPMesh => def(MeshParams, Current, MeshParams, Future, None),
            Domain::MIBMesh => def(MeshParams, Current, MeshParams, Current, Some(MaskKind::Time)),
            Domain::JCMesh => def(MeshParams, Current, MeshParams, Current, Some(MaskKind::Joint)),
        }
    }

    pub fn outputs_mesh(self) -> bool {
        self.definition().target == Modality::MeshParams
    }

    /// Parses a comma-separated list such as `PE,MP(P),MIB(P)`.
    pub fn parse_list(s: &str) -> Result<Vec<Domain>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let d: Domain = part.parse()?;
            if !out.contains(&d) {
                out.push(d);
            }
        }
        if out.is_empty() {
            return Err(HicError::Domain("empty domain list".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Domain {
    type Err = HicError;

    /// Accepts the table codes (`MP(P)`) and a shell-friendly form
    /// (`MP-P`, `mp_p`), case-insensitively.
    fn from_str(s: &str) -> Result<Domain> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        Domain::ALL
            .iter()
            .copied()
            .find(|d| {
                d.code()
                    .chars()
                    .filter(|c| c.is_ascii_alphanumeric())
                    .collect::<String>()
                    == norm
            })
            .ok_or_else(|| HicError::Domain(format!("unknown domain `{s}`")))
    }
}

/// One unified motion clip of shape `[F, J, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    values: NdBuffer,
    modality: Modality,
    native_joints: usize,
    shape_params: Vec<f64>,
}

impl MotionSequence {
    /// Validates every representation invariant.
    pub fn new(
        values: NdBuffer,
        modality: Modality,
        native_joints: usize,
        shape_params: Vec<f64>,
    ) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[2] != CHANNELS {
            return Err(HicError::dim(format!(
                "motion values must have shape [F, J, 3], got {s:?}"
            )));
        }
        let joints = s[1];
        if native_joints == 0 || native_joints > joints {
            return Err(HicError::dim(format!(
                "native joint count {native_joints} outside 1..={joints}"
            )));
        }
        if shape_params.len() != SHAPE_PARAMS {
            return Err(HicError::dim(format!(
                "shape parameters must have length {SHAPE_PARAMS}, got {}",
                shape_params.len()
            )));
        }
        if shape_params.iter().any(|v| !v.is_finite()) {
            return Err(HicError::numeric("motion", "non-finite shape parameter"));
        }
        if modality.is_pose() && shape_params.iter().any(|&v| v != 0.0) {
            return Err(HicError::Domain(
                "pose sequences carry all-zero shape parameters".into(),
            ));
        }
        let data = values.data();
        for (i, chunk) in data.chunks(CHANNELS).enumerate() {
            let j = i % joints;
            if j >= native_joints && chunk.iter().any(|&v| v != 0.0) {
                return Err(HicError::Domain(format!(
                    "virtual joint {j} must be all zero"
                )));
            }
            if modality == Modality::Pose2D && chunk[2] != 0.0 {
                return Err(HicError::Domain("2D poses must have z = 0".into()));
            }
        }
        Ok(MotionSequence {
            values,
            modality,
            native_joints,
            shape_params,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &NdBuffer {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn native_joints(&self) -> usize {
        self.native_joints
    }

    pub fn shape_params(&self) -> &[f64] {
        &self.shape_params
    }

    /// Frames `start..end` as a new sequence.
    pub fn window(&self, start: usize, end: usize) -> Result<MotionSequence> {
        if start >= end || end > self.frames() {
            return Err(HicError::Index(format!(
                "frame window {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        let row = self.joints() * CHANNELS;
        let data = self.values.data()[start * row..end * row].to_vec();
        Ok(MotionSequence {
            values: NdBuffer::from_parts(vec![end - start, self.joints(), CHANNELS], data),
            ..self.clone()
        })
    }

    /// Flattens back to per-frame rotation vectors `[F, 3J]`.
    pub fn flatten_params(&self) -> NdBuffer {
        self.values
            .reshape(&[self.frames(), self.joints() * CHANNELS])
            .expect("same length")
    }

    fn with_values(&self, values: NdBuffer) -> MotionSequence {
        MotionSequence {
            values,
            ..self.clone()
        }
    }

    fn with_shape_params(mut self, beta: Vec<f64>) -> MotionSequence {
        self.shape_params = beta;
        self
    }
}

/// Lifts `[F, N, 2]` pixel/plane coordinates to `[F, N, 3]` with `z = 0`.
pub fn unify_pose2d(points: &NdBuffer) -> Result<MotionSequence> {
    let s = points.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(HicError::dim(format!(
            "2D poses must have shape [F, N, 2], got {s:?}"
        )));
    }
    let mut data = Vec::with_capacity(points.len() / 2 * 3);
    for xy in points.data().chunks(2) {
        data.extend_from_slice(&[xy[0], xy[1], 0.0]);
    }
    let values = NdBuffer::new(vec![s[0], s[1], CHANNELS], data)?;
    MotionSequence::new(values, Modality::Pose2D, s[1], vec![0.0; SHAPE_PARAMS])
}

/// Wraps `[F, N, 3]` positions as a 3D pose sequence.
pub fn unify_pose3d(points: &NdBuffer) -> Result<MotionSequence> {
    let s = points.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(HicError::dim(format!(
            "3D poses must have shape [F, N, 3], got {s:?}"
        )));
    }
    MotionSequence::new(points.clone(), Modality::Pose3D, s[1], vec![0.0; SHAPE_PARAMS])
}

/// Regroups per-frame rotation vectors `θ_f ∈ R^{3J}` into `[F, J, 3]`.
pub fn reorganize_mesh_params(theta: &NdBuffer, beta: &[f64]) -> Result<MotionSequence> {
    let s = theta.shape();
    if s.len() != 2 || s[1] % CHANNELS != 0 {
        return Err(HicError::dim(format!(
            "rotation parameters must have shape [F, 3J], got {s:?}"
        )));
    }
    let joints = s[1] / CHANNELS;
    let values = theta.reshape(&[s[0], joints, CHANNELS])?;
    MotionSequence::new(values, Modality::MeshParams, joints, beta.to_vec())
}

/// Appends all-zero virtual joints up to `target_joints`.
pub fn pad_virtual_joints(seq: &MotionSequence, target_joints: usize) -> Result<MotionSequence> {
    let (f, j) = (seq.frames(), seq.joints());
    if target_joints < j {
        return Err(HicError::dim(format!(
            "cannot pad {j} joints down to {target_joints}"
        )));
    }
    let mut data = vec![0.0; f * target_joints * CHANNELS];
    for fi in 0..f {
        let src = &seq.values.data()[fi * j * CHANNELS..(fi + 1) * j * CHANNELS];
        data[fi * target_joints * CHANNELS..fi * target_joints * CHANNELS + j * CHANNELS]
            .copy_from_slice(src);
    }
    Ok(MotionSequence {
        values: NdBuffer::from_parts(vec![f, target_joints, CHANNELS], data),
        ..seq.clone()
    })
}

/// The canonical body: all rotation vectors zero over `frames` frames.
pub fn canonical_tbody(frames: usize, joints: usize) -> MotionSequence {
    MotionSequence {
        values: NdBuffer::zeros(&[frames, joints, CHANNELS]),
        modality: Modality::MeshParams,
        native_joints: joints,
        shape_params: vec![0.0; SHAPE_PARAMS],
    }
}

fn mask_count(ratio: f64, n: usize) -> usize {
    // Small slack so that e.g. 0.7 · 10 counts as 7.
    (ratio * n as f64 + 1e-9).floor() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(HicError::Domain(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Binary frame mask (1 kept, 0 masked). The first and last frames are
/// never masked; exactly `min(⌊ratio·F⌋, F − 2)` inner frames are.
pub fn make_time_mask(frames: usize, ratio: f64, seed: u64) -> Result<Vec<u8>> {
    if frames < 2 {
        return Err(HicError::dim(format!("time mask needs F ≥ 2, got {frames}")));
    }
    check_ratio(ratio)?;
    let count = mask_count(ratio, frames).min(frames - 2);
    let mut mask = vec![1u8; frames];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, frames - 2, count) {
        mask[i + 1] = 0;
    }
    Ok(mask)
}

/// Binary joint mask. The root is never masked and only native joints are
/// eligible; `⌊ratio·N⌋` joints are masked, where `N` is the native count
/// (or `J` when absent), clamped to the eligible count.
pub fn make_joint_mask(
    joints: usize,
    root: usize,
    ratio: f64,
    seed: u64,
    native: Option<usize>,
) -> Result<Vec<u8>> {
    if joints == 0 {
        return Err(HicError::dim("joint mask needs J ≥ 1"));
    }
    if root >= joints {
        return Err(HicError::Index(format!(
            "root joint {root} out of range for {joints} joints"
        )));
    }
    check_ratio(ratio)?;
    let native = native.unwrap_or(joints).min(joints);
    let eligible: Vec<usize> = (0..native).filter(|&j| j != root).collect();
    let count = mask_count(ratio, native).min(eligible.len());
    let mut mask = vec![1u8; joints];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, eligible.len(), count) {
        mask[eligible[i]] = 0;
    }
    Ok(mask)
}

fn apply_time_mask(seq: &MotionSequence, mask: &[u8]) -> MotionSequence {
    let row = seq.joints() * CHANNELS;
    let mut data = seq.values.data().to_vec();
    for (f, &m) in mask.iter().enumerate() {
        if m == 0 {
            data[f * row..(f + 1) * row].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    seq.with_values(NdBuffer::from_parts(seq.values.shape().to_vec(), data))
}

fn apply_joint_mask(seq: &MotionSequence, mask: &[u8]) -> MotionSequence {
    let j = seq.joints();
    let mut data = seq.values.data().to_vec();
    for (i, chunk) in data.chunks_mut(CHANNELS).enumerate() {
        if mask[i % j] == 0 {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    seq.with_values(NdBuffer::from_parts(seq.values.shape().to_vec(), data))
}

/// Three synchronized views of one `2F`-frame motion.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub id: u64,
    pub source: String,
    pub pose2d: MotionSequence,
    pub pose3d: MotionSequence,
    pub mesh: MotionSequence,
}

impl MotionClip {
    pub fn new(
        id: u64,
        source: impl Into<String>,
        pose2d: MotionSequence,
        pose3d: MotionSequence,
        mesh: MotionSequence,
    ) -> Result<Self> {
        let (f, j) = (pose3d.frames(), pose3d.joints());
        if f % 2 != 0 {
            return Err(HicError::dim(format!("clip length {f} must be even (2F)")));
        }
        for (name, s, m) in [
            ("pose2d", &pose2d, Modality::Pose2D),
            ("pose3d", &pose3d, Modality::Pose3D),
            ("mesh", &mesh, Modality::MeshParams),
        ] {
            if s.frames() != f || s.joints() != j {
                return Err(HicError::dim(format!(
                    "{name} has shape [{}, {}] but the clip is [{f}, {j}]",
                    s.frames(),
                    s.joints()
                )));
            }
            if s.modality() != m {
                return Err(HicError::Domain(format!("{name} has modality {:?}", s.modality())));
            }
        }
        Ok(MotionClip {
            id,
            source: source.into(),
            pose2d,
            pose3d,
            mesh,
        })
    }

    /// Task window length `F` (half the clip).
    pub fn window_frames(&self) -> usize {
        self.pose3d.frames() / 2
    }

    pub fn joints(&self) -> usize {
        self.pose3d.joints()
    }

    pub fn modality(&self, m: Modality) -> &MotionSequence {
        match m {
            Modality::Pose2D => &self.pose2d,
            Modality::Pose3D => &self.pose3d,
            Modality::MeshParams => &self.mesh,
        }
    }
}

/// A derived (input, target) pair for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub domain: Domain,
    pub query_input: MotionSequence,
    pub query_target: MotionSequence,
    pub time_mask: Option<Vec<u8>>,
    pub joint_mask: Option<Vec<u8>>,
}

impl TaskSample {
    /// β of the target (all zero for pose outputs).
    pub fn target_shape(&self) -> &[f64] {
        self.query_target.shape_params()
    }
}

/// Default mask ratio for in-between and completion tasks.
pub const DEFAULT_MASK_RATIO: f64 = 0.4;

/// Derives the task sample of `domain` from a clip.
///
/// Masks are drawn fresh from `seed` for in-between and joint-completion
/// domains and applied by elementwise product.
pub fn derive_task(clip: &MotionClip, domain: Domain, seed: u64) -> Result<TaskSample> {
    derive_task_with_ratio(clip, domain, seed, DEFAULT_MASK_RATIO)
}

pub fn derive_task_with_ratio(
    clip: &MotionClip,
    domain: Domain,
    seed: u64,
    mask_ratio: f64,
) -> Result<TaskSample> {
    let def = domain.definition();
    let f = clip.window_frames();
    let window = |seq: &MotionSequence, w: Window| match w {
        Window::Current => seq.window(0, f),
        Window::Future => seq.window(f, 2 * f),
    };
    let mut input = window(clip.modality(def.input), def.input_window)?;
    let mut target = window(clip.modality(def.target), def.target_window)?;
    if def.target.is_pose() {
        target = target.with_shape_params(vec![0.0; SHAPE_PARAMS]);
    }
    if def.input.is_pose() {
        input = input.with_shape_params(vec![0.0; SHAPE_PARAMS]);
    }
    let (mut time_mask, mut joint_mask) = (None, None);
    match def.mask {
        Some(MaskKind::Time) => {
            let m = make_time_mask(f, mask_ratio, seed)?;
            input = apply_time_mask(&input, &m);
            time_mask = Some(m);
        }
        Some(MaskKind::Joint) => {
            let m = make_joint_mask(
                input.joints(),
                ROOT_JOINT,
                mask_ratio,
                seed,
                Some(input.native_joints()),
            )?;
            input = apply_joint_mask(&input, &m);
            joint_mask = Some(m);
        }
        None => {}
    }
    Ok(TaskSample {
        domain,
        query_input: input,
        query_target: target,
        time_mask,
        joint_mask,
    })
}
