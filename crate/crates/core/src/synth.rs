//! Deterministic synthetic motion corpora.
//!
//! Clips are sinusoidal limb trajectories around a rest skeleton. Each clip
//! belongs to one of a few planted motion families that share frequency
//! and phase templates. All values pass through `f32` so that files written
//! by [`crate::io`] read back to identical values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HicError, Result};
use crate::motion::{
    reorganize_mesh_params, unify_pose2d, unify_pose3d, MotionClip, MotionSequence, CHANNELS,
    SHAPE_PARAMS,
};
use crate::numeric::NdBuffer;
use crate::xfusion::SMPL_PARENTS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clips: usize,
    /// Task window `F`; clips hold `2F` frames.
    pub frames: usize,
    pub joints: usize,
    /// Planted motion families.
    pub families: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips: 64,
            frames: 16,
            joints: 24,
            families: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("clips", self.clips),
            ("frames", self.frames),
            ("joints", self.joints),
            ("families", self.families),
        ] {
            if v == 0 {
                return Err(HicError::config(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// A collection of clips sharing `[2F, J, 3]` extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub joints: usize,
    /// Millimetres per stored length unit.
    pub length_unit_mm: f64,
    pub clips: Vec<MotionClip>,
}

impl Dataset {
    pub fn new(clips: Vec<MotionClip>, length_unit_mm: f64) -> Result<Dataset> {
        let first = clips
            .first()
            .ok_or_else(|| HicError::State("dataset has no clips".into()))?;
        let (f, j) = (first.window_frames(), first.joints());
        for c in &clips {
            if c.window_frames() != f || c.joints() != j {
                return Err(HicError::dim(format!(
                    "clip {} has window {} and {} joints, expected {f} and {j}",
                    c.id,
                    c.window_frames(),
                    c.joints()
                )));
            }
        }
        Ok(Dataset {
            frames: f,
            joints: j,
            length_unit_mm,
            clips,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

struct Family {
    omega: f64,
    phase: Vec<f64>,
    amp: Vec<[f64; 3]>,
}

fn rest_skeleton(joints: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut rest = vec![[0.0; 3]; joints];
    for j in 1..joints {
        let parent = SMPL_PARENTS.get(j).copied().flatten().unwrap_or(0);
        let bone = [
            rng.gen_range(-0.15..0.15),
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.1..0.1),
        ];
        for c in 0..3 {
            rest[j][c] = rest[parent][c] + bone[c];
        }
    }
    rest
}

fn clip_from_family(
    id: u64,
    family: usize,
    fam: &Family,
    rest: &[[f64; 3]],
    frames2: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MotionClip> {
    let j = rest.len();
    let omega = fam.omega * rng.gen_range(0.9..1.1);
    let shift = rng.gen_range(-0.3..0.3);
    let gain = rng.gen_range(0.8..1.2);
    let mut p3 = Vec::with_capacity(frames2 * j * 3);
    let mut theta = Vec::with_capacity(frames2 * j * 3);
    for t in 0..frames2 {
        for ji in 0..j {
            let arg = omega * t as f64 + fam.phase[ji] + shift;
            for c in 0..3 {
                let wave = (arg + c as f64 * 0.7).sin();
                p3.push(round32(rest[ji][c] + gain * fam.amp[ji][c] * wave));
                theta.push(round32(0.5 * gain * fam.amp[ji][c] * (arg + c as f64).cos()));
            }
        }
    }
    let p2: Vec<f64> = p3.chunks(3).flat_map(|v| [v[0], v[1]]).collect();
    let beta: Vec<f64> = (0..SHAPE_PARAMS).map(|_| round32(rng.gen_range(-1.0..1.0))).collect();

    let pose3d = unify_pose3d(&NdBuffer::new(vec![frames2, j, CHANNELS], p3)?)?;
    let pose2d = unify_pose2d(&NdBuffer::new(vec![frames2, j, 2], p2)?)?;
    let mesh = reorganize_mesh_params(&NdBuffer::new(vec![frames2, j * CHANNELS], theta)?, &beta)?;
    MotionClip::new(id, format!("synth/family{family}"), pose2d, pose3d, mesh)
}

/// Generates a corpus of `config.clips` clips, assigning clip `i` to
/// family `i mod families`.
pub fn synthesize(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rest = rest_skeleton(config.joints, &mut rng);
    let families: Vec<Family> = (0..config.families)
        .map(|_| Family {
            omega: rng.gen_range(0.2..0.8),
            phase: (0..config.joints).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
            amp: (0..config.joints)
                .map(|ji| {
                    if ji == 0 {
                        [0.0; 3]
                    } else {
                        [0, 1, 2].map(|_| rng.gen_range(0.02..0.12))
                    }
                })
                .collect(),
        })
        .collect();
    let clips = (0..config.clips)
        .map(|i| {
            let fam = i % config.families;
            clip_from_family(i as u64, fam, &families[fam], &rest, 2 * config.frames, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clips, 1000.0)
}

/// Pose sequences drawn from two tight clusters plus a few far outliers.
///
/// Cluster members are small perturbations of two centres; outliers are
/// displaced along random directions by `outlier_radius`.
pub fn planted_clusters(
    per_cluster: usize,
    outliers: usize,
    frames: usize,
    joints: usize,
    seed: u64,
) -> Result<Vec<MotionSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = frames * joints * CHANNELS;
    let centre = |rng: &mut ChaCha8Rng, r: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-r..r)).collect() };
    let centres = [centre(&mut rng, 1.0), centre(&mut rng, 1.0)];
    let mut out = Vec::with_capacity(2 * per_cluster + outliers);
    for c in &centres {
        for _ in 0..per_cluster {
            let v: Vec<f64> = c.iter().map(|x| x + rng.gen_range(-0.1..0.1)).collect();
            out.push(unify_pose3d(&NdBuffer::new(vec![frames, joints, CHANNELS], v)?)?);
        }
    }
    for _ in 0..outliers {
        let base = &centres[rng.gen_range(0..2)];
        let v: Vec<f64> = base.iter().map(|x| x + rng.gen_range(-4.0..4.0)).collect();
        out.push(unify_pose3d(&NdBuffer::new(vec![frames, joints, CHANNELS], v)?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_projected() {
        let cfg = SynthConfig {
            clips: 3,
            frames: 4,
            joints: 6,
            families: 2,
            seed: 9,
        };
        let a = synthesize(&cfg).unwrap();
        assert_eq!(a, synthesize(&cfg).unwrap());
        for clip in &a.clips {
            let (d2, d3) = (clip.pose2d.values().data(), clip.pose3d.values().data());
            for (p2, p3) in d2.chunks(3).zip(d3.chunks(3)) {
                assert_eq!(p2, &[p3[0], p3[1], 0.0]);
            }
            for v in clip.mesh.values().data() {
                assert_eq!(*v, *v as f32 as f64);
            }
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = SynthConfig {
            frames: 0,
            ..SynthConfig::default()
        };
        let msg = synthesize(&cfg).unwrap_err().to_string();
        assert!(msg.contains("frames"), "{msg}");
    }
}
