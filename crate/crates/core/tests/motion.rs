use proptest::prelude::*;

use hic::motion::{
    derive_task, derive_task_with_ratio, make_joint_mask, make_time_mask, pad_virtual_joints,
    unify_pose3d, Domain, Modality, CHANNELS, SHAPE_PARAMS,
};
use hic::numeric::NdBuffer;
use hic::synth::{synthesize, SynthConfig};

/// (domain, input modality, input reads the future half, target modality,
/// target reads the future half, masked input)
const TABLE: [(Domain, Modality, bool, Modality, bool, bool); 10] = [
    (Domain::PE, Modality::Pose2D, false, Modality::Pose3D, false, false),
    (Domain::FPE, Modality::Pose2D, false, Modality::Pose3D, true, false),
    (Domain::MR, Modality::Pose2D, false, Modality::MeshParams, false, false),
    (Domain::FMR, Modality::Pose2D, false, Modality::MeshParams, true, false),
    (Domain::MPPose, Modality::Pose3D, false, Modality::Pose3D, true, false),
    (Domain::MIBPose, Modality::Pose3D, false, Modality::Pose3D, false, true),
    (Domain::JCPose, Modality::Pose3D, false, Modality::Pose3D, false, true),
    (Domain::MPMesh, Modality::MeshParams, false, Modality::MeshParams, true, false),
    (Domain::MIBMesh, Modality::MeshParams, false, Modality::MeshParams, false, true),
    (Domain::JCMesh, Modality::MeshParams, false, Modality::MeshParams, false, true),
];

fn half(values: &NdBuffer, f: usize, future: bool) -> &[f64] {
    let row = values.len() / values.shape()[0];
    let start = if future { f * row } else { 0 };
    &values.data()[start..start + f * row]
}

#[test]
fn derived_tasks_follow_the_domain_table() {
    let ds = synthesize(&SynthConfig {
        clips: 3,
        frames: 6,
        joints: 7,
        families: 2,
        seed: 11,
    })
    .unwrap();
    for clip in &ds.clips {
        for (d, im, ifut, tm, tfut, masked) in TABLE {
            let t = derive_task(clip, d, 5).unwrap();
            assert_eq!(t.query_input.values().shape(), &[6, 7, CHANNELS]);
            assert_eq!(t.query_target.values().shape(), &[6, 7, CHANNELS]);
            assert_eq!(t.query_input.modality(), im);
            assert_eq!(t.query_target.modality(), tm);
            let src_t = clip.modality(tm).values();
            assert_eq!(t.query_target.values().data(), half(src_t, 6, tfut), "{d}");
            let src_i = half(clip.modality(im).values(), 6, ifut);
            let got = t.query_input.values().data();
            if masked {
                let kept = |i: usize| match (&t.time_mask, &t.joint_mask) {
                    (Some(m), None) => m[i / (7 * CHANNELS)] == 1,
                    (None, Some(m)) => m[(i / CHANNELS) % 7] == 1,
                    other => panic!("{d}: masks {other:?}"),
                };
                for i in 0..got.len() {
                    assert_eq!(got[i], if kept(i) { src_i[i] } else { 0.0 });
                }
            } else {
                assert_eq!(got, src_i);
                assert!(t.time_mask.is_none() && t.joint_mask.is_none());
            }
            if tm == Modality::MeshParams {
                assert_eq!(t.target_shape(), clip.mesh.shape_params());
            } else {
                assert_eq!(t.target_shape(), &[0.0; SHAPE_PARAMS]);
            }
            if im == Modality::Pose2D {
                assert!(got.chunks(3).all(|p| p[2] == 0.0));
            }
        }
    }
}

#[test]
fn domain_codes_round_trip() {
    for d in Domain::ALL {
        assert_eq!(d.code().parse::<Domain>().unwrap(), d);
        assert_eq!(Domain::from_index(d.index()).unwrap(), d);
    }
    assert_eq!(
        Domain::parse_list("PE, mp-p,MIB(P)").unwrap(),
        vec![Domain::PE, Domain::MPPose, Domain::MIBPose]
    );
    assert!("XYZ".parse::<Domain>().is_err());
}

#[test]
fn derivation_is_deterministic_per_seed() {
    let ds = synthesize(&SynthConfig {
        clips: 1,
        frames: 16,
        joints: 5,
        families: 1,
        seed: 2,
    })
    .unwrap();
    let a = derive_task(&ds.clips[0], Domain::MIBMesh, 9).unwrap();
    assert_eq!(a, derive_task(&ds.clips[0], Domain::MIBMesh, 9).unwrap());
    let differs = (0..20).any(|s| derive_task(&ds.clips[0], Domain::MIBMesh, s).unwrap() != a);
    assert!(differs);
}

proptest! {
    #[test]
    fn time_mask_law(frames in 2usize..40, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = make_time_mask(frames, ratio, seed).unwrap();
        let masked = m.iter().filter(|&&v| v == 0).count();
        let expect = ((ratio * frames as f64 + 1e-9).floor() as usize).min(frames - 2);
        prop_assert_eq!(masked, expect);
        prop_assert_eq!(m[0], 1);
        prop_assert_eq!(m[frames - 1], 1);
    }

    #[test]
    fn joint_mask_law(
        joints in 1usize..30,
        native_frac in 0.1f64..=1.0,
        ratio in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let native = ((joints as f64 * native_frac).ceil() as usize).max(1);
        let m = make_joint_mask(joints, 0, ratio, seed, Some(native)).unwrap();
        prop_assert_eq!(m[0], 1);
        prop_assert!(m[native..].iter().all(|&v| v == 1));
        let masked = m.iter().filter(|&&v| v == 0).count();
        let expect = ((ratio * native as f64 + 1e-9).floor() as usize).min(native - 1);
        prop_assert_eq!(masked, expect);
    }

    #[test]
    fn masked_inputs_keep_unmasked_values(seed in any::<u64>(), ratio in 0.0f64..=1.0) {
        let ds = synthesize(&SynthConfig { clips: 1, frames: 5, joints: 4, families: 1, seed: 0 }).unwrap();
        let t = derive_task_with_ratio(&ds.clips[0], Domain::MIBPose, seed, ratio).unwrap();
        let mask = t.time_mask.unwrap();
        let src = ds.clips[0].pose3d.values().data();
        for (i, v) in t.query_input.values().data().iter().enumerate() {
            let f = i / (4 * CHANNELS);
            prop_assert_eq!(*v, if mask[f] == 1 { src[i] } else { 0.0 });
        }
    }

    #[test]
    fn padding_keeps_native_count(f in 1usize..4, j in 1usize..5, extra in 0usize..4) {
        let s = unify_pose3d(&NdBuffer::filled(&[f, j, 3], 1.5)).unwrap();
        let p = pad_virtual_joints(&s, j + extra).unwrap();
        prop_assert_eq!(p.native_joints(), j);
        prop_assert_eq!(p.joints(), j + extra);
        for (i, v) in p.values().data().iter().enumerate() {
            let joint = (i / 3) % (j + extra);
            prop_assert_eq!(*v, if joint < j { 1.5 } else { 0.0 });
        }
    }
}
