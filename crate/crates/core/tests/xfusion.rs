use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hic::motion::{derive_task, unify_pose3d, Domain, MotionSequence, Modality, TaskSample, SHAPE_PARAMS};
use hic::numeric::{grad_check, NdBuffer, Tape};
use hic::synth::{synthesize, SynthConfig};
use hic::xfusion::{
    loss, mpjpe, xfusion_block, BlockVars, Graphs, LossWeights, ViewOrder, XFusionConfig,
    XFusionNet, XFusionParams,
};
use hic::HicError;

fn rand_buf(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> NdBuffer {
    NdBuffer::from_fn(shape, |_| rng.gen_range(-r..r)).unwrap()
}

fn perturbed(cfg: XFusionConfig, seed: u64) -> XFusionParams {
    let mut p = XFusionParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors.iter_mut() {
        *t = NdBuffer::from_fn(t.shape(), |i| t.data()[i] + rng.gen_range(-0.1..0.1)).unwrap();
    }
    p
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = XFusionConfig::toy(4, 5, 8, 1);
    let params = perturbed(cfg.clone(), 1);
    let layout = params.layout();
    let graphs = Graphs::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut all = params.tensors.clone();
    all.push(rand_buf(&mut rng, &[4, 5, 8], 1.0));
    let n = params.tensors.len();
    let block = layout.layers[0].0.clone();
    let report = grad_check(
        |tape, v| {
            let b = BlockVars::from_layout(&block, &v[..n]);
            let out = xfusion_block(tape, v[n], &b, &graphs, ViewOrder::TemporalFirst)?.output;
            let sq = tape.mul(out, out)?;
            let w = tape.tanh(sq)?;
            tape.sum(w)
        },
        &all,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn brute_force_loss(pred: &NdBuffer, beta: &[f64], s: &TaskSample, w: &LossWeights) -> f64 {
    let t = &s.query_target;
    let (f, nat) = (t.frames(), t.native_joints());
    let err = |fi: usize, ji: usize, c: usize| {
        pred.get(&[fi, ji, c]).unwrap() - t.values().get(&[fi, ji, c]).unwrap()
    };
    let mut pos = 0.0;
    for fi in 0..f {
        for ji in 0..nat {
            pos += (0..3).map(|c| err(fi, ji, c).powi(2)).sum::<f64>().sqrt();
        }
    }
    pos /= (f * nat) as f64;
    let mut vel = 0.0;
    for fi in 1..f {
        for ji in 0..nat {
            vel += (0..3)
                .map(|c| (err(fi, ji, c) - err(fi - 1, ji, c)).powi(2))
                .sum::<f64>()
                .sqrt();
        }
    }
    if f > 1 {
        vel /= ((f - 1) * nat) as f64;
    }
    let mut shape = 0.0;
    if t.modality() == Modality::MeshParams {
        shape = beta
            .iter()
            .zip(t.shape_params())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / SHAPE_PARAMS as f64;
    }
    w.position * pos + w.velocity * vel + w.shape * shape
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_matches_brute_force(seed in any::<u64>(), di in 0usize..10, pw in 0.0f64..2.0, vw in 0.0f64..2.0, sw in 0.0f64..2.0) {
        let ds = synthesize(&SynthConfig { clips: 1, frames: 3, joints: 4, families: 1, seed }).unwrap();
        let sample = derive_task(&ds.clips[0], Domain::ALL[di], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = rand_buf(&mut rng, &[3, 4, 3], 1.0);
        let beta = rand_buf(&mut rng, &[SHAPE_PARAMS], 1.0);
        let w = LossWeights { position: pw, velocity: vw, shape: sw };
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone());
        let b = tape.leaf(beta.clone());
        let l = loss(&mut tape, p, b, &sample, &w).unwrap();
        let got = tape.value(l.total).scalar_value();
        let want = brute_force_loss(&pred, beta.data(), &sample, &w);
        prop_assert!((got - want).abs() < 1e-12 * want.max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn influence_scores_are_distributions(seed in any::<u64>()) {
        let cfg = XFusionConfig::toy(3, 4, 6, 2);
        let net = XFusionNet::new(perturbed(cfg, seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_buf(&mut rng, &[3, 4, 3], 1.0);
        let u = rand_buf(&mut rng, &[3, 4, 6], 0.3);
        let pred = net.predict(&x, &x, &x, &u).unwrap();
        for layer in &pred.influence {
            for (t, s) in layer {
                for a in [t, s] {
                    for row in a.data().chunks(3) {
                        prop_assert!(row.iter().all(|&v| v > 0.0));
                        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn loss_examples() {
    let ds = synthesize(&SynthConfig {
        clips: 1,
        frames: 4,
        joints: 3,
        families: 1,
        seed: 0,
    })
    .unwrap();
    let s = derive_task(&ds.clips[0], Domain::MPPose, 0).unwrap();
    let mut tape = Tape::new();
    let exact = tape.leaf(s.query_target.values().clone());
    let beta = tape.leaf(NdBuffer::zeros(&[SHAPE_PARAMS]));
    let l = loss(&mut tape, exact, beta, &s, &LossWeights::default()).unwrap();
    assert_eq!(tape.value(l.total).scalar_value(), 0.0);

    let d = [0.3, -0.4, 1.2];
    let shifted = NdBuffer::from_fn(&[4, 3, 3], |i| s.query_target.values().data()[i] + d[i % 3]).unwrap();
    let p = tape.leaf(shifted);
    let w = LossWeights {
        position: 1.0,
        velocity: 0.0,
        shape: 0.0,
    };
    let l = loss(&mut tape, p, beta, &s, &w).unwrap();
    assert!((tape.value(l.total).scalar_value() - 1.3).abs() < 1e-12);
}

fn pose(frames: usize, joints: usize, data: Vec<f64>) -> MotionSequence {
    unify_pose3d(&NdBuffer::new(vec![frames, joints, 3], data).unwrap()).unwrap()
}

#[test]
fn mpjpe_examples() {
    let t = pose(1, 2, vec![0.0; 6]);
    let p = NdBuffer::new(vec![1, 2, 3], vec![0.0, 0.0, 0.0, 3.0, 4.0, 0.0]).unwrap();
    assert_eq!(mpjpe(&p, &t).unwrap(), 2.5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = pose(3, 4, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect());
    assert_eq!(mpjpe(t.values(), &t).unwrap(), 0.0);
    let moved = NdBuffer::from_fn(&[3, 4, 3], |i| t.values().data()[i] + [5.0, -2.0, 0.25][i % 3]).unwrap();
    assert!(mpjpe(&moved, &t).unwrap() < 1e-12);
    let mesh = MotionSequence::new(NdBuffer::zeros(&[1, 2, 3]), Modality::MeshParams, 2, vec![0.0; 10]).unwrap();
    assert!(matches!(mpjpe(&p, &mesh), Err(HicError::Domain(_))));
}

#[test]
fn forward_is_deterministic_and_uses_the_prompt() {
    let cfg = XFusionConfig::toy(3, 4, 6, 2);
    let net = XFusionNet::new(perturbed(cfg, 4));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = rand_buf(&mut rng, &[3, 4, 3], 1.0);
    let p = rand_buf(&mut rng, &[3, 4, 3], 1.0);
    let zero = NdBuffer::zeros(&[3, 4, 3]);
    let u0 = NdBuffer::zeros(&[3, 4, 6]);
    let a = net.predict(&q, &p, &p, &u0).unwrap();
    let b = net.predict(&q, &p, &p, &u0).unwrap();
    assert_eq!(a.motion, b.motion);
    assert_eq!(a.shape_params, b.shape_params);
    let c = net.predict(&q, &zero, &zero, &u0).unwrap();
    assert_ne!(a.motion, c.motion);
    // A zeroed prompt and zero refinement leave nothing anchor-specific.
    let d = net.predict(&q, &zero, &zero, &NdBuffer::zeros(&[3, 4, 6])).unwrap();
    assert_eq!(c.motion, d.motion);
}

#[test]
fn joint_permutation_is_not_a_symmetry() {
    let cfg = XFusionConfig::toy(2, 4, 6, 1);
    let net = XFusionNet::new(perturbed(cfg, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_buf(&mut rng, &[2, 4, 3], 1.0);
    let perm = [1usize, 0, 3, 2];
    let permute = |b: &NdBuffer| {
        NdBuffer::from_fn(b.shape(), |i| {
            let (f, j, c) = (i / 12, (i / 3) % 4, i % 3);
            b.get(&[f, perm[j], c]).unwrap()
        })
        .unwrap()
    };
    let u = NdBuffer::zeros(&[2, 4, 6]);
    let y = net.predict(&x, &x, &x, &u).unwrap().motion;
    let xp = permute(&x);
    let yp = net.predict(&xp, &xp, &xp, &u).unwrap().motion;
    assert_ne!(permute(&y), yp);
}

#[test]
fn view_order_switch_changes_computation() {
    let mut cfg = XFusionConfig::toy(3, 4, 6, 1);
    let params = perturbed(cfg.clone(), 6);
    cfg.view_order = ViewOrder::SpatialFirst;
    let mut swapped = params.clone();
    swapped.config = cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_buf(&mut rng, &[3, 4, 3], 1.0);
    let u = NdBuffer::zeros(&[3, 4, 6]);
    let a = XFusionNet::new(params).predict(&x, &x, &x, &u).unwrap().motion;
    let b = XFusionNet::new(swapped).predict(&x, &x, &x, &u).unwrap().motion;
    assert_eq!(a.shape(), b.shape());
    assert_ne!(a, b);
}

#[test]
fn shape_mismatches_are_dimension_errors() {
    let net = XFusionNet::new(XFusionParams::init(XFusionConfig::toy(3, 4, 6, 1), 0).unwrap());
    let x = NdBuffer::zeros(&[3, 4, 3]);
    let bad = NdBuffer::zeros(&[3, 5, 3]);
    let u = NdBuffer::zeros(&[3, 4, 6]);
    assert!(matches!(net.predict(&bad, &bad, &bad, &u), Err(HicError::Dimension(_))));
    assert!(matches!(net.predict(&x, &bad, &x, &u), Err(HicError::Dimension(_))));
    assert!(matches!(
        net.predict(&x, &x, &x, &NdBuffer::zeros(&[3, 4, 5])),
        Err(HicError::Dimension(_))
    ));
}

#[test]
fn ssm_transition_is_stable_at_init() {
    let p = XFusionParams::init(XFusionConfig::default(), 3).unwrap();
    for (name, t) in p.names.iter().zip(&p.tensors) {
        if name.ends_with("ssm.a") {
            assert!(t.data().iter().all(|v| v.tanh().abs() < 1.0));
        }
        if name.ends_with("compress.w") {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn from_tensors_checks_names_and_shapes() {
    let cfg = XFusionConfig::toy(2, 3, 4, 1);
    let p = XFusionParams::init(cfg.clone(), 0).unwrap();
    let named: Vec<_> = p.names.iter().cloned().zip(p.tensors.iter().cloned()).collect();
    assert_eq!(XFusionParams::from_tensors(cfg.clone(), named.clone()).unwrap(), p);
    let mut wrong = named;
    wrong[0].1 = NdBuffer::zeros(&[1]);
    assert!(XFusionParams::from_tensors(cfg, wrong).is_err());
}
