//! X-Fusion network: contextual encoding, multi-level aggregation in the
//! temporal and spatial views, cross-level update with a shared compression
//! matrix, and prompt-to-query context injection.
//!
//! Every operation is built from [`Tape`] primitives, so analytic
//! gradients come from the tape and can be checked with
//! [`grad_check`](crate::numeric::grad_check).

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HicError, Result};
use crate::motion::{MotionSequence, TaskSample, CHANNELS, ROOT_JOINT, SHAPE_PARAMS};
use crate::numeric::{NdBuffer, Tape, Var};

/// Number of aggregation levels (attention, graph, state space).
pub const LEVELS: usize = 3;

/// SMPL kinematic tree: parent of each of the 24 joints (root has none).
pub const SMPL_PARENTS: [Option<usize>; 24] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewOrder {
    TemporalFirst,
    SpatialFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XFusionConfig {
    pub frames: usize,
    pub joints: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Joints wired into the skeleton graph; the rest only connect to
    /// themselves.
    pub skeleton_joints: usize,
    pub view_order: ViewOrder,
}

impl Default for XFusionConfig {
    fn default() -> Self {
        XFusionConfig {
            frames: 16,
            joints: 24,
            hidden: 128,
            layers: 8,
            skeleton_joints: 24,
            view_order: ViewOrder::TemporalFirst,
        }
    }
}

impl XFusionConfig {
    pub fn toy(frames: usize, joints: usize, hidden: usize, layers: usize) -> Self {
        XFusionConfig {
            frames,
            joints,
            hidden,
            layers,
            skeleton_joints: joints,
            view_order: ViewOrder::TemporalFirst,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("frames", self.frames),
            ("joints", self.joints),
            ("hidden", self.hidden),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return Err(HicError::config(name, "must be positive"));
            }
        }
        if self.skeleton_joints > self.joints {
            return Err(HicError::config("skeleton_joints", "exceeds joints"));
        }
        Ok(())
    }
}

/// Degree-normalized `D⁻¹(A + I)` of a symmetric edge list over `n` nodes.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> NdBuffer {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(i, j) in edges {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    for row in a.chunks_mut(n) {
        let deg: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= deg);
    }
    NdBuffer::new(vec![n, n], a).expect("finite adjacency")
}

/// Skeleton graph over `joints`: SMPL parent edges among the first
/// `skeleton_joints` joints.
pub fn skeleton_adjacency(joints: usize, skeleton_joints: usize) -> NdBuffer {
    let edges: Vec<(usize, usize)> = (0..skeleton_joints.min(SMPL_PARENTS.len()))
        .filter_map(|j| SMPL_PARENTS[j].filter(|&p| p < skeleton_joints).map(|p| (j, p)))
        .collect();
    normalized_adjacency(joints, &edges)
}

/// Path graph over frames (`t ↔ t ± 1`).
pub fn temporal_adjacency(frames: usize) -> NdBuffer {
    let edges: Vec<(usize, usize)> = (1..frames).map(|t| (t - 1, t)).collect();
    normalized_adjacency(frames, &edges)
}

/// Tensor indices of one view's three aggregation levels.
#[derive(Debug, Clone)]
pub struct LevelIndex {
    pub attn_q: usize,
    pub attn_k: usize,
    pub attn_v: usize,
    pub attn_o: usize,
    pub graph_w: usize,
    pub ssm_in: usize,
    /// Pre-activation of the transition; the recurrence uses `tanh` of it.
    pub ssm_a: usize,
    pub ssm_b: usize,
    pub ssm_c: usize,
    pub ssm_d: usize,
}

#[derive(Debug, Clone)]
pub struct BlockIndex {
    pub temporal: LevelIndex,
    pub spatial: LevelIndex,
    pub compress: usize,
    pub compress_bias: usize,
    pub norm_t: (usize, usize),
    pub norm_s: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct EncoderIndex {
    pub weight: usize,
    pub bias: usize,
    pub pos_spatial: usize,
    pub pos_temporal: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub encoder_q: EncoderIndex,
    pub encoder_p: EncoderIndex,
    /// `(query block, prompt block)` per layer.
    pub layers: Vec<(BlockIndex, BlockIndex)>,
    pub head_w: usize,
    pub head_b: usize,
    pub shape_w: usize,
    pub shape_b: usize,
}

/// All learnable network tensors, addressed through a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct XFusionParams {
    pub config: XFusionConfig,
    pub names: Vec<String>,
    pub tensors: Vec<NdBuffer>,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<NdBuffer>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: NdBuffer) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let rng = &mut *self.rng;
        let t = NdBuffer::from_fn(shape, |_| rng.gen_range(-bound..=bound)).unwrap();
        self.push(name, t)
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.push(name, NdBuffer::filled(shape, v))
    }

    fn levels(&mut self, p: &str, h: usize) -> LevelIndex {
        let attn_q = self.linear(format!("{p}.attn.q"), h, h);
        let attn_k = self.linear(format!("{p}.attn.k"), h, h);
        let attn_v = self.linear(format!("{p}.attn.v"), h, h);
        let attn_o = self.linear(format!("{p}.attn.o"), h, h);
        let graph_w = self.linear(format!("{p}.graph.w"), h, h);
        let ssm_in = self.linear(format!("{p}.ssm.in"), h, h);
        let rng = &mut *self.rng;
        let decay: Vec<f64> = (0..h).map(|_| rng.gen_range(0.5..0.9)).collect();
        let ssm_a = self.push(
            format!("{p}.ssm.a"),
            NdBuffer::new(vec![h], decay.iter().map(|a: &f64| a.atanh()).collect()).unwrap(),
        );
        let ssm_b = self.push(
            format!("{p}.ssm.b"),
            NdBuffer::new(vec![h], decay.iter().map(|a| 1.0 - a).collect()).unwrap(),
        );
        let ssm_c = self.constant(format!("{p}.ssm.c"), &[h], 1.0);
        let ssm_d = self.constant(format!("{p}.ssm.d"), &[h], 1.0);
        LevelIndex {
            attn_q,
            attn_k,
            attn_v,
            attn_o,
            graph_w,
            ssm_in,
            ssm_a,
            ssm_b,
            ssm_c,
            ssm_d,
        }
    }

    fn block(&mut self, p: &str, h: usize) -> BlockIndex {
        let temporal = self.levels(&format!("{p}.temporal"), h);
        let spatial = self.levels(&format!("{p}.spatial"), h);
        // Zero compression and equal biases: uniform influence at start.
        let compress = self.constant(format!("{p}.compress.w"), &[LEVELS, LEVELS * h], 0.0);
        let compress_bias = self.constant(format!("{p}.compress.b"), &[LEVELS], 0.0);
        let norm_t = (
            self.constant(format!("{p}.norm_t.gain"), &[h], 1.0),
            self.constant(format!("{p}.norm_t.bias"), &[h], 0.0),
        );
        let norm_s = (
            self.constant(format!("{p}.norm_s.gain"), &[h], 1.0),
            self.constant(format!("{p}.norm_s.bias"), &[h], 0.0),
        );
        BlockIndex {
            temporal,
            spatial,
            compress,
            compress_bias,
            norm_t,
            norm_s,
        }
    }

    fn encoder(&mut self, p: &str, c: &XFusionConfig) -> EncoderIndex {
        let weight = self.linear(format!("{p}.w"), 2 * CHANNELS, c.hidden);
        let bias = self.constant(format!("{p}.b"), &[c.hidden], 0.0);
        let pos_spatial = self.uniform(format!("{p}.pos_spatial"), &[c.joints, c.hidden], 0.02);
        let pos_temporal = self.uniform(format!("{p}.pos_temporal"), &[c.frames, 1, c.hidden], 0.02);
        EncoderIndex {
            weight,
            bias,
            pos_spatial,
            pos_temporal,
        }
    }
}

fn build_layout(config: &XFusionConfig, rng: &mut ChaCha8Rng) -> (Layout, Vec<String>, Vec<NdBuffer>) {
    let h = config.hidden;
    let mut b = Builder {
        rng,
        names: Vec::new(),
        tensors: Vec::new(),
    };
    let encoder_q = b.encoder("encoder_q", config);
    let encoder_p = b.encoder("encoder_p", config);
    let layers = (0..config.layers)
        .map(|k| (b.block(&format!("layer{k}.query"), h), b.block(&format!("layer{k}.prompt"), h)))
        .collect();
    let head_w = b.linear("head.w".into(), h, CHANNELS);
    let head_b = b.constant("head.b".into(), &[CHANNELS], 0.0);
    let shape_w = b.linear("shape_head.w".into(), h, SHAPE_PARAMS);
    let shape_b = b.constant("shape_head.b".into(), &[SHAPE_PARAMS], 0.0);
    let layout = Layout {
        encoder_q,
        encoder_p,
        layers,
        head_w,
        head_b,
        shape_w,
        shape_b,
    };
    (layout, b.names, b.tensors)
}

impl XFusionParams {
    /// Seeded initialization.
    pub fn init(config: XFusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, names, tensors) = build_layout(&config, &mut rng);
        Ok(XFusionParams {
            config,
            names,
            tensors,
        })
    }

    /// Tensor positions; depends only on the configuration.
    pub fn layout(&self) -> Layout {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_layout(&self.config, &mut rng).0
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the configuration.
    pub fn from_tensors(config: XFusionConfig, named: Vec<(String, NdBuffer)>) -> Result<Self> {
        let reference = XFusionParams::init(config.clone(), 0)?;
        if named.len() != reference.tensors.len() {
            return Err(HicError::dim(format!(
                "expected {} tensors, got {}",
                reference.tensors.len(),
                named.len()
            )));
        }
        for ((name, t), (rn, rt)) in named.iter().zip(reference.names.iter().zip(&reference.tensors)) {
            if name != rn || t.shape() != rt.shape() {
                return Err(HicError::dim(format!(
                    "tensor `{name}` {:?} does not match expected `{rn}` {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(XFusionParams {
            config,
            names,
            tensors,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(NdBuffer::len).sum()
    }

    /// Records every tensor as a tape leaf, in layout order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Aggregation level tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Attention,
    Graph,
    StateSpace,
}

impl Level {
    pub const ALL: [Level; LEVELS] = [Level::Attention, Level::Graph, Level::StateSpace];
}

impl FromStr for Level {
    type Err = HicError;

    fn from_str(s: &str) -> Result<Level> {
        match s {
            "attention" => Ok(Level::Attention),
            "graph" => Ok(Level::Graph),
            "ssm" => Ok(Level::StateSpace),
            other => Err(HicError::Domain(format!("unknown aggregation level `{other}`"))),
        }
    }
}

/// Tape handles of one view's level weights.
#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    pub attn: [Var; 4],
    pub graph_w: Var,
    pub ssm_in: Var,
    pub ssm_a: Var,
    pub ssm_b: Var,
    pub ssm_c: Var,
    pub ssm_d: Var,
}

impl LevelVars {
    pub fn from_layout(idx: &LevelIndex, w: &[Var]) -> Self {
        LevelVars {
            attn: [w[idx.attn_q], w[idx.attn_k], w[idx.attn_v], w[idx.attn_o]],
            graph_w: w[idx.graph_w],
            ssm_in: w[idx.ssm_in],
            ssm_a: w[idx.ssm_a],
            ssm_b: w[idx.ssm_b],
            ssm_c: w[idx.ssm_c],
            ssm_d: w[idx.ssm_d],
        }
    }
}

/// One aggregation level over a view tensor `h[B, T, H]` (`B` independent
/// sequences of length `T`), giving `[B, T, H']`.
///
/// - attention: single-head scaled dot-product over `T`, then output map;
/// - graph: `Â · h · W`;
/// - state space: `u = h · W_in`, then the causal diagonal recurrence.
pub fn aggregate_level(
    tape: &mut Tape,
    h: Var,
    level: Level,
    weights: &LevelVars,
    adjacency: &Arc<NdBuffer>,
) -> Result<Var> {
    if tape.shape(h).len() != 3 {
        return Err(HicError::dim(format!(
            "view tensor must be [B, T, H], got {:?}",
            tape.shape(h)
        )));
    }
    match level {
        Level::Attention => {
            let [wq, wk, wv, wo] = weights.attn;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let kt = tape.transpose_last2(k)?;
            let scores = tape.batch_matmul(q, kt)?;
            let hp = *tape.shape(q).last().unwrap();
            let scaled = tape.scale(scores, 1.0 / (hp as f64).sqrt())?;
            let attn = tape.softmax(scaled)?;
            let mixed = tape.batch_matmul(attn, v)?;
            tape.matmul(mixed, wo)
        }
        Level::Graph => {
            let agg = tape.const_left(adjacency.clone(), h)?;
            tape.matmul(agg, weights.graph_w)
        }
        Level::StateSpace => {
            let u = tape.matmul(h, weights.ssm_in)?;
            let a = tape.tanh(weights.ssm_a)?;
            tape.ssm_scan(u, a, weights.ssm_b, weights.ssm_c, weights.ssm_d)
        }
    }
}

/// Fuses `L` level outputs `[B, T, H']` position by position:
/// `a = W·[y¹ ‖ … ‖ yᴸ] + b`, `α = softmax(a)`, `z = Σ_l α^l y^l`.
/// Returns `(z, α)` with `α` of shape `[B, T, L]`.
pub fn cross_level_update(
    tape: &mut Tape,
    levels: &[Var],
    compress: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let l = levels.len();
    let ws = tape.shape(compress).to_vec();
    let hp = *tape.shape(levels[0]).last().unwrap();
    if ws != [l, l * hp] || tape.shape(bias) != [l] {
        return Err(HicError::dim(format!(
            "{l} levels of width {hp} need compression [{l}, {}] and bias [{l}], got {ws:?} and {:?}",
            l * hp,
            tape.shape(bias)
        )));
    }
    let cat = tape.concat(levels)?;
    let wt = tape.transpose_last2(compress)?;
    let logits = tape.matmul(cat, wt)?;
    let logits = tape.add(logits, bias)?;
    let alpha = tape.softmax(logits)?;
    let z = tape.level_fuse(alpha, levels)?;
    Ok((z, alpha))
}

/// Intermediate values of one view inside a block.
#[derive(Debug, Clone)]
pub struct ViewTrace {
    /// View input `[B, T, H]`.
    pub input: Var,
    pub levels: [Var; LEVELS],
    pub fused: Var,
    pub alpha: Var,
    /// `LayerNorm(input + fused)` in view layout.
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub temporal: ViewTrace,
    pub spatial: ViewTrace,
    pub output: Var,
}

/// Tape handles of one block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub temporal: LevelVars,
    pub spatial: LevelVars,
    pub compress: Var,
    pub compress_bias: Var,
    pub norm_t: (Var, Var),
    pub norm_s: (Var, Var),
}

impl BlockVars {
    pub fn from_layout(idx: &BlockIndex, w: &[Var]) -> Self {
        BlockVars {
            temporal: LevelVars::from_layout(&idx.temporal, w),
            spatial: LevelVars::from_layout(&idx.spatial, w),
            compress: w[idx.compress],
            compress_bias: w[idx.compress_bias],
            norm_t: (w[idx.norm_t.0], w[idx.norm_t.1]),
            norm_s: (w[idx.norm_s.0], w[idx.norm_s.1]),
        }
    }
}

/// Fixed graph operators of a network.
#[derive(Debug, Clone)]
pub struct Graphs {
    pub temporal: Arc<NdBuffer>,
    pub spatial: Arc<NdBuffer>,
}

impl Graphs {
    pub fn new(config: &XFusionConfig) -> Self {
        Graphs {
            temporal: Arc::new(temporal_adjacency(config.frames)),
            spatial: Arc::new(skeleton_adjacency(config.joints, config.skeleton_joints)),
        }
    }
}

fn view_pass(
    tape: &mut Tape,
    input: Var,
    weights: &LevelVars,
    adjacency: &Arc<NdBuffer>,
    compress: Var,
    bias: Var,
    norm: (Var, Var),
) -> Result<ViewTrace> {
    let mut levels = [input; LEVELS];
    for (slot, level) in levels.iter_mut().zip(Level::ALL) {
        *slot = aggregate_level(tape, input, level, weights, adjacency)?;
    }
    let (fused, alpha) = cross_level_update(tape, &levels, compress, bias)?;
    let res = tape.add(input, fused)?;
    let output = tape.layer_norm(res, norm.0, norm.1)?;
    Ok(ViewTrace {
        input,
        levels,
        fused,
        alpha,
        output,
    })
}

/// One X-Fusion block on `h[F, J, H]`: the temporal view treats each joint
/// as a length-`F` sequence, the spatial view each frame as a length-`J`
/// sequence. Both views share the block's compression matrix and bias.
pub fn xfusion_block(
    tape: &mut Tape,
    h: Var,
    block: &BlockVars,
    graphs: &Graphs,
    order: ViewOrder,
) -> Result<BlockTrace> {
    if tape.shape(h).len() != 3 {
        return Err(HicError::dim(format!(
            "block input must be [F, J, H], got {:?}",
            tape.shape(h)
        )));
    }
    let temporal_pass = |tape: &mut Tape, x: Var| -> Result<(ViewTrace, Var)> {
        let xt = tape.swap_axes01(x)?;
        let trace = view_pass(
            tape,
            xt,
            &block.temporal,
            &graphs.temporal,
            block.compress,
            block.compress_bias,
            block.norm_t,
        )?;
        let back = tape.swap_axes01(trace.output)?;
        Ok((trace, back))
    };
    let spatial_pass = |tape: &mut Tape, x: Var| -> Result<(ViewTrace, Var)> {
        let trace = view_pass(
            tape,
            x,
            &block.spatial,
            &graphs.spatial,
            block.compress,
            block.compress_bias,
            block.norm_s,
        )?;
        let out = trace.output;
        Ok((trace, out))
    };
    let (temporal, spatial, output) = match order {
        ViewOrder::TemporalFirst => {
            let (t, mid) = temporal_pass(tape, h)?;
            let (s, out) = spatial_pass(tape, mid)?;
            (t, s, out)
        }
        ViewOrder::SpatialFirst => {
            let (s, mid) = spatial_pass(tape, h)?;
            let (t, out) = temporal_pass(tape, mid)?;
            (t, s, out)
        }
    };
    Ok(BlockTrace {
        temporal,
        spatial,
        output,
    })
}

/// Sum of the prompt and query branch features.
pub fn context_inject(tape: &mut Tape, z_prompt: Var, z_query: Var) -> Result<Var> {
    if tape.shape(z_prompt) != tape.shape(z_query) {
        return Err(HicError::dim(format!(
            "context injection of {:?} into {:?}: shapes must match",
            tape.shape(z_prompt),
            tape.shape(z_query)
        )));
    }
    tape.add(z_prompt, z_query)
}

fn encode(tape: &mut Tape, enc: &EncoderIndex, w: &[Var], x: Var, gt: Var) -> Result<Var> {
    let cat = tape.concat(&[x, gt])?;
    let lin = tape.matmul(cat, w[enc.weight])?;
    let lin = tape.add(lin, w[enc.bias])?;
    let lin = tape.add(lin, w[enc.pos_spatial])?;
    tape.add(lin, w[enc.pos_temporal])
}

/// Query and prompt contextual features:
/// `H_Q = E_Q([q_in ‖ p_gt]) + U*`, `H_P = E_P([p_in ‖ p_gt])`.
pub fn encode_context(
    tape: &mut Tape,
    layout: &Layout,
    w: &[Var],
    q_in: Var,
    p_in: Var,
    p_gt: Var,
    soft_anchor: Var,
) -> Result<(Var, Var)> {
    let (sq, sp, sg) = (tape.shape(q_in), tape.shape(p_in), tape.shape(p_gt));
    if sq != sp || sq != sg || sq.len() != 3 || sq[2] != CHANNELS {
        return Err(HicError::dim(format!(
            "query input {sq:?}, prompt input {sp:?} and prompt target {sg:?} must share [F, J, 3]"
        )));
    }
    let hq = encode(tape, &layout.encoder_q, w, q_in, p_gt)?;
    if tape.shape(hq) != tape.shape(soft_anchor) {
        return Err(HicError::dim(format!(
            "soft anchor {:?} does not match features {:?}",
            tape.shape(soft_anchor),
            tape.shape(hq)
        )));
    }
    let hq = tape.add(hq, soft_anchor)?;
    let hp = encode(tape, &layout.encoder_p, w, p_in, p_gt)?;
    Ok((hq, hp))
}

/// Network outputs on the tape.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[F, J, 3]`.
    pub prediction: Var,
    /// `[S]`.
    pub shape_params: Var,
    /// `(query block, prompt block)` per layer.
    pub blocks: Vec<(BlockTrace, BlockTrace)>,
    pub h_query: Var,
    pub h_prompt: Var,
}

/// Full dual-branch forward pass.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    config: &XFusionConfig,
    layout: &Layout,
    graphs: &Graphs,
    w: &[Var],
    q_in: Var,
    p_in: Var,
    p_gt: Var,
    soft_anchor: Var,
) -> Result<ForwardTrace> {
    let expect = [config.frames, config.joints, CHANNELS];
    if tape.shape(q_in) != expect {
        return Err(HicError::dim(format!(
            "network configured for {expect:?}, got input {:?}",
            tape.shape(q_in)
        )));
    }
    let (h_query, h_prompt) = encode_context(tape, layout, w, q_in, p_in, p_gt, soft_anchor)?;
    let (mut hq, mut hp) = (h_query, h_prompt);
    let mut blocks = Vec::with_capacity(layout.layers.len());
    for (qi, pi) in &layout.layers {
        let qb = xfusion_block(tape, hq, &BlockVars::from_layout(qi, w), graphs, config.view_order)?;
        let pb = xfusion_block(tape, hp, &BlockVars::from_layout(pi, w), graphs, config.view_order)?;
        hq = context_inject(tape, pb.output, qb.output)?;
        hp = pb.output;
        blocks.push((qb, pb));
    }
    let pred = tape.matmul(hq, w[layout.head_w])?;
    let prediction = tape.add(pred, w[layout.head_b])?;

    let n = config.frames * config.joints;
    let flat = tape.reshape(hq, &[1, n, config.hidden])?;
    let pool = Arc::new(NdBuffer::filled(&[1, n], 1.0 / n as f64));
    let pooled = tape.const_left(pool, flat)?;
    let pooled = tape.reshape(pooled, &[1, config.hidden])?;
    let beta = tape.matmul(pooled, w[layout.shape_w])?;
    let beta = tape.reshape(beta, &[SHAPE_PARAMS])?;
    let shape_params = tape.add(beta, w[layout.shape_b])?;
    Ok(ForwardTrace {
        prediction,
        shape_params,
        blocks,
        h_query,
        h_prompt,
    })
}

/// Loss term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub position: f64,
    pub velocity: f64,
    pub shape: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            position: 1.0,
            velocity: 0.5,
            shape: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("position", self.position),
            ("velocity", self.velocity),
            ("shape", self.shape),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(HicError::Domain(format!("loss weight `{name}` = {v} must be ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Scalar loss and its unweighted components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub position: Var,
    pub velocity: Option<Var>,
    pub shape: Option<Var>,
}

/// `[rows, J]` weights that average over native joints only.
fn native_mean_weights(rows: usize, joints: usize, native: usize) -> Arc<NdBuffer> {
    let w = 1.0 / (rows * native) as f64;
    Arc::new(
        NdBuffer::from_fn(&[rows, joints], |i| if i % joints < native { w } else { 0.0 }).unwrap(),
    )
}

/// Training loss of one sample.
///
/// - position: mean over frames and native joints of `‖pred − target‖₂`;
/// - velocity: the same mean over first-order frame differences of the
///   error (absent for single-frame windows);
/// - shape: mean squared error of β, for mesh-output domains only.
pub fn loss(
    tape: &mut Tape,
    prediction: Var,
    shape_params: Var,
    sample: &TaskSample,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let target = &sample.query_target;
    if tape.shape(prediction) != target.values().shape() {
        return Err(HicError::dim(format!(
            "prediction {:?} does not match target {:?}",
            tape.shape(prediction),
            target.values().shape()
        )));
    }
    let (f, j, native) = (target.frames(), target.joints(), target.native_joints());
    let tgt = tape.leaf(target.values().clone());
    let err = tape.sub(prediction, tgt)?;

    let norms = tape.row_norm(err)?;
    let weighted = tape.mul_const(norms, native_mean_weights(f, j, native))?;
    let position = tape.sum(weighted)?;
    let mut total = tape.scale(position, weights.position)?;

    let mut velocity = None;
    if f >= 2 {
        let diff = Arc::new(
            NdBuffer::from_fn(&[f - 1, f], |i| {
                let (r, c) = (i / f, i % f);
                if c == r + 1 {
                    1.0
                } else if c == r {
                    -1.0
                } else {
                    0.0
                }
            })
            .unwrap(),
        );
        let flat = tape.reshape(err, &[1, f, j * CHANNELS])?;
        let d = tape.const_left(diff, flat)?;
        let d = tape.reshape(d, &[f - 1, j, CHANNELS])?;
        let vn = tape.row_norm(d)?;
        let vw = tape.mul_const(vn, native_mean_weights(f - 1, j, native))?;
        let v = tape.sum(vw)?;
        let sv = tape.scale(v, weights.velocity)?;
        total = tape.add(total, sv)?;
        velocity = Some(v);
    }

    let mut shape = None;
    if sample.domain.outputs_mesh() {
        let tb = tape.leaf(NdBuffer::new(vec![SHAPE_PARAMS], target.shape_params().to_vec())?);
        let db = tape.sub(shape_params, tb)?;
        let sq = tape.mul(db, db)?;
        let s = tape.sum(sq)?;
        let s = tape.scale(s, 1.0 / SHAPE_PARAMS as f64)?;
        let ss = tape.scale(s, weights.shape)?;
        total = tape.add(total, ss)?;
        shape = Some(s);
    }
    Ok(LossVars {
        total,
        position,
        velocity,
        shape,
    })
}

/// Mean per-joint position error after root alignment, over frames and
/// native joints, in the data's length unit.
pub fn mpjpe(prediction: &NdBuffer, target: &MotionSequence) -> Result<f64> {
    if !target.modality().is_pose() {
        return Err(HicError::Domain(
            "MPJPE applies to pose sequences; mesh vertex error is not supported".into(),
        ));
    }
    if prediction.shape() != target.values().shape() {
        return Err(HicError::dim(format!(
            "prediction {:?} does not match target {:?}",
            prediction.shape(),
            target.values().shape()
        )));
    }
    let (f, j, native) = (target.frames(), target.joints(), target.native_joints());
    let (p, t) = (prediction.data(), target.values().data());
    let mut total = 0.0;
    for fi in 0..f {
        let root = (fi * j + ROOT_JOINT) * CHANNELS;
        for ji in 0..native {
            let o = (fi * j + ji) * CHANNELS;
            let mut sq = 0.0;
            for c in 0..CHANNELS {
                let d = (p[o + c] - p[root + c]) - (t[o + c] - t[root + c]);
                sq += d * d;
            }
            total += sq.sqrt();
        }
    }
    Ok(total / (f * native) as f64)
}

/// Mean per-joint L2 distance without alignment (rotation-parameter error
/// for mesh outputs).
pub fn mean_joint_error(prediction: &NdBuffer, target: &MotionSequence) -> Result<f64> {
    if prediction.shape() != target.values().shape() {
        return Err(HicError::dim(format!(
            "prediction {:?} does not match target {:?}",
            prediction.shape(),
            target.values().shape()
        )));
    }
    let (f, j, native) = (target.frames(), target.joints(), target.native_joints());
    let (p, t) = (prediction.data(), target.values().data());
    let mut total = 0.0;
    for fi in 0..f {
        for ji in 0..native {
            let o = (fi * j + ji) * CHANNELS;
            total += (0..CHANNELS).map(|c| (p[o + c] - t[o + c]).powi(2)).sum::<f64>().sqrt();
        }
    }
    Ok(total / (f * native) as f64)
}

/// A network ready for inference or training.
#[derive(Debug, Clone)]
pub struct XFusionNet {
    pub params: XFusionParams,
    pub layout: Layout,
    pub graphs: Graphs,
}

/// Inference result.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub motion: NdBuffer,
    pub shape_params: Vec<f64>,
    /// `(query, prompt)` influence scores per layer, each as
    /// `(temporal [J, F, L], spatial [F, J, L])`.
    pub influence: Vec<[(NdBuffer, NdBuffer); 2]>,
}

impl XFusionNet {
    pub fn new(params: XFusionParams) -> Self {
        let layout = params.layout();
        let graphs = Graphs::new(&params.config);
        XFusionNet {
            params,
            layout,
            graphs,
        }
    }

    pub fn config(&self) -> &XFusionConfig {
        &self.params.config
    }

    /// Records parameters and inputs on `tape` and runs the forward pass.
    pub fn trace(
        &self,
        tape: &mut Tape,
        q_in: &NdBuffer,
        p_in: &NdBuffer,
        p_gt: &NdBuffer,
        soft_anchor: &NdBuffer,
    ) -> Result<(Vec<Var>, ForwardTrace)> {
        let w = self.params.register(tape);
        let q = tape.leaf(q_in.clone());
        let p = tape.leaf(p_in.clone());
        let g = tape.leaf(p_gt.clone());
        let u = tape.leaf(soft_anchor.clone());
        let out = forward(tape, self.config(), &self.layout, &self.graphs, &w, q, p, g, u)?;
        Ok((w, out))
    }

    pub fn predict(
        &self,
        q_in: &NdBuffer,
        p_in: &NdBuffer,
        p_gt: &NdBuffer,
        soft_anchor: &NdBuffer,
    ) -> Result<Prediction> {
        let mut tape = Tape::new();
        let (_, out) = self.trace(&mut tape, q_in, p_in, p_gt, soft_anchor)?;
        let influence = out
            .blocks
            .iter()
            .map(|(q, p)| {
                [q, p].map(|b| {
                    (
                        tape.value(b.temporal.alpha).clone(),
                        tape.value(b.spatial.alpha).clone(),
                    )
                })
            })
            .collect();
        Ok(Prediction {
            motion: tape.value(out.prediction).clone(),
            shape_params: tape.value(out.shape_params).data().to_vec(),
            influence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(n: usize) -> NdBuffer {
        NdBuffer::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }).unwrap()
    }

    fn level_vars(tape: &mut Tape, h: usize) -> LevelVars {
        let i = ident(h);
        let attn = [0; 4].map(|_| tape.leaf(i.clone()));
        LevelVars {
            attn,
            graph_w: tape.leaf(i.clone()),
            ssm_in: tape.leaf(i),
            ssm_a: tape.leaf(NdBuffer::zeros(&[h])),
            ssm_b: tape.leaf(NdBuffer::filled(&[h], 1.0)),
            ssm_c: tape.leaf(NdBuffer::zeros(&[h])),
            ssm_d: tape.leaf(NdBuffer::filled(&[h], 1.0)),
        }
    }

    #[test]
    fn adjacency_properties() {
        let a = skeleton_adjacency(24, 24);
        for r in 0..24 {
            let row: f64 = (0..24).map(|c| a.get(&[r, c]).unwrap()).sum();
            assert!((row - 1.0).abs() < 1e-15);
            assert!(a.get(&[r, r]).unwrap() > 0.0);
            for c in 0..24 {
                let (x, y) = (a.get(&[r, c]).unwrap(), a.get(&[c, r]).unwrap());
                assert_eq!(x > 0.0, y > 0.0);
            }
        }
        // 23 undirected edges
        let nnz = a.data().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nnz, 24 + 2 * 23);
        // virtual joints only see themselves
        let v = skeleton_adjacency(6, 4);
        assert_eq!(v.get(&[5, 5]).unwrap(), 1.0);
        assert_eq!(v.get(&[4, 4]).unwrap(), 1.0);
        let t = temporal_adjacency(4);
        assert!((t.get(&[0, 1]).unwrap() - 0.5).abs() < 1e-15);
        assert!((t.get(&[1, 0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_single_token() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdBuffer::from_fn(&[2, 1, 3], |i| i as f64 - 2.0).unwrap());
        let mut lv = level_vars(&mut tape, 3);
        let wv = NdBuffer::from_fn(&[3, 3], |i| (i as f64 * 0.3).cos()).unwrap();
        let wo = NdBuffer::from_fn(&[3, 3], |i| (i as f64 * 0.7).sin()).unwrap();
        lv.attn[2] = tape.leaf(wv.clone());
        lv.attn[3] = tape.leaf(wo.clone());
        let adj = Arc::new(ident(1));
        let y = aggregate_level(&mut tape, x, Level::Attention, &lv, &adj).unwrap();
        let xm = tape.value(x).reshape(&[2, 3]).unwrap();
        let expect = xm.matmul(&wv).unwrap().matmul(&wo).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_and_ssm_identities() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdBuffer::from_fn(&[2, 4, 3], |i| (i as f64).sqrt()).unwrap());
        let lv = level_vars(&mut tape, 3);
        let adj = Arc::new(ident(4));
        let g = aggregate_level(&mut tape, x, Level::Graph, &lv, &adj).unwrap();
        assert_eq!(tape.value(g), tape.value(x));
        let s = aggregate_level(&mut tape, x, Level::StateSpace, &lv, &adj).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        assert!(matches!("conv".parse::<Level>(), Err(HicError::Domain(_))));
    }

    #[test]
    fn cross_level_update_examples() {
        let mut tape = Tape::new();
        let y1 = tape.leaf(NdBuffer::filled(&[1, 1, 1], 2.0));
        let y2 = tape.leaf(NdBuffer::filled(&[1, 1, 1], 4.0));
        let w = tape.leaf(NdBuffer::zeros(&[2, 2]));
        let b = tape.leaf(NdBuffer::new(vec![2], vec![3f64.ln(), 0.0]).unwrap());
        let (z, alpha) = cross_level_update(&mut tape, &[y1, y2], w, b).unwrap();
        let a = tape.value(alpha).data();
        assert!((a[0] - 0.75).abs() < 1e-15 && (a[1] - 0.25).abs() < 1e-15);
        assert!((tape.value(z).data()[0] - 2.5).abs() < 1e-15);

        let w3 = tape.leaf(NdBuffer::zeros(&[3, 3]));
        let b3 = tape.leaf(NdBuffer::zeros(&[3]));
        assert!(matches!(
            cross_level_update(&mut tape, &[y1, y2], w3, b3),
            Err(HicError::Dimension(_))
        ));
    }

    #[test]
    fn context_injection() {
        let mut tape = Tape::new();
        let a = tape.leaf(NdBuffer::from_fn(&[2, 2, 2], |i| i as f64).unwrap());
        let z = tape.leaf(NdBuffer::zeros(&[2, 2, 2]));
        let same = context_inject(&mut tape, z, a).unwrap();
        assert_eq!(tape.value(same), tape.value(a));
        let neg = tape.scale(a, -1.0).unwrap();
        let zero = context_inject(&mut tape, a, neg).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));
        let ab = context_inject(&mut tape, a, neg).unwrap();
        let ba = context_inject(&mut tape, neg, a).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba));
        let bad = tape.leaf(NdBuffer::zeros(&[2, 2, 3]));
        assert!(context_inject(&mut tape, a, bad).is_err());
    }

    #[test]
    fn default_shapes() {
        let params = XFusionParams::init(XFusionConfig::default(), 0).unwrap();
        let net = XFusionNet::new(params);
        let x = NdBuffer::zeros(&[16, 24, 3]);
        let u = NdBuffer::zeros(&[16, 24, 128]);
        let mut tape = Tape::new();
        let (_, out) = net.trace(&mut tape, &x, &x, &x, &u).unwrap();
        assert_eq!(tape.shape(out.h_query), &[16, 24, 128]);
        assert_eq!(tape.shape(out.prediction), &[16, 24, 3]);
        assert_eq!(tape.shape(out.shape_params), &[10]);
        assert_eq!(out.blocks.len(), 8);
    }

    #[test]
    fn encoder_is_affine_plus_soft_anchor() {
        let cfg = XFusionConfig::toy(3, 4, 5, 1);
        let mut params = XFusionParams::init(cfg.clone(), 1).unwrap();
        let layout = params.layout();
        for idx in [layout.encoder_q.pos_spatial, layout.encoder_q.pos_temporal] {
            params.tensors[idx] = NdBuffer::zeros(params.tensors[idx].shape());
        }
        params.tensors[layout.encoder_q.bias] =
            NdBuffer::from_fn(&[5], |i| i as f64 * 0.25).unwrap();
        let mut tape = Tape::new();
        let w = params.register(&mut tape);
        let zero = tape.leaf(NdBuffer::zeros(&[3, 4, 3]));
        let u0 = tape.leaf(NdBuffer::zeros(&[3, 4, 5]));
        let (hq, _) = encode_context(&mut tape, &layout, &w, zero, zero, zero, u0).unwrap();
        for chunk in tape.value(hq).data().chunks(5) {
            assert_eq!(chunk, &[0.0, 0.25, 0.5, 0.75, 1.0]);
        }

        let x = tape.leaf(NdBuffer::from_fn(&[3, 4, 3], |i| (i as f64).sin()).unwrap());
        let u = tape.leaf(NdBuffer::from_fn(&[3, 4, 5], |i| (i as f64).cos()).unwrap());
        let (with_u, _) = encode_context(&mut tape, &layout, &w, x, x, x, u).unwrap();
        let (without, _) = encode_context(&mut tape, &layout, &w, x, x, x, u0).unwrap();
        let diff = tape.value(with_u).sub(tape.value(without)).unwrap();
        for (d, e) in diff.data().iter().zip(tape.value(u).data()) {
            assert!((d - e).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_weights_rejected_when_negative() {
        let w = LossWeights {
            position: 1.0,
            velocity: -0.1,
            shape: 0.0,
        };
        assert!(matches!(w.validate(), Err(HicError::Domain(_))));
    }
}
