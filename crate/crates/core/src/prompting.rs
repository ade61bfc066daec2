//! Relative motion similarity, max-min anchor sampling and prompt retrieval.
//!
//! Similarity is the negative mean per-joint Euclidean distance between
//! two unified sequences. Anchor sampling starts from the canonical body
//! and repeatedly adds the unsampled sequence whose best similarity to the
//! current anchors is lowest. All argmin/argmax reductions break ties
//! toward the lowest index.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HicError, Result};
use crate::motion::{canonical_tbody, Domain, MotionSequence, TaskSample, CHANNELS};
use crate::numeric::NdBuffer;

/// One sequence of the sampling corpus with its task target.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub input: MotionSequence,
    pub target: MotionSequence,
    pub domain: Option<Domain>,
}

impl From<TaskSample> for CorpusEntry {
    fn from(s: TaskSample) -> Self {
        CorpusEntry {
            input: s.query_input,
            target: s.query_target,
            domain: Some(s.domain),
        }
    }
}

/// Builds a corpus of plain sequences whose target is themselves.
pub fn corpus_from_sequences(seqs: &[MotionSequence]) -> Vec<CorpusEntry> {
    seqs.iter()
        .map(|s| CorpusEntry {
            input: s.clone(),
            target: s.clone(),
            domain: None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    LowestIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMethod {
    Sps,
    Random,
    Cluster,
}

impl std::str::FromStr for SamplingMethod {
    type Err = HicError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sps" => Ok(SamplingMethod::Sps),
            "random" => Ok(SamplingMethod::Random),
            "cluster" => Ok(SamplingMethod::Cluster),
            other => Err(HicError::Domain(format!(
                "unknown sampling method `{other}` (expected sps, random or cluster)"
            ))),
        }
    }
}

/// A hard anchor: a stored prompt pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub input: MotionSequence,
    pub target: MotionSequence,
    pub domain: Option<Domain>,
    /// Corpus position; `None` for the canonical body.
    pub source_index: Option<usize>,
}

/// Learnable rank-1 feature refinement `U = W₁ W₂` of one anchor, with
/// `w1: [F, J, 1]` and `w2: [1, 1, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAnchor {
    pub w1: NdBuffer,
    pub w2: NdBuffer,
}

impl SoftAnchor {
    /// `W₁ = 1`, `W₂ = 0`: the refinement starts at zero but receives a
    /// non-zero gradient on `W₂` from the first step.
    pub fn init(frames: usize, joints: usize, hidden: usize) -> SoftAnchor {
        SoftAnchor {
            w1: NdBuffer::filled(&[frames, joints, 1], 1.0),
            w2: NdBuffer::zeros(&[1, 1, hidden]),
        }
    }

    /// `out[f, j, h] = w1[f, j, 0] · w2[0, 0, h]`.
    pub fn value(&self) -> NdBuffer {
        soft_anchor_value(&self.w1, &self.w2).expect("soft anchor factors are well formed")
    }
}

/// Outer-product broadcast of the two soft-anchor factors.
pub fn soft_anchor_value(w1: &NdBuffer, w2: &NdBuffer) -> Result<NdBuffer> {
    let (s1, s2) = (w1.shape(), w2.shape());
    if s1.len() != 3 || s1[2] != 1 || s2.len() != 3 || s2[0] != 1 || s2[1] != 1 {
        return Err(HicError::dim(format!(
            "soft anchor factors must be [F, J, 1] and [1, 1, H], got {s1:?} and {s2:?}"
        )));
    }
    let h = s2[2];
    let mut out = Vec::with_capacity(w1.len() * h);
    for &a in w1.data() {
        out.extend(w2.data().iter().map(|&b| a * b));
    }
    crate::numeric::finite_or_err("soft_anchor", vec![s1[0], s1[1], h], out)
}

/// Output of anchor sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub soft: Vec<SoftAnchor>,
    pub requested_k: usize,
    pub method: SamplingMethod,
    pub tie_break: TieBreak,
    pub fingerprint: String,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.anchors[0].input.frames()
    }

    pub fn joints(&self) -> usize {
        self.anchors[0].input.joints()
    }

    pub fn hidden(&self) -> usize {
        self.soft[0].w2.shape()[2]
    }

    /// Source corpus indices of the anchors (`None` for the canonical body).
    pub fn source_indices(&self) -> Vec<Option<usize>> {
        self.anchors.iter().map(|a| a.source_index).collect()
    }

    fn build(
        corpus: &[CorpusEntry],
        picked: &[Option<usize>],
        requested_k: usize,
        method: SamplingMethod,
        hidden: usize,
    ) -> AnchorSet {
        let (f, j) = (corpus[0].input.frames(), corpus[0].input.joints());
        let anchors: Vec<Anchor> = picked
            .iter()
            .map(|&p| match p {
                None => {
                    let t = canonical_tbody(f, j);
                    Anchor {
                        input: t.clone(),
                        target: t,
                        domain: None,
                        source_index: None,
                    }
                }
                Some(i) => Anchor {
                    input: corpus[i].input.clone(),
                    target: corpus[i].target.clone(),
                    domain: corpus[i].domain,
                    source_index: Some(i),
                },
            })
            .collect();
        let soft = (0..anchors.len()).map(|_| SoftAnchor::init(f, j, hidden)).collect();
        AnchorSet {
            anchors,
            soft,
            requested_k,
            method,
            tie_break: TieBreak::LowestIndex,
            fingerprint: corpus_fingerprint(corpus),
        }
    }
}

/// SHA-256 over the corpus inputs, hex encoded (first 16 bytes).
pub fn corpus_fingerprint(corpus: &[CorpusEntry]) -> String {
    let mut h = Sha256::new();
    h.update((corpus.len() as u64).to_le_bytes());
    for e in corpus {
        for &d in e.input.values().shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in e.input.values().data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
}

fn check_same_shape(x: &MotionSequence, y: &MotionSequence) -> Result<()> {
    if x.values().shape() != y.values().shape() {
        return Err(HicError::dim(format!(
            "similarity of {:?} and {:?}: sequences must share [F, J, C]",
            x.values().shape(),
            y.values().shape()
        )));
    }
    Ok(())
}

/// `−(1/(F·J)) Σ_f Σ_j ‖x_{f,j} − y_{f,j}‖₂`.
pub fn similarity(x: &MotionSequence, y: &MotionSequence) -> Result<f64> {
    check_same_shape(x, y)?;
    Ok(similarity_unchecked(x, y))
}

fn similarity_unchecked(x: &MotionSequence, y: &MotionSequence) -> f64 {
    let (a, b) = (x.values().data(), y.values().data());
    let mut total = 0.0;
    for (p, q) in a.chunks_exact(CHANNELS).zip(b.chunks_exact(CHANNELS)) {
        let mut sq = 0.0;
        for c in 0..CHANNELS {
            let d = p[c] - q[c];
            sq += d * d;
        }
        total += sq.sqrt();
    }
    let n = (x.frames() * x.joints()) as f64;
    // `0.0 -` keeps self-similarity at +0.0 rather than -0.0.
    0.0 - total / n
}

/// Index of the first maximum; `None` for an empty iterator.
fn argmax_first(values: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Best similarity of `x` over the anchors and the lowest index attaining it.
pub fn max_sim(x: &MotionSequence, anchors: &AnchorSet) -> Result<(f64, usize)> {
    max_sim_over(x, anchors.anchors.iter().map(|a| &a.input))
}

fn max_sim_over<'a>(
    x: &MotionSequence,
    anchors: impl Iterator<Item = &'a MotionSequence>,
) -> Result<(f64, usize)> {
    let sims = anchors
        .map(|a| similarity(x, a))
        .collect::<Result<Vec<f64>>>()?;
    argmax_first(sims)
        .map(|(i, v)| (v, i))
        .ok_or_else(|| HicError::State("anchor set is empty".into()))
}

fn check_corpus(corpus: &[CorpusEntry]) -> Result<()> {
    let first = corpus
        .first()
        .ok_or_else(|| HicError::State("sampling corpus is empty".into()))?;
    for e in corpus {
        check_same_shape(&first.input, &e.input)?;
        check_same_shape(&first.input, &e.target)?;
    }
    Ok(())
}

/// Trace of one sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsTrace {
    /// For every step `k ≥ 2`, the minimum over unsampled sequences of
    /// their best similarity to the anchors chosen so far.
    pub min_max_sim: Vec<f64>,
}

/// Max-min similarity sampling of `k` anchors (canonical body included).
pub fn sps_sample(corpus: &[CorpusEntry], k: usize, hidden: usize) -> Result<AnchorSet> {
    sps_sample_traced(corpus, k, hidden).map(|(a, _)| a)
}

/// As [`sps_sample`], also returning the per-step max-min values.
///
/// Best similarities are updated incrementally against the newest anchor
/// only, which gives the same selections as recomputing them against all
/// anchors at every step.
pub fn sps_sample_traced(
    corpus: &[CorpusEntry],
    k: usize,
    hidden: usize,
) -> Result<(AnchorSet, SpsTrace)> {
    if k < 1 {
        return Err(HicError::Domain("anchor count K must be at least 1".into()));
    }
    check_corpus(corpus)?;
    let tbody = canonical_tbody(corpus[0].input.frames(), corpus[0].input.joints());
    let mut best: Vec<f64> = corpus
        .par_iter()
        .map(|e| similarity_unchecked(&e.input, &tbody))
        .collect();
    let mut sampled = vec![false; corpus.len()];
    let mut picked: Vec<Option<usize>> = vec![None];
    let mut trace = Vec::new();
    while picked.len() < k && picked.len() < corpus.len() + 1 {
        let mut choice: Option<(usize, f64)> = None;
        for (i, &v) in best.iter().enumerate() {
            if !sampled[i] && choice.map_or(true, |(_, b)| v < b) {
                choice = Some((i, v));
            }
        }
        let (idx, value) = choice.expect("unsampled set is non-empty");
        sampled[idx] = true;
        picked.push(Some(idx));
        trace.push(value);
        let newest = &corpus[idx].input;
        best.par_iter_mut()
            .zip(corpus.par_iter())
            .for_each(|(b, e)| {
                let s = similarity_unchecked(&e.input, newest);
                if s > *b {
                    *b = s;
                }
            });
    }
    let set = AnchorSet::build(corpus, &picked, k, SamplingMethod::Sps, hidden);
    Ok((set, SpsTrace { min_max_sim: trace }))
}

/// Retrieved prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub index: usize,
    pub similarity: f64,
    /// Best similarity among the other candidates, if any.
    pub runner_up: Option<f64>,
}

/// Most similar anchor to `query`; with `domain_filter`, only anchors of
/// that domain (plus the canonical body when none match) are candidates.
pub fn retrieve_prompt(
    query: &MotionSequence,
    anchors: &AnchorSet,
    domain_filter: Option<Domain>,
) -> Result<Retrieval> {
    if anchors.is_empty() {
        return Err(HicError::State("anchor set is empty".into()));
    }
    let mut candidates: Vec<usize> = match domain_filter {
        Some(d) => (0..anchors.len())
            .filter(|&i| anchors.anchors[i].domain == Some(d))
            .collect(),
        None => (0..anchors.len()).collect(),
    };
    if candidates.is_empty() {
        candidates.push(0);
    }
    let sims = candidates
        .iter()
        .map(|&i| similarity(query, &anchors.anchors[i].input))
        .collect::<Result<Vec<f64>>>()?;
    let (pos, best) = argmax_first(sims.iter().copied()).expect("non-empty");
    let runner_up = sims
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pos)
        .map(|(_, &v)| v)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    Ok(Retrieval {
        index: candidates[pos],
        similarity: best,
        runner_up,
    })
}

fn check_k(corpus: &[CorpusEntry], k: usize) -> Result<()> {
    check_corpus(corpus)?;
    if k < 1 || k > corpus.len() {
        return Err(HicError::Domain(format!(
            "K = {k} must lie in 1..={} (corpus size)",
            corpus.len()
        )));
    }
    Ok(())
}

/// Uniform sampling of `k` corpus members without replacement.
pub fn random_sample(corpus: &[CorpusEntry], k: usize, seed: u64, hidden: usize) -> Result<AnchorSet> {
    check_k(corpus, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<Option<usize>> = index::sample(&mut rng, corpus.len(), k)
        .into_iter()
        .map(Some)
        .collect();
    Ok(AnchorSet::build(corpus, &picked, k, SamplingMethod::Random, hidden))
}

/// Iterations of the k-means baseline.
pub const KMEANS_ITERATIONS: usize = 50;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means in the flattened `F·J·C` space. Returns centroids.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64, iterations: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = index::sample(&mut rng, points.len(), k)
        .into_iter()
        .map(|i| points[i].to_vec())
        .collect();
    let dim = points[0].len();
    for _ in 0..iterations {
        let assign: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (c, cent) in centroids.iter().enumerate() {
                    let d = sq_dist(p, cent);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            if next != centroids[c] {
                moved = true;
                centroids[c] = next;
            }
        }
        if !moved {
            break;
        }
    }
    centroids
}

/// k-means baseline: the corpus member nearest each centroid (distinct
/// members; a centroid whose nearest member is taken uses the next one).
pub fn cluster_sample(corpus: &[CorpusEntry], k: usize, seed: u64, hidden: usize) -> Result<AnchorSet> {
    check_k(corpus, k)?;
    let points: Vec<&[f64]> = corpus.iter().map(|e| e.input.values().data()).collect();
    let centroids = kmeans(&points, k, seed, KMEANS_ITERATIONS);
    let mut taken = vec![false; corpus.len()];
    let mut picked = Vec::with_capacity(k);
    for cent in &centroids {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, cent);
            if !taken[i] && d < best.1 {
                best = (i, d);
            }
        }
        taken[best.0] = true;
        picked.push(Some(best.0));
    }
    Ok(AnchorSet::build(corpus, &picked, k, SamplingMethod::Cluster, hidden))
}

/// Worst-case retrieval similarity: `min_q max_k sim(q, A_k)`.
pub fn coverage(queries: &[MotionSequence], anchors: &AnchorSet) -> Result<f64> {
    if queries.is_empty() || anchors.is_empty() {
        return Err(HicError::State("coverage needs queries and anchors".into()));
    }
    let mut worst = f64::INFINITY;
    for q in queries {
        worst = worst.min(max_sim(q, anchors)?.0);
    }
    Ok(worst)
}
