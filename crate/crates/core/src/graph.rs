//! Windowed conversation graph and relational graph convolution.
//!
//! Each utterance is a node. Node `i` connects to every utterance `j` within
//! a window of `w` positions (including itself). Every `(i, j)` pair carries
//! two relation labels:
//!
//! * a **speaker** relation: the ordered pair of speaker ids, giving
//!   `M^2` possible relations for `M` speakers, and
//! * a **context** relation: whether `j` is in the past, present (self), or
//!   future of `i`.
//!
//! A relational graph convolution aggregates neighbors per relation with
//! mean normalization and a per-relation weight matrix:
//!
//! `out_i = relu( sum_r sum_{j in N_i^r} (1 / |N_i^r|) H_j W_r )`
//!
//! Relations with no edges contribute nothing. Text features are enhanced by
//! summing the outputs of a speaker-relation pass and a context-relation
//! pass over the same graph.

use crate::error::{Error, Result};
use crate::tensor::{Array, Tape, TensorId};

/// Context relation of neighbor `j` relative to node `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextRel {
    Past = 0,
    Present = 1,
    Future = 2,
}

pub const CONTEXT_RELATIONS: usize = 3;

/// One directed neighbor relationship: `dst` is an in-window neighbor
/// contributing to the update of `src`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// Ordered speaker pair `(speaker(src) mod M) * M + (speaker(dst) mod M)`.
    pub speaker_rel: usize,
    pub context_rel: ContextRel,
}

#[derive(Debug, Clone)]
pub struct ConversationGraph {
    /// Number of utterance nodes.
    pub len: usize,
    pub window: usize,
    /// Speaker count `M` used for relation indexing.
    pub max_speakers: usize,
    pub edges: Vec<Edge>,
}

/// Which relation family an RGCN pass aggregates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationFamily {
    Speaker,
    Context,
}

impl RelationFamily {
    pub fn relation_count(self, max_speakers: usize) -> usize {
        match self {
            RelationFamily::Speaker => max_speakers * max_speakers,
            RelationFamily::Context => CONTEXT_RELATIONS,
        }
    }

    fn relation_of(self, edge: &Edge) -> usize {
        match self {
            RelationFamily::Speaker => edge.speaker_rel,
            RelationFamily::Context => edge.context_rel as usize,
        }
    }
}

/// Build the windowed graph for one conversation. Speaker ids are folded
/// into `0..max_speakers` by modulus, so exotic ids never break relation
/// indexing.
pub fn build_graph(
    speakers: &[usize],
    window: usize,
    max_speakers: usize,
) -> Result<ConversationGraph> {
    if speakers.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a graph for an empty conversation".into(),
        ));
    }
    if window == 0 {
        return Err(Error::InvalidArgument(
            "graph window must be at least 1".into(),
        ));
    }
    if max_speakers == 0 {
        return Err(Error::InvalidArgument(
            "max_speakers must be at least 1".into(),
        ));
    }
    let l = speakers.len();
    let mut edges = Vec::new();
    for i in 0..l {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(l - 1);
        for j in lo..=hi {
            let context_rel = match j.cmp(&i) {
                std::cmp::Ordering::Less => ContextRel::Past,
                std::cmp::Ordering::Equal => ContextRel::Present,
                std::cmp::Ordering::Greater => ContextRel::Future,
            };
            edges.push(Edge {
                src: i,
                dst: j,
                speaker_rel: (speakers[i] % max_speakers) * max_speakers
                    + (speakers[j] % max_speakers),
                context_rel,
            });
        }
    }
    Ok(ConversationGraph {
        len: l,
        window,
        max_speakers,
        edges,
    })
}

/// One relational graph convolution layer over the chosen relation family.
/// `weights` holds one `(d, d)` matrix per relation in family order.
pub fn rgcn_layer(
    tape: &mut Tape,
    h: TensorId,
    graph: &ConversationGraph,
    family: RelationFamily,
    weights: &[TensorId],
) -> Result<TensorId> {
    let hs = tape.shape(h).to_vec();
    if hs.len() != 2 || hs[0] != graph.len {
        return Err(Error::InvalidArgument(format!(
            "rgcn input must be ({}, d), got shape {:?}",
            graph.len, hs
        )));
    }
    let d = hs[1];
    let nrel = family.relation_count(graph.max_speakers);
    if weights.len() != nrel {
        return Err(Error::InvalidArgument(format!(
            "family needs {nrel} relation weights, got {}",
            weights.len()
        )));
    }
    for &w in weights {
        if tape.shape(w) != [d, d] {
            return Err(Error::ShapeMismatch {
                op: "rgcn_layer",
                lhs: vec![d, d],
                rhs: tape.shape(w).to_vec(),
            });
        }
    }
    let l = graph.len;

    // Per-relation neighbor counts for mean normalization.
    let mut counts = vec![vec![0usize; l]; nrel];
    for e in &graph.edges {
        counts[family.relation_of(e)][e.src] += 1;
    }

    let mut total: Option<TensorId> = None;
    for r in 0..nrel {
        if counts[r].iter().all(|&c| c == 0) {
            continue; // unused relation: contributes nothing
        }
        let mut agg = Array::zeros(&[l, l]);
        for e in &graph.edges {
            if family.relation_of(e) == r {
                agg.data_mut()[e.src * l + e.dst] += 1.0 / counts[r][e.src] as f64;
            }
        }
        let agg_id = tape.constant(agg)?;
        let hw = tape.matmul(h, weights[r])?;
        let contrib = tape.matmul(agg_id, hw)?;
        total = Some(match total {
            None => contrib,
            Some(t) => tape.add(t, contrib)?,
        });
    }
    let total = total.ok_or_else(|| {
        Error::InvalidArgument("rgcn_layer: no relation has any edge".into())
    })?;
    tape.relu(total)
}

/// Stacked RGCN pass: `layers` holds the per-relation weights of each layer.
pub fn rgcn_forward(
    tape: &mut Tape,
    h: TensorId,
    graph: &ConversationGraph,
    family: RelationFamily,
    layers: &[Vec<TensorId>],
) -> Result<TensorId> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument(
            "rgcn_forward needs at least one layer".into(),
        ));
    }
    let mut cur = h;
    for weights in layers {
        cur = rgcn_layer(tape, cur, graph, family, weights)?;
    }
    Ok(cur)
}

/// Graph-enhanced text: the sum of a speaker-relation RGCN pass and a
/// context-relation RGCN pass over the same hidden states.
pub fn enhance_text(
    tape: &mut Tape,
    h_text: TensorId,
    graph: &ConversationGraph,
    speaker_layers: &[Vec<TensorId>],
    context_layers: &[Vec<TensorId>],
) -> Result<TensorId> {
    let sa = rgcn_forward(tape, h_text, graph, RelationFamily::Speaker, speaker_layers)?;
    let ca = rgcn_forward(tape, h_text, graph, RelationFamily::Context, context_layers)?;
    tape.add(sa, ca)
}

// ===== Tests =====
