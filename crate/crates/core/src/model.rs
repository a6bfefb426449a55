//! Full model assembly: parameter construction, binding onto a tape, and
//! the per-conversation forward pass, honoring modality selection and
//! ablation switches.
//!
//! Pipeline per conversation (full configuration):
//!
//! 1. each modality's feature rows pass through its own bidirectional LSTM
//!    to the shared width `d`;
//! 2. the text stream is enhanced by speaker- and context-relation graph
//!    convolutions over the windowed conversation graph;
//! 3. the auxiliary streams pass through their modal feature filters;
//! 4. each filtered auxiliary stream is fused with the enhanced text by a
//!    prompt transformer stack, and the per-modality fusion outputs are
//!    concatenated (visual block first, then audio);
//! 5. the classifier reads the concatenation of the enhanced text and the
//!    fused block.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::config::{Modality, RunConfig};
use crate::data::Conversation;
use crate::encoders::{
    self, BiLstmIds, FilterIds, LstmDirectionIds,
};
use crate::error::{Error, Result};
use crate::graph::{self, ConversationGraph, RelationFamily};
use crate::losses::{self, ProjectionIds};
use crate::mpt::{self, MptBlockIds, MptStackIds};
use crate::rng::{rng_for, Stream};
use crate::tensor::{Array, ParamSet, Tape, TensorId};

/// Trainable model: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: RunConfig,
    pub params: ParamSet,
}

/// Name -> tape handle for every parameter, produced by [`Model::bind`].
pub type BoundParams = BTreeMap<String, TensorId>;

/// Per-conversation forward products.
#[derive(Debug, Clone)]
pub struct ConvOutputs {
    /// Backbone rows after graph enhancement, `(L, d)`.
    pub backbone: TensorId,
    /// Concatenated transformer outputs `(L, aux_count * d)`; `None` when
    /// no auxiliary modality is active.
    pub fused: Option<TensorId>,
    /// Filtered auxiliary streams (fusion order), for the utterance-level
    /// contrastive term.
    pub aux: Vec<(Modality, TensorId)>,
    /// Classifier input `(L, fusion_dim)`.
    pub fusion: TensorId,
    /// Class scores `(L, J)`.
    pub logits: TensorId,
}

fn xavier(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Array::rand_uniform(shape, -limit, limit, rng)
}

fn graph_param_name(family: RelationFamily, layer: usize, rel: usize) -> String {
    let fam = match family {
        RelationFamily::Speaker => "spk",
        RelationFamily::Context => "ctx",
    };
    format!("graph.{fam}.l{layer}.r{rel}")
}

/// Whether this auxiliary modality's filter is bypassed by an ablation.
fn filter_bypassed(cfg: &RunConfig, m: Modality) -> bool {
    match m {
        Modality::Audio => cfg.ablate.full_audio,
        Modality::Visual => cfg.ablate.full_visual,
        Modality::Text => false,
    }
}

impl Model {
    /// Build a model with freshly initialized parameters. The same
    /// configuration (including seed) always produces identical parameters.
    pub fn new(config: RunConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = rng_for(config.seed, Stream::ParamInit);
        let mut params = ParamSet::new();
        let d = config.model_dim;

        // 1. Encoders, in fixed text/audio/visual order.
        for m in config.modalities.active() {
            encoders::init_bilstm(
                &mut params,
                &format!("enc.{}", m.name()),
                config.input_dim(m),
                d,
                &mut rng,
            )?;
        }
        // 2. Filters for auxiliary modalities (unless bypassed).
        for m in config.modalities.aux() {
            if !filter_bypassed(&config, m) {
                encoders::init_filter(&mut params, &format!("filter.{}", m.name()), d, &mut rng)?;
            }
        }
        // 3. Graph relation weights.
        if !config.ablate.no_rgcn {
            for family in [RelationFamily::Speaker, RelationFamily::Context] {
                let nrel = family.relation_count(config.max_speakers);
                for layer in 0..config.rgcn_layers {
                    for rel in 0..nrel {
                        params.insert(
                            graph_param_name(family, layer, rel),
                            xavier(&[d, d], &mut rng),
                        )?;
                    }
                }
            }
        }
        // 4. Transformer stacks, one per auxiliary modality.
        if !config.ablate.no_mpt {
            for m in config.modalities.aux() {
                mpt::init_mpt(
                    &mut params,
                    &format!("mpt.{}", m.name()),
                    d,
                    config.mpt_blocks,
                    &mut rng,
                )?;
            }
        }
        // 5. Contrastive projections.
        if config.ucl_active() {
            for m in config.modalities.aux() {
                losses::init_projection(
                    &mut params,
                    &format!("proj.ucl.{}", m.name()),
                    config.fused_dim(),
                    d,
                    &mut rng,
                )?;
            }
        }
        if config.scl_active() {
            losses::init_projection(&mut params, "proj.scl", config.fused_dim(), d, &mut rng)?;
        }
        // 6. Classifier head.
        losses::init_classifier(
            &mut params,
            "cls",
            config.fusion_dim(),
            config.spec.classes,
            &mut rng,
        )?;

        Ok(Model { config, params })
    }

    /// Reassemble a model from stored parameters, checking that the
    /// parameter names and shapes are exactly the ones `config` implies.
    pub fn from_parts(config: RunConfig, params: ParamSet) -> Result<Model> {
        let reference = Model::new(config.clone())?;
        let expected: Vec<&String> = reference.params.names().collect();
        let got: Vec<&String> = params.names().collect();
        if expected != got {
            let missing: Vec<&&String> = expected.iter().filter(|n| !got.contains(n)).collect();
            let extra: Vec<&&String> = got.iter().filter(|n| !expected.contains(n)).collect();
            return Err(Error::Checkpoint(format!(
                "parameter names do not match the configuration (missing: {missing:?}, \
                 unexpected: {extra:?})"
            )));
        }
        for (name, array) in params.iter() {
            let want = reference.params.get(name).expect("name checked above");
            if want.shape() != array.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    array.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Register every parameter as a gradient-tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut bound = BTreeMap::new();
        for (name, array) in self.params.iter() {
            bound.insert(name.clone(), tape.leaf(array.clone())?);
        }
        Ok(bound)
    }

    /// Run one conversation through the network. `rng` enables dropout
    /// (training); pass `None` for deterministic evaluation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        conv: &Conversation,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ConvOutputs> {
        let cfg = &self.config;
        conv.validate(&cfg.spec)?;

        // Encode each active modality at width d.
        let mut encoded: BTreeMap<Modality, TensorId> = BTreeMap::new();
        for m in cfg.modalities.active() {
            let x = tape.constant(feature_array(conv, m, cfg.input_dim(m))?)?;
            let ids = bilstm_ids(bound, &format!("enc.{}", m.name()))?;
            encoded.insert(m, encoders::encode_context(tape, x, &ids)?);
        }

        // Graph-enhance the backbone stream.
        let backbone_m = cfg.modalities.backbone();
        let h_backbone = encoded[&backbone_m];
        let backbone = if cfg.ablate.no_rgcn {
            h_backbone
        } else {
            let conv_graph = graph::build_graph(&conv.speakers, cfg.window, cfg.max_speakers)?;
            enhance(tape, h_backbone, &conv_graph, cfg, bound)?
        };

        // Filter the auxiliary streams.
        let mut aux = Vec::new();
        for m in cfg.modalities.aux() {
            let s = if filter_bypassed(cfg, m) {
                encoded[&m]
            } else {
                let ids = filter_ids(bound, &format!("filter.{}", m.name()))?;
                encoders::modal_feature_filter(tape, encoded[&m], &ids)?.out
            };
            aux.push((m, s));
        }

        // Fuse prompt streams with the backbone.
        let fused = if aux.is_empty() {
            None
        } else if cfg.ablate.no_mpt {
            let parts: Vec<TensorId> = aux.iter().map(|(_, s)| *s).collect();
            Some(mpt::concat_features(tape, &parts)?)
        } else {
            let mut parts = Vec::new();
            for (m, s) in &aux {
                let stack = stack_ids(bound, &format!("mpt.{}", m.name()), cfg.mpt_blocks)?;
                parts.push(mpt::mpt_forward(
                    tape,
                    *s,
                    backbone,
                    &stack,
                    cfg.heads,
                    cfg.dropout,
                    rng.as_deref_mut(),
                )?);
            }
            Some(mpt::concat_features(tape, &parts)?)
        };

        let fusion = match fused {
            Some(f) => mpt::concat_features(tape, &[backbone, f])?,
            None => backbone,
        };
        let cls = projection_ids(bound, "cls")?;
        let logits = losses::apply_projection(tape, fusion, &cls)?;
        Ok(ConvOutputs {
            backbone,
            fused,
            aux,
            fusion,
            logits,
        })
    }

    /// Tape handles of the contrastive projection for one auxiliary
    /// modality.
    pub fn ucl_projection(&self, bound: &BoundParams, m: Modality) -> Result<ProjectionIds> {
        projection_ids(bound, &format!("proj.ucl.{}", m.name()))
    }

    pub fn scl_projection(&self, bound: &BoundParams) -> Result<ProjectionIds> {
        projection_ids(bound, "proj.scl")
    }
}

/// Row-major feature matrix of one modality.
fn feature_array(conv: &Conversation, m: Modality, dim: usize) -> Result<Array> {
    let rows = match m {
        Modality::Text => &conv.text,
        Modality::Audio => &conv.audio,
        Modality::Visual => &conv.visual,
    };
    let mut data = Vec::with_capacity(rows.len() * dim);
    for row in rows {
        data.extend_from_slice(row);
    }
    Array::new(vec![rows.len(), dim], data)
}

fn get(bound: &BoundParams, name: &str) -> Result<TensorId> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("parameter '{name}' is not bound")))
}

fn bilstm_ids(bound: &BoundParams, prefix: &str) -> Result<BiLstmIds> {
    Ok(BiLstmIds {
        forward: LstmDirectionIds {
            w_in: get(bound, &format!("{prefix}.fwd.w_in"))?,
            w_rec: get(bound, &format!("{prefix}.fwd.w_rec"))?,
            bias: get(bound, &format!("{prefix}.fwd.bias"))?,
        },
        backward: LstmDirectionIds {
            w_in: get(bound, &format!("{prefix}.bwd.w_in"))?,
            w_rec: get(bound, &format!("{prefix}.bwd.w_rec"))?,
            bias: get(bound, &format!("{prefix}.bwd.bias"))?,
        },
    })
}

fn filter_ids(bound: &BoundParams, prefix: &str) -> Result<FilterIds> {
    Ok(FilterIds {
        gate_w: get(bound, &format!("{prefix}.gate.w"))?,
        gate_b: get(bound, &format!("{prefix}.gate.b"))?,
        down_w: get(bound, &format!("{prefix}.down.w"))?,
        down_b: get(bound, &format!("{prefix}.down.b"))?,
        up_w: get(bound, &format!("{prefix}.up.w"))?,
        up_b: get(bound, &format!("{prefix}.up.b"))?,
    })
}

fn stack_ids(bound: &BoundParams, prefix: &str, blocks: usize) -> Result<MptStackIds> {
    let mut block_ids = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let p = format!("{prefix}.block{b}");
        block_ids.push(MptBlockIds {
            w_q: get(bound, &format!("{p}.w_q"))?,
            w_k: get(bound, &format!("{p}.w_k"))?,
            w_v: get(bound, &format!("{p}.w_v"))?,
            w_o: get(bound, &format!("{p}.w_o"))?,
            ffn_w1: get(bound, &format!("{p}.ffn.w1"))?,
            ffn_b1: get(bound, &format!("{p}.ffn.b1"))?,
            ffn_w2: get(bound, &format!("{p}.ffn.w2"))?,
            ffn_b2: get(bound, &format!("{p}.ffn.b2"))?,
            ln1_gain: get(bound, &format!("{p}.ln1.gain"))?,
            ln1_bias: get(bound, &format!("{p}.ln1.bias"))?,
            ln2_gain: get(bound, &format!("{p}.ln2.gain"))?,
            ln2_bias: get(bound, &format!("{p}.ln2.bias"))?,
        });
    }
    Ok(MptStackIds {
        blocks: block_ids,
        pool_w_q: get(bound, &format!("{prefix}.pool.w_q"))?,
        pool_w_k: get(bound, &format!("{prefix}.pool.w_k"))?,
        pool_w_v: get(bound, &format!("{prefix}.pool.w_v"))?,
    })
}

fn projection_ids(bound: &BoundParams, prefix: &str) -> Result<ProjectionIds> {
    Ok(ProjectionIds {
        w: get(bound, &format!("{prefix}.w"))?,
        b: get(bound, &format!("{prefix}.b"))?,
    })
}

fn enhance(
    tape: &mut Tape,
    h: TensorId,
    conv_graph: &ConversationGraph,
    cfg: &RunConfig,
    bound: &BoundParams,
) -> Result<TensorId> {
    let layers = |family: RelationFamily| -> Result<Vec<Vec<TensorId>>> {
        let nrel = family.relation_count(cfg.max_speakers);
        (0..cfg.rgcn_layers)
            .map(|layer| {
                (0..nrel)
                    .map(|rel| get(bound, &graph_param_name(family, layer, rel)))
                    .collect()
            })
            .collect()
    };
    let spk = layers(RelationFamily::Speaker)?;
    let ctx = layers(RelationFamily::Context)?;
    graph::enhance_text(tape, h, conv_graph, &spk, &ctx)
}

// ===== Tests =====

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Modalities;
    use crate::data::{generate_synthetic, SyntheticConfig};

    /// Small all-modality configuration matched to the default synthetic
    /// feature widths.
    fn toy_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.spec.d_text = 24;
        cfg.spec.d_audio = 20;
        cfg.spec.d_visual = 16;
        cfg.spec.classes = 3;
        cfg.model_dim = 8;
        cfg.heads = 2;
        cfg.mpt_blocks = 2;
        cfg.max_speakers = 2;
        cfg
    }

    fn toy_data(n: usize) -> Vec<Conversation> {
        generate_synthetic(&SyntheticConfig {
            conversations: n,
            min_len: 3,
            max_len: 5,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_rebuild_gives_identical_parameters() {
        let a = Model::new(toy_config()).unwrap();
        let b = Model::new(toy_config()).unwrap();
        assert!(a.parameter_count() > 0);
        assert_eq!(a.params.len(), b.params.len());
        for ((na, va), (nb, vb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.data(), vb.data(), "parameter {na} differs");
        }
        let mut cfg2 = toy_config();
        cfg2.seed = 1;
        let c = Model::new(cfg2).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, va), (_, vc))| va.data() != vc.data());
        assert!(differs, "different seeds must give different parameters");
    }

    #[test]
    fn removing_the_transformer_strictly_reduces_parameters() {
        let full = Model::new(toy_config()).unwrap();
        let mut cfg = toy_config();
        cfg.ablate.no_mpt = true;
        let ablated = Model::new(cfg).unwrap();
        assert!(ablated.parameter_count() < full.parameter_count());
        assert!(
            !ablated.params.names().any(|n| n.starts_with("mpt.")),
            "transformer parameters must not exist under no_mpt"
        );
    }

    #[test]
    fn ablations_remove_their_parameter_groups() {
        let mut cfg = toy_config();
        cfg.ablate.no_rgcn = true;
        cfg.ablate.no_ucl = true;
        cfg.ablate.no_scl = true;
        cfg.ablate.full_audio = true;
        let m = Model::new(cfg).unwrap();
        assert!(!m.params.names().any(|n| n.starts_with("graph.")));
        assert!(!m.params.names().any(|n| n.starts_with("proj.")));
        assert!(!m.params.names().any(|n| n == "filter.audio.gate.w"));
        assert!(m.params.names().any(|n| n == "filter.visual.gate.w"));
    }

    #[test]
    fn forward_produces_contracted_shapes() {
        let cfg = toy_config();
        let model = Model::new(cfg.clone()).unwrap();
        let data = toy_data(2);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let out = model.forward(&mut tape, &bound, &data[0], None).unwrap();
        let l = data[0].len();
        assert_eq!(tape.shape(out.backbone), &[l, 8]);
        assert_eq!(tape.shape(out.fused.unwrap()), &[l, 16]);
        assert_eq!(tape.shape(out.fusion), &[l, 24]);
        assert_eq!(tape.shape(out.logits), &[l, 3]);
        assert_eq!(out.aux.len(), 2);
        assert_eq!(out.aux[0].0, Modality::Visual);
        assert_eq!(out.aux[1].0, Modality::Audio);
    }

    #[test]
    fn text_only_model_classifies_from_the_backbone_alone() {
        let mut cfg = toy_config();
        cfg.modalities = Modalities::parse("t").unwrap();
        let model = Model::new(cfg).unwrap();
        let data = toy_data(1);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let out = model.forward(&mut tape, &bound, &data[0], None).unwrap();
        assert!(out.fused.is_none());
        assert!(out.aux.is_empty());
        assert_eq!(out.fusion, out.backbone);
        assert_eq!(tape.shape(out.logits), &[data[0].len(), 3]);
        assert!(!model.params.names().any(|n| n.starts_with("mpt.")));
        assert!(!model.params.names().any(|n| n.starts_with("proj.")));
        assert!(!model.params.names().any(|n| n.starts_with("filter.")));
    }

    #[test]
    fn single_auxiliary_modality_can_be_the_backbone() {
        let mut cfg = toy_config();
        cfg.modalities = Modalities::parse("a").unwrap();
        let model = Model::new(cfg).unwrap();
        let data = toy_data(1);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let out = model.forward(&mut tape, &bound, &data[0], None).unwrap();
        assert!(out.fused.is_none());
        assert_eq!(tape.shape(out.fusion), &[data[0].len(), 8]);
        // Graph enhancement still applies to the audio backbone.
        assert!(model.params.names().any(|n| n.starts_with("graph.")));
    }

    #[test]
    fn evaluation_forward_is_deterministic() {
        let model = Model::new(toy_config()).unwrap();
        let data = toy_data(1);
        let run = || {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let out = model.forward(&mut tape, &bound, &data[0], None).unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn from_parts_validates_names_and_shapes() {
        let model = Model::new(toy_config()).unwrap();
        // Round trip with its own parameters succeeds.
        let again = Model::from_parts(toy_config(), model.params.clone()).unwrap();
        assert_eq!(again.parameter_count(), model.parameter_count());
        // A mismatched configuration (different widths) is rejected.
        let mut other = toy_config();
        other.model_dim = 16;
        assert!(Model::from_parts(other, model.params.clone()).is_err());
        // Extra parameter is rejected.
        let mut padded = model.params.clone();
        padded.insert("rogue", Array::zeros(&[1])).unwrap();
        assert!(Model::from_parts(toy_config(), padded).is_err());
    }
}
