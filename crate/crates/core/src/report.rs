//! Interpretability export: per-layer view-weight triples, per-edge local
//! attention triples and per-sampled-pair global attention records.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{DegtaError, Result};
use crate::graph::Graph;
use crate::model::{Ablation, DeGTAModel, ModelInputs};

/// Softmaxed view triples of one layer, `[positional, structural,
/// attribute]` order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub local_weights: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_weights: Option<[f64; 3]>,
}

/// Dataset-level weight summary, keyed like the per-view columns of the
/// trained-weight tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub positional: f64,
    pub structural: f64,
    pub attribute: f64,
}

/// One local directed pair record: raw view scores and the normalized
/// attention weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalEdgeRecord {
    pub layer: usize,
    pub i: usize,
    pub j: usize,
    pub s: f64,
    pub p: f64,
    pub a: f64,
    pub z: f64,
}

/// One sampled global pair record: view attentions and the normalized
/// weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalPairRecord {
    pub layer: usize,
    pub i: usize,
    pub j: usize,
    pub us: f64,
    pub up: f64,
    pub ua: f64,
    pub z: f64,
}

/// The serializable attention report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionReport {
    pub layers: Vec<LayerWeights>,
    pub summary: Summary,
    pub local_edges: Vec<LocalEdgeRecord>,
    pub global_pairs: Vec<GlobalPairRecord>,
}

/// Runs one traced forward pass and assembles the report.
///
/// Only decoupled configurations carry view triples; the coupled-attention
/// ablation has none to export and is rejected.
pub fn export_report(model: &DeGTAModel, g: &Graph) -> Result<AttentionReport> {
    if model.config.ablation == Ablation::CoupledAttention {
        return Err(DegtaError::InvalidParameter(
            "coupled_attention has no decoupled view weights to export".into(),
        ));
    }
    let inputs = ModelInputs::prepare(g, &model.config)?;
    let tape = Tape::new();
    let (pass, _) = model.forward(&tape, g, &inputs, true)?;
    let traces = pass.traces.expect("traced forward");

    let mut layers = Vec::with_capacity(traces.len());
    let mut local_edges = Vec::new();
    let mut global_pairs = Vec::new();
    let mut sum = [0.0f64; 3];
    for (l, t) in traces.iter().enumerate() {
        let local = t.local_weights.expect("decoupled local triple");
        let mut acc = local;
        let mut parts = 1.0;
        if let Some(gw) = t.global_weights {
            for c in 0..3 {
                acc[c] += gw[c];
            }
            parts = 2.0;
        }
        for c in 0..3 {
            sum[c] += acc[c] / parts;
        }
        layers.push(LayerWeights {
            local_weights: local,
            global_weights: t.global_weights,
        });

        for (e, (&i, &j)) in t.local_pairs.src.iter().zip(&t.local_pairs.dst).enumerate() {
            local_edges.push(LocalEdgeRecord {
                layer: l,
                i,
                j,
                s: t.local_s[e],
                p: t.local_p[e],
                a: t.local_a[e],
                z: t.local_zhat[e],
            });
        }
        for (e, (&i, &j)) in t
            .global_pairs
            .src
            .iter()
            .zip(&t.global_pairs.dst)
            .enumerate()
        {
            global_pairs.push(GlobalPairRecord {
                layer: l,
                i,
                j,
                us: t.global_us[e],
                up: t.global_up[e],
                ua: t.global_ua[e],
                z: t.global_zhat[e],
            });
        }
    }

    let n_layers = traces.len().max(1) as f64;
    Ok(AttentionReport {
        layers,
        summary: Summary {
            positional: sum[0] / n_layers,
            structural: sum[1] / n_layers,
            attribute: sum[2] / n_layers,
        },
        local_edges,
        global_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_sbm;
    use crate::model::{DeGTAConfig, Task};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(ablation: Ablation) -> (DeGTAModel, Graph) {
        let ds = gen_sbm(14, 2, 0.5, 0.1, 0.3, 2).unwrap();
        let cfg = DeGTAConfig {
            d: 6,
            d_hidden: 4,
            d_attr_hidden: 6,
            ablation,
            ..DeGTAConfig::with_k(4)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DeGTAModel::new(
            cfg,
            ds.graph.features().cols(),
            2,
            Task::NodeClassification,
            &mut rng,
        )
        .unwrap();
        (model, ds.graph)
    }

    #[test]
    fn fresh_model_exports_uniform_triples_summing_to_one() {
        let (model, g) = small_model(Ablation::Full);
        let report = export_report(&model, &g).unwrap();
        assert_eq!(report.layers.len(), 2);
        for lw in &report.layers {
            for w in lw.local_weights {
                assert!((w - 1.0 / 3.0).abs() < 1e-12);
            }
            let s: f64 = lw.local_weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let gw = lw.global_weights.unwrap();
            let s: f64 = gw.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let s = report.summary.positional + report.summary.structural + report.summary.attribute;
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn summary_has_table_shaped_keys() {
        let (model, g) = small_model(Ablation::Full);
        let report = export_report(&model, &g).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        let summary = json.get("summary").unwrap();
        for key in ["positional", "structural", "attribute"] {
            assert!(summary.get(key).is_some(), "missing {key}");
        }
        for key in ["layers", "local_edges", "global_pairs"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn local_zhat_rows_sum_to_one_in_report() {
        let (model, g) = small_model(Ablation::Full);
        let report = export_report(&model, &g).unwrap();
        let mut per_node: std::collections::BTreeMap<(usize, usize), f64> =
            std::collections::BTreeMap::new();
        for rec in &report.local_edges {
            *per_node.entry((rec.layer, rec.i)).or_insert(0.0) += rec.z;
        }
        for ((layer, i), s) in per_node {
            assert!((s - 1.0).abs() < 1e-9, "layer {layer} node {i}: {s}");
        }
    }

    #[test]
    fn coupled_export_is_rejected() {
        let (model, g) = small_model(Ablation::CoupledAttention);
        assert!(export_report(&model, &g).is_err());
    }
}
