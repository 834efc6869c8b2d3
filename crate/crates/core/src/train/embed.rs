use super::checkpoint::Checkpoint;
use super::run::prepare_batch;
use crate::error::{PirtError, Result};
use crate::model::Pirt;
use crate::nn::{Forward, ParamStore};
use crate::pose::PoseConfig;
use crate::retrieval::{evaluate_records, EmbeddingRecord, EvalReport, LocalEmbedding, MatchConfig};
use crate::synth::SynthSample;

const EMBED_BATCH: usize = 32;

/// Rows of a `[B, C]` tape value as double-precision vectors.
fn rows(value: &pirt_tensor::Tensor<f32>) -> Vec<Vec<f64>> {
    let c = value.shape()[1];
    value.data().chunks(c).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Eval-mode embeddings of `samples`, in order.
pub fn embed_samples(
    model: &Pirt,
    store: &mut ParamStore<f32>,
    pose: &PoseConfig,
    samples: &[&SynthSample],
) -> Result<Vec<EmbeddingRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EMBED_BATCH) {
        let (input, guidance) = prepare_batch::<f32>(&model.config, pose, chunk)?;
        let mut ctx = Forward::inference(store);
        let out = model.forward(&mut ctx, &input)?;
        let global = rows(ctx.tape.value(out.emb_global));
        let local = match &out.pose {
            Some(p) => {
                let groups: Vec<Vec<Vec<f64>>> = p.emb.iter().map(|&e| rows(ctx.tape.value(e))).collect();
                let combined = rows(ctx.tape.value(p.combined));
                Some((groups, combined))
            }
            None => None,
        };
        for (i, s) in chunk.iter().enumerate() {
            if let Some(bad) = global[i].iter().find(|v| !v.is_finite()) {
                return Err(PirtError::Numeric(format!(
                    "embedding of identity {} camera {} holds {bad}",
                    s.identity, s.camera
                )));
            }
            let local = local.as_ref().map(|(groups, combined)| LocalEmbedding {
                groups: std::array::from_fn(|g| groups[g][i].clone()),
                confidences: std::array::from_fn(|g| combined[i][g]),
                visible: guidance[i].group_visible,
            });
            records.push(EmbeddingRecord {
                identity: s.identity,
                camera: s.camera,
                global: global[i].clone(),
                local,
            });
        }
    }
    Ok(records)
}

/// Rebuilds the network saved in `checkpoint`.
pub fn load_model(checkpoint: &Checkpoint) -> Result<(Pirt, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Pirt::build(&checkpoint.model, &mut store, 0)?;
    checkpoint.restore_params(&mut store)?;
    Ok((model, store))
}

/// Ranks and scores `queries` against `gallery`; every query must have a
/// cross-camera match.
pub fn evaluate_embeddings(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord], matching: &MatchConfig) -> Result<EvalReport> {
    let report = evaluate_records(queries, gallery, matching, gallery.len().clamp(1, 10))?;
    if !report.skipped.is_empty() {
        let list: Vec<String> = report
            .skipped
            .iter()
            .map(|&q| format!("{q} (identity {}, camera {})", queries[q].identity, queries[q].camera))
            .collect();
        return Err(PirtError::Contract(format!(
            "queries without a cross-camera gallery match: {}",
            list.join(", ")
        )));
    }
    Ok(report)
}
