//! Finite-difference audit of the whole pipeline: both encoders, fusion,
//! the chunked losses with the prefix wrapper, and the loss scalars.

use crate::data::{generate_synthetic_corpus, LatentTopicSpec};
use crate::error::Result;
use crate::graph::Pair;
use crate::model::{BoundModel, Model, ModelConfig};
use crate::objectives::LossConfig;
use crate::params::Bound;
use crate::tensor::{grad_check, GradCheck, Tensor};
use crate::trainer::{single_tape_loss, TrainingData};

/// Central-difference step.
pub const AUDIT_STEP: f64 = 1e-4;

/// Two pins from a small synthetic corpus, paired with each other, sized
/// for `config`'s image grid.
pub fn two_pin_batch(config: &ModelConfig, seed: u64) -> Result<TrainingData> {
    let spec = LatentTopicSpec {
        topics: 2,
        pins_per_topic: 1,
        boards_per_topic: 1,
        heldout_pins: 0,
        patches: config.image.patches,
        d_in: config.image.d_in,
        ..LatentTopicSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, seed)?.train;
    let ids: Vec<_> = corpus.pins.iter().map(|p| p.id).collect();
    let pairs = [
        Pair { query: ids[0], positive: ids[1], weight: 1 },
        Pair { query: ids[1], positive: ids[0], weight: 1 },
    ];
    TrainingData::new(&corpus, &pairs, None)
}

/// Checks the gradient of the total loss with respect to every parameter
/// component of `model` on `data`'s first two rows and pairs.
pub fn gradcheck_pipeline(model: &Model, data: &TrainingData, loss: &LossConfig, devices: usize) -> Result<GradCheck> {
    let leaves: Vec<Tensor> = model.params.iter().map(|(_, p)| p.value.clone()).collect();
    let i2t_rows: Vec<usize> = data.i2t_rows.iter().take(2).copied().collect();
    let pair_rows: Vec<(usize, usize)> = data.pairs.iter().take(2).copied().collect();
    grad_check(
        |tape, vars| {
            let bm = BoundModel {
                model,
                p: Bound::from_vars(vars.to_vec()),
            };
            Ok(single_tape_loss(tape, &bm, data, &i2t_rows, &pair_rows, false, loss, devices)?.total)
        },
        &leaves,
        AUDIT_STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::MrlConfig;

    #[test]
    fn whole_pipeline_passes_the_audit() {
        let mut mc = ModelConfig::tiny();
        mc.split_scalars = true;
        mc.mrl_heads = vec![2, 4, 8];
        let model = Model::new(&mc, 5).unwrap();
        let data = two_pin_batch(&mc, 5).unwrap();
        let loss = LossConfig {
            i2t: true,
            p2p: true,
            mrl: Some(MrlConfig {
                use_projection_heads: true,
                ..MrlConfig::default_for(8)
            }),
        };
        for devices in [1, 2] {
            let r = gradcheck_pipeline(&model, &data, &loss, devices).unwrap();
            assert_eq!(r.checked, model.params.total_elements());
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
