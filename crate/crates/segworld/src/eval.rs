//! Run the segmentation pipeline over a sample set and collect metric records.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::domain::{InstructionKind, Sample};
use crate::engine::{segment, EngineConfig};
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, MetricsReport};

pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    /// Ids of samples skipped because they lack the requested instruction kind.
    pub skipped: Vec<String>,
    pub report: MetricsReport,
}

/// Evaluate one instruction condition over `samples`. Samples without that
/// instruction kind are skipped and recorded; decodes that fail to produce a
/// valid segmentation token count as non-emissions.
pub fn evaluate<B: Backbone>(
    backbone: &B,
    samples: &[Sample],
    kind: InstructionKind,
    config: &EngineConfig,
    seed: u64,
) -> Result<Evaluation> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for sample in samples {
        let Some(instruction) = sample.instruction(kind) else {
            skipped.push(sample.id.clone());
            continue;
        };
        let record = match segment(&sample.image, &instruction, backbone, config, &mut rng) {
            Ok(result) if result.emitted_seg => EvalRecord::from_masks(
                &sample.id,
                &sample.chain.action,
                &result.mask,
                &sample.mask_gt,
            )?,
            Ok(_) => EvalRecord::non_emission(&sample.id, &sample.chain.action, &sample.mask_gt),
            // A decode that overruns its budget never reached [SEG].
            Err(Error::DecodeOverflow { .. }) | Err(Error::NoSegToken) => {
                EvalRecord::non_emission(&sample.id, &sample.chain.action, &sample.mask_gt)
            }
            Err(e) => return Err(e),
        };
        records.push(record);
    }

    let report = MetricsReport::from_records(&records)?;
    Ok(Evaluation {
        records,
        skipped,
        report,
    })
}
