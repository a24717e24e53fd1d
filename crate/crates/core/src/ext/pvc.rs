//! Professional voice clone: gradient descent on a single speaker's
//! condition embedding against the frozen autoregressive model.

use crate::ar::{layout::build_target_layout, ArModel, Utterance};
use crate::speaker::{ConditionSource, SpeakerCondition};
use crate::{Error, Result};
use chorale_autograd::{checkpoint, Adam, ParamSet, Tensor};

#[derive(Debug, Clone)]
pub struct OptimizedEmbedding {
    /// Unit-norm on export.
    pub vector: ndarray::Array1<f64>,
    pub speaker_id: String,
    pub steps: u64,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
}

impl OptimizedEmbedding {
    pub fn as_condition(&self) -> SpeakerCondition {
        SpeakerCondition {
            vector: self.vector.clone(),
            source: ConditionSource::PvcOptimized,
        }
    }
}

/// Optimize the 1-D condition embedding on teacher-forced loss over the
/// speaker's utterances. The model is frozen and checksummed; only the
/// embedding moves.
#[allow(clippy::too_many_arguments)]
pub fn pvc_finetune(
    utterances: &[Utterance],
    ar: &ArModel,
    init: &SpeakerCondition,
    speaker_id: &str,
    steps: u64,
    lr: f64,
) -> Result<OptimizedEmbedding> {
    if utterances.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "professional voice clone needs at least 2 utterances, got {}",
            utterances.len()
        )));
    }
    ar.freeze();
    let before = checkpoint::fingerprint(&ar.params());

    let layouts: Vec<_> = utterances
        .iter()
        .map(|u| build_target_layout(u, &ar.vocab))
        .collect();
    let embed = Tensor::param(init.vector.clone().into_dyn());
    let mut params = ParamSet::new();
    params.push("pvc.embedding", embed.clone());
    let mut opt = Adam::new(lr);

    let loss_of = |cond: &Tensor| {
        let items: Vec<_> = layouts.iter().map(|l| (l, cond.clone())).collect();
        ar.batch_loss(&items, None)
    };

    let mut trace = Vec::with_capacity(steps as usize + 1);
    trace.push(loss_of(&embed).value());
    for step in 0..steps {
        let loss = loss_of(&embed);
        let v = loss.value();
        if !v.is_finite() {
            return Err(Error::NanLoss {
                step,
                detail: "pvc teacher-forced loss".into(),
            });
        }
        loss.backward();
        opt.step(&params);
        trace.push(loss_of(&embed).value());
    }
    let initial = trace[0];
    let final_loss = *trace.last().unwrap();
    if steps > 0 && final_loss > 2.0 * initial {
        return Err(Error::Diverged(format!(
            "pvc loss rose from {initial:.4} to {final_loss:.4}; retry with a smaller learning rate"
        )));
    }
    let after = checkpoint::fingerprint(&ar.params());
    debug_assert_eq!(before, after, "frozen base model must not change");

    let mut vector: ndarray::Array1<f64> = embed.data().iter().copied().collect();
    let norm = vector.dot(&vector).sqrt().max(1e-12);
    vector.mapv_inplace(|x| x / norm);
    Ok(OptimizedEmbedding {
        vector,
        speaker_id: speaker_id.to_string(),
        steps,
        final_loss,
        loss_trace: trace,
    })
}
