//! Scalar loss assembly for both stages.

use serde::{Deserialize, Serialize};

use super::config::{Ablations, Lambdas};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Loss {
    pub total: f64,
    pub recons: f64,
    pub duration: f64,
}

/// `recons + λ_dur · duration`.
pub fn compute_stage1_loss(recons: f64, duration: f64, lambda_duration: f64) -> Stage1Loss {
    Stage1Loss {
        total: recons + lambda_duration * duration,
        recons,
        duration,
    }
}

/// Unweighted stage-2 components. Terms removed by an ablation are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub recons: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub emotion: f64,
    pub speaker: f64,
}

impl LossComponents {
    pub fn add(&mut self, other: &LossComponents) {
        self.recons += other.recons;
        self.duration += other.duration;
        self.pitch += other.pitch;
        self.energy += other.energy;
        self.emotion += other.emotion;
        self.speaker += other.speaker;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Loss {
    pub total: f64,
    pub components: LossComponents,
    /// The MI estimate as measured, before gating.
    pub mi: f64,
    /// `λ_mi · max(0, mi)`, or zero when the MI term is ablated.
    pub mi_term: f64,
}

/// Per-term weights after ablations; these are the exact coefficients the
/// graph seeds use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveWeights {
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub emotion: f64,
    pub speaker: f64,
    pub mi: f64,
}

impl EffectiveWeights {
    pub fn new(l: &Lambdas, a: &Ablations) -> Self {
        let pred = if a.use_predictors { 1.0 } else { 0.0 };
        EffectiveWeights {
            duration: l.duration,
            pitch: l.pitch,
            energy: l.energy,
            emotion: l.emotion * pred,
            speaker: l.speaker * pred,
            mi: if a.use_mine { l.mi } else { 0.0 },
        }
    }
}

pub fn compute_stage2_loss(
    c: &LossComponents,
    mi: f64,
    lambdas: &Lambdas,
    ablations: &Ablations,
) -> Stage2Loss {
    let w = EffectiveWeights::new(lambdas, ablations);
    let mi_term = if ablations.use_mine {
        w.mi * mi.max(0.0)
    } else {
        0.0
    };
    let mut total = c.recons + w.duration * c.duration + w.pitch * c.pitch + w.energy * c.energy;
    if ablations.use_predictors {
        total += w.emotion * c.emotion + w.speaker * c.speaker;
    }
    Stage2Loss {
        total: total + mi_term,
        components: *c,
        mi,
        mi_term,
    }
}
