//! Byzantine client behaviours. All malicious clients share one spec, which
//! models a coordinated (colluding) attack.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::model::{local_train, Model, TrainConfig};
use crate::params::ParamVector;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackKind {
    None,
    SignFlip,
    GaussianNoise {
        sigma: f64,
    },
    /// Relabel `source` as `target` locally, then train normally.
    BackdoorLabelFlip {
        source: usize,
        target: usize,
    },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::SignFlip => "sign_flip",
            AttackKind::GaussianNoise { .. } => "gaussian_noise",
            AttackKind::BackdoorLabelFlip { .. } => "backdoor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// First round (inclusive) in which the attack is active.
    pub start_round: usize,
}

impl AttackSpec {
    pub const NONE: AttackSpec = AttackSpec {
        kind: AttackKind::None,
        start_round: 0,
    };

    pub fn sign_flip() -> Self {
        Self {
            kind: AttackKind::SignFlip,
            start_round: 0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.kind {
            AttackKind::GaussianNoise { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::Argument(format!("gaussian noise sigma {sigma} must be > 0")))
            }
            AttackKind::BackdoorLabelFlip { source, target } => {
                if source == target {
                    Err(Error::Argument("backdoor source and target classes must differ".into()))
                } else if source >= num_classes || target >= num_classes {
                    Err(Error::Argument(format!(
                        "backdoor classes {source} -> {target} outside [0, {num_classes})"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Negates every weight; the L2 norm is unchanged.
pub fn sign_flip(update: &ParamVector) -> ParamVector {
    update.negate()
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every coordinate.
pub fn gaussian_noise(update: &ParamVector, sigma: f64, seed: u64) -> Result<ParamVector> {
    let normal = Normal::new(0.0, sigma)
        .ok()
        .filter(|_| sigma > 0.0)
        .ok_or_else(|| Error::Argument(format!("gaussian noise sigma {sigma} must be > 0")))?;
    let mut rng = seed::rng(seed);
    Ok(ParamVector::new(
        update.as_slice().iter().map(|v| v + normal.sample(&mut rng)).collect(),
    ))
}

/// Relabels every `source` sample as `target`.
pub fn backdoor_label_flip(shard: &ClientShard, source: usize, target: usize) -> Result<ClientShard> {
    let classes = shard.data.num_classes();
    if source >= classes || target >= classes {
        return Err(Error::Argument(format!(
            "classes {source} -> {target} outside [0, {classes})"
        )));
    }
    Ok(ClientShard {
        client_id: shard.client_id,
        data: shard.data.map_labels(|l| if l == source { target } else { l })?,
        role: shard.role,
    })
}

/// What a client needed to produce its honest update; used to retrain for
/// data-poisoning attacks.
pub struct TrainingContext<'a> {
    pub global: &'a Model,
    pub train: &'a TrainConfig,
}

/// Transforms a client's honest update according to `spec`. Honest clients,
/// `AttackKind::None` and rounds before `start_round` pass the update through.
pub fn apply_attack(
    client: &ClientShard,
    honest_update: &ParamVector,
    spec: &AttackSpec,
    round: usize,
    seed: u64,
    ctx: &TrainingContext<'_>,
) -> Result<ParamVector> {
    if !client.is_malicious() || round < spec.start_round {
        return Ok(honest_update.clone());
    }
    match spec.kind {
        AttackKind::None => Ok(honest_update.clone()),
        AttackKind::SignFlip => Ok(sign_flip(honest_update)),
        AttackKind::GaussianNoise { sigma } => gaussian_noise(honest_update, sigma, seed),
        AttackKind::BackdoorLabelFlip { source, target } => {
            let poisoned = backdoor_label_flip(client, source, target)?;
            local_train(ctx.global, &poisoned.data, ctx.train)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, LabeledDataset, Role};
    use crate::model::ModelSpec;

    fn shard(labels: Vec<usize>, role: Role) -> ClientShard {
        let n = labels.len();
        ClientShard {
            client_id: 0,
            data: LabeledDataset::new((0..n * 2).map(|v| v as f64).collect(), 2, labels, 4).unwrap(),
            role,
        }
    }

    #[test]
    fn sign_flip_is_norm_preserving_involution() {
        let w = ParamVector::new(vec![1.0, -2.0, 3.0]);
        assert_eq!(sign_flip(&w).as_slice(), &[-1.0, 2.0, -3.0]);
        assert_eq!(sign_flip(&sign_flip(&w)), w);
        assert_eq!(sign_flip(&w).l2_norm(), w.l2_norm());
    }

    #[test]
    fn vanishing_noise() {
        let w = ParamVector::new(vec![0.5; 16]);
        let out = gaussian_noise(&w, 1e-12, 3).unwrap();
        assert!(out.l2_distance(&w).unwrap() < 1e-9);
        assert_eq!(out, gaussian_noise(&w, 1e-12, 3).unwrap());
        assert!(gaussian_noise(&w, 0.0, 3).is_err());
    }

    #[test]
    fn noise_has_requested_std() {
        let w = ParamVector::zeros(10_000);
        let out = gaussian_noise(&w, 0.5, 42).unwrap();
        let n = out.len() as f64;
        let mean = out.as_slice().iter().sum::<f64>() / n;
        let var = out.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.5).abs() < 0.025, "std {}", var.sqrt());
    }

    #[test]
    fn backdoor_relabels() {
        let none = shard(vec![0, 2, 3], Role::Malicious);
        assert_eq!(backdoor_label_flip(&none, 1, 2).unwrap().data, none.data);
        let all = shard(vec![1, 1], Role::Malicious);
        assert_eq!(backdoor_label_flip(&all, 1, 3).unwrap().data.labels(), &[3, 3]);

        let mixed = shard(vec![1, 0, 1, 2, 1, 3], Role::Malicious);
        let before = mixed.data.class_histogram();
        let out = backdoor_label_flip(&mixed, 1, 2).unwrap();
        let after = out.data.class_histogram();
        assert_eq!(after[1], 0);
        assert_eq!(after[2], before[2] + before[1]);
        assert_eq!(after[0], before[0]);
        assert_eq!(out.n_k(), mixed.n_k());
        assert_eq!(out.data.features(), mixed.data.features());
    }

    #[test]
    fn activation_gate_and_roles() {
        let data = synth_blobs(4, 5, 2, 1.0, 0).unwrap();
        let spec_m = ModelSpec::logistic(2, 4);
        let global = Model::zeros(spec_m).unwrap();
        let train = TrainConfig::new(0.1, 1, 4, 0);
        let ctx = TrainingContext {
            global: &global,
            train: &train,
        };
        let w = ParamVector::new(vec![1.0; spec_m.param_count()]);
        let bad = ClientShard {
            client_id: 0,
            data: data.clone(),
            role: Role::Malicious,
        };
        let good = ClientShard {
            client_id: 1,
            data,
            role: Role::Honest,
        };
        let spec = AttackSpec {
            kind: AttackKind::SignFlip,
            start_round: 3,
        };

        assert_eq!(apply_attack(&bad, &w, &spec, 2, 0, &ctx).unwrap(), w);
        assert_eq!(apply_attack(&bad, &w, &spec, 3, 0, &ctx).unwrap(), w.negate());
        assert_eq!(apply_attack(&good, &w, &spec, 9, 0, &ctx).unwrap(), w);
        assert_eq!(apply_attack(&bad, &w, &AttackSpec::NONE, 9, 0, &ctx).unwrap(), w);

        let backdoor = AttackSpec {
            kind: AttackKind::BackdoorLabelFlip { source: 0, target: 1 },
            start_round: 0,
        };
        let poisoned = apply_attack(&bad, &w, &backdoor, 0, 0, &ctx).unwrap();
        let relabeled = backdoor_label_flip(&bad, 0, 1).unwrap();
        assert_eq!(poisoned, local_train(&global, &relabeled.data, &train).unwrap());
        assert_eq!(poisoned.len(), w.len());
    }

    #[test]
    fn spec_validation() {
        let same = AttackSpec {
            kind: AttackKind::BackdoorLabelFlip { source: 2, target: 2 },
            start_round: 0,
        };
        assert!(same.validate(10).is_err());
        let noise = AttackSpec {
            kind: AttackKind::GaussianNoise { sigma: -1.0 },
            start_round: 0,
        };
        assert!(noise.validate(10).is_err());
        assert!(AttackSpec::sign_flip().validate(10).is_ok());
    }
}
