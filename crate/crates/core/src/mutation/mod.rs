//! Mutation actions, their sampling and their application to build child models.

mod space;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use space::{
    mutate_hyperparam, HpName, HpValue, HyperparamSpace, Hyperparams, ASPECT_MINS, COLOR_DELTAS,
    CROP_AREA_MINS, LEARNING_RATES, MOMENTUMS, WARMUP_RATIOS,
};

use crate::error::{Error, Result};
use crate::layers::{init_layer, InitMode, LayerConfig, LayerKind, LayerParams};
use crate::store::{LayerId, LayerStore, ModelId, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum MutationAction {
    /// Trainable copy of the parent's layer at `index`.
    CloneLayer {
        index: usize,
    },
    /// Fresh adapter between transformer blocks `slot` and `slot + 1`.
    InsertAdapter {
        slot: usize,
        inner_dim: usize,
    },
    RemoveTopTransformer,
    /// `value` is drawn when the action is sampled; `None` in the enumeration.
    ChangeHyperparam {
        name: HpName,
        value: Option<HpValue>,
    },
    MakeTrainableHead,
}

/// A layer of a child model under construction.
#[derive(Clone, Debug)]
pub enum ChildLayer {
    Shared(LayerId),
    Trainable(Draft),
}

/// A private, trainable layer not yet committed to the store.
#[derive(Clone, Debug)]
pub struct Draft {
    pub config: LayerConfig,
    pub params: LayerParams,
    /// Layer this one was cloned from.
    pub source: Option<LayerId>,
}

#[derive(Clone, Debug)]
pub struct Child {
    pub task: String,
    pub parent: ModelId,
    pub layers: Vec<ChildLayer>,
    pub hparams: Hyperparams,
    pub actions: Vec<MutationAction>,
    /// Actions that turned out to be no-ops, and forced side effects.
    pub notes: Vec<String>,
}

impl Child {
    /// `(config, params)` for every layer, resolving shared ids in `store`.
    pub fn resolve<'a>(
        &'a self,
        store: &'a LayerStore,
    ) -> Result<Vec<(&'a LayerConfig, &'a LayerParams)>> {
        self.layers
            .iter()
            .map(|l| match l {
                ChildLayer::Shared(id) => store.get(*id).map(|s| (s.config(), s.params())),
                ChildLayer::Trainable(d) => Ok((&d.config, &d.params)),
            })
            .collect()
    }

    pub fn shared_ids(&self) -> Vec<LayerId> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                ChildLayer::Shared(id) => Some(*id),
                ChildLayer::Trainable(_) => None,
            })
            .collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                ChildLayer::Trainable(d) => d.params.scalar_count(),
                ChildLayer::Shared(_) => 0,
            })
            .sum()
    }

    /// Index of the lowest trainable layer (the head is always trainable).
    pub fn lowest_trainable(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, ChildLayer::Trainable(_)))
            .unwrap_or(self.layers.len() - 1)
    }
}

fn kinds(store: &LayerStore, model: &ModelSpec) -> Result<Vec<LayerKind>> {
    model
        .layers
        .iter()
        .map(|&id| store.get(id).map(|l| l.config().kind))
        .collect()
}

/// Adapter slots between consecutive transformer blocks that hold no adapter yet.
fn free_slots(kinds: &[LayerKind]) -> Vec<usize> {
    let blocks: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == LayerKind::TransformerBlock)
        .map(|(i, _)| i)
        .collect();
    blocks
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] == w[0] + 1)
        .map(|(slot, _)| slot)
        .collect()
}

/// Every action applicable to `parent`, in a fixed order.
pub fn enumerate_actions(store: &LayerStore, parent: &ModelSpec) -> Result<Vec<MutationAction>> {
    let kinds = kinds(store, parent)?;
    let mut out: Vec<MutationAction> = (0..kinds.len())
        .map(|index| MutationAction::CloneLayer { index })
        .collect();
    out.extend(
        free_slots(&kinds)
            .into_iter()
            .map(|slot| MutationAction::InsertAdapter {
                slot,
                inner_dim: parent.hparams.adapter_inner_dim,
            }),
    );
    if kinds
        .iter()
        .filter(|k| **k == LayerKind::TransformerBlock)
        .count()
        >= 2
    {
        out.push(MutationAction::RemoveTopTransformer);
    }
    out.extend(
        HpName::ALL
            .into_iter()
            .map(|name| MutationAction::ChangeHyperparam { name, value: None }),
    );
    Ok(out)
}

/// Includes each enumerated action independently with probability `mu`,
/// then `MakeTrainableHead`. Seed parents only get the head action.
pub fn sample_mutations(
    store: &LayerStore,
    parent: &ModelSpec,
    space: &HyperparamSpace,
    mu: f64,
    is_seed: bool,
    rng: &mut impl Rng,
) -> Result<Vec<MutationAction>> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Invalid(format!(
            "mutation probability {mu} outside [0, 1]"
        )));
    }
    let mut out = Vec::new();
    if !is_seed {
        for action in enumerate_actions(store, parent)? {
            if rng.gen::<f64>() >= mu {
                continue;
            }
            out.push(match action {
                MutationAction::ChangeHyperparam { name, .. } => MutationAction::ChangeHyperparam {
                    name,
                    value: Some(space.mutate(&parent.hparams, name, rng)),
                },
                a => a,
            });
        }
        let new_dim = out.iter().find_map(|a| match a {
            MutationAction::ChangeHyperparam {
                name: HpName::AdapterInnerDim,
                value: Some(HpValue::Int(d)),
            } => Some(*d),
            _ => None,
        });
        if let Some(d) = new_dim {
            for a in &mut out {
                if let MutationAction::InsertAdapter { inner_dim, .. } = a {
                    *inner_dim = d;
                }
            }
        }
    }
    out.push(MutationAction::MakeTrainableHead);
    Ok(out)
}

struct Slot {
    /// Index in the parent path, `None` for inserted layers.
    origin: Option<usize>,
    layer: ChildLayer,
}

fn clone_of(store: &LayerStore, id: LayerId) -> Result<Draft> {
    let l = store.get(id)?;
    Ok(Draft {
        config: l.config().clone(),
        params: l.params().clone(),
        source: Some(id),
    })
}

fn kind_of(store: &LayerStore, l: &ChildLayer) -> Result<LayerKind> {
    Ok(match l {
        ChildLayer::Shared(id) => store.get(*id)?.config().kind,
        ChildLayer::Trainable(d) => d.config.kind,
    })
}

/// Builds a child of `parent` for `task` with `num_classes` outputs.
///
/// Actions apply in the order hyperparameters, removal, clones, insertions,
/// head. Conflicting actions become no-ops recorded in `Child::notes`.
pub fn apply_mutations(
    store: &LayerStore,
    parent: &ModelSpec,
    actions: &[MutationAction],
    task: &str,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<Child> {
    let mut notes = Vec::new();
    let mut hparams = parent.hparams.clone();
    let mut slots: Vec<Slot> = parent
        .layers
        .iter()
        .enumerate()
        .map(|(i, &id)| Slot {
            origin: Some(i),
            layer: ChildLayer::Shared(id),
        })
        .collect();

    let mut force_pos_clone = false;
    for a in actions {
        if let MutationAction::ChangeHyperparam { name, value } = a {
            let value = value
                .ok_or_else(|| Error::Invalid(format!("no value sampled for {}", name.as_str())))?;
            if *name == HpName::ImageSize && value != HpValue::Int(hparams.image_size) {
                force_pos_clone = true;
            }
            hparams.set(*name, value)?;
        }
    }

    if actions.contains(&MutationAction::RemoveTopTransformer) {
        let blocks: Vec<usize> = (0..slots.len())
            .filter(|&i| kind_of(store, &slots[i].layer).ok() == Some(LayerKind::TransformerBlock))
            .collect();
        if blocks.len() >= 2 {
            let top = *blocks.last().expect("non-empty");
            let mut end = top + 1;
            while end < slots.len()
                && kind_of(store, &slots[end].layer)? == LayerKind::ResidualAdapter
            {
                end += 1;
            }
            slots.drain(top..end);
        } else {
            notes.push("remove_top_transformer ignored: fewer than two blocks".to_string());
        }
    }

    let clone_at = |slots: &mut Vec<Slot>, pos: usize| -> Result<()> {
        if let ChildLayer::Shared(id) = slots[pos].layer {
            slots[pos].layer = ChildLayer::Trainable(clone_of(store, id)?);
        }
        Ok(())
    };
    for a in actions {
        if let MutationAction::CloneLayer { index } = a {
            match slots.iter().position(|s| s.origin == Some(*index)) {
                Some(pos) => clone_at(&mut slots, pos)?,
                None => notes.push(format!("clone_layer {index} ignored: layer removed")),
            }
        }
    }
    if force_pos_clone {
        if let Some(pos) = (0..slots.len())
            .find(|&i| kind_of(store, &slots[i].layer).ok() == Some(LayerKind::PosEmbed))
        {
            if matches!(slots[pos].layer, ChildLayer::Shared(_)) {
                notes.push("position embedding cloned for image size change".to_string());
                clone_at(&mut slots, pos)?;
            }
        }
    }

    let hidden = store.get(parent.layers[0])?.config().hidden_dim;
    for a in actions {
        if let MutationAction::InsertAdapter { slot, inner_dim } = a {
            let blocks: Vec<usize> = (0..slots.len())
                .filter(|&i| {
                    kind_of(store, &slots[i].layer).ok() == Some(LayerKind::TransformerBlock)
                })
                .collect();
            let ok = blocks.len() > slot + 1 && blocks[slot + 1] == blocks[*slot] + 1;
            if !ok {
                notes.push(format!("insert_adapter {slot} ignored: slot unavailable"));
                continue;
            }
            let config = LayerConfig::residual_adapter(hidden, *inner_dim);
            let params = init_layer(&config, rng, InitMode::Random);
            slots.insert(
                blocks[*slot] + 1,
                Slot {
                    origin: None,
                    layer: ChildLayer::Trainable(Draft {
                        config,
                        params,
                        source: None,
                    }),
                },
            );
        }
    }

    if actions.contains(&MutationAction::MakeTrainableHead) {
        let last = slots.len() - 1;
        if parent.trained_on(task) {
            clone_at(&mut slots, last)?;
        } else {
            let config = LayerConfig::head(hidden, num_classes);
            let params = init_layer(&config, rng, InitMode::Zero);
            slots[last].layer = ChildLayer::Trainable(Draft {
                config,
                params,
                source: None,
            });
        }
    }

    Ok(Child {
        task: task.to_string(),
        parent: parent.id,
        layers: slots.into_iter().map(|s| s.layer).collect(),
        hparams,
        actions: actions.to_vec(),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{check_path, path_forward, tests::tiny_system};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[4, 8, 8, 1], |_| rng.gen_range(-1.0..1.0))
    }

    fn child_logits(store: &LayerStore, child: &Child, x: &Tensor) -> Tensor {
        path_forward(&child.resolve(store).unwrap(), x).unwrap()
    }

    fn trained_model(
        task: &str,
        blocks: usize,
        seed: u64,
    ) -> (crate::store::SystemState, ModelSpec) {
        let sys = tiny_system(blocks, seed);
        let mut m = sys.root.clone();
        m.task = Some(task.into());
        (sys, m)
    }

    #[test]
    fn enumeration_counts() {
        let sys = tiny_system(3, 0);
        let acts = enumerate_actions(&sys.store, &sys.root).unwrap();
        let slots = acts
            .iter()
            .filter(|a| matches!(a, MutationAction::InsertAdapter { .. }))
            .count();
        assert_eq!(slots, 2);
        assert_eq!(
            acts.len(),
            sys.root.layers.len() + 2 + 1 + HpName::ALL.len()
        );

        let one = tiny_system(1, 0);
        let acts = enumerate_actions(&one.store, &one.root).unwrap();
        assert!(!acts.contains(&MutationAction::RemoveTopTransformer));
        assert_eq!(acts.len(), one.root.layers.len() + HpName::ALL.len());
    }

    #[test]
    fn mu_extremes_and_seed_parents() {
        let sys = tiny_system(3, 0);
        let space = HyperparamSpace::new(4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let none = sample_mutations(&sys.store, &sys.root, &space, 0.0, false, &mut rng).unwrap();
        assert_eq!(none, vec![MutationAction::MakeTrainableHead]);
        let seed = sample_mutations(&sys.store, &sys.root, &space, 1.0, true, &mut rng).unwrap();
        assert_eq!(seed, vec![MutationAction::MakeTrainableHead]);
        let all = sample_mutations(&sys.store, &sys.root, &space, 1.0, false, &mut rng).unwrap();
        assert_eq!(
            all.len(),
            enumerate_actions(&sys.store, &sys.root).unwrap().len() + 1
        );
        assert!(sample_mutations(&sys.store, &sys.root, &space, 1.5, false, &mut rng).is_err());
    }

    #[test]
    fn inclusion_rate_matches_mu() {
        let sys = tiny_system(3, 0);
        let space = HyperparamSpace::new(4, 8);
        let enumerated = enumerate_actions(&sys.store, &sys.root).unwrap();
        let mut counts = vec![0usize; enumerated.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        for _ in 0..n {
            let drawn =
                sample_mutations(&sys.store, &sys.root, &space, 0.1, false, &mut rng).unwrap();
            for a in &drawn {
                let key = match a {
                    MutationAction::ChangeHyperparam { name, .. } => {
                        MutationAction::ChangeHyperparam {
                            name: *name,
                            value: None,
                        }
                    }
                    MutationAction::InsertAdapter { slot, .. } => MutationAction::InsertAdapter {
                        slot: *slot,
                        inner_dim: sys.root.hparams.adapter_inner_dim,
                    },
                    other => other.clone(),
                };
                if let Some(i) = enumerated.iter().position(|e| *e == key) {
                    counts[i] += 1;
                }
            }
        }
        for (a, c) in enumerated.iter().zip(&counts) {
            let rate = *c as f64 / n as f64;
            assert!((rate - 0.1).abs() < 0.005, "{a:?}: {rate}");
        }
    }

    #[test]
    fn same_task_head_copy_preserves_logits() {
        let (sys, parent) = trained_model("a", 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let child = apply_mutations(
            &sys.store,
            &parent,
            &[MutationAction::MakeTrainableHead],
            "a",
            3,
            &mut rng,
        )
        .unwrap();
        assert!(
            matches!(child.layers.last(), Some(ChildLayer::Trainable(d)) if d.source == Some(parent.head()))
        );
        for _ in 0..10 {
            let x = batch(&mut rng);
            assert_eq!(
                child_logits(&sys.store, &child, &x),
                sys.model_forward(&parent, &x).unwrap()
            );
        }
    }

    #[test]
    fn new_task_head_is_zero() {
        let (sys, parent) = trained_model("a", 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let child = apply_mutations(
            &sys.store,
            &parent,
            &[MutationAction::MakeTrainableHead],
            "b",
            7,
            &mut rng,
        )
        .unwrap();
        let logits = child_logits(&sys.store, &child, &batch(&mut rng));
        assert_eq!(logits.dims(), &[4, 7]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(child.trainable_params(), 8 * 7 + 7);
    }

    #[test]
    fn adapter_insertion_preserves_logits() {
        let (sys, parent) = trained_model("a", 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let actions = [
            MutationAction::InsertAdapter {
                slot: 1,
                inner_dim: 8,
            },
            MutationAction::MakeTrainableHead,
        ];
        let child = apply_mutations(&sys.store, &parent, &actions, "a", 3, &mut rng).unwrap();
        assert_eq!(child.layers.len(), parent.layers.len() + 1);
        assert!(
            matches!(&child.layers[5], ChildLayer::Trainable(d) if d.config.kind == LayerKind::ResidualAdapter)
        );
        for _ in 0..10 {
            let x = batch(&mut rng);
            assert_eq!(
                child_logits(&sys.store, &child, &x),
                sys.model_forward(&parent, &x).unwrap()
            );
        }
    }

    #[test]
    fn removal_then_clone_of_removed_is_noop() {
        let (sys, parent) = trained_model("a", 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let actions = [
            MutationAction::CloneLayer { index: 5 },
            MutationAction::CloneLayer { index: 3 },
            MutationAction::RemoveTopTransformer,
            MutationAction::InsertAdapter {
                slot: 1,
                inner_dim: 8,
            },
            MutationAction::MakeTrainableHead,
        ];
        let child = apply_mutations(&sys.store, &parent, &actions, "a", 3, &mut rng).unwrap();
        assert_eq!(child.layers.len(), parent.layers.len() - 1);
        assert_eq!(child.notes.len(), 2, "{:?}", child.notes);
        assert!(matches!(child.layers[3], ChildLayer::Trainable(_)));
        assert_eq!(child.lowest_trainable(), 3);
    }

    #[test]
    fn image_size_change_forces_pos_clone() {
        let (sys, parent) = trained_model("a", 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let actions = [
            MutationAction::ChangeHyperparam {
                name: HpName::ImageSize,
                value: Some(HpValue::Int(12)),
            },
            MutationAction::MakeTrainableHead,
        ];
        let child = apply_mutations(&sys.store, &parent, &actions, "a", 3, &mut rng).unwrap();
        assert_eq!(child.hparams.image_size, 12);
        assert!(matches!(child.layers[2], ChildLayer::Trainable(_)));
        assert_eq!(child.lowest_trainable(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_mutations_keep_paths_well_typed(seed in 0u64..10_000, blocks in 1usize..4, mu in 0.0f64..1.0) {
            let (sys, parent) = trained_model("a", blocks, seed % 7);
            let space = HyperparamSpace::new(4, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let before = sys.store.hashes();
            let actions = sample_mutations(&sys.store, &parent, &space, mu, false, &mut rng).unwrap();
            let task = if seed % 2 == 0 { "a" } else { "b" };
            let child = apply_mutations(&sys.store, &parent, &actions, task, 3, &mut rng).unwrap();
            let resolved = child.resolve(&sys.store).unwrap();
            prop_assert!(check_path(&resolved.iter().map(|l| l.0).collect::<Vec<_>>()).is_ok());
            prop_assert!(sys.audit_immutability(&before).is_empty());
            let expected: usize = child.layers.iter().map(|l| match l {
                ChildLayer::Trainable(d) => d.params.scalar_count(),
                _ => 0,
            }).sum();
            prop_assert_eq!(child.trainable_params(), expected);
            let is_trainable_head = matches!(child.layers.last(), Some(ChildLayer::Trainable(_)));
            prop_assert!(is_trainable_head);
        }
    }
}
