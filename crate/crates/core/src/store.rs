//! Immutable layer registry, committed models and multitask accounting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, LayerConfig, LayerKind, LayerParams};
use crate::mutation::Hyperparams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub u64);

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(pub u64);

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "M{}", self.0)
    }
}

/// One `(task, train cycles)` record of a layer's training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub task: String,
    pub cycles: usize,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// 64-bit FNV-1a of a byte string.
pub fn content_hash_bytes(bytes: &[u8]) -> u64 {
    fnv1a(FNV_OFFSET, bytes)
}

/// 64-bit FNV-1a over the little-endian bytes of every tensor.
pub fn content_hash(params: &LayerParams) -> u64 {
    let mut h = FNV_OFFSET;
    for t in &params.tensors {
        for v in t.data() {
            h = fnv1a(h, &v.to_le_bytes());
        }
    }
    h
}

/// A frozen layer. Fields are private: there is no way to mutate a layer
/// once it has been committed.
#[derive(Clone, Debug)]
pub struct StoredLayer {
    id: LayerId,
    config: LayerConfig,
    params: LayerParams,
    parent: Option<LayerId>,
    history: Vec<TrainingRecord>,
    hash: u64,
}

impl StoredLayer {
    pub fn id(&self) -> LayerId {
        self.id
    }

    pub fn config(&self) -> &LayerConfig {
        &self.config
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn parent(&self) -> Option<LayerId> {
        self.parent
    }

    pub fn history(&self) -> &[TrainingRecord] {
        &self.history
    }

    /// Hash recorded at commit time.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }
}

#[derive(Clone, Debug, Default)]
pub struct LayerStore {
    layers: BTreeMap<LayerId, StoredLayer>,
    next_id: u64,
}

impl LayerStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Freezes `params` under a fresh id.
    pub fn commit(
        &mut self,
        config: LayerConfig,
        params: LayerParams,
        parent: Option<LayerId>,
        history: Vec<TrainingRecord>,
    ) -> Result<LayerId> {
        config.validate()?;
        params.check_shapes(&config)?;
        if let Some(p) = parent {
            self.get(p)?;
        }
        let id = LayerId(self.next_id);
        self.next_id += 1;
        let hash = content_hash(&params);
        self.layers.insert(
            id,
            StoredLayer {
                id,
                config,
                params,
                parent,
                history,
                hash,
            },
        );
        Ok(id)
    }

    /// Re-inserts a layer under its original id, verifying `expected_hash`.
    pub(crate) fn restore(
        &mut self,
        id: LayerId,
        config: LayerConfig,
        params: LayerParams,
        parent: Option<LayerId>,
        history: Vec<TrainingRecord>,
        expected_hash: u64,
    ) -> Result<()> {
        params
            .check_shapes(&config)
            .map_err(|_| Error::HashMismatch { id })?;
        let hash = content_hash(&params);
        if hash != expected_hash {
            return Err(Error::HashMismatch { id });
        }
        if self.layers.contains_key(&id) {
            return Err(Error::Checkpoint(format!("duplicate layer {id}")));
        }
        self.next_id = self.next_id.max(id.0 + 1);
        self.layers.insert(
            id,
            StoredLayer {
                id,
                config,
                params,
                parent,
                history,
                hash,
            },
        );
        Ok(())
    }

    pub fn get(&self, id: LayerId) -> Result<&StoredLayer> {
        self.layers.get(&id).ok_or(Error::DanglingLayer(id))
    }

    pub fn contains(&self, id: LayerId) -> bool {
        self.layers.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredLayer> {
        self.layers.values()
    }

    /// The id that the next commit will receive.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Ids from `id` up through its lineage ancestors.
    pub fn lineage(&self, id: LayerId) -> Result<Vec<LayerId>> {
        let mut out = vec![id];
        let mut cur = self.get(id)?.parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.get(p)?.parent;
        }
        Ok(out)
    }

    /// Current hash of every layer.
    pub fn hashes(&self) -> BTreeMap<LayerId, u64> {
        self.layers
            .values()
            .map(|l| (l.id, content_hash(&l.params)))
            .collect()
    }
}

/// A committed model: a well-typed path of stored layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: ModelId,
    /// `None` for the untrained root model.
    pub task: Option<String>,
    pub parent: Option<ModelId>,
    pub layers: Vec<LayerId>,
    pub hparams: Hyperparams,
    pub quality: f64,
    pub score: f64,
    #[serde(default)]
    pub offspring_count: usize,
}

impl ModelSpec {
    pub fn trained_on(&self, task: &str) -> bool {
        self.task.as_deref() == Some(task)
    }

    pub fn head(&self) -> LayerId {
        *self.layers.last().expect("a model has a head")
    }
}

/// The layer store, the root model and the best model per task.
#[derive(Clone, Debug)]
pub struct SystemState {
    pub store: LayerStore,
    pub root: ModelSpec,
    pub best: BTreeMap<String, ModelSpec>,
    next_model: u64,
}

impl SystemState {
    pub fn new(store: LayerStore, root: ModelSpec) -> Result<Self> {
        let next_model = root.id.0 + 1;
        let s = Self {
            store,
            root,
            best: BTreeMap::new(),
            next_model,
        };
        s.check_model(&s.root)?;
        Ok(s)
    }

    pub(crate) fn with_next_model(mut self, next: u64) -> Self {
        self.next_model = self.next_model.max(next);
        self
    }

    pub fn next_model_id(&self) -> u64 {
        self.next_model
    }

    pub fn alloc_model_id(&mut self) -> ModelId {
        let id = ModelId(self.next_model);
        self.next_model += 1;
        id
    }

    /// Root parameter count without its head.
    pub fn root_model_params(&self) -> usize {
        let layers = &self.root.layers;
        layers[..layers.len() - 1]
            .iter()
            .map(|&id| self.store.get(id).map_or(0, StoredLayer::param_count))
            .sum()
    }

    /// The set `M`: root plus each task's best model.
    pub fn models(&self) -> impl Iterator<Item = &ModelSpec> {
        std::iter::once(&self.root).chain(self.best.values())
    }

    pub fn check_model(&self, model: &ModelSpec) -> Result<()> {
        let configs = model
            .layers
            .iter()
            .map(|&id| self.store.get(id).map(StoredLayer::config))
            .collect::<Result<Vec<_>>>()?;
        check_path(&configs)
    }

    /// Number of best models of tasks other than `active_task` that use `id`.
    pub fn sharers(&self, id: LayerId, active_task: &str) -> usize {
        self.best
            .iter()
            .filter(|(t, m)| t.as_str() != active_task && m.layers.contains(&id))
            .count()
    }

    /// Accounted size: each layer's count divided by one plus its sharers.
    pub fn accounted_params(&self, model: &ModelSpec, active_task: &str) -> Result<f64> {
        self.accounted_for(&model.layers, 0, active_task)
    }

    /// Accounted size of a path of stored layers plus `private` unshared parameters.
    pub fn accounted_for(
        &self,
        shared: &[LayerId],
        private: usize,
        active_task: &str,
    ) -> Result<f64> {
        let mut total = private as f64;
        for &id in shared {
            let count = self.store.get(id)?.param_count() as f64;
            total += count / (self.sharers(id, active_task) + 1) as f64;
        }
        Ok(total)
    }

    pub fn total_params(&self, model: &ModelSpec) -> Result<usize> {
        model
            .layers
            .iter()
            .map(|&id| self.store.get(id).map(StoredLayer::param_count))
            .sum()
    }

    pub fn unique_task_count(&self, id: LayerId) -> Result<usize> {
        unique_task_count(&self.store, id)
    }

    pub fn knowledge_flow(&self, model: &ModelSpec) -> Result<BTreeMap<String, f64>> {
        knowledge_flow(&self.store, &model.layers)
    }

    /// Logits of a committed model on an image batch `[B, H, W, C]`.
    pub fn model_forward(&self, model: &ModelSpec, batch: &Tensor) -> Result<Tensor> {
        let layers = model
            .layers
            .iter()
            .map(|&id| self.store.get(id).map(|l| (l.config(), l.params())))
            .collect::<Result<Vec<_>>>()?;
        path_forward(&layers, batch)
    }

    /// Layers whose current hash differs from `baseline` (or that disappeared).
    pub fn audit_immutability(&self, baseline: &BTreeMap<LayerId, u64>) -> Vec<LayerId> {
        baseline
            .iter()
            .filter(|(id, h)| {
                self.store
                    .get(**id)
                    .map_or(true, |l| content_hash(l.params()) != **h)
            })
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Checks `PatchEmbed → ClassToken → PosEmbed → {Block | Adapter}* → Head`
/// and that hidden sizes agree.
pub fn check_path(configs: &[&LayerConfig]) -> Result<()> {
    use LayerKind::*;
    let n = configs.len();
    if n < 4 {
        return Err(Error::PathType(format!("{n} layers is too short")));
    }
    for (i, c) in configs.iter().enumerate() {
        let ok = match i {
            0 => c.kind == PatchEmbed,
            1 => c.kind == ClassToken,
            2 => c.kind == PosEmbed,
            _ if i == n - 1 => c.kind == Head,
            _ => matches!(c.kind, TransformerBlock | ResidualAdapter),
        };
        if !ok {
            return Err(Error::PathType(format!(
                "unexpected {} at position {i}",
                c.kind.name()
            )));
        }
        if c.hidden_dim != configs[0].hidden_dim {
            return Err(Error::PathType(format!(
                "{} at position {i} has hidden size {}, expected {}",
                c.kind.name(),
                c.hidden_dim,
                configs[0].hidden_dim
            )));
        }
    }
    Ok(())
}

/// Composes the layer ops of a path on an image batch.
pub fn path_forward(layers: &[(&LayerConfig, &LayerParams)], batch: &Tensor) -> Result<Tensor> {
    check_path(&layers.iter().map(|l| l.0).collect::<Vec<_>>())?;
    let mut x = batch.clone();
    for (config, params) in layers {
        x = layers::forward(config, params, &x, false)?.0;
    }
    Ok(x)
}

pub fn unique_task_count(store: &LayerStore, id: LayerId) -> Result<usize> {
    let mut tasks = BTreeSet::new();
    for l in store.lineage(id)? {
        tasks.extend(store.get(l)?.history.iter().map(|r| r.task.as_str()));
    }
    Ok(tasks.len())
}

/// Parameter-weighted share of lineage training cycles per source task.
pub fn knowledge_flow(store: &LayerStore, layers: &[LayerId]) -> Result<BTreeMap<String, f64>> {
    let mut mass: BTreeMap<String, f64> = BTreeMap::new();
    for &id in layers {
        let count = store.get(id)?.param_count() as f64;
        for l in store.lineage(id)? {
            for r in &store.get(l)?.history {
                *mass.entry(r.task.clone()).or_default() += count * r.cycles as f64;
            }
        }
    }
    let total: f64 = mass.values().sum();
    if total <= 0.0 {
        return Ok(BTreeMap::new());
    }
    mass.values_mut().for_each(|v| *v /= total);
    Ok(mass)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::layers::{init_layer, InitMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: usize = 8;

    fn history(task: &str, cycles: usize) -> Vec<TrainingRecord> {
        vec![TrainingRecord {
            task: task.into(),
            cycles,
        }]
    }

    fn commit_random(store: &mut LayerStore, config: LayerConfig, rng: &mut ChaCha8Rng) -> LayerId {
        let p = init_layer(&config, rng, InitMode::Random);
        store.commit(config, p, None, vec![]).unwrap()
    }

    /// Root with `blocks` transformer blocks on 8×8 single-channel images, patch 4.
    pub(crate) fn tiny_system(blocks: usize, seed: u64) -> SystemState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = LayerStore::new();
        let mut ids = vec![
            commit_random(&mut store, LayerConfig::patch_embed(4, 1, H), &mut rng),
            commit_random(&mut store, LayerConfig::class_token(H), &mut rng),
            commit_random(&mut store, LayerConfig::pos_embed(2, H), &mut rng),
        ];
        for _ in 0..blocks {
            ids.push(commit_random(
                &mut store,
                LayerConfig::transformer_block(H, 2, 16),
                &mut rng,
            ));
        }
        let head = LayerConfig::head(H, 3);
        let hp = init_layer(&head, &mut rng, InitMode::Random);
        ids.push(store.commit(head, hp, None, vec![]).unwrap());
        let root = ModelSpec {
            id: ModelId(0),
            task: None,
            parent: None,
            layers: ids,
            hparams: Hyperparams::defaults(8),
            quality: 0.0,
            score: 0.0,
            offspring_count: 0,
        };
        SystemState::new(store, root).unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng, b: usize) -> Tensor {
        Tensor::from_fn(&[b, 8, 8, 1], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn commit_round_trip_and_distinct_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = LayerStore::new();
        let c = LayerConfig::transformer_block(H, 2, 16);
        let p = init_layer(&c, &mut rng, InitMode::Random);
        let a = store.commit(c.clone(), p.clone(), None, vec![]).unwrap();
        let b = store.commit(c.clone(), p.clone(), None, vec![]).unwrap();
        assert_ne!(a, b);
        assert_eq!(store.get(a).unwrap().params(), &p);
        assert_eq!(store.get(a).unwrap().hash(), content_hash(&p));
        assert_eq!(store.get(a).unwrap().hash(), store.get(b).unwrap().hash());
    }

    #[test]
    fn commit_rejects_shape_mismatch_and_dangling_parent() {
        let mut store = LayerStore::new();
        let c = LayerConfig::head(H, 3);
        let wrong = init_layer(
            &LayerConfig::head(H, 4),
            &mut ChaCha8Rng::seed_from_u64(0),
            InitMode::Zero,
        );
        assert!(matches!(
            store.commit(c.clone(), wrong, None, vec![]),
            Err(Error::Shape(_))
        ));
        let ok = init_layer(&c, &mut ChaCha8Rng::seed_from_u64(0), InitMode::Zero);
        assert!(matches!(
            store.commit(c, ok, Some(LayerId(9)), vec![]),
            Err(Error::DanglingLayer(_))
        ));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(content_hash_bytes(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(content_hash_bytes(b"a"), 0xaf63_dc4c_8601_ec8c);
        let p = LayerParams {
            tensors: vec![Tensor::new(vec![1], vec![0.0]).unwrap()],
        };
        let mut e: u64 = 0xcbf2_9ce4_8422_2325;
        for _ in 0..4 {
            e = e.wrapping_mul(0x100000001b3);
        }
        assert_eq!(content_hash(&p), e);
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut sys = tiny_system(2, 1);
        let head = LayerConfig::head(H, 3);
        let zero = init_layer(&head, &mut ChaCha8Rng::seed_from_u64(0), InitMode::Zero);
        let hid = sys.store.commit(head, zero, None, vec![]).unwrap();
        let mut m = sys.root.clone();
        *m.layers.last_mut().unwrap() = hid;
        let logits = sys
            .model_forward(&m, &batch(&mut ChaCha8Rng::seed_from_u64(2), 4))
            .unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn path_forward_equals_manual_composition() {
        let sys = tiny_system(2, 3);
        let x = batch(&mut ChaCha8Rng::seed_from_u64(4), 3);
        let got = sys.model_forward(&sys.root, &x).unwrap();
        let l = |i: usize| sys.store.get(sys.root.layers[i]).unwrap();
        let mut rows = Vec::new();
        for b in 0..3 {
            let img = Tensor::new(vec![8, 8, 1], x.data()[b * 64..(b + 1) * 64].to_vec()).unwrap();
            let t = layers::patch_embed_forward(l(0).config(), l(0).params(), &img).unwrap();
            let t = layers::class_token_prepend(l(1).config(), l(1).params(), &t).unwrap();
            let t = layers::pos_embed_add(l(2).config(), l(2).params(), &t).unwrap();
            let t = layers::transformer_block_forward(l(3).config(), l(3).params(), &t).unwrap();
            let t = layers::transformer_block_forward(l(4).config(), l(4).params(), &t).unwrap();
            let cls = Tensor::new(vec![H], t.row(0).to_vec()).unwrap();
            rows.extend(
                layers::head_forward(l(5).config(), l(5).params(), &cls)
                    .unwrap()
                    .into_data(),
            );
        }
        for (a, b) in got.data().iter().zip(&rows) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn fresh_adapter_leaves_logits_unchanged() {
        let mut sys = tiny_system(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ac = LayerConfig::residual_adapter(H, 8);
        let ap = init_layer(&ac, &mut rng, InitMode::Random);
        let aid = sys.store.commit(ac, ap, None, vec![]).unwrap();
        let mut m = sys.root.clone();
        m.layers.insert(4, aid);
        let x = batch(&mut rng, 5);
        assert_eq!(
            sys.model_forward(&sys.root, &x).unwrap(),
            sys.model_forward(&m, &x).unwrap()
        );
    }

    #[test]
    fn ill_typed_paths_are_rejected() {
        let sys = tiny_system(1, 0);
        let mut m = sys.root.clone();
        m.layers.swap(0, 1);
        assert!(matches!(sys.check_model(&m), Err(Error::PathType(_))));
        let mut m = sys.root.clone();
        m.layers.pop();
        assert!(sys.check_model(&m).is_err());
        let mut m = sys.root.clone();
        m.layers.push(LayerId(999));
        assert!(matches!(sys.check_model(&m), Err(Error::DanglingLayer(_))));
    }

    fn with_task_model(sys: &mut SystemState, task: &str, layers: Vec<LayerId>) {
        let id = sys.alloc_model_id();
        let mut m = sys.root.clone();
        m.id = id;
        m.task = Some(task.into());
        m.layers = layers;
        sys.best.insert(task.into(), m);
    }

    #[test]
    fn accounted_params_examples() {
        let mut sys = tiny_system(2, 7);
        let root = sys.root.clone();
        let total = sys.total_params(&root).unwrap() as f64;
        assert_eq!(sys.accounted_params(&root, "a").unwrap(), total);

        with_task_model(&mut sys, "b", root.layers.clone());
        let block = sys.store.get(root.layers[3]).unwrap().param_count() as f64;
        let a = sys.accounted_params(&root, "a").unwrap();
        assert_eq!(a, total / 2.0);
        // Sharers of the active task itself are not counted.
        assert_eq!(sys.accounted_params(&root, "b").unwrap(), total);

        with_task_model(&mut sys, "c", vec![root.layers[3]]);
        let a3 = sys.accounted_params(&root, "a").unwrap();
        assert!((a3 - (total / 2.0 - block / 2.0 + block / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn unique_task_count_over_lineage() {
        let mut store = LayerStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = LayerConfig::class_token(H);
        let p = init_layer(&c, &mut rng, InitMode::Random);
        let fresh = store.commit(c.clone(), p.clone(), None, vec![]).unwrap();
        assert_eq!(unique_task_count(&store, fresh).unwrap(), 0);
        let mut hist = history("A", 2);
        hist.extend(history("B", 1));
        let ab = store.commit(c.clone(), p.clone(), None, hist).unwrap();
        let clone = store
            .commit(c.clone(), p.clone(), Some(ab), vec![])
            .unwrap();
        assert_eq!(unique_task_count(&store, clone).unwrap(), 2);
        let abc = store
            .commit(c.clone(), p.clone(), Some(ab), history("C", 3))
            .unwrap();
        assert_eq!(unique_task_count(&store, abc).unwrap(), 3);
        let again = store.commit(c, p, Some(abc), history("A", 1)).unwrap();
        assert_eq!(unique_task_count(&store, again).unwrap(), 3);
        assert!(unique_task_count(&store, LayerId(77)).is_err());
    }

    #[test]
    fn knowledge_flow_bookkeeping() {
        let mut sys = tiny_system(2, 8);
        assert!(sys.knowledge_flow(&sys.root.clone()).unwrap().is_empty());

        // Every shared layer carries three cycles of A; a fresh head gets k cycles of B.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut trained = Vec::new();
        for &id in &sys.root.layers[..sys.root.layers.len() - 1] {
            let l = sys.store.get(id).unwrap().clone();
            trained.push(
                sys.store
                    .commit(
                        l.config().clone(),
                        l.params().clone(),
                        Some(id),
                        history("A", 3),
                    )
                    .unwrap(),
            );
        }
        let head = LayerConfig::head(H, 3);
        let hp = init_layer(&head, &mut rng, InitMode::Zero);
        let k = 5;
        let head_mass = hp.scalar_count() as f64;
        let hid = sys.store.commit(head, hp, None, history("B", k)).unwrap();
        let body_mass: f64 = trained
            .iter()
            .map(|&i| sys.store.get(i).unwrap().param_count() as f64)
            .sum();
        trained.push(hid);
        let flow = knowledge_flow(&sys.store, &trained).unwrap();
        let (a, b) = (3.0 * body_mass, k as f64 * head_mass);
        assert!((flow["A"] - a / (a + b)).abs() < 1e-12);
        assert!((flow["B"] - b / (a + b)).abs() < 1e-12);
        assert!((flow.values().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn audit_detects_exactly_the_corrupted_layer() {
        let mut sys = tiny_system(2, 10);
        let baseline = sys.store.hashes();
        assert!(sys.audit_immutability(&baseline).is_empty());
        let victim = sys.root.layers[3];
        sys.store.layers.get_mut(&victim).unwrap().params.tensors[0].data_mut()[0] += 1.0;
        assert_eq!(sys.audit_immutability(&baseline), vec![victim]);
    }

    /// Brute-force sharer enumeration on random systems.
    fn brute_force(sys: &SystemState, model: &ModelSpec, task: &str) -> f64 {
        let mut total = 0.0;
        for &id in &model.layers {
            let count = sys.store.get(id).unwrap().param_count();
            for _ in 0..count {
                let mut sharers = 0;
                for (t, m) in &sys.best {
                    if t != task && m.layers.contains(&id) {
                        sharers += 1;
                    }
                }
                total += 1.0 / (sharers as f64 + 1.0);
            }
        }
        total
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn accounting_matches_brute_force(seed in 0u64..1000, n_tasks in 1usize..5) {
            let mut sys = tiny_system(3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let root = sys.root.clone();
            for t in 0..n_tasks {
                let layers = root.layers.iter().map(|&id| {
                    if rng.gen_bool(0.5) {
                        id
                    } else {
                        let l = sys.store.get(id).unwrap().clone();
                        sys.store.commit(l.config().clone(), l.params().clone(), Some(id), vec![]).unwrap()
                    }
                }).collect();
                with_task_model(&mut sys, &format!("t{t}"), layers);
            }
            let models: Vec<ModelSpec> = sys.models().cloned().collect();
            for m in &models {
                for task in ["t0", "t1", "zz"] {
                    let fast = sys.accounted_params(m, task).unwrap();
                    let slow = brute_force(&sys, m, task);
                    prop_assert!((fast - slow).abs() <= 1e-9 * slow.max(1.0));
                    prop_assert!(fast <= sys.total_params(m).unwrap() as f64 + 1e-9);
                }
            }
        }
    }
}
