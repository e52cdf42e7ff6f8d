//! Parameter storage partitioned into the four trainable groups.
//!
//! Every tensor of the model registers here exactly once, tagged with its
//! group. Stage-wise freezing flips per-group trainability flags; a
//! [`Session`] turns parameters into tape leaves whose `requires_grad`
//! follows those flags, so backward passes skip frozen subgraphs entirely.

use crate::error::{Error, Result};
use crate::numerics::{GTensor, Scalar, SplitMix64, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    VideoTower,
    AudioTower,
    Adaptors,
    TextEncoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::VideoTower,
        ParamGroup::AudioTower,
        ParamGroup::Adaptors,
        ParamGroup::TextEncoder,
    ];

    pub fn index(self) -> usize {
        match self {
            ParamGroup::VideoTower => 0,
            ParamGroup::AudioTower => 1,
            ParamGroup::Adaptors => 2,
            ParamGroup::TextEncoder => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::VideoTower => "video_tower",
            ParamGroup::AudioTower => "audio_tower",
            ParamGroup::Adaptors => "adaptors",
            ParamGroup::TextEncoder => "text_encoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub value: GTensor<T>,
}

#[derive(Debug, Clone)]
pub struct GParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
    trainable: [bool; 4],
}

/// The production 32-bit store.
pub type ParamStore = GParamStore<f32>;

impl<T: Scalar> Default for GParamStore<T> {
    fn default() -> GParamStore<T> {
        GParamStore::new()
    }
}

impl<T: Scalar> GParamStore<T> {
    pub fn new() -> GParamStore<T> {
        GParamStore {
            entries: Vec::new(),
            trainable: [true; 4],
        }
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: GTensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &GTensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut GTensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Make exactly `groups` trainable and freeze the rest.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        self.trainable = [false; 4];
        for g in groups {
            self.trainable[g.index()] = true;
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable[group.index()]
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| self.trainable[e.group.index()])
            .map(|(id, _)| id)
            .collect()
    }

    /// Scalar parameter count of one group.
    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// FNV-1a over the raw bits of every tensor in a group; used to verify
    /// freeze discipline bit-exactly.
    pub fn group_hash(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.entries.iter().filter(|e| e.group == group) {
            for &v in e.value.data() {
                for b in v.to_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        h
    }

    /// Offset of a parameter inside the flattened vector.
    pub fn offset_of(&self, id: ParamId) -> usize {
        self.entries[..id.0].iter().map(|e| e.value.numel()).sum()
    }

    /// Flatten every parameter into one vector (registration order).
    pub fn flatten(&self) -> GTensor<T> {
        let total = self.total_param_count();
        let mut data = Vec::with_capacity(total);
        for e in &self.entries {
            data.extend_from_slice(e.value.data());
        }
        GTensor::from_parts(vec![total], data)
    }

    /// Overwrite every parameter from a flat vector (registration order).
    pub fn unflatten_from(&mut self, flat: &GTensor<T>) -> Result<()> {
        if flat.numel() != self.total_param_count() {
            return Err(Error::config(format!(
                "flat vector has {} values, store holds {}",
                flat.numel(),
                self.total_param_count()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.numel();
            e.value
                .data_mut()
                .copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// One forward computation: a tape plus memoized parameter leaves.
pub struct Session<'a, T: Scalar = f32> {
    pub tape: Tape<T>,
    store: &'a GParamStore<T>,
    leaves: Vec<Option<Var>>,
    inference: bool,
    /// When set, parameters are views into this flat tape vector instead of
    /// independent leaves (used for whole-model gradient checks).
    flat: Option<Var>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a GParamStore<T>) -> Session<'a, T> {
        Session {
            tape: Tape::new(),
            store,
            leaves: vec![None; store.len()],
            inference: false,
            flat: None,
        }
    }

    /// A session that never tracks gradients; sampling and validation use
    /// this to keep the tape light.
    pub fn inference(store: &'a GParamStore<T>) -> Session<'a, T> {
        Session {
            tape: Tape::new(),
            store,
            leaves: vec![None; store.len()],
            inference: true,
            flat: None,
        }
    }

    /// Wrap an existing tape (whose vars stay valid) so model code can run
    /// on it; used by whole-model gradient checks that own the tape.
    pub fn from_tape(store: &'a GParamStore<T>, tape: Tape<T>) -> Session<'a, T> {
        Session {
            tape,
            store,
            leaves: vec![None; store.len()],
            inference: false,
            flat: None,
        }
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Route all parameter reads through slices of `flat`, a tape var
    /// holding every parameter in registration order. Gradients then
    /// accumulate onto `flat` itself.
    pub fn bind_flat(&mut self, flat: Var) {
        self.flat = Some(flat);
    }

    /// The tape var for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = match self.flat {
            Some(flat) => {
                let offset = self.store.offset_of(id);
                let entry = self.store.entry(id);
                let n = entry.value.numel();
                let map: Vec<u32> = (offset as u32..(offset + n) as u32).collect();
                self.tape
                    .gather(flat, std::rc::Rc::new(map), entry.value.shape().to_vec())
                    .expect("flat param gather")
            }
            None => {
                let entry = self.store.entry(id);
                let trainable = !self.inference && self.store.is_trainable(entry.group);
                let mut t = entry.value.clone();
                t.requires_grad = trainable;
                self.tape.leaf(t)
            }
        };
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn leaf_of(&self, id: ParamId) -> Option<Var> {
        self.leaves[id.0]
    }
}

/// Standard initializer: Normal(0, 0.02) weights.
pub fn init_weight<T: Scalar>(shape: &[usize], rng: &mut SplitMix64) -> GTensor<T> {
    GTensor::randn(shape, 0.02, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_total_count() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        store.register("a", ParamGroup::VideoTower, Tensor::randn(&[3, 3], 1.0, &mut rng));
        store.register("b", ParamGroup::AudioTower, Tensor::randn(&[2, 5], 1.0, &mut rng));
        store.register("c", ParamGroup::Adaptors, Tensor::randn(&[7], 1.0, &mut rng));
        store.register("d", ParamGroup::TextEncoder, Tensor::randn(&[4], 1.0, &mut rng));
        let sum: usize = ParamGroup::ALL
            .iter()
            .map(|&g| store.group_param_count(g))
            .sum();
        assert_eq!(sum, store.total_param_count());
        assert_eq!(sum, 9 + 10 + 7 + 4);
    }

    #[test]
    fn frozen_groups_produce_untracked_leaves() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        let a = store.register("a", ParamGroup::VideoTower, Tensor::randn(&[2], 1.0, &mut rng));
        let b = store.register("b", ParamGroup::AudioTower, Tensor::randn(&[2], 1.0, &mut rng));
        store.set_trainable_groups(&[ParamGroup::AudioTower]);
        let mut sess = Session::new(&store);
        let va = sess.p(a);
        let vb = sess.p(b);
        assert!(!sess.tape.requires_grad(va));
        assert!(sess.tape.requires_grad(vb));
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(3);
        store.register("a", ParamGroup::VideoTower, Tensor::randn(&[3, 2], 1.0, &mut rng));
        store.register("b", ParamGroup::TextEncoder, Tensor::randn(&[5], 1.0, &mut rng));
        let flat = store.flatten();
        let mut store2 = store.clone();
        for e in store2.entries.iter_mut() {
            for v in e.value.data_mut() {
                *v = 0.0;
            }
        }
        store2.unflatten_from(&flat).unwrap();
        for ((_, e1), (_, e2)) in store.entries().zip(store2.entries()) {
            assert!(e1.value.bit_eq(&e2.value));
        }
    }

    #[test]
    fn group_hash_tracks_changes() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(4);
        let id = store.register("a", ParamGroup::VideoTower, Tensor::randn(&[4], 1.0, &mut rng));
        let h1 = store.group_hash(ParamGroup::VideoTower);
        let h_other = store.group_hash(ParamGroup::AudioTower);
        store.get_mut(id).data_mut()[0] += 1.0;
        assert_ne!(store.group_hash(ParamGroup::VideoTower), h1);
        assert_eq!(store.group_hash(ParamGroup::AudioTower), h_other);
    }
}
