//! Volumetric slice memory: a bounded queue of per-slice memories that
//! extends the static support set while a volume is propagated in
//! ascending axial order. When the queue overflows, the entry least
//! similar to the current slice's pooled embedding is evicted; static
//! support entries are never evicted.

use crate::error::{Error, Result};
use crate::model::{forward_slice, ComponentMode, Model, SliceOutput};
use crate::nn::FeatureMap;
use crate::pmg::{cosine, encode_volumetric, MemoryEntry, MemorySource, SupportMemorySet};
use crate::tensor::Tensor;

pub struct MemoryBank {
    pub capacity: usize,
    static_entries: Vec<MemoryEntry>,
    entries: Vec<(u64, MemoryEntry)>, // (insertion id, entry), oldest first
    next_id: u64,
}

impl MemoryBank {
    pub fn new(static_entries: Vec<MemoryEntry>, capacity: usize) -> Result<MemoryBank> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be >= 1".into()));
        }
        Ok(MemoryBank { capacity, static_entries, entries: Vec::new(), next_id: 0 })
    }

    pub fn volumetric_len(&self) -> usize {
        self.entries.len()
    }

    pub fn volumetric_keys(&self) -> Vec<Vec<f32>> {
        self.entries.iter().map(|(_, e)| e.key.clone()).collect()
    }

    /// Append a volumetric entry; if the queue now exceeds capacity, pop
    /// the entry whose key is least cosine-similar to the pooled current
    /// features. Ties evict the oldest. Returns the evicted slot index
    /// (position in the post-push queue) when an eviction happened.
    pub fn push_evict(&mut self, entry: MemoryEntry, current_pooled: &[f32]) -> Result<Option<usize>> {
        if entry.source != MemorySource::Volumetric {
            return Err(Error::Contract(
                "only volumetric entries enter the eviction queue".into(),
            ));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push((id, entry));
        if self.entries.len() <= self.capacity {
            return Ok(None);
        }
        let mut victim = 0usize;
        let mut best = f64::INFINITY;
        for (i, (_, e)) in self.entries.iter().enumerate() {
            let s = cosine(&e.key, current_pooled);
            // strictly-less keeps the earliest (oldest) index on ties
            if s < best {
                best = s;
                victim = i;
            }
        }
        self.entries.remove(victim);
        Ok(Some(victim))
    }

    /// Static support entries first, then volumetric entries in insertion
    /// order.
    pub fn extended_memory(&self) -> SupportMemorySet {
        let mut entries = self.static_entries.clone();
        entries.extend(self.entries.iter().map(|(_, e)| e.clone()));
        SupportMemorySet::new(entries)
    }
}

pub struct VolumeOutput {
    pub slices: Vec<SliceOutput>,
    pub features: Vec<FeatureMap>,
}

/// Predict every slice of `vol` ([D, C_in, H, W]) in ascending order,
/// feeding each slice's detached features and prediction back into the
/// bank before the next slice. Depth-1 volumes reduce exactly to the 2D
/// pipeline.
pub fn propagate_volume(
    model: &Model,
    vol: &Tensor,
    support: &SupportMemorySet,
    capacity: usize,
    mode: ComponentMode,
) -> Result<VolumeOutput> {
    let dims = vol.dims().to_vec();
    let (d, c_in, h, w) = match dims.as_slice() {
        [d, c, h, w] => (*d, *c, *h, *w),
        other => {
            return Err(Error::Shape(format!(
                "propagate_volume: expected [D, C, H, W], got {other:?}"
            )))
        }
    };
    if d == 0 {
        return Err(Error::Param("propagate_volume: depth must be >= 1".into()));
    }
    let mut bank = MemoryBank::new(support.entries.clone(), capacity)?;
    let vd = vol.data();
    let mut slices = Vec::with_capacity(d);
    let mut features = Vec::with_capacity(d);
    for i in 0..d {
        let img = Tensor::constant(
            vec![c_in, h, w],
            vd[i * c_in * h * w..(i + 1) * c_in * h * w].to_vec(),
        );
        let feats = model.encoder.forward(&img)?;
        let memory = bank.extended_memory();
        let out = forward_slice(model, &feats, &memory, mode)?;
        if mode != ComponentMode::Mem3dOff {
            // stored memories are cut from the tape: no gradient flows
            // through a slice into its successors
            let det = feats.with_tokens(feats.tokens.detach());
            let entry = encode_volumetric(model, &det, &out.final_probs.detach())?;
            bank.push_evict(entry, &feats.pooled())?;
        }
        slices.push(out);
        features.push(feats);
    }
    Ok(VolumeOutput { slices, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pmg::{encode_support_memory, SupportMemorySet};
    use crate::rng::Rng;

    fn small_model(seed: u64) -> Model {
        Model::new(
            ModelConfig { dim: 8, blocks: 1, patch: 2, ..ModelConfig::default() },
            seed,
        )
        .unwrap()
    }

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::constant(vec![1, h, w], (0..h * w).map(|_| rng.uniform() as f32).collect())
    }

    fn rand_mask(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::constant(
            vec![1, h, w],
            (0..h * w).map(|_| if rng.chance(0.3) { 1.0 } else { 0.0 }).collect(),
        )
    }

    fn entry_with_key(key: Vec<f32>) -> MemoryEntry {
        MemoryEntry {
            tokens: Tensor::zeros(vec![4, key.len()]),
            key,
            source: MemorySource::Volumetric,
        }
    }

    #[test]
    fn volumetric_entry_zero_pred_zero_bias_phi_gives_feat() {
        let model = small_model(1);
        for (name, t) in model.params.all() {
            if name.starts_with("phi.") && name.ends_with(".b") {
                t.update_data(|_, v| *v = 0.0);
            }
        }
        let feat = model.encoder.forward(&rand_image(8, 8, 1)).unwrap();
        let e = encode_volumetric(&model, &feat, &Tensor::zeros(vec![1, 8, 8])).unwrap();
        assert_eq!(e.tokens.to_vec(), feat.tokens.to_vec());
        assert_eq!(e.source, MemorySource::Volumetric);
    }

    #[test]
    fn volumetric_entry_deterministic_and_matches_support_fusion() {
        let model = small_model(2);
        let feat = model.encoder.forward(&rand_image(8, 8, 2)).unwrap();
        let m = rand_mask(8, 8, 3);
        let e1 = encode_volumetric(&model, &feat, &m).unwrap();
        let e2 = encode_volumetric(&model, &feat, &m).unwrap();
        assert_eq!(e1.tokens.to_vec(), e2.tokens.to_vec());
        // same fusion as the support encoder; only the source tag differs
        let es = encode_support_memory(&model, &feat, &m).unwrap();
        assert_eq!(e1.tokens.to_vec(), es.tokens.to_vec());
        assert_eq!(e1.key, es.key);
        assert_ne!(e1.source, es.source);
    }

    #[test]
    fn eviction_removes_least_similar() {
        let mut bank = MemoryBank::new(Vec::new(), 2).unwrap();
        let current = vec![1.0f32, 0.0];
        // keys chosen so similarities to current are ~0.9 and ~0.1
        bank.push_evict(entry_with_key(vec![0.9, 0.44]), &current).unwrap();
        bank.push_evict(entry_with_key(vec![0.1, 0.99]), &current).unwrap();
        let evicted = bank.push_evict(entry_with_key(vec![0.7, 0.7]), &current).unwrap();
        assert_eq!(evicted, Some(1)); // the ~0.1 entry
        let keys = bank.volumetric_keys();
        assert_eq!(keys.len(), 2);
        assert!(keys.iter().all(|k| k != &vec![0.1, 0.99]));
    }

    #[test]
    fn no_eviction_below_capacity() {
        let mut bank = MemoryBank::new(Vec::new(), 3).unwrap();
        let cur = vec![1.0f32];
        assert_eq!(bank.push_evict(entry_with_key(vec![0.2]), &cur).unwrap(), None);
        assert_eq!(bank.push_evict(entry_with_key(vec![0.4]), &cur).unwrap(), None);
        assert_eq!(bank.volumetric_len(), 2);
    }

    #[test]
    fn tie_break_evicts_oldest() {
        let mut bank = MemoryBank::new(Vec::new(), 2).unwrap();
        let cur = vec![1.0f32, 0.0];
        let same = vec![0.0f32, 1.0]; // identical similarity for all
        bank.push_evict(entry_with_key(same.clone()), &cur).unwrap();
        bank.push_evict(entry_with_key(same.clone()), &cur).unwrap();
        let evicted = bank.push_evict(entry_with_key(same), &cur).unwrap();
        assert_eq!(evicted, Some(0));
    }

    #[test]
    fn static_entries_survive_any_number_of_pushes() {
        let model = small_model(3);
        let feat = model.encoder.forward(&rand_image(8, 8, 4)).unwrap();
        let sup = encode_support_memory(&model, &feat, &rand_mask(8, 8, 5)).unwrap();
        let sup_tokens = sup.tokens.to_vec();
        let mut bank = MemoryBank::new(vec![sup], 2).unwrap();
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let key: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
            let cur: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
            bank.push_evict(entry_with_key(key), &cur).unwrap();
            assert!(bank.volumetric_len() <= 2);
        }
        let ext = bank.extended_memory();
        assert_eq!(ext.entries[0].source, MemorySource::Support);
        assert_eq!(ext.entries[0].tokens.to_vec(), sup_tokens);
    }

    #[test]
    fn extended_memory_concatenates_in_order() {
        let model = small_model(4);
        let feat = model.encoder.forward(&rand_image(8, 8, 7)).unwrap();
        let sup = encode_support_memory(&model, &feat, &rand_mask(8, 8, 8)).unwrap();
        let mut bank = MemoryBank::new(vec![sup], 2).unwrap();
        assert_eq!(bank.extended_memory().entries.len(), 1); // static only
        let cur = vec![0.0f32; 8];
        for i in 0..3 {
            bank.push_evict(entry_with_key(vec![i as f32; 8]), &cur).unwrap();
        }
        let ext = bank.extended_memory();
        assert_eq!(ext.entries.len(), 3); // 1 static + capacity 2
        assert_eq!(ext.token_count(), 16 + 4 + 4);
        assert_eq!(ext.entries[0].source, MemorySource::Support);
    }

    #[test]
    fn eviction_victim_matches_exhaustive_argmin_fuzz() {
        let mut rng = Rng::new(99);
        let mut bank = MemoryBank::new(Vec::new(), 4).unwrap();
        let mut shadow: Vec<Vec<f32>> = Vec::new(); // oracle queue of keys
        for push in 0..100 {
            let key: Vec<f32> = (0..6).map(|_| rng.normal() as f32).collect();
            let cur: Vec<f32> = (0..6).map(|_| rng.normal() as f32).collect();
            shadow.push(key.clone());
            let evicted = bank.push_evict(entry_with_key(key), &cur).unwrap();
            if shadow.len() > 4 {
                // brute-force argmin over the post-push queue
                let mut victim = 0;
                let mut best = f64::INFINITY;
                for (i, k) in shadow.iter().enumerate() {
                    let s = cosine(k, &cur);
                    if s < best {
                        best = s;
                        victim = i;
                    }
                }
                assert_eq!(evicted, Some(victim), "push {push}");
                shadow.remove(victim);
            } else {
                assert_eq!(evicted, None);
            }
            assert!(bank.volumetric_len() <= 4, "bank exceeded capacity");
            assert_eq!(bank.volumetric_keys(), shadow);
        }
    }

    #[test]
    fn depth_one_volume_equals_2d_pipeline_bitwise() {
        let model = small_model(5);
        let img = rand_image(8, 8, 10);
        let sf = model.encoder.forward(&rand_image(8, 8, 11)).unwrap();
        let sup = encode_support_memory(&model, &sf, &rand_mask(8, 8, 12)).unwrap();
        let support = SupportMemorySet::new(vec![sup]);

        let vol = img.reshape(vec![1, 1, 8, 8]).unwrap();
        let vout =
            propagate_volume(&model, &vol, &support, 2, ComponentMode::Full).unwrap();

        let feats = model.encoder.forward(&img).unwrap();
        let direct = forward_slice(&model, &feats, &support, ComponentMode::Full).unwrap();

        assert_eq!(
            vout.slices[0].final_probs.to_vec(),
            direct.final_probs.to_vec()
        );
        assert_eq!(vout.slices[0].pseudo.to_vec(), direct.pseudo.to_vec());
    }

    #[test]
    fn propagation_deterministic_under_fixed_seed() {
        let model = small_model(6);
        let mut rng = Rng::new(13);
        let vol = Tensor::constant(
            vec![3, 1, 8, 8],
            (0..3 * 64).map(|_| rng.uniform() as f32).collect(),
        );
        let sf = model.encoder.forward(&rand_image(8, 8, 14)).unwrap();
        let sup = encode_support_memory(&model, &sf, &rand_mask(8, 8, 15)).unwrap();
        let support = SupportMemorySet::new(vec![sup]);
        let a = propagate_volume(&model, &vol, &support, 2, ComponentMode::Full).unwrap();
        let b = propagate_volume(&model, &vol, &support, 2, ComponentMode::Full).unwrap();
        for (sa, sb) in a.slices.iter().zip(&b.slices) {
            assert_eq!(sa.final_probs.to_vec(), sb.final_probs.to_vec());
        }
    }
}
