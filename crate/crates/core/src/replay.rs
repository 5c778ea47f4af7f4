//! Rehearsal memory: FIFO, reservoir and a decorrelating (MinRed-style)
//! buffer, with uniform sampling and in-place refresh of stored features.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::networks::StateDict;
use crate::rng::{self, Rng};

pub const DEFAULT_CAPACITY: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    Fifo,
    Reservoir,
    /// Evicts the entry most similar to the rest of the buffer.
    MinRed,
}

impl BufferPolicy {
    pub fn name(self) -> &'static str {
        match self {
            BufferPolicy::Fifo => "fifo",
            BufferPolicy::Reservoir => "reservoir",
            BufferPolicy::MinRed => "minred",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub sample: Vec<f64>,
    /// Stored target feature `z*`.
    pub feature: Option<Vec<f64>>,
    pub insert_seq: u64,
}

/// Reference to a sampled entry, valid until that entry is evicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Handle(u64);

impl Handle {
    pub fn insert_seq(self) -> u64 {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ReplaySample {
    pub samples: Tensor,
    pub features: Option<Tensor>,
    pub handles: Vec<Handle>,
}

impl ReplaySample {
    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateReport {
    pub updated: usize,
    /// Handles whose entry had been evicted in the meantime.
    pub stale: usize,
}

#[derive(Clone, Debug)]
pub struct Buffer {
    capacity: usize,
    policy: BufferPolicy,
    store_features: bool,
    entries: Vec<BufferEntry>,
    slot_of: HashMap<u64, usize>,
    next_seq: u64,
    /// Items offered so far (reservoir's `t`).
    seen: u64,
    /// Slot holding the oldest entry once a FIFO buffer is full.
    oldest: usize,
    /// Per slot: highest cosine similarity to any other entry and its slot.
    nearest: Vec<(f64, usize)>,
    rng: Rng,
}

impl Buffer {
    /// `store_features` keeps a feature vector per entry; MinRed always does.
    pub fn new(
        capacity: usize,
        policy: BufferPolicy,
        store_features: bool,
        rng: Rng,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "buffer capacity must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            policy,
            store_features: store_features || policy == BufferPolicy::MinRed,
            entries: Vec::with_capacity(capacity),
            slot_of: HashMap::new(),
            next_seq: 0,
            seen: 0,
            oldest: 0,
            nearest: Vec::new(),
            rng,
        })
    }

    pub fn with_seed(
        capacity: usize,
        policy: BufferPolicy,
        store_features: bool,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            capacity,
            policy,
            store_features,
            rng::derive(seed, "buffer"),
        )
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> BufferPolicy {
        self.policy
    }

    pub fn stores_features(&self) -> bool {
        self.store_features
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn get(&self, h: Handle) -> Option<&BufferEntry> {
        self.slot_of.get(&h.0).map(|&s| &self.entries[s])
    }

    /// Insert sequence numbers ordered oldest first.
    pub fn resident_seqs(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.entries.iter().map(|e| e.insert_seq).collect();
        s.sort_unstable();
        s
    }

    /// Offers one sample (and its feature when the buffer stores features).
    pub fn insert(&mut self, sample: &[f64], feature: Option<&[f64]>) -> Result<()> {
        if self.store_features != feature.is_some() {
            return Err(Error::InvalidArgument(format!(
                "buffer {} features but insert {} one",
                if self.store_features {
                    "stores"
                } else {
                    "does not store"
                },
                if feature.is_some() {
                    "supplied"
                } else {
                    "did not supply"
                },
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.sample.len() != sample.len() {
                return Err(Error::shape("buffer insert", "sample width changed"));
            }
            if let (Some(a), Some(b)) = (&first.feature, feature) {
                if a.len() != b.len() {
                    return Err(Error::shape("buffer insert", "feature width changed"));
                }
            }
        }
        self.seen += 1;
        let entry = |seq| BufferEntry {
            sample: sample.to_vec(),
            feature: feature.map(<[f64]>::to_vec),
            insert_seq: seq,
        };

        if self.entries.len() < self.capacity {
            let seq = self.take_seq();
            self.slot_of.insert(seq, self.entries.len());
            self.entries.push(entry(seq));
            if self.policy == BufferPolicy::MinRed {
                self.refresh_nearest_after_push();
            }
            return Ok(());
        }

        match self.policy {
            BufferPolicy::Fifo => {
                let slot = self.oldest;
                self.oldest = (self.oldest + 1) % self.capacity;
                let seq = self.take_seq();
                self.replace(slot, entry(seq));
            }
            BufferPolicy::Reservoir => {
                let j = self.rng.random_range(0..self.seen);
                if (j as usize) < self.capacity {
                    let seq = self.take_seq();
                    self.replace(j as usize, entry(seq));
                }
            }
            BufferPolicy::MinRed => {
                let f = feature.unwrap();
                let sims: Vec<f64> = self
                    .entries
                    .iter()
                    .map(|e| cosine(e.feature.as_ref().unwrap(), f))
                    .collect();
                let new_max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut victim = None;
                let mut best = f64::NEG_INFINITY;
                for (slot, &s) in sims.iter().enumerate() {
                    let m = self.nearest[slot].0.max(s);
                    if m > best {
                        best = m;
                        victim = Some(slot);
                    }
                }
                if new_max > best {
                    // the incoming sample is the most redundant one
                    return Ok(());
                }
                let slot = victim.expect("full buffer has entries");
                let seq = self.take_seq();
                self.replace(slot, entry(seq));
                self.refresh_nearest_after_replace(slot);
            }
        }
        Ok(())
    }

    /// Inserts every row of `samples` in order.
    pub fn insert_batch(&mut self, samples: &Tensor, features: Option<&Tensor>) -> Result<()> {
        if let Some(f) = features {
            if f.rows() != samples.rows() {
                return Err(Error::shape(
                    "insert_batch",
                    "feature rows differ from samples",
                ));
            }
        }
        for r in 0..samples.rows() {
            self.insert(samples.row(r), features.map(|f| f.row(r)))?;
        }
        Ok(())
    }

    fn take_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    fn replace(&mut self, slot: usize, entry: BufferEntry) {
        self.slot_of.remove(&self.entries[slot].insert_seq);
        self.slot_of.insert(entry.insert_seq, slot);
        self.entries[slot] = entry;
    }

    fn feature(&self, slot: usize) -> &[f64] {
        self.entries[slot].feature.as_deref().unwrap()
    }

    fn refresh_nearest_after_push(&mut self) {
        let new = self.entries.len() - 1;
        let mut own = (f64::NEG_INFINITY, new);
        for other in 0..new {
            let s = cosine(self.feature(other), self.feature(new));
            if s > self.nearest[other].0 {
                self.nearest[other] = (s, new);
            }
            if s > own.0 {
                own = (s, other);
            }
        }
        self.nearest.push(own);
    }

    fn refresh_nearest_after_replace(&mut self, slot: usize) {
        let n = self.entries.len();
        let mut own = (f64::NEG_INFINITY, slot);
        for other in (0..n).filter(|&o| o != slot) {
            let s = cosine(self.feature(other), self.feature(slot));
            if s > own.0 {
                own = (s, other);
            }
            if self.nearest[other].1 == slot {
                // its nearest neighbour was evicted: recompute from scratch
                self.nearest[other] = self.scan_nearest(other);
            } else if s > self.nearest[other].0 {
                self.nearest[other] = (s, slot);
            }
        }
        self.nearest[slot] = own;
    }

    fn scan_nearest(&self, slot: usize) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, slot);
        for other in (0..self.entries.len()).filter(|&o| o != slot) {
            let s = cosine(self.feature(other), self.feature(slot));
            if s > best.0 {
                best = (s, other);
            }
        }
        best
    }

    /// Uniform draw of `count` entries: without replacement when the buffer
    /// holds at least `count` entries, with replacement otherwise. `None`
    /// when the buffer is empty or `count` is zero.
    pub fn sample(&mut self, count: usize) -> Option<ReplaySample> {
        if self.entries.is_empty() || count == 0 {
            return None;
        }
        let slots: Vec<usize> = if self.entries.len() >= count {
            index::sample(&mut self.rng, self.entries.len(), count).into_vec()
        } else {
            (0..count)
                .map(|_| self.rng.random_range(0..self.entries.len()))
                .collect()
        };
        let d = self.entries[0].sample.len();
        let mut data = Vec::with_capacity(count * d);
        let mut feats = self.store_features.then(Vec::new);
        let mut handles = Vec::with_capacity(count);
        for &s in &slots {
            let e = &self.entries[s];
            data.extend_from_slice(&e.sample);
            if let (Some(out), Some(f)) = (&mut feats, &e.feature) {
                out.extend_from_slice(f);
            }
            handles.push(Handle(e.insert_seq));
        }
        let samples = Tensor::from_parts(vec![count, d], data);
        let features = feats.map(|f| {
            let w = f.len() / count;
            Tensor::from_parts(vec![count, w], f)
        });
        Some(ReplaySample {
            samples,
            features,
            handles,
        })
    }

    /// `z* ← 0.5·z* + 0.25·z_r1 + 0.25·z_r2` for each handle still resident.
    pub fn update_features(
        &mut self,
        handles: &[Handle],
        z_r1: &Tensor,
        z_r2: &Tensor,
    ) -> Result<UpdateReport> {
        if !self.store_features {
            return Err(Error::InvalidArgument(
                "buffer does not store features".into(),
            ));
        }
        if z_r1.rows() != handles.len()
            || z_r2.rows() != handles.len()
            || z_r1.shape() != z_r2.shape()
        {
            return Err(Error::shape("update_features", "rows must match handles"));
        }
        let mut report = UpdateReport::default();
        for (r, h) in handles.iter().enumerate() {
            let Some(&slot) = self.slot_of.get(&h.0) else {
                report.stale += 1;
                continue;
            };
            let f = self.entries[slot].feature.as_mut().unwrap();
            if f.len() != z_r1.cols() {
                return Err(Error::shape("update_features", "feature width"));
            }
            for ((s, a), b) in f.iter_mut().zip(z_r1.row(r)).zip(z_r2.row(r)) {
                *s = 0.5 * *s + 0.25 * a + 0.25 * b;
            }
            report.updated += 1;
        }
        if self.policy == BufferPolicy::MinRed && report.updated > 0 {
            self.nearest = (0..self.entries.len())
                .map(|s| self.scan_nearest(s))
                .collect();
        }
        Ok(report)
    }

    pub fn write_state(&self, d: &mut StateDict) {
        d.put_scalar("capacity", self.capacity as u64);
        d.put_scalar(
            "policy",
            match self.policy {
                BufferPolicy::Fifo => 0,
                BufferPolicy::Reservoir => 1,
                BufferPolicy::MinRed => 2,
            },
        );
        d.put_scalar("store_features", u64::from(self.store_features));
        d.put_scalar("len", self.entries.len() as u64);
        d.put_scalar("next_seq", self.next_seq);
        d.put_scalar("seen", self.seen);
        d.put_scalar("oldest", self.oldest as u64);
        for (i, e) in self.entries.iter().enumerate() {
            d.put_scalar(format!("entry.{i}.seq"), e.insert_seq);
            d.put_vec(format!("entry.{i}.sample"), &e.sample);
            if let Some(f) = &e.feature {
                d.put_vec(format!("entry.{i}.feature"), f);
            }
        }
        rng::write_state(&self.rng, d, "rng");
    }

    pub fn read_state(d: &StateDict) -> Result<Self> {
        let policy = match d.scalar("policy")? {
            0 => BufferPolicy::Fifo,
            1 => BufferPolicy::Reservoir,
            2 => BufferPolicy::MinRed,
            p => return Err(Error::Format(format!("unknown buffer policy {p}"))),
        };
        let mut b = Buffer::new(
            d.scalar("capacity")? as usize,
            policy,
            d.scalar("store_features")? == 1,
            rng::read_state(d, "rng")?,
        )?;
        let len = d.scalar("len")? as usize;
        for i in 0..len {
            let seq = d.scalar(&format!("entry.{i}.seq"))?;
            let feature = if b.store_features {
                Some(d.vec(&format!("entry.{i}.feature"))?)
            } else {
                None
            };
            b.slot_of.insert(seq, i);
            b.entries.push(BufferEntry {
                sample: d.vec(&format!("entry.{i}.sample"))?,
                feature,
                insert_seq: seq,
            });
        }
        b.next_seq = d.scalar("next_seq")?;
        b.seen = d.scalar("seen")?;
        b.oldest = d.scalar("oldest")? as usize;
        if policy == BufferPolicy::MinRed {
            b.nearest = (0..b.entries.len()).map(|s| b.scan_nearest(s)).collect();
        }
        Ok(b)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fifo(cap: usize) -> Buffer {
        Buffer::with_seed(cap, BufferPolicy::Fifo, false, 0).unwrap()
    }

    #[test]
    fn fifo_keeps_latest() {
        let mut b = fifo(3);
        for v in [1.0, 2.0, 3.0, 4.0] {
            b.insert(&[v], None).unwrap();
        }
        let mut held: Vec<f64> = b.entries().iter().map(|e| e.sample[0]).collect();
        held.sort_by(f64::total_cmp);
        assert_eq!(held, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn feature_presence_must_match_policy() {
        let mut b = fifo(2);
        assert!(b.insert(&[1.0], Some(&[1.0])).is_err());
        let mut m = Buffer::with_seed(2, BufferPolicy::MinRed, false, 0).unwrap();
        assert!(m.stores_features());
        assert!(m.insert(&[1.0], None).is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let mut b = fifo(4);
        assert!(b.sample(3).is_none());
        b.insert(&[7.0], None).unwrap();
        let s = b.sample(1).unwrap();
        assert_eq!(s.samples.data(), &[7.0]);
        // with replacement during warm-up keeps the requested count
        assert_eq!(b.sample(5).unwrap().len(), 5);

        for v in [8.0, 9.0, 10.0] {
            b.insert(&[v], None).unwrap();
        }
        let s = b.sample(4).unwrap();
        let mut got: Vec<f64> = s.samples.data().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn feature_update_rule() {
        let mut b = Buffer::with_seed(2, BufferPolicy::Fifo, true, 0).unwrap();
        b.insert(&[0.0], Some(&[1.0, 0.0])).unwrap();
        let s = b.sample(1).unwrap();
        let v = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let rep = b.update_features(&s.handles, &v, &v).unwrap();
        assert_eq!(rep.updated, 1);
        assert_eq!(b.entries()[0].feature.as_deref().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn feature_update_fixed_point_and_geometric_convergence() {
        let mut b = Buffer::with_seed(1, BufferPolicy::Fifo, true, 0).unwrap();
        b.insert(&[0.0], Some(&[0.3, -0.7])).unwrap();
        let h = b.sample(1).unwrap().handles;
        let same = Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap();
        b.update_features(&h, &same, &same).unwrap();
        assert_eq!(b.entries()[0].feature.as_deref().unwrap(), &[0.3, -0.7]);

        let v1 = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let v2 = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
        let target = [2.0, 0.0];
        let mut gap: Vec<f64> = vec![0.3 - 2.0, -0.7];
        for _ in 0..10 {
            b.update_features(&h, &v1, &v2).unwrap();
            gap.iter_mut().for_each(|g| *g *= 0.5);
            let f = b.entries()[0].feature.clone().unwrap();
            for k in 0..2 {
                assert!((f[k] - target[k] - gap[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn stale_handles_are_skipped() {
        let mut b = Buffer::with_seed(1, BufferPolicy::Fifo, true, 0).unwrap();
        b.insert(&[0.0], Some(&[1.0])).unwrap();
        let h = b.sample(1).unwrap().handles;
        b.insert(&[1.0], Some(&[2.0])).unwrap();
        let z = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let rep = b.update_features(&h, &z, &z).unwrap();
        assert_eq!(
            rep,
            UpdateReport {
                updated: 0,
                stale: 1
            }
        );
        assert_eq!(b.entries()[0].feature.as_deref().unwrap(), &[2.0]);
    }

    #[test]
    fn minred_breaks_the_duplicate_pair() {
        let mut b = Buffer::with_seed(2, BufferPolicy::MinRed, true, 0).unwrap();
        b.insert(&[1.0], Some(&[1.0, 0.0])).unwrap();
        b.insert(&[2.0], Some(&[0.0, 1.0])).unwrap();
        b.insert(&[3.0], Some(&[1.0, 0.0])).unwrap();
        let held: Vec<f64> = b.entries().iter().map(|e| e.sample[0]).collect();
        assert_eq!(b.len(), 2);
        assert!(
            held.contains(&2.0),
            "the orthogonal entry must survive: {held:?}"
        );
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let mut a = Buffer::with_seed(5, BufferPolicy::Reservoir, true, 3).unwrap();
        for i in 0..9 {
            a.insert(&[i as f64], Some(&[i as f64, 1.0])).unwrap();
        }
        let mut d = StateDict::new();
        a.write_state(&mut d);
        let mut b = Buffer::read_state(&StateDict::from_bytes(&d.to_bytes()).unwrap()).unwrap();
        for i in 9..30 {
            a.insert(&[i as f64], Some(&[i as f64, 1.0])).unwrap();
            b.insert(&[i as f64], Some(&[i as f64, 1.0])).unwrap();
        }
        assert_eq!(a.entries(), b.entries());
        assert_eq!(a.sample(3).unwrap().handles, b.sample(3).unwrap().handles);
    }
}
