//! Packed binary codes, Hamming search and ranking metrics.
//!
//! Bit `j` of a code lives in byte `j / 8` at bit position `j % 8`; `+1` is
//! stored as 1 and `-1` as 0. Unused high bits of the last byte are zero.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Real;

const INDEX_MAGIC: &[u8; 8] = b"COOPIDX\0";
const INDEX_VERSION: u32 = 1;

pub fn code_bytes(bits: usize) -> usize {
    bits.div_ceil(8)
}

/// `sign` (tie to `+1`) of each coordinate, packed.
pub fn binarize<F: Real>(real_code: &[F]) -> Vec<u8> {
    let mut out = vec![0u8; code_bytes(real_code.len())];
    for (j, &v) in real_code.iter().enumerate() {
        if v >= F::zero() {
            out[j / 8] |= 1 << (j % 8);
        }
    }
    out
}

/// Packed code back to `{-1, +1}`.
pub fn unpack(code: &[u8], bits: usize) -> Vec<i8> {
    (0..bits).map(|j| if code[j / 8] >> (j % 8) & 1 == 1 { 1 } else { -1 }).collect()
}

fn check_len(code: &[u8], bits: usize) -> Result<()> {
    if code.len() != code_bytes(bits) {
        return Err(Error::Shape(format!("{}-byte code for {bits} bits", code.len())));
    }
    Ok(())
}

/// Differing bits among the first `bits`, by 64-bit popcount.
pub fn hamming_distance(a: &[u8], b: &[u8], bits: usize) -> Result<u32> {
    check_len(a, bits)?;
    check_len(b, bits)?;
    Ok(hamming_unchecked(a, b, bits))
}

fn hamming_unchecked(a: &[u8], b: &[u8], bits: usize) -> u32 {
    let mut total = 0;
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        total += (x ^ y).count_ones();
    }
    let (ra, rb) = (ca.remainder(), cb.remainder());
    if !ra.is_empty() {
        let mut x = [0u8; 8];
        let mut y = [0u8; 8];
        x[..ra.len()].copy_from_slice(ra);
        y[..rb.len()].copy_from_slice(rb);
        let tail_bits = bits - 64 * (a.len() / 8);
        let mask = if tail_bits >= 64 { u64::MAX } else { (1u64 << tail_bits) - 1 };
        total += ((u64::from_le_bytes(x) ^ u64::from_le_bytes(y)) & mask).count_ones();
    }
    total
}

/// Relevance: the label sets intersect.
pub fn relevant(a: &[usize], b: &[usize]) -> bool {
    a.iter().any(|l| b.contains(l))
}

/// Packed codes with ids and label sets; immutable once built.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HashIndex {
    bits: usize,
    ids: Vec<u64>,
    codes: Vec<u8>,
    labels: Vec<Vec<usize>>,
}

impl HashIndex {
    pub fn new(bits: usize) -> Self {
        HashIndex { bits, ..Default::default() }
    }

    pub fn build(bits: usize, items: impl IntoIterator<Item = (u64, Vec<u8>, Vec<usize>)>) -> Result<Self> {
        let mut index = HashIndex::new(bits);
        let mut seen = HashSet::new();
        for (id, code, labels) in items {
            check_len(&code, bits)?;
            if !seen.insert(id) {
                return Err(Error::IndexFormat(format!("duplicate id {id}")));
            }
            index.ids.push(id);
            index.codes.extend_from_slice(&code);
            index.labels.push(labels);
        }
        Ok(index)
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn code(&self, i: usize) -> &[u8] {
        let w = code_bytes(self.bits);
        &self.codes[i * w..(i + 1) * w]
    }

    pub fn labels(&self, i: usize) -> &[usize] {
        &self.labels[i]
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.bits as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.write_all(&self.codes)?;
        for set in &self.labels {
            w.write_all(&(set.len() as u32).to_le_bytes())?;
            for &l in set {
                w.write_all(&(l as u32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, at: 0 };
        if cur.take(8)? != INDEX_MAGIC {
            return Err(Error::IndexFormat("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::IndexFormat(format!("unsupported version {version}")));
        }
        let bits = cur.u32()? as usize;
        let n = cur.u64()? as usize;
        let ids = (0..n).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let codes = cur.take(n * code_bytes(bits))?.to_vec();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let len = cur.u32()? as usize;
            labels.push((0..len).map(|_| cur.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?);
        }
        if cur.at != bytes.len() {
            return Err(Error::IndexFormat("trailing bytes".into()));
        }
        if ids.iter().collect::<HashSet<_>>().len() != n {
            return Err(Error::IndexFormat("duplicate ids".into()));
        }
        Ok(HashIndex { bits, ids, codes, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(fs::File::open(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::IndexFormat("truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Top-k items for one query, ordered by `(distance, id)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_id: u64,
    pub items: Vec<(u64, u32)>,
    pub k: usize,
}

pub fn search(index: &HashIndex, query_id: u64, query: &[u8], k: usize) -> Result<RankingResult> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::Data("k must be at least 1".into()));
    }
    check_len(query, index.bits)?;
    let mut scored: Vec<(u32, u64)> =
        (0..index.len()).map(|i| (hamming_unchecked(index.code(i), query, index.bits), index.ids[i])).collect();
    let k_eff = k.min(scored.len());
    if k_eff < scored.len() {
        scored.select_nth_unstable(k_eff - 1);
        scored.truncate(k_eff);
    }
    scored.sort_unstable();
    Ok(RankingResult { query_id, items: scored.into_iter().map(|(d, id)| (id, d)).collect(), k })
}

/// `Σ_{i≤k} P(i)·rel(i) / max(1, Σ_{i≤k} rel(i))` over a relevance pattern
/// already cut to the top k.
pub fn average_precision(pattern: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in pattern.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / hits.max(1) as f64
}

fn patterns<'a>(
    rankings: &'a [RankingResult],
    relevance: &'a impl Fn(u64, u64) -> bool,
    k: usize,
) -> impl Iterator<Item = Vec<bool>> + 'a {
    rankings.iter().map(move |r| r.items.iter().take(k).map(|&(id, _)| relevance(r.query_id, id)).collect())
}

pub fn mean_average_precision(rankings: &[RankingResult], relevance: impl Fn(u64, u64) -> bool, k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    patterns(rankings, &relevance, k).map(|p| average_precision(&p)).sum::<f64>() / rankings.len() as f64
}

/// Mean of `(relevant in top k) / k`.
pub fn precision_at_k(rankings: &[RankingResult], relevance: impl Fn(u64, u64) -> bool, k: usize) -> f64 {
    if rankings.is_empty() || k == 0 {
        return 0.0;
    }
    patterns(rankings, &relevance, k).map(|p| p.iter().filter(|&&r| r).count() as f64 / k as f64).sum::<f64>()
        / rankings.len() as f64
}

/// One line of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub n_queries: usize,
}

/// A labeled query batch for [`evaluate`].
#[derive(Debug, Clone)]
pub struct Queries {
    pub ids: Vec<u64>,
    pub codes: Vec<Vec<u8>>,
    pub labels: Vec<Vec<usize>>,
}

/// Searches every query and returns `[mAP@k, P@k]` under label-set relevance.
pub fn evaluate(index: &HashIndex, queries: &Queries, k: usize) -> Result<Vec<MetricRecord>> {
    let rankings = queries
        .ids
        .iter()
        .zip(&queries.codes)
        .map(|(&id, code)| search(index, id, code, k))
        .collect::<Result<Vec<_>>>()?;
    let query_pos: std::collections::HashMap<u64, usize> = queries.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let item_pos: std::collections::HashMap<u64, usize> = index.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let rel = |q: u64, item: u64| relevant(&queries.labels[query_pos[&q]], index.labels(item_pos[&item]));
    let n = rankings.len();
    Ok(vec![
        MetricRecord { metric: "mAP".into(), k, value: mean_average_precision(&rankings, rel, k), n_queries: n },
        MetricRecord { metric: "P".into(), k, value: precision_at_k(&rankings, rel, k), n_queries: n },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn pack(signs: &[i8]) -> Vec<u8> {
        binarize(&signs.iter().map(|&s| s as f64).collect::<Vec<_>>())
    }

    #[test]
    fn binarize_example() {
        assert_eq!(binarize(&[0.3, -0.2, 0.0, -5.0]), vec![0b0000_0101]);
        assert_eq!(binarize(&[-1.0f32; 12]), vec![0, 0]);
        assert_eq!(unpack(&binarize(&[0.3, -0.2, 0.0, -5.0]), 4), vec![1, -1, 1, -1]);
    }

    #[test]
    fn hamming_by_hand() {
        assert_eq!(hamming_distance(&pack(&[1, -1, 1, -1]), &pack(&[1, 1, -1, -1]), 4).unwrap(), 2);
        let a = pack(&[1; 70]);
        assert_eq!(hamming_distance(&a, &a, 70).unwrap(), 0);
        assert!(hamming_distance(&a, &pack(&[1; 16]), 70).is_err());
    }

    #[test]
    fn tail_bits_are_masked() {
        // garbage above bit K must not count
        assert_eq!(hamming_distance(&[0b1111_0000], &[0b0000_0000], 4).unwrap(), 0);
    }

    #[test]
    fn single_item_index() {
        let idx = HashIndex::build(4, [(9, pack(&[1, 1, 1, 1]), vec![0])]).unwrap();
        let r = search(&idx, 0, &pack(&[1, -1, 1, 1]), 5).unwrap();
        assert_eq!(r.items, vec![(9, 1)]);
    }

    #[test]
    fn empty_index_and_duplicates() {
        assert!(matches!(search(&HashIndex::new(8), 0, &[0], 1), Err(Error::EmptyIndex)));
        assert!(HashIndex::build(8, [(1, vec![0], vec![0]), (1, vec![1], vec![0])]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, true]), 1.0);
        assert_eq!(average_precision(&[false, false, false]), 0.0);
        assert!((average_precision(&[true, false, true]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    fn ranking(pattern: &[bool]) -> (Vec<RankingResult>, impl Fn(u64, u64) -> bool) {
        let items = (0..pattern.len() as u64).map(|i| (i, 0)).collect();
        let p = pattern.to_vec();
        (vec![RankingResult { query_id: 0, items, k: pattern.len() }], move |_, i: u64| p[i as usize])
    }

    #[test]
    fn precision_examples() {
        let (r, rel) = ranking(&[true, false, true, false]);
        assert_eq!(precision_at_k(&r, rel, 4), 0.5);
        let (r, rel) = ranking(&[true; 4]);
        assert_eq!(precision_at_k(&r, rel, 4), 1.0);
        let (r, rel) = ranking(&[false; 4]);
        assert_eq!(precision_at_k(&r, rel, 4), 0.0);
    }

    #[test]
    fn index_file_round_trip() {
        let mut rng = seeded_rng(3);
        let items: Vec<_> = (0..20u64).map(|i| (i * 7, vec![rng.random::<u8>(), rng.random::<u8>() & 0x0f], vec![(i % 3) as usize, 5])).collect();
        let idx = HashIndex::build(12, items).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        idx.save(&path).unwrap();
        assert_eq!(HashIndex::load(&path).unwrap(), idx);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(HashIndex::read_from(&bytes[..]).is_err());
        let good = fs::read(&path).unwrap();
        assert!(HashIndex::read_from(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn self_retrieval_is_perfect_at_one() {
        let codes: Vec<Vec<u8>> = (0..10u8).map(|i| vec![i * 17]).collect();
        let idx = HashIndex::build(8, (0..10).map(|i| (i as u64, codes[i].clone(), vec![i % 3]))).unwrap();
        let q = Queries { ids: (0..10).collect(), codes, labels: (0..10).map(|i| vec![i % 3]).collect() };
        let m = evaluate(&idx, &q, 1).unwrap();
        assert_eq!(m[0].value, 1.0);
        assert_eq!(m[0].n_queries, 10);
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(bits in 1usize..100, seed in 0u64..10_000) {
            let mut rng = seeded_rng(seed);
            let mut draw = || binarize(&(0..bits).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            let (a, b, c) = (draw(), draw(), draw());
            let d = |x: &[u8], y: &[u8]| hamming_distance(x, y, bits).unwrap();
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &a), 0);
            prop_assert_eq!(d(&a, &b) == 0, a == b);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }

        #[test]
        fn binarize_unpack_idempotent(v in proptest::collection::vec(-3.0f64..3.0, 1..80)) {
            let once = binarize(&v);
            let back: Vec<f64> = unpack(&once, v.len()).iter().map(|&s| s as f64).collect();
            prop_assert_eq!(binarize(&back), once);
        }

        #[test]
        fn search_ignores_insertion_order(seed in 0u64..1000, n in 1usize..60, k in 1usize..80) {
            let mut rng = seeded_rng(seed);
            let items: Vec<(u64, Vec<u8>, Vec<usize>)> = (0..n as u64).map(|i| (i, vec![rng.random::<u8>() & 0x3f], vec![0])).collect();
            let mut shuffled = items.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let q = vec![rng.random::<u8>() & 0x3f];
            let a = search(&HashIndex::build(6, items).unwrap(), 0, &q, k).unwrap();
            let b = search(&HashIndex::build(6, shuffled).unwrap(), 0, &q, k).unwrap();
            prop_assert_eq!(a.items.len(), k.min(n));
            prop_assert!(a.items.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn metrics_bounded(pattern in proptest::collection::vec(any::<bool>(), 1..40)) {
            let k = pattern.len();
            let (r, rel) = ranking(&pattern);
            let map = mean_average_precision(&r, &rel, k);
            prop_assert!((0.0..=1.0).contains(&map));
            prop_assert_eq!(map, average_precision(&pattern));
            let p = precision_at_k(&r, &rel, k);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
