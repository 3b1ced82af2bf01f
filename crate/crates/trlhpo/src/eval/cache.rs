//! Outcome cache keyed by architecture digest, persisted as append-only
//! JSON lines so repeated candidates are never retrained.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalOutcome, Evaluate};
use crate::space::ArchSpec;

#[derive(Serialize, Deserialize)]
struct CacheLine {
    digest: String,
    outcome: EvalOutcome,
}

/// Persistent digest -> outcome map. Writes append one JSON line per
/// entry and flush immediately, so an interrupted run can never corrupt
/// entries already on disk.
pub struct EvalCache {
    map: HashMap<String, EvalOutcome>,
    file: Option<File>,
}

impl EvalCache {
    /// Cache without a backing file.
    pub fn in_memory() -> Self {
        EvalCache { map: HashMap::new(), file: None }
    }

    /// Opens (or creates) a JSONL-backed cache and loads existing entries.
    pub fn open(path: &Path) -> Result<Self, EvalError> {
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line)?;
                map.insert(entry.digest, entry.outcome);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EvalCache { map, file: Some(file) })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn lookup(&self, digest: &str) -> Option<&EvalOutcome> {
        self.map.get(digest)
    }

    pub fn store(&mut self, digest: &str, outcome: &EvalOutcome) -> Result<(), EvalError> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&CacheLine {
                digest: digest.to_string(),
                outcome: outcome.clone(),
            })?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        self.map.insert(digest.to_string(), outcome.clone());
        Ok(())
    }
}

/// Looks up `arch` in the cache, evaluating and storing on a miss.
pub fn eval_cached(
    arch: &ArchSpec,
    evaluator: &dyn Evaluate,
    cache: &mut EvalCache,
) -> Result<EvalOutcome, EvalError> {
    let digest = arch.digest();
    if let Some(hit) = cache.lookup(&digest) {
        return Ok(hit.clone());
    }
    let outcome = evaluator.evaluate(arch)?;
    cache.store(&digest, &outcome)?;
    Ok(outcome)
}

/// Evaluator wrapper that consults a shared cache before delegating.
/// Reads are concurrent; the underlying evaluation runs outside the
/// lock so slow candidates do not serialize each other.
pub struct CachedEvaluator<E: Evaluate> {
    inner: E,
    cache: Mutex<EvalCache>,
}

impl<E: Evaluate> CachedEvaluator<E> {
    pub fn new(inner: E, cache: EvalCache) -> Self {
        CachedEvaluator { inner, cache: Mutex::new(cache) }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

impl<E: Evaluate> Evaluate for CachedEvaluator<E> {
    fn evaluate(&self, arch: &ArchSpec) -> Result<EvalOutcome, EvalError> {
        let digest = arch.digest();
        if let Some(hit) = self.cache.lock().expect("cache lock").lookup(&digest) {
            return Ok(hit.clone());
        }
        let outcome = self.inner.evaluate(arch)?;
        let mut cache = self.cache.lock().expect("cache lock");
        match cache.lookup(&digest) {
            // another rollout raced us here; keep the stored entry
            Some(existing) => Ok(existing.clone()),
            None => {
                cache.store(&digest, &outcome)?;
                Ok(outcome)
            }
        }
    }

    fn evaluations(&self) -> usize {
        self.inner.evaluations()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::SurrogateEvaluator;
    use crate::space::{ArchSpec, LayerSpec};

    fn conv_arch(filters: usize) -> ArchSpec {
        let mut arch = ArchSpec::new((1, 28, 28));
        arch.push(LayerSpec::Conv2D { filters, kernel: 3, stride: 1 }).unwrap();
        arch
    }

    #[test]
    fn second_call_skips_evaluation() {
        let cached = CachedEvaluator::new(SurrogateEvaluator::new(0), EvalCache::in_memory());
        let arch = conv_arch(8);
        let a = cached.evaluate(&arch).unwrap();
        let b = cached.evaluate(&arch).unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.evaluations(), 1);
    }

    #[test]
    fn distinct_archs_make_two_entries() {
        let cached = CachedEvaluator::new(SurrogateEvaluator::new(0), EvalCache::in_memory());
        cached.evaluate(&conv_arch(8)).unwrap();
        cached.evaluate(&conv_arch(16)).unwrap();
        assert_eq!(cached.cache_len(), 2);
        assert_eq!(cached.evaluations(), 2);
    }

    #[test]
    fn reopened_cache_returns_bit_identical_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let arch = conv_arch(24);
        let sur = SurrogateEvaluator::new(9);
        let original = {
            let mut cache = EvalCache::open(&path).unwrap();
            eval_cached(&arch, &sur, &mut cache).unwrap()
        };
        let reopened = EvalCache::open(&path).unwrap();
        let stored = reopened.lookup(&arch.digest()).unwrap();
        assert_eq!(&original, stored);
        let bits_a: Vec<u64> = original.batch_accuracies.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = stored.batch_accuracies.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn eval_cached_hits_leave_cache_unchanged() {
        let sur = SurrogateEvaluator::new(0);
        let mut cache = EvalCache::in_memory();
        let arch = conv_arch(8);
        eval_cached(&arch, &sur, &mut cache).unwrap();
        assert_eq!(cache.len(), 1);
        eval_cached(&arch, &sur, &mut cache).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(sur.evaluations(), 1);
    }
}
