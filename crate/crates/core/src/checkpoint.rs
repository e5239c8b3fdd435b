//! Weight sampling policies and checkpoint persistence.
//!
//! Checkpoints are stored one vector per file in the `TWA1` container:
//! 4 magic bytes `TWA1`, a little-endian u32 format version (1), a
//! little-endian u64 parameter count `D`, then `D` consecutive `f32`
//! little-endian values. Values are quantized to 32 bits on disk and widened
//! back to [`f64`] on load. A JSON manifest lists the entries in step order
//! and is rewritten atomically (write to a temp file, then rename).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TwaError};
use crate::params::ParamVector;

const MAGIC: [u8; 4] = *b"TWA1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    EveryNEpochs,
    EveryNSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPhase {
    /// Sample from the start of training; stop once `limit` is reached.
    Head,
    /// Sample throughout; retain only the most recent `limit` checkpoints.
    Tail,
}

/// When to sample weights during a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub n: usize,
    pub phase: SamplingPhase,
    #[serde(default)]
    pub limit: Option<usize>,
}

impl SamplingPolicy {
    pub fn every_n_epochs(n: usize, limit: Option<usize>) -> Self {
        Self {
            mode: SamplingMode::EveryNEpochs,
            n,
            phase: SamplingPhase::Head,
            limit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(TwaError::Input("sampling interval n must be >= 1".into()));
        }
        if self.limit == Some(0) {
            return Err(TwaError::Input("sampling limit must be >= 1".into()));
        }
        Ok(())
    }

    /// True exactly at policy boundaries. `epoch` and `step` are 1-based
    /// running counters and `taken` is the number of samples already stored;
    /// in the head phase the limit stops sampling, in the tail phase old
    /// samples are evicted by the store instead.
    pub fn should_sample(
        &self,
        epoch: usize,
        step: usize,
        steps_per_epoch: usize,
        taken: usize,
    ) -> bool {
        if step == 0 || steps_per_epoch == 0 {
            return false;
        }
        if self.phase == SamplingPhase::Head {
            if let Some(limit) = self.limit {
                if taken >= limit {
                    return false;
                }
            }
        }
        match self.mode {
            SamplingMode::EveryNEpochs => {
                step.is_multiple_of(steps_per_epoch) && epoch.is_multiple_of(self.n)
            }
            SamplingMode::EveryNSteps => step.is_multiple_of(self.n),
        }
    }
}

/// One sampled checkpoint in a manifest. `path` is relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub epoch: u64,
    pub val_metric: Option<f64>,
    pub path: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(rename = "D")]
    d: u64,
    entries: Vec<CheckpointEntry>,
}

/// Writes one parameter vector in the `TWA1` container format.
pub fn write_weights_file(path: impl AsRef<Path>, w: &ParamVector) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| TwaError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    out.write_all(&MAGIC).map_err(io_err)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io_err)?;
    out.write_u64::<LittleEndian>(w.len() as u64).map_err(io_err)?;
    for &v in w.iter() {
        out.write_f32::<LittleEndian>(v as f32).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads a `TWA1` file, widening the stored 32-bit values to `f64`.
pub fn read_weights_file(path: impl AsRef<Path>) -> Result<ParamVector> {
    let path = path.as_ref();
    let d = read_header(path)?;
    let file = File::open(path).map_err(|source| TwaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut header = [0u8; 16];
    reader
        .read_exact(&mut header)
        .map_err(|_| corrupt(path, "file shorter than its header"))?;
    let mut data = Vec::with_capacity(d as usize);
    for _ in 0..d {
        let v = reader
            .read_f32::<LittleEndian>()
            .map_err(|_| corrupt(path, "payload truncated"))?;
        data.push(f64::from(v));
    }
    ParamVector::from_vec(data)
}

fn corrupt(path: &Path, reason: &str) -> TwaError {
    TwaError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Validates magic, version, and declared length against the file size;
/// returns the stored `D`.
fn read_header(path: &Path) -> Result<u64> {
    if !path.exists() {
        return Err(TwaError::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let file = File::open(path).map_err(|source| TwaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let len = file
        .metadata()
        .map_err(|source| TwaError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .len();
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| corrupt(path, "file shorter than its header"))?;
    if magic != MAGIC {
        return Err(corrupt(path, "bad magic bytes"));
    }
    let version = reader
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt(path, "file shorter than its header"))?;
    if version != FORMAT_VERSION {
        return Err(corrupt(path, &format!("unsupported format version {version}")));
    }
    let d = reader
        .read_u64::<LittleEndian>()
        .map_err(|_| corrupt(path, "file shorter than its header"))?;
    if d == 0 {
        return Err(corrupt(path, "declared parameter count is zero"));
    }
    let expected = 16 + 4 * d;
    if len != expected {
        return Err(corrupt(
            path,
            &format!("file is {len} bytes, header implies {expected}"),
        ));
    }
    Ok(d)
}

/// Single-writer checkpoint sink backing one manifest.
#[derive(Debug)]
pub struct CheckpointStore {
    dir: PathBuf,
    d: usize,
    entries: Vec<CheckpointEntry>,
}

impl CheckpointStore {
    /// Creates `dir` (and parents) and starts an empty manifest.
    pub fn create(dir: impl Into<PathBuf>, d: usize) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| TwaError::Io {
            path: dir.clone(),
            source,
        })?;
        let store = Self {
            dir,
            d,
            entries: Vec::new(),
        };
        store.write_manifest()?;
        Ok(store)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Saves a checkpoint file and appends it to the manifest atomically.
    /// Entries must arrive in strictly increasing step order.
    pub fn save(
        &mut self,
        w: &ParamVector,
        step: u64,
        epoch: u64,
        val_metric: Option<f64>,
    ) -> Result<PathBuf> {
        if w.len() != self.d {
            return Err(TwaError::Dimension(format!(
                "checkpoint has length {}, store expects {}",
                w.len(),
                self.d
            )));
        }
        if let Some(last) = self.entries.last() {
            if step <= last.step {
                return Err(TwaError::Input(format!(
                    "checkpoint steps must increase: {step} after {}",
                    last.step
                )));
            }
        }
        let name = format!("ckpt_{step:08}.twa1");
        let path = self.dir.join(&name);
        write_weights_file(&path, w)?;
        self.entries.push(CheckpointEntry {
            step,
            epoch,
            val_metric,
            path: name,
        });
        self.write_manifest()?;
        Ok(path)
    }

    /// Drops the oldest entries (and their files) until at most `limit`
    /// remain, for tail-phase sampling.
    pub fn enforce_tail_limit(&mut self, limit: usize) -> Result<()> {
        while self.entries.len() > limit {
            let entry = self.entries.remove(0);
            let path = self.dir.join(&entry.path);
            std::fs::remove_file(&path).map_err(|source| TwaError::Io { path, source })?;
        }
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        let manifest = Manifest {
            d: self.d as u64,
            entries: self.entries.clone(),
        };
        let tmp = self.dir.join("manifest.json.tmp");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&tmp, json).map_err(|source| TwaError::Io {
            path: tmp.clone(),
            source,
        })?;
        std::fs::rename(&tmp, self.manifest_path()).map_err(|source| TwaError::Io {
            path: self.manifest_path(),
            source,
        })
    }
}

/// Validated, read-only view of a manifest and its checkpoint files.
#[derive(Debug, Clone)]
pub struct CheckpointSet {
    pub d: usize,
    pub entries: Vec<CheckpointEntry>,
    pub manifest_path: PathBuf,
}

impl CheckpointSet {
    /// Loads and validates a manifest: entries must be in increasing step
    /// order and every referenced file must exist, carry valid framing, and
    /// store exactly `D` values.
    pub fn load(manifest_path: impl Into<PathBuf>) -> Result<Self> {
        let manifest_path = manifest_path.into();
        if !manifest_path.exists() {
            return Err(TwaError::MissingFile {
                path: manifest_path,
            });
        }
        let text = std::fs::read_to_string(&manifest_path).map_err(|source| TwaError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| TwaError::Corrupt {
            path: manifest_path.clone(),
            reason: format!("invalid manifest JSON: {e}"),
        })?;
        if manifest.entries.is_empty() {
            return Err(TwaError::Input(format!(
                "manifest {} lists no checkpoints",
                manifest_path.display()
            )));
        }
        if !manifest.entries.windows(2).all(|w| w[0].step < w[1].step) {
            return Err(TwaError::Corrupt {
                path: manifest_path.clone(),
                reason: "entries are not in increasing step order".into(),
            });
        }
        let set = Self {
            d: manifest.d as usize,
            entries: manifest.entries,
            manifest_path,
        };
        for i in 0..set.entries.len() {
            let path = set.entry_path(i);
            let found = read_header(&path)?;
            if found != set.d as u64 {
                return Err(TwaError::DimensionOnDisk {
                    path,
                    expected: set.d as u64,
                    found,
                });
            }
        }
        Ok(set)
    }

    /// Number of checkpoints `n`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Absolute path of entry `i`, resolved against the manifest directory.
    pub fn entry_path(&self, i: usize) -> PathBuf {
        let base = self
            .manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."));
        base.join(&self.entries[i].path)
    }

    pub fn load_weight(&self, i: usize) -> Result<ParamVector> {
        if i >= self.entries.len() {
            return Err(TwaError::IndexOutOfRange {
                index: i,
                len: self.entries.len(),
            });
        }
        let w = read_weights_file(self.entry_path(i))?;
        if w.len() != self.d {
            return Err(TwaError::DimensionOnDisk {
                path: self.entry_path(i),
                expected: self.d as u64,
                found: w.len() as u64,
            });
        }
        Ok(w)
    }

    /// Loads all checkpoints in step order.
    pub fn load_weights(&self) -> Result<Vec<ParamVector>> {
        (0..self.entries.len()).map(|i| self.load_weight(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pv(data: Vec<f64>) -> ParamVector {
        ParamVector::from_vec(data).unwrap()
    }

    #[test]
    fn sampling_once_per_epoch() {
        let policy = SamplingPolicy::every_n_epochs(1, None);
        let steps_per_epoch = 10;
        let mut hits = 0;
        for step in 1..=30 {
            let epoch = (step - 1) / steps_per_epoch + 1;
            if policy.should_sample(epoch, step, steps_per_epoch, hits) {
                hits += 1;
                assert_eq!(step % steps_per_epoch, 0);
            }
        }
        assert_eq!(hits, 3);
    }

    #[test]
    fn sampling_every_n_steps() {
        let policy = SamplingPolicy {
            mode: SamplingMode::EveryNSteps,
            n: 100,
            phase: SamplingPhase::Head,
            limit: None,
        };
        assert!(!policy.should_sample(1, 250, 1000, 0));
        assert!(policy.should_sample(1, 300, 1000, 0));
    }

    #[test]
    fn head_limit_caps_sampling() {
        let policy = SamplingPolicy {
            mode: SamplingMode::EveryNSteps,
            n: 1,
            phase: SamplingPhase::Head,
            limit: Some(3),
        };
        assert!(policy.should_sample(1, 1, 10, 2));
        assert!(!policy.should_sample(1, 2, 10, 3));
        assert!(!policy.should_sample(1, 3, 10, 4));
    }

    #[test]
    fn roundtrip_is_exact_after_f32_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.twa1");
        let w = pv(vec![1.5, -0.25, std::f64::consts::PI]);
        write_weights_file(&path, &w).unwrap();
        let back = read_weights_file(&path).unwrap();
        for (orig, loaded) in w.iter().zip(back.iter()) {
            assert_eq!(*loaded, f64::from(*orig as f32));
            assert!((orig - loaded).abs() <= (*orig as f32).abs() as f64 * 1e-7 + 1e-12);
        }
    }

    #[test]
    fn store_keeps_entries_in_step_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::create(dir.path().join("ck"), 2).unwrap();
        store.save(&pv(vec![1.0, 2.0]), 10, 1, None).unwrap();
        store.save(&pv(vec![3.0, 4.0]), 20, 2, Some(0.5)).unwrap();
        assert!(store.save(&pv(vec![0.0, 0.0]), 20, 2, None).is_err());

        let set = CheckpointSet::load(store.manifest_path()).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.entries[0].step, 10);
        assert_eq!(set.entries[1].val_metric, Some(0.5));
        assert_eq!(set.load_weight(1).unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn unwritable_directory_is_a_storage_error() {
        // a regular file where the directory should be defeats create_dir_all
        // even when running as root
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("taken");
        std::fs::write(&blocker, b"file").unwrap();
        match CheckpointStore::create(blocker.join("ck"), 2) {
            Err(TwaError::Io { .. }) => {}
            other => panic!("expected storage error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::create(dir.path().join("ck"), 3).unwrap();
        let p = store.save(&pv(vec![1.0, 2.0, 3.0]), 1, 1, None).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        match CheckpointSet::load(store.manifest_path()) {
            Err(TwaError::Corrupt { path, .. }) => assert_eq!(path, p),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.twa1");
        write_weights_file(&path, &pv(vec![1.0])).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_weights_file(&path),
            Err(TwaError::Corrupt { .. })
        ));
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::create(dir.path().join("ck"), 2).unwrap();
        store.save(&pv(vec![1.0, 2.0]), 1, 1, None).unwrap();
        store.save(&pv(vec![3.0, 4.0]), 2, 1, None).unwrap();
        // overwrite the second file with a different D
        let victim = dir.path().join("ck").join("ckpt_00000002.twa1");
        write_weights_file(&victim, &pv(vec![1.0, 2.0, 3.0])).unwrap();
        match CheckpointSet::load(store.manifest_path()) {
            Err(TwaError::DimensionOnDisk {
                expected, found, ..
            }) => {
                assert_eq!(expected, 2);
                assert_eq!(found, 3);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::create(dir.path().join("ck"), 1).unwrap();
        let p = store.save(&pv(vec![1.0]), 1, 1, None).unwrap();
        std::fs::remove_file(&p).unwrap();
        assert!(matches!(
            CheckpointSet::load(store.manifest_path()),
            Err(TwaError::MissingFile { .. })
        ));
    }

    #[test]
    fn tail_limit_evicts_oldest() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::create(dir.path().join("ck"), 1).unwrap();
        for step in 1..=5 {
            store.save(&pv(vec![step as f64]), step, 1, None).unwrap();
            store.enforce_tail_limit(3).unwrap();
        }
        let set = CheckpointSet::load(store.manifest_path()).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.entries[0].step, 3);
        assert_eq!(set.load_weight(2).unwrap().as_slice(), &[5.0]);
    }

    #[test]
    fn manifest_count_matches_sampling_events() {
        // simulate a run and check the manifest agrees with should_sample
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::create(dir.path().join("ck"), 1).unwrap();
        let policy = SamplingPolicy {
            mode: SamplingMode::EveryNSteps,
            n: 7,
            phase: SamplingPhase::Head,
            limit: Some(4),
        };
        let steps_per_epoch = 10;
        let mut taken = 0;
        let mut expected = 0;
        for step in 1..=60 {
            let epoch = (step - 1) / steps_per_epoch + 1;
            if policy.should_sample(epoch, step, steps_per_epoch, taken) {
                store
                    .save(&pv(vec![step as f64]), step as u64, epoch as u64, None)
                    .unwrap();
                taken += 1;
                expected += 1;
            }
        }
        assert_eq!(expected, 4);
        let set = CheckpointSet::load(store.manifest_path()).unwrap();
        assert_eq!(set.len(), expected);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        // f32 quantization is the only loss across representative sizes
        #[test]
        fn roundtrip_across_sizes(seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            for (i, d) in [1usize, 17, 10_000].into_iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
                let data: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
                let w = ParamVector::from_vec(data).unwrap();
                let path = dir.path().join(format!("w{d}.twa1"));
                write_weights_file(&path, &w).unwrap();
                let back = read_weights_file(&path).unwrap();
                prop_assert_eq!(back.len(), d);
                for (orig, loaded) in w.iter().zip(back.iter()) {
                    prop_assert_eq!(*loaded, f64::from(*orig as f32));
                }
            }
        }
    }
}
