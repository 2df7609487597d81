//! Content-addressed dataset and report files under the data directory.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use kgnlq_core::qgen::Dataset;

#[derive(Debug)]
pub struct DatasetStore {
    dir: PathBuf,
    write: Mutex<()>,
}

fn is_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

impl DatasetStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(dir.join("datasets"))?;
        std::fs::create_dir_all(dir.join("reports"))?;
        Ok(DatasetStore {
            dir,
            write: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn dataset_path(&self, id: &str) -> PathBuf {
        self.dir.join("datasets").join(format!("{id}.jsonl"))
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial file.
    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        let _guard = self.write.lock().unwrap_or_else(|e| e.into_inner());
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)
    }

    pub fn put(&self, dataset: &Dataset) -> std::io::Result<String> {
        let id = dataset.content_id();
        let path = self.dataset_path(&id);
        if !path.exists() {
            self.write_atomic(&path, dataset.to_jsonl().as_bytes())?;
        }
        Ok(id)
    }

    /// `None` for ids that are malformed or not stored.
    pub fn get(&self, id: &str) -> Option<Dataset> {
        if !is_id(id) {
            return None;
        }
        Dataset::read(self.dataset_path(id)).ok()
    }

    /// Stores a report under `<dataset id>-<report hash>.json` and returns
    /// the file name.
    pub fn put_report(&self, dataset_id: &str, json: &str) -> std::io::Result<String> {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        json.hash(&mut h);
        let name = format!("{dataset_id}-{:016x}.json", h.finish());
        self.write_atomic(&self.dir.join("reports").join(&name), json.as_bytes())?;
        Ok(name)
    }
}
