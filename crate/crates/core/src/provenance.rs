//! Manifest hash and seed stamped into every artifact. CSV files carry them
//! as a leading `#` comment line; JSON files wrap the payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub manifest_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

impl Provenance {
    pub fn new(manifest_hash: impl Into<String>, seed: u64) -> Self {
        Provenance { manifest_hash: manifest_hash.into(), seed }
    }

    pub fn csv_comment(&self) -> String {
        format!("# manifest_hash={} seed={}\n", self.manifest_hash, self.seed)
    }

    /// Pretty JSON of `body` (which must serialize to an object) with a
    /// `provenance` field added.
    pub fn stamp_json<T: Serialize>(&self, body: &T) -> serde_json::Result<String> {
        let mut s = serde_json::to_string_pretty(&Stamped { provenance: self, body })?;
        s.push('\n');
        Ok(s)
    }

    /// Opens a CSV writer on `path` with the provenance comment already written.
    pub fn csv_writer(&self, path: &Path) -> std::io::Result<csv::Writer<std::fs::File>> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.csv_comment().as_bytes())?;
        Ok(csv::Writer::from_writer(f))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, body: &T) -> std::io::Result<()> {
        std::fs::write(path, self.stamp_json(body).map_err(std::io::Error::other)?)
    }
}

/// CSV reader that skips `#` comment lines.
pub fn csv_reader(path: &Path) -> csv::Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)
}
