//! Append-only event logs with gzip snapshots, one directory per session.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use mipd_core::pkpd::model::PopulationModel;

use crate::error::{ServiceError, ServiceResult};
use crate::session::{replay, EventRecord, SessionState};

const EVENTS: &str = "events.jsonl";
const SNAPSHOT: &str = "snapshot.json.gz";

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> ServiceResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn session_ids(&self) -> ServiceResult<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join(EVENTS).is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn append(&self, id: &str, record: &EventRecord) -> ServiceResult<()> {
        let dir = self.dir(id);
        fs::create_dir_all(&dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(EVENTS))?;
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    pub fn events(&self, id: &str) -> ServiceResult<Vec<EventRecord>> {
        let path = self.dir(id).join(EVENTS);
        if !path.is_file() {
            return Err(ServiceError::NotFound(id.to_string()));
        }
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    /// Writes the snapshot through a temporary file so a crash leaves the
    /// previous one intact.
    pub fn write_snapshot(&self, state: &SessionState) -> ServiceResult<()> {
        let dir = self.dir(&state.id);
        let tmp = dir.join(format!("{SNAPSHOT}.tmp"));
        {
            let mut gz = GzEncoder::new(BufWriter::new(File::create(&tmp)?), Compression::fast());
            serde_json::to_writer(&mut gz, state)?;
            gz.finish()?.flush()?;
        }
        fs::rename(tmp, dir.join(SNAPSHOT))?;
        Ok(())
    }

    pub fn read_snapshot(&self, id: &str) -> ServiceResult<Option<SessionState>> {
        let path = self.dir(id).join(SNAPSHOT);
        if !path.is_file() {
            return Ok(None);
        }
        let gz = GzDecoder::new(BufReader::new(File::open(path)?));
        Ok(Some(serde_json::from_reader(gz)?))
    }

    /// Latest snapshot plus the events after it, or a full replay when the
    /// snapshot is missing or unreadable.
    pub fn load(&self, id: &str, model: &PopulationModel) -> ServiceResult<SessionState> {
        let events = self.events(id)?;
        if let Ok(Some(mut state)) = self.read_snapshot(id) {
            let tail: Vec<&EventRecord> = events.iter().filter(|r| r.seq > state.last_seq).collect();
            if tail.iter().all(|r| state.apply(r).is_ok()) {
                return Ok(state);
            }
            log::warn!("snapshot of session {id} inconsistent with its log; replaying");
        }
        replay(id, &events, model)
    }
}
