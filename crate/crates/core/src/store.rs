//! Persistent, resumable result tables.
//!
//! A store is a CSV data file with a fixed header plus a sidecar cell index
//! (`<stem>.cells.csv`). Each sweep cell owns a contiguous run of data rows.
//! Cells are identified by their position in the sweep grid and carry a hash
//! of every input that determines their numbers, so a rerun skips cells whose
//! inputs are unchanged and recomputes the rest. Both files are rewritten in
//! grid order after every commit (write to a temporary file, then rename), so
//! the bytes on disk never depend on the order in which workers finished.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Header of the sidecar cell index.
pub const CELL_INDEX_HEADER: [&str; 9] = [
    "cell",
    "key",
    "code_version",
    "status",
    "rows",
    "steps",
    "dt",
    "dt_discrepancy",
    "message",
];

const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Outcome of one cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Done,
    Failed(String),
}

/// Everything recorded for one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellEntry {
    /// Hex digest of the cell inputs.
    pub key: String,
    pub status: CellStatus,
    /// Formatted data rows, in the column order of the store header.
    pub rows: Vec<Vec<String>>,
    /// Time steps of the accepted propagation (0 if none ran).
    pub steps: usize,
    /// Accepted time step, formatted, or empty.
    pub dt: String,
    /// Largest dt-vs-dt/2 discrepancy of the cell, formatted, or empty.
    pub dt_discrepancy: String,
}

impl CellEntry {
    pub fn done(key: String, rows: Vec<Vec<String>>, steps: usize, dt: String, dt_discrepancy: String) -> Self {
        Self {
            key,
            status: CellStatus::Done,
            rows,
            steps,
            dt,
            dt_discrepancy,
        }
    }

    pub fn failed(key: String, message: String) -> Self {
        Self {
            key,
            status: CellStatus::Failed(message),
            rows: Vec::new(),
            steps: 0,
            dt: String::new(),
            dt_discrepancy: String::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.status == CellStatus::Done
    }
}

/// Result table of one experiment.
#[derive(Debug)]
pub struct ResultStore {
    path: PathBuf,
    header: Vec<String>,
    cells: BTreeMap<usize, CellEntry>,
}

impl ResultStore {
    /// Opens `path`, loading any cells recorded by an earlier run with the
    /// same header. A file with a different header is an error.
    pub fn open(path: impl Into<PathBuf>, header: &[&str]) -> Result<Self> {
        let path = path.into();
        let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
        let mut store = Self {
            path,
            header,
            cells: BTreeMap::new(),
        };
        match (store.path.exists(), store.index_path().exists()) {
            (true, true) => store.load()?,
            (true, false) => {
                return Err(Error::StoreMismatch {
                    path: store.path.display().to_string(),
                    reason: format!(
                        "file exists without its cell index {}; move it away to start a new store",
                        store.index_path().display()
                    ),
                })
            }
            _ => {}
        }
        Ok(store)
    }

    /// An empty store that never touches the file system until [`save`](Self::save).
    pub fn in_memory(path: impl Into<PathBuf>, header: &[&str]) -> Self {
        Self {
            path: path.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            cells: BTreeMap::new(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn index_path(&self) -> PathBuf {
        let stem = self.path.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
        self.path.with_file_name(format!("{stem}.cells.csv"))
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn cell(&self, cell: usize) -> Option<&CellEntry> {
        self.cells.get(&cell)
    }

    /// True if `cell` completed earlier with exactly these inputs.
    pub fn is_current(&self, cell: usize, key: &str) -> bool {
        self.cells.get(&cell).is_some_and(|c| c.is_done() && c.key == key)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, &CellEntry)> {
        self.cells.iter().map(|(k, v)| (*k, v))
    }

    /// All data rows in grid order.
    pub fn rows(&self) -> impl Iterator<Item = &Vec<String>> {
        self.cells.values().flat_map(|c| c.rows.iter())
    }

    pub fn failed_cells(&self) -> Vec<usize> {
        self.cells
            .iter()
            .filter(|(_, c)| !c.is_done())
            .map(|(k, _)| *k)
            .collect()
    }

    /// Records a cell in memory, replacing any earlier entry.
    pub fn insert(&mut self, cell: usize, entry: CellEntry) -> Result<()> {
        for row in &entry.rows {
            if row.len() != self.header.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.header.len(),
                    found: row.len(),
                });
            }
        }
        self.cells.insert(cell, entry);
        Ok(())
    }

    /// Records a cell and rewrites both files.
    pub fn commit(&mut self, cell: usize, entry: CellEntry) -> Result<()> {
        self.insert(cell, entry)?;
        self.save()
    }

    /// Writes the data file and the cell index atomically.
    pub fn save(&self) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut data = csv::Writer::from_writer(Vec::new());
        data.write_record(&self.header)?;
        for row in self.rows() {
            data.write_record(row)?;
        }
        write_atomic(&self.path, &data.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;

        let mut index = csv::Writer::from_writer(Vec::new());
        index.write_record(CELL_INDEX_HEADER)?;
        for (cell, entry) in &self.cells {
            let (status, message) = match &entry.status {
                CellStatus::Done => ("done", ""),
                CellStatus::Failed(m) => ("failed", m.as_str()),
            };
            index.write_record([
                cell.to_string().as_str(),
                &entry.key,
                CODE_VERSION,
                status,
                &entry.rows.len().to_string(),
                &entry.steps.to_string(),
                &entry.dt,
                &entry.dt_discrepancy,
                message,
            ])?;
        }
        write_atomic(
            &self.index_path(),
            &index.into_inner().map_err(|e| Error::Io(e.into_error()))?,
        )
    }

    fn load(&mut self) -> Result<()> {
        let mut data = csv::Reader::from_path(&self.path)?;
        let found: Vec<String> = data.headers()?.iter().map(str::to_string).collect();
        if found != self.header {
            return Err(Error::StoreMismatch {
                path: self.path.display().to_string(),
                reason: format!("header {:?} differs from {:?}", found.join(","), self.header.join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in data.records() {
            rows.push(rec?.iter().map(str::to_string).collect::<Vec<_>>());
        }
        let mut rows = rows.into_iter();
        let mut index = csv::Reader::from_path(self.index_path())?;
        for rec in index.records() {
            let rec = rec?;
            let bad = |what: &str| Error::StoreMismatch {
                path: self.index_path().display().to_string(),
                reason: format!("malformed {what} in cell index"),
            };
            let cell: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("cell"))?;
            let key = rec.get(1).ok_or_else(|| bad("key"))?.to_string();
            // Cells written by another version are recomputed.
            let same_version = rec.get(2) == Some(CODE_VERSION);
            let n: usize = rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad("rows"))?;
            let steps: usize = rec.get(5).and_then(|s| s.parse().ok()).ok_or_else(|| bad("steps"))?;
            let dt = rec.get(6).unwrap_or("").to_string();
            let disc = rec.get(7).unwrap_or("").to_string();
            let status = match rec.get(3) {
                Some("done") if same_version => CellStatus::Done,
                Some("done") => CellStatus::Failed(format!("written by version {}", rec.get(2).unwrap_or("?"))),
                Some("failed") => CellStatus::Failed(rec.get(8).unwrap_or("").to_string()),
                _ => return Err(bad("status")),
            };
            let cell_rows: Vec<Vec<String>> = rows.by_ref().take(n).collect();
            if cell_rows.len() != n {
                return Err(bad("row count"));
            }
            self.cells.insert(
                cell,
                CellEntry {
                    key,
                    status,
                    rows: cell_rows,
                    steps,
                    dt,
                    dt_discrepancy: disc,
                },
            );
        }
        if rows.next().is_some() {
            return Err(Error::StoreMismatch {
                path: self.path.display().to_string(),
                reason: "data rows not covered by the cell index".into(),
            });
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Builds a hex digest from labelled key parts.
#[derive(Default)]
pub struct KeyHasher(Sha256);

impl KeyHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Self(Sha256::new());
        h.str(domain);
        h
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    /// Hashes the exact bit pattern.
    pub fn f64(&mut self, x: f64) -> &mut Self {
        self.0.update(x.to_bits().to_le_bytes());
        self
    }

    pub fn u64(&mut self, x: u64) -> &mut Self {
        self.0.update(x.to_le_bytes());
        self
    }

    pub fn finish_hex(&self) -> String {
        self.0.clone().finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn finish_u64(&self) -> u64 {
        let d = self.0.clone().finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(a: &str, b: &str) -> Vec<String> {
        vec![a.to_string(), b.to_string()]
    }

    #[test]
    fn roundtrip_in_grid_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut s = ResultStore::open(&path, &["a", "b"]).unwrap();
        s.commit(2, CellEntry::done("k2".into(), vec![row("2", "x")], 10, "0.5".into(), "1e-9".into())).unwrap();
        s.commit(0, CellEntry::done("k0".into(), vec![row("0", "x"), row("0", "y")], 10, "0.5".into(), String::new())).unwrap();
        s.commit(1, CellEntry::failed("k1".into(), "boom".into())).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b\n0,x\n0,y\n2,x\n");

        let r = ResultStore::open(&path, &["a", "b"]).unwrap();
        assert!(r.is_current(0, "k0"));
        assert!(!r.is_current(0, "other"));
        assert!(!r.is_current(1, "k1"));
        assert_eq!(r.failed_cells(), vec![1]);
        assert_eq!(r.cell(2).unwrap().rows, vec![row("2", "x")]);
        assert_eq!(r.cell(2).unwrap().dt_discrepancy, "1e-9");
    }

    #[test]
    fn unindexed_file_is_not_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(ResultStore::open(&path, &["a", "b"]), Err(Error::StoreMismatch { .. })));
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n1,2\n");
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut s = ResultStore::open(&path, &["a", "b"]).unwrap();
        s.commit(0, CellEntry::done("k".into(), vec![row("1", "2")], 1, String::new(), String::new())).unwrap();
        assert!(matches!(
            ResultStore::open(&path, &["a", "c"]),
            Err(Error::StoreMismatch { .. })
        ));
    }

    #[test]
    fn row_width_is_checked() {
        let mut s = ResultStore::in_memory("x.csv", &["a", "b"]);
        let err = s.insert(0, CellEntry::done("k".into(), vec![vec!["1".into()]], 1, String::new(), String::new()));
        assert!(matches!(err, Err(Error::DimensionMismatch { expected: 2, found: 1 })));
    }

    #[test]
    fn key_depends_on_every_part() {
        let a = KeyHasher::new("d").f64(1.0).u64(3).finish_hex();
        let b = KeyHasher::new("d").f64(1.0).u64(4).finish_hex();
        let c = KeyHasher::new("e").f64(1.0).u64(3).finish_hex();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, KeyHasher::new("d").f64(1.0).u64(3).finish_hex());
    }
}
