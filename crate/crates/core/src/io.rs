//! Text formats and ingestion.
//!
//! * transactions: JSON lines, one record per line (see [`TxLine`]);
//! * snapshots: CSV with header `ts,mempool_bytes,tx_count,block_height,secs_since_last_block,blockspace_util`;
//! * CPFP links: CSV with header `child_id,parent_id`;
//! * external weights: CSV with header `tx_id,vsize_vb,weight_wu`.
//!
//! Malformed lines are counted with their line numbers, never dropped
//! silently; a file whose malformed share exceeds the configured fraction
//! aborts ingestion.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::Dataset;
use crate::market::{
    assign_epochs, collapse_cpfp, correct_weights, CorrectionReport, EpochConfig, ExternalWeight, Snapshot, TxRecord,
    DEFAULT_EPS_RESP,
};

/// One line of the transaction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxLine {
    pub tx_id: String,
    pub entry_ts: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirm_ts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirm_height: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_blocks: Option<u64>,
    pub fee_sats: u64,
    /// Defaults to `4 * vsize_vb` (no witness discount).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_wu: Option<u64>,
    pub vsize_vb: u64,
    #[serde(default)]
    pub rbf: bool,
    #[serde(default = "one")]
    pub n_inputs: u32,
    #[serde(default = "one")]
    pub n_outputs: u32,
    #[serde(default)]
    pub total_output_sats: u64,
    #[serde(default)]
    pub op_return: bool,
    #[serde(default)]
    pub inscription: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respend_blocks: Option<f64>,
}

fn one() -> u32 {
    1
}

impl TxLine {
    pub fn from_record(tx: &TxRecord) -> Self {
        TxLine {
            tx_id: tx.tx_id.clone(),
            entry_ts: tx.entry_time,
            confirm_ts: tx.confirm_time,
            confirm_height: tx.confirm_height,
            wait_blocks: tx.wait_blocks,
            fee_sats: tx.fee_sats,
            weight_wu: Some(tx.weight_wu),
            vsize_vb: tx.vsize_vb,
            rbf: tx.rbf,
            n_inputs: tx.n_inputs,
            n_outputs: tx.n_outputs,
            total_output_sats: tx.total_output_sats,
            op_return: tx.has_op_return,
            inscription: tx.has_inscription,
            respend_blocks: tx.respend_blocks,
        }
    }

    pub fn into_record(self, eps_resp: f64) -> Result<TxRecord> {
        if self.vsize_vb == 0 {
            return Err(Error::InvalidRecord { tx_id: self.tx_id, reason: "vsize must be positive".into() });
        }
        let mut tx = TxRecord::new(self.tx_id, self.fee_sats, self.vsize_vb, self.entry_ts);
        if let Some(w) = self.weight_wu {
            tx.weight_wu = w;
        }
        tx.confirm_time = self.confirm_ts;
        tx.confirm_height = self.confirm_height;
        tx.wait_blocks = self.wait_blocks;
        tx.rbf = self.rbf;
        tx.n_inputs = self.n_inputs;
        tx.n_outputs = self.n_outputs;
        tx.total_output_sats = self.total_output_sats;
        tx.has_op_return = self.op_return;
        tx.has_inscription = self.inscription;
        tx.set_respend(self.respend_blocks, eps_resp);
        if tx.confirm_height.is_some() && tx.wait_blocks.is_none() {
            // filled from the entry snapshot's height during epoch assignment
            let mut probe = tx.clone();
            probe.wait_blocks = Some(1);
            probe.validate(eps_resp)?;
        } else {
            tx.validate(eps_resp)?;
        }
        Ok(tx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FileReport {
    pub file: String,
    /// Non-blank data lines.
    pub lines: usize,
    pub records: usize,
    pub errors: Vec<LineError>,
}

impl FileReport {
    fn new(file: &str) -> Self {
        FileReport { file: file.to_string(), ..FileReport::default() }
    }

    fn fail(&mut self, line: usize, message: impl ToString) {
        self.errors.push(LineError { line, message: message.to_string() });
    }

    fn check(&self, max_fraction: f64) -> Result<()> {
        let bad = self.errors.len();
        if self.lines > 0 && bad as f64 > max_fraction * self.lines as f64 {
            return Err(Error::TooManyErrors { file: self.file.clone(), bad, total: self.lines });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub epoch: EpochConfig,
    /// Largest tolerated share of malformed lines per file.
    pub max_error_fraction: f64,
    pub eps_resp: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { epoch: EpochConfig::default(), max_error_fraction: 0.5, eps_resp: DEFAULT_EPS_RESP }
    }
}

pub fn read_transactions<R: BufRead>(reader: R, name: &str, eps_resp: f64) -> Result<(Vec<TxRecord>, FileReport)> {
    let mut report = FileReport::new(name);
    let mut txs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let parsed = serde_json::from_str::<TxLine>(&line).map_err(Error::from).and_then(|l| l.into_record(eps_resp));
        match parsed {
            Ok(tx) => txs.push(tx),
            Err(e) => report.fail(i + 1, e),
        }
    }
    report.records = txs.len();
    Ok((txs, report))
}

pub fn write_transactions<W: Write>(mut w: W, txs: &[TxRecord]) -> Result<()> {
    for tx in txs {
        serde_json::to_writer(&mut w, &TxLine::from_record(tx))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headed CSV into `T`, counting rows that fail to parse or validate.
fn read_csv<T, R, F>(reader: R, name: &str, mut check: F) -> Result<(Vec<T>, FileReport)>
where
    T: for<'de> Deserialize<'de>,
    R: Read,
    F: FnMut(&T) -> std::result::Result<(), String>,
{
    let mut report = FileReport::new(name);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.lines += 1;
                let line = e.position().map_or(0, |p| p.line() as usize);
                report.fail(line, e);
                continue;
            }
        };
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        report.lines += 1;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        match rec.deserialize::<T>(Some(&headers)) {
            Ok(v) => match check(&v) {
                Ok(()) => out.push(v),
                Err(m) => report.fail(line, m),
            },
            Err(e) => report.fail(line, e),
        }
    }
    report.records = out.len();
    Ok((out, report))
}

/// Writes rows as a headed CSV.
pub fn write_csv<T: Serialize, W: Write>(w: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_snapshots<R: Read>(reader: R, name: &str) -> Result<(Vec<Snapshot>, FileReport)> {
    read_csv(reader, name, |s: &Snapshot| {
        let ok = s.ts.is_finite() && s.secs_since_last_block >= 0.0 && (0.0..=1.0).contains(&s.blockspace_util);
        if ok {
            Ok(())
        } else {
            Err("snapshot fields out of range".into())
        }
    })
}

pub fn write_snapshots<W: Write>(w: W, snapshots: &[Snapshot]) -> Result<()> {
    write_csv(w, snapshots)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub child_id: String,
    pub parent_id: String,
}

pub fn read_links<R: Read>(reader: R, name: &str) -> Result<(Vec<(String, String)>, FileReport)> {
    let (links, report) = read_csv(reader, name, |l: &Link| {
        if l.child_id.is_empty() || l.parent_id.is_empty() || l.child_id == l.parent_id {
            Err("link needs two distinct ids".into())
        } else {
            Ok(())
        }
    })?;
    Ok((links.into_iter().map(|l| (l.child_id, l.parent_id)).collect(), report))
}

pub fn write_links<W: Write>(w: W, links: &[(String, String)]) -> Result<()> {
    let rows: Vec<Link> = links.iter().map(|(c, p)| Link { child_id: c.clone(), parent_id: p.clone() }).collect();
    write_csv(w, &rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightRow {
    pub tx_id: String,
    pub vsize_vb: u64,
    pub weight_wu: u64,
}

/// External weights are passed through as read; invalid size pairs are
/// rejected and counted by the weight correction itself.
pub fn read_external_weights<R: Read>(reader: R, name: &str) -> Result<(HashMap<String, ExternalWeight>, FileReport)> {
    let (rows, report) = read_csv(reader, name, |_: &WeightRow| Ok(()))?;
    let map = rows.into_iter().map(|r| (r.tx_id, ExternalWeight { vsize_vb: r.vsize_vb, weight_wu: r.weight_wu })).collect();
    Ok((map, report))
}

pub fn write_external_weights<W: Write>(w: W, rows: &[WeightRow]) -> Result<()> {
    write_csv(w, rows)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub transactions: PathBuf,
    pub snapshots: PathBuf,
    pub links: Option<PathBuf>,
    pub external_weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub files: Vec<FileReport>,
    pub weights: Option<CorrectionReport>,
    /// Non-blank transaction lines.
    pub records_in: usize,
    /// Records surviving parsing and epoch assignment (package members counted individually).
    pub records_kept: usize,
    /// Malformed lines plus records without usable mempool state.
    pub records_dropped: usize,
    pub malformed: usize,
    pub without_state: usize,
    pub cpfp_packages: usize,
    pub rows: usize,
    pub epochs: usize,
    pub imputed_epochs: usize,
    pub imputed_txs: usize,
}

/// Joins parsed inputs: weight correction, CPFP collapsing, epoch assignment.
pub fn assemble(
    txs: Vec<TxRecord>,
    snapshots: &[Snapshot],
    links: &[(String, String)],
    external: Option<&HashMap<String, ExternalWeight>>,
    cfg: &IngestConfig,
    files: Vec<FileReport>,
) -> Result<(Dataset, IngestReport)> {
    if snapshots.is_empty() {
        return Err(Error::NoEpochState);
    }
    let malformed: usize = files.iter().filter(|f| f.file == "transactions").map(|f| f.errors.len()).sum();
    let records_in = txs.len() + malformed;
    let (txs, weights) = match external {
        Some(w) => {
            let (t, r) = correct_weights(txs, w);
            (t, Some(r))
        }
        None => (txs, None),
    };
    let txs = collapse_cpfp(txs, links)?;
    let a = assign_epochs(txs, snapshots, &cfg.epoch)?;
    let members = |t: &TxRecord| t.cpfp_members.len().max(1);
    let records_kept: usize = a.txs.iter().map(members).sum();
    let report = IngestReport {
        files,
        weights,
        records_in,
        records_kept,
        records_dropped: records_in - records_kept,
        malformed,
        without_state: records_in - malformed - records_kept,
        cpfp_packages: a.txs.iter().filter(|t| t.cpfp_package()).count(),
        rows: a.txs.len(),
        epochs: a.epochs.len(),
        imputed_epochs: a.imputed_epochs,
        imputed_txs: a.imputed_txs,
    };
    Ok((Dataset { txs: a.txs, epochs: a.epochs }, report))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Reads and joins the input files.
pub fn ingest(paths: &InputPaths, cfg: &IngestConfig) -> Result<(Dataset, IngestReport)> {
    let (txs, tx_report) = read_transactions(open(&paths.transactions)?, "transactions", cfg.eps_resp)?;
    tx_report.check(cfg.max_error_fraction)?;
    let (snapshots, snap_report) = read_snapshots(open(&paths.snapshots)?, "snapshots")?;
    snap_report.check(cfg.max_error_fraction)?;
    let mut files = vec![tx_report, snap_report];
    let links = match &paths.links {
        Some(p) => {
            let (l, r) = read_links(open(p)?, "links")?;
            r.check(cfg.max_error_fraction)?;
            files.push(r);
            l
        }
        None => Vec::new(),
    };
    let external = match &paths.external_weights {
        Some(p) => {
            let (w, r) = read_external_weights(open(p)?, "external_weights")?;
            r.check(cfg.max_error_fraction)?;
            files.push(r);
            Some(w)
        }
        None => None,
    };
    assemble(txs, &snapshots, &links, external.as_ref(), cfg, files)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}
