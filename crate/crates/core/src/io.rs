//! CSV readers and writers for graphs, labels and feature matrices.
//!
//! Graph directory layout:
//!
//! * `accounts.csv`: `id,kind,label` with kind in `{ca,eoa}` and label in
//!   `{0,1,}` (empty for unlabeled)
//! * `edges.csv`: `src,dst,kind,count,sum` with kind in `{trans,call}`;
//!   preceded by a `# unit: ether` comment line declaring the amount unit

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FEATURE_DIM, FEATURE_NAMES};
use crate::heig::{build_heig, Account, AccountType, Heig, InteractionEdge, InteractionType};

pub const ACCOUNTS_FILE: &str = "accounts.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const RECORDS_FILE: &str = "records.csv";
pub const AMOUNT_UNIT: &str = "ether";

pub(crate) fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

pub(crate) fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

pub(crate) fn csv_error(path: &Path, err: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = err.kind() {
        let csv::ErrorKind::Io(io) = err.into_kind() else { unreachable!() };
        return Error::io(path, io);
    }
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse { path: path.to_path_buf(), line, message: err.to_string() }
}

pub(crate) fn parse_error(path: &Path, record: &csv::StringRecord, message: String) -> Error {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse { path: path.to_path_buf(), line, message }
}

fn flush<W: Write>(path: &Path, mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct AccountRow {
    id: String,
    kind: String,
    #[serde(default)]
    label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRow {
    src: String,
    dst: String,
    kind: String,
    count: u64,
    sum: f64,
}

fn parse_label(raw: Option<&str>) -> std::result::Result<Option<bool>, String> {
    match raw.map(str::trim) {
        None | Some("") => Ok(None),
        Some("1") | Some("true") => Ok(Some(true)),
        Some("0") | Some("false") => Ok(Some(false)),
        Some(other) => Err(format!("invalid label `{other}` (expected 0, 1 or empty)")),
    }
}

fn label_str(label: Option<bool>) -> &'static str {
    match label {
        None => "",
        Some(true) => "1",
        Some(false) => "0",
    }
}

pub fn read_accounts(path: &Path) -> Result<Vec<Account>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row: AccountRow = rec.deserialize(None).map_err(|e| csv_error(path, e))?;
        let kind = row.kind.parse().map_err(|m| parse_error(path, &rec, m))?;
        let label = parse_label(row.label.as_deref()).map_err(|m| parse_error(path, &rec, m))?;
        out.push(Account::new(row.id, kind).with_label(label));
    }
    Ok(out)
}

pub fn write_accounts<'a>(path: &Path, accounts: impl IntoIterator<Item = &'a Account>) -> Result<()> {
    let mut w = writer(path)?;
    for a in accounts {
        w.serialize(AccountRow {
            id: a.id.clone(),
            kind: a.kind.to_string(),
            label: Some(label_str(a.label).to_string()),
        })
        .map_err(|e| csv_error(path, e))?;
    }
    flush(path, w)
}

pub fn read_edges(path: &Path) -> Result<Vec<InteractionEdge>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row: EdgeRow = rec.deserialize(None).map_err(|e| csv_error(path, e))?;
        let kind: InteractionType = row.kind.parse().map_err(|m| parse_error(path, &rec, m))?;
        out.push(InteractionEdge::new(row.src, row.dst, kind, row.count, row.sum));
    }
    Ok(out)
}

pub fn write_edges(path: &Path, edges: &[InteractionEdge]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    writeln!(buf, "# unit: {AMOUNT_UNIT}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(buf);
    for e in edges {
        w.serialize(EdgeRow {
            src: e.src.clone(),
            dst: e.dst.clone(),
            kind: e.kind.to_string(),
            count: e.count,
            sum: e.sum,
        })
        .map_err(|err| csv_error(path, err))?;
    }
    flush(path, w)
}

pub fn write_graph(dir: &Path, g: &Heig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_accounts(&dir.join(ACCOUNTS_FILE), g.accounts())?;
    write_edges(&dir.join(EDGES_FILE), g.edges())
}

pub fn read_graph(dir: &Path) -> Result<Heig> {
    let accounts = read_accounts(&dir.join(ACCOUNTS_FILE))?;
    let edges = read_edges(&dir.join(EDGES_FILE))?;
    build_heig(accounts, edges)
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: String,
    label: String,
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, bool>> {
    let mut rdr = reader(path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row: LabelRow = rec.deserialize(None).map_err(|e| csv_error(path, e))?;
        match parse_label(Some(&row.label)).map_err(|m| parse_error(path, &rec, m))? {
            Some(l) => {
                out.insert(row.id, l);
            }
            None => return Err(parse_error(path, &rec, "empty label".into())),
        }
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &BTreeMap<String, bool>) -> Result<()> {
    let mut w = writer(path)?;
    for (id, &l) in labels {
        w.serialize(LabelRow { id: id.clone(), label: label_str(Some(l)).into() })
            .map_err(|e| csv_error(path, e))?;
    }
    flush(path, w)
}

/// Reads `id,kind[,label]` rows as an account-type declaration.
pub fn read_account_kinds(path: &Path) -> Result<BTreeMap<String, AccountType>> {
    Ok(read_accounts(path)?.into_iter().map(|a| (a.id, a.kind)).collect())
}

/// `id` followed by the 14 named feature columns.
pub fn write_feature_matrix(path: &Path, ids: &[String], m: &Array2<f64>) -> Result<()> {
    if m.ncols() != FEATURE_DIM || m.nrows() != ids.len() {
        return Err(Error::ShapeMismatch {
            context: "feature export",
            expected: (ids.len(), FEATURE_DIM),
            actual: m.dim(),
        });
    }
    let mut w = writer(path)?;
    let mut header = vec!["id"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (id, row) in ids.iter().zip(m.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    flush(path, w)
}

pub fn read_feature_matrix(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut rdr = reader(path)?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != FEATURE_DIM + 1 {
            return Err(parse_error(path, &rec, format!("expected {} columns", FEATURE_DIM + 1)));
        }
        ids.push(rec[0].to_string());
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(path, &rec, format!("invalid number `{field}`")))?;
            values.push(v);
        }
    }
    let m = Array2::from_shape_vec((ids.len(), FEATURE_DIM), values).expect("row-major shape");
    Ok((ids, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heig::relation_stats;

    #[test]
    fn graph_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_heig(
            vec![
                Account::new("0xc", AccountType::Ca).with_label(Some(true)),
                Account::new("0xe", AccountType::Eoa),
            ],
            vec![
                InteractionEdge::new("0xe", "0xc", InteractionType::Call, 2, 0.1),
                InteractionEdge::new("0xc", "0xe", InteractionType::Trans, 1, 1e-18),
            ],
        )
        .unwrap();
        write_graph(dir.path(), &g).unwrap();
        let back = read_graph(dir.path()).unwrap();
        assert_eq!(relation_stats(&back), relation_stats(&g));
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.account("0xc").unwrap().label, Some(true));
        let text = std::fs::read_to_string(dir.path().join(EDGES_FILE)).unwrap();
        assert!(text.starts_with("# unit: ether\nsrc,dst,kind,count,sum\n"));
    }

    #[test]
    fn bad_kind_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("edges.csv");
        std::fs::write(&p, "src,dst,kind,count,sum\na,b,trans,1,1\na,b,xfer,1,1\n").unwrap();
        match read_edges(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
