use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANDIDATE_HEADER: &str = "seriesuid,coordX,coordY,coordZ,class";

/// One nodule candidate. Coordinates are world millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_id: u64,
    pub scan_id: String,
    pub coord_x: f64,
    pub coord_y: f64,
    pub coord_z: f64,
    /// 0 = non-nodule, 1 = nodule.
    pub label: u8,
}

impl CandidateRecord {
    pub fn is_nodule(&self) -> bool {
        self.label == 1
    }
}

/// `(nodules, non-nodules)` in `records`.
pub fn class_counts(records: &[CandidateRecord]) -> (usize, usize) {
    let pos = records.iter().filter(|r| r.is_nodule()).count();
    (pos, records.len() - pos)
}

/// Reads a candidate list with the exact header `seriesuid,coordX,coordY,coordZ,class`.
/// Candidate ids are the zero-based data row index.
pub fn load_candidates(path: &Path) -> Result<Vec<CandidateRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut rows = reader.records();
    match rows.next() {
        None => return Err(parse_err(1, format!("missing header, expected `{CANDIDATE_HEADER}`"))),
        Some(header) => {
            let header = header.map_err(|e| parse_err(1, e.to_string()))?;
            let got: Vec<&str> = header.iter().map(str::trim).collect();
            if got.join(",") != CANDIDATE_HEADER {
                return Err(parse_err(
                    1,
                    format!("unexpected header `{}`, expected `{CANDIDATE_HEADER}`", got.join(",")),
                ));
            }
        }
    }

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() == 1 && row[0].trim().is_empty() {
            continue;
        }
        if row.len() != 5 {
            return Err(parse_err(line, format!("expected 5 fields, found {}", row.len())));
        }
        let coord = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = row[i]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid {name} `{}`", &row[i])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite {name}")));
            }
            Ok(v)
        };
        let label = match row[4].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(line, format!("unknown class label `{other}`"))),
        };
        let scan_id = row[0].trim();
        if scan_id.is_empty() {
            return Err(parse_err(line, "empty seriesuid".into()));
        }
        records.push(CandidateRecord {
            candidate_id: records.len() as u64,
            scan_id: scan_id.to_string(),
            coord_x: coord(1, "coordX")?,
            coord_y: coord(2, "coordY")?,
            coord_z: coord(3, "coordZ")?,
            label,
        });
    }
    Ok(records)
}

/// Writes records in candidate-id order under the standard header.
pub fn write_candidates(records: &[CandidateRecord], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 48);
    out.push_str(CANDIDATE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scan_id, r.coord_x, r.coord_y, r.coord_z, r.label
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_a_row() {
        let f = write("seriesuid,coordX,coordY,coordZ,class\ns1,1.5,-2.0,30.0,1\n");
        let r = load_candidates(f.path()).unwrap();
        assert_eq!(
            r,
            vec![CandidateRecord {
                candidate_id: 0,
                scan_id: "s1".into(),
                coord_x: 1.5,
                coord_y: -2.0,
                coord_z: 30.0,
                label: 1
            }]
        );
    }

    #[test]
    fn empty_data_section() {
        let f = write("seriesuid,coordX,coordY,coordZ,class\n");
        assert!(load_candidates(f.path()).unwrap().is_empty());
    }

    #[test]
    fn counts_labels() {
        let mut s = String::from("seriesuid,coordX,coordY,coordZ,class\n");
        for i in 0..10 {
            s.push_str(&format!("scan{},{i},0,0,{}\n", i % 3, u8::from(i % 3 == 0 && i < 9)));
        }
        let r = load_candidates(write(&s).path()).unwrap();
        assert_eq!(r.len(), 10);
        assert_eq!(class_counts(&r), (3, 7));
        assert_eq!(r[7].candidate_id, 7);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let f = write("seriesuid,coordX,coordY,coordZ,class\ns1,1,2,3,0\ns1,x,2,3,0\n");
        match load_candidates(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = write("seriesuid,coordX,coordY,coordZ,class\ns1,1,2,3,2\n");
        assert!(matches!(load_candidates(f.path()), Err(Error::Parse { line: 2, .. })));
        let f = write("seriesuid,coordX,coordY,coordZ,class\ns1,1,2,3\n");
        assert!(matches!(load_candidates(f.path()), Err(Error::Parse { line: 2, .. })));
        let f = write("id,x,y,z,label\n");
        assert!(matches!(load_candidates(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn write_then_load() {
        let recs: Vec<CandidateRecord> = (0..4)
            .map(|i| CandidateRecord {
                candidate_id: i,
                scan_id: format!("s{}", i / 2),
                coord_x: i as f64 * 0.1,
                coord_y: -1.0 / 3.0,
                coord_z: 1e-7,
                label: (i % 2) as u8,
            })
            .collect();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_candidates(&recs, f.path()).unwrap();
        assert_eq!(load_candidates(f.path()).unwrap(), recs);
    }
}
