//! Plain-text nodal snapshots: `# key = value` header lines, one column-name
//! line, then comma-separated rows in element-major node order.

use std::fmt::Write as _;
use std::path::Path;

use crate::clustering::FeatureMatrix;
use crate::error::{Error, Result};
use crate::gas::{primitive_from_conservative, GasModel, State};
use crate::sensors::{feature_row, FeatureChoice};
use crate::spatial::ConservativeField;

pub const COLUMNS: [&str; 12] = [
    "x", "y", "rho", "rhou", "rhov", "rhoE", "p", "s", "alpha", "dpdx", "dpdy", "divv",
];
pub const NCOLS: usize = COLUMNS.len();
const MAGIC: &str = "# shockmix snapshot v1";

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMeta {
    pub case: String,
    pub time: f64,
    pub step: usize,
    pub order: usize,
    pub nx: usize,
    pub ny: usize,
    /// `[x_min, x_max, y_min, y_max]`
    pub bounds: [f64; 4],
    pub gamma: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl SnapshotMeta {
    pub fn nodes_per_element(&self) -> usize {
        (self.order + 1) * (self.order + 1)
    }

    pub fn num_nodes(&self) -> usize {
        self.nx * self.ny * self.nodes_per_element()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRecord {
    pub meta: SnapshotMeta,
    pub rows: Vec<[f64; NCOLS]>,
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

impl SnapshotRecord {
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut out = String::with_capacity(64 + self.rows.len() * NCOLS * 24);
        out.push_str(MAGIC);
        out.push('\n');
        let _ = writeln!(out, "# case = {}", m.case);
        let _ = writeln!(out, "# time = {}", num(m.time));
        let _ = writeln!(out, "# step = {}", m.step);
        let _ = writeln!(out, "# order = {}", m.order);
        let _ = writeln!(out, "# nx = {}", m.nx);
        let _ = writeln!(out, "# ny = {}", m.ny);
        let b = m.bounds.map(num);
        let _ = writeln!(out, "# bounds = {},{},{},{}", b[0], b[1], b[2], b[3]);
        let _ = writeln!(out, "# gamma = {}", num(m.gamma));
        let _ = writeln!(out, "# seed = {}", m.seed);
        let _ = writeln!(out, "# config_sha256 = {}", m.config_hash);
        out.push_str(&COLUMNS.join(","));
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Snapshot("missing snapshot header".into()));
        }
        let mut kv = std::collections::HashMap::new();
        let mut header = None;
        for line in lines.by_ref() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once(" = ")
                    .ok_or_else(|| Error::Snapshot(format!("bad header line '{line}'")))?;
                kv.insert(k.to_string(), v.to_string());
            } else {
                header = Some(line);
                break;
            }
        }
        let header = header.ok_or_else(|| Error::Snapshot("missing column line".into()))?;
        if header.split(',').ne(COLUMNS.iter().copied()) {
            return Err(Error::Snapshot(format!("unexpected columns '{header}'")));
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Snapshot(format!("header lacks '{k}'")));
        let float = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Snapshot(format!("bad value for '{k}'")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Snapshot(format!("bad value for '{k}'")))
        };
        let bounds: Vec<f64> = get("bounds")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Snapshot("bad bounds".into())))
            .collect::<Result<_>>()?;
        if bounds.len() != 4 {
            return Err(Error::Snapshot("bounds need four values".into()));
        }
        let meta = SnapshotMeta {
            case: get("case")?.clone(),
            time: float("time")?,
            step: int("step")?,
            order: int("order")?,
            nx: int("nx")?,
            ny: int("ny")?,
            bounds: [bounds[0], bounds[1], bounds[2], bounds[3]],
            gamma: float("gamma")?,
            seed: get("seed")?.parse().map_err(|_| Error::Snapshot("bad seed".into()))?,
            config_hash: get("config_sha256")?.clone(),
        };
        let mut rows = Vec::with_capacity(meta.num_nodes());
        for (i, line) in lines.enumerate() {
            let mut row = [0.0; NCOLS];
            let mut count = 0;
            for (j, tok) in line.split(',').enumerate() {
                if j >= NCOLS {
                    return Err(Error::Snapshot(format!("row {i} has too many columns")));
                }
                row[j] = tok
                    .parse()
                    .map_err(|_| Error::Snapshot(format!("row {i} column {j}: bad number '{tok}'")))?;
                count += 1;
            }
            if count != NCOLS {
                return Err(Error::Snapshot(format!("row {i} has {count} columns")));
            }
            rows.push(row);
        }
        if rows.len() != meta.num_nodes() {
            return Err(Error::Snapshot(format!(
                "{} rows for {} nodes",
                rows.len(),
                meta.num_nodes()
            )));
        }
        Ok(SnapshotRecord { meta, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn field(&self) -> Result<ConservativeField> {
        let data: Vec<State> = self.rows.iter().map(|r| [r[2], r[3], r[4], r[5]]).collect();
        ConservativeField::from_vec(self.meta.nodes_per_element(), data)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = COLUMNS.iter().position(|c| *c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Raw (unnormalized) features from the stored state and gradient columns.
    pub fn raw_features(&self, choice: FeatureChoice) -> Result<Vec<f64>> {
        let gas = GasModel { gamma: self.meta.gamma, ..GasModel::default() };
        let mut out = Vec::with_capacity(self.rows.len() * choice.dim());
        for r in &self.rows {
            let w = primitive_from_conservative(&[r[2], r[3], r[4], r[5]], &gas)?;
            let f = feature_row(&w, [r[9], r[10]], r[11], choice, &gas);
            out.extend_from_slice(&f[..choice.dim()]);
        }
        Ok(out)
    }

    pub fn features(&self, choice: FeatureChoice) -> Result<FeatureMatrix> {
        FeatureMatrix::normalized(choice.dim(), self.raw_features(choice)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SnapshotRecord {
        let meta = SnapshotMeta {
            case: "sedov".into(),
            time: 0.1 + 0.2,
            step: 7,
            order: 1,
            nx: 1,
            ny: 1,
            bounds: [-1.0, 1.0, -1.0, 1.0],
            gamma: 1.4,
            seed: 42,
            config_hash: "ab".repeat(32),
        };
        let rows = (0..4)
            .map(|k| {
                let f = k as f64;
                [f / 3.0, -f, 1.0 + f, 0.1, -0.0, 2.5 + 1e-17 * f, 1.0, 0.0, 1e-300, f64::MIN_POSITIVE, 3.0, -7.25]
            })
            .collect();
        SnapshotRecord { meta, rows }
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let rec = sample();
        let text = rec.to_text();
        let back = SnapshotRecord::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.meta, rec.meta);
        for (a, b) in back.rows.iter().zip(&rec.rows) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn malformed_input_is_rejected() {
        let text = sample().to_text();
        assert!(SnapshotRecord::parse("garbage").is_err());
        let truncated: String = text.lines().take(14).map(|l| format!("{l}\n")).collect();
        assert!(matches!(SnapshotRecord::parse(&truncated), Err(Error::Snapshot(_))));
        let bad = text.replace("-7.25e0", "x");
        assert!(SnapshotRecord::parse(&bad).is_err());
    }

    #[test]
    fn features_from_columns() {
        let rec = sample();
        let raw = rec.raw_features(FeatureChoice::GradpDivv).unwrap();
        assert_eq!(raw.len(), 8);
        let gp2 = f64::MIN_POSITIVE.powi(2) + 9.0;
        assert!((raw[0] - gp2).abs() < 1e-12);
        assert!((raw[1] - 7.25 * 7.25).abs() < 1e-12);
    }
}
