//! Tab-separated dataset manifest.
//!
//! ```text
//! # dataset=modelnet40
//! # dim=512
//! # view_size=224x224x3
//! # shape_id  label_name  label  subcategory  split  row_start  row_count
//! airplane_0001  airplane  0  -  train  0  20
//! ```
//!
//! Fields are separated by single tabs. Header lines start with `#`;
//! `key=value` headers carry metadata and any other comment is ignored.
//! `subcategory` is `-` when absent.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};

pub const COLUMNS: &str = "shape_id\tlabel_name\tlabel\tsubcategory\tsplit\trow_start\trow_count";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub shape_id: String,
    pub label_name: String,
    pub label: usize,
    pub subcategory: Option<usize>,
    pub split: Split,
    pub row_start: usize,
    pub row_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub dataset: String,
    pub dim: usize,
    /// Rendered view size `(H, W, C)`, informational only.
    pub view_size: Option<(usize, usize, usize)>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// True when every entry carries a subcategory.
    pub fn has_subcategories(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.subcategory.is_some())
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    /// Checks row ranges against a feature file of `num_rows` x `dim`.
    pub fn validate(&self, num_rows: usize, dim: usize, origin: &Path) -> Result<()> {
        if dim != self.dim {
            return Err(Error::format(
                origin,
                format!("manifest dim {} but feature file dim {dim}", self.dim),
            ));
        }
        let mut ranges: Vec<(usize, usize, &str)> = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.row_count == 0 {
                return Err(Error::format(
                    origin,
                    format!("shape {} has no rows", e.shape_id),
                ));
            }
            let end = e.row_start + e.row_count;
            if end > num_rows {
                return Err(Error::format(
                    origin,
                    format!(
                        "shape {} rows [{}, {end}) out of bounds for {num_rows} rows",
                        e.shape_id, e.row_start
                    ),
                ));
            }
            ranges.push((e.row_start, end, &e.shape_id));
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::format(
                    origin,
                    format!("row ranges of shapes {} and {} overlap", w[0].2, w[1].2),
                ));
            }
        }
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.shape_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::format(
                origin,
                format!("duplicate shape id {}", w[0]),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# dataset={}", self.dataset).unwrap();
        writeln!(s, "# dim={}", self.dim).unwrap();
        if let Some((h, w, c)) = self.view_size {
            writeln!(s, "# view_size={h}x{w}x{c}").unwrap();
        }
        writeln!(s, "# {COLUMNS}").unwrap();
        for e in &self.entries {
            let sub = e.subcategory.map_or("-".to_string(), |v| v.to_string());
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.shape_id, e.label_name, e.label, sub, e.split, e.row_start, e.row_count
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut dataset = None;
        let mut dim = None;
        let mut view_size = None;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            let err = |m: String| Error::format(origin, format!("line {lineno}: {m}"));
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let Some((key, value)) = header.trim().split_once('=') else {
                    continue;
                };
                let value = value.trim();
                match key.trim() {
                    "dataset" => dataset = Some(value.to_string()),
                    "dim" => {
                        dim = Some(
                            value
                                .parse()
                                .map_err(|_| err(format!("bad dim {value:?}")))?,
                        )
                    }
                    "view_size" => {
                        let parts: Vec<usize> = value
                            .split('x')
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| err(format!("bad view_size {value:?}")))?;
                        let [h, w, c] = parts[..] else {
                            return Err(err(format!("bad view_size {value:?}")));
                        };
                        view_size = Some((h, w, c));
                    }
                    other => warn!(
                        "{}: line {lineno}: ignoring header {other}",
                        origin.display()
                    ),
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(err(format!(
                    "expected 7 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let num = |i: usize, what: &str| -> Result<usize> {
                fields[i]
                    .parse()
                    .map_err(|_| err(format!("bad {what} {:?}", fields[i])))
            };
            let subcategory = match fields[3] {
                "-" | "" => None,
                _ => Some(num(3, "subcategory")?),
            };
            entries.push(ManifestEntry {
                shape_id: fields[0].to_string(),
                label_name: fields[1].to_string(),
                label: num(2, "label")?,
                subcategory,
                split: fields[4].parse().map_err(|e: Error| err(e.to_string()))?,
                row_start: num(5, "row_start")?,
                row_count: num(6, "row_count")?,
            });
        }
        Ok(Self {
            dataset: dataset.unwrap_or_default(),
            dim: dim.ok_or_else(|| Error::format(origin, "missing '# dim=' header"))?,
            view_size,
            entries,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
