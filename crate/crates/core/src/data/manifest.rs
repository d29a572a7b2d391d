//! Tab-separated patch manifests and per-case split assignment.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Label, Magnification};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
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
            _ => Err(Error::invalid(format!("unknown split {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// Patch file, relative to the manifest directory.
    pub path: PathBuf,
    pub label: Label,
    /// Base-frame offset `(i, j)`.
    pub offset: (usize, usize),
    pub scale: Magnification,
    pub case_id: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# path\tlabel\ti\tj\tscale\tcase_id\tsplit\n");
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.path.display(),
                r.label,
                r.offset.0,
                r.offset.1,
                r.scale,
                r.case_id,
                r.split
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, why: String| Error::format("manifest", format!("line {line}: {why}"));
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(bad(n + 1, format!("expected 7 fields, found {}", fields.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(n + 1, e.to_string()));
            records.push(ManifestRecord {
                path: PathBuf::from(fields[0]),
                label: fields[1].parse().map_err(|e: Error| bad(n + 1, e.to_string()))?,
                offset: (num(fields[2])?, num(fields[3])?),
                scale: fields[4].parse().map_err(|e: Error| bad(n + 1, e.to_string()))?,
                case_id: fields[5].to_string(),
                split: fields[6].parse().map_err(|e: Error| bad(n + 1, e.to_string()))?,
            });
        }
        Ok(Manifest { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format("manifest", e.to_string()))?;
        Self::parse(&text)
    }

    /// Fails when a case appears under more than one split.
    pub fn check_hygiene(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            match seen.insert(&r.case_id, r.split) {
                Some(prev) if prev != r.split => {
                    return Err(Error::invalid(format!(
                        "case {} appears in both {prev} and {}",
                        r.case_id, r.split
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn select(&self, split: Split, scale: Magnification) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split && r.scale == scale)
    }
}

/// Shuffles the distinct cases and hands out contiguous runs sized by
/// `ratios` (train, val, test), rounding the train and val counts.
pub fn assign_splits<R: Rng + ?Sized>(
    case_ids: &[String],
    ratios: (f64, f64, f64),
    rng: &mut R,
) -> Result<BTreeMap<String, Split>> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(r.is_finite() && *r >= 0.0)) || a + b + c <= 0.0 {
        return Err(Error::invalid(format!("split ratios {ratios:?}")));
    }
    let mut cases: Vec<String> = case_ids.to_vec();
    cases.sort();
    cases.dedup();
    cases.shuffle(rng);
    let total = a + b + c;
    let n = cases.len();
    let n_train = ((n as f64 * a / total).round() as usize).min(n);
    let n_val = ((n as f64 * b / total).round() as usize).min(n - n_train);
    Ok(cases
        .into_iter()
        .enumerate()
        .map(|(i, case)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (case, split)
        })
        .collect())
}
