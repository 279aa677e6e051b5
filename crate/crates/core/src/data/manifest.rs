//! JSON-lines dataset manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::HazeParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    SynClear,
    SynHazy,
    RealClear,
    RealHazy,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::SynClear, Domain::SynHazy, Domain::RealClear, Domain::RealHazy];

    pub fn is_hazy(self) -> bool {
        matches!(self, Domain::SynHazy | Domain::RealHazy)
    }

    pub fn is_real(self) -> bool {
        matches!(self, Domain::RealClear | Domain::RealHazy)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::SynClear => "syn_clear",
            Domain::SynHazy => "syn_hazy",
            Domain::RealClear => "real_clear",
            Domain::RealHazy => "real_hazy",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Probe,
    Gallery,
}

/// One manifest line. `beta` and `airlight` are null for clear images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: u64,
    pub path: String,
    pub domain: Domain,
    pub split: Split,
    pub beta: Option<f64>,
    pub airlight: Option<[f64; 3]>,
}

impl Record {
    pub fn haze(&self) -> Option<HazeParams> {
        match (self.beta, self.airlight) {
            (Some(beta), Some(airlight)) => Some(HazeParams { beta, airlight }),
            _ => None,
        }
    }

    /// `(id, view)` parsed from the `<domain>/<id>/<view>.png` layout.
    pub fn view(&self) -> Option<u32> {
        Path::new(&self.path).file_stem()?.to_str()?.parse().ok()
    }

    /// Path of the clear ground truth for a synthetic hazy record.
    pub fn pair_path(&self) -> Option<String> {
        if self.domain != Domain::SynHazy {
            return None;
        }
        Some(format!("syn_clear/{}/{}.png", self.id, self.view()?))
    }

    /// Path of the stored depth map for a synthetic hazy record.
    pub fn depth_path(&self) -> Option<String> {
        if self.domain != Domain::SynHazy {
            return None;
        }
        Some(format!("depth/{}/{}.png", self.id, self.view()?))
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let p = Path::new(&self.path);
        if self.path.is_empty() || p.is_absolute() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(format!("path `{}` must be relative without `..`", self.path));
        }
        if self.view().is_none() {
            return Err(format!("path `{}` is not of the form <domain>/<id>/<view>.png", self.path));
        }
        match (self.domain.is_hazy(), self.beta, self.airlight) {
            (true, Some(beta), Some(airlight)) => {
                HazeParams { beta, airlight }.validate().map_err(|e| e.to_string())?;
            }
            (true, _, _) => return Err(format!("{} record needs beta and airlight", self.domain)),
            (false, None, None) => {}
            (false, _, _) => return Err(format!("{} record must not carry haze parameters", self.domain)),
        }
        Ok(())
    }
}

/// Parses and validates one manifest line (`line_no` is 1-based, for errors).
pub fn parse_record(line: &str, line_no: usize) -> Result<Record> {
    let rec: Record = serde_json::from_str(line).map_err(|e| Error::Manifest { line: line_no, reason: e.to_string() })?;
    rec.validate().map_err(|reason| Error::Manifest { line: line_no, reason })?;
    Ok(rec)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_record(l, i + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn filter(&self, mut pred: impl FnMut(&Record) -> bool) -> Vec<&Record> {
        self.records.iter().filter(|r| pred(r)).collect()
    }

    /// Records grouped by identity, in ascending id order.
    pub fn by_identity(&self) -> BTreeMap<u64, Vec<&Record>> {
        let mut m: BTreeMap<u64, Vec<&Record>> = BTreeMap::new();
        for r in &self.records {
            m.entry(r.id).or_default().push(r);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_hazy_line() {
        let line = r#"{"id":3,"path":"syn_hazy/3/1.png","domain":"syn_hazy","split":"train","beta":0.9,"airlight":[0.7,0.7,0.7]}"#;
        let r = parse_record(line, 1).unwrap();
        assert_eq!(r.pair_path().unwrap(), "syn_clear/3/1.png");
        assert_eq!(serde_json::to_string(&r).unwrap(), line);
    }

    #[test]
    fn rejects_bad_lines() {
        let cases = [
            r#"{"id":3,"path":"syn_hazy/3/1.png","domain":"syn_hazy","split":"train","beta":null,"airlight":null}"#,
            r#"{"id":3,"path":"syn_clear/3/1.png","domain":"syn_clear","split":"train","beta":1.0,"airlight":null}"#,
            r#"{"id":3,"path":"../x/1.png","domain":"real_clear","split":"train","beta":null,"airlight":null}"#,
            r#"{"id":3,"path":"a/3/1.png","domain":"real_clear","split":"train","beta":null,"airlight":null,"x":1}"#,
            r#"{"id":3,"path":"a/3/1.png","domain":"fog","split":"train","beta":null,"airlight":null}"#,
        ];
        for (i, c) in cases.iter().enumerate() {
            let err = parse_record(c, 7).unwrap_err();
            assert!(matches!(err, Error::Manifest { line: 7, .. }), "case {i}: {err}");
        }
    }
}
