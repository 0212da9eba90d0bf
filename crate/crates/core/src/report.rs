//! Experiment reports: JSON document plus a per-row CSV mirror.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::Result;
use crate::format::{fmt_f64, write_csv_row};
use crate::metrics::RateFit;

pub type Row = Map<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    pub requirement: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub rng: String,
    pub seed_derivation: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            version: crate::VERSION.to_string(),
            rng: crate::rng::RNG_NAME.to_string(),
            seed_derivation: "draw i of purpose p uses stream (seed, p, i); sub-seeds via child_seed".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub id: String,
    pub config: Value,
    pub rows: Vec<Row>,
    pub aggregates: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fits: Vec<(String, RateFit)>,
    pub criteria: Vec<Criterion>,
    /// `None` for exploratory runs.
    pub pass: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub provenance: Provenance,
    /// Kept out of the serialized report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl RunReport {
    pub fn new(id: &str, config: &impl Serialize) -> Result<Self> {
        Ok(RunReport {
            id: id.to_string(),
            config: serde_json::to_value(config)?,
            rows: Vec::new(),
            aggregates: Map::new(),
            fits: Vec::new(),
            criteria: Vec::new(),
            pass: None,
            notes: Vec::new(),
            provenance: Provenance::default(),
            wall_clock: Duration::ZERO,
        })
    }

    pub fn push_row(&mut self, row: Row) {
        self.rows.push(row);
    }

    pub fn aggregate(&mut self, key: &str, value: impl Into<Value>) {
        self.aggregates.insert(key.to_string(), value.into());
    }

    pub fn check(&mut self, name: &str, value: f64, requirement: String, pass: bool) -> bool {
        self.criteria.push(Criterion { name: name.to_string(), value, requirement, pass });
        pass
    }

    /// Sets `pass` to the conjunction of all recorded criteria.
    pub fn conclude(&mut self) {
        self.pass = Some(self.criteria.iter().all(|c| c.pass));
    }

    pub fn criterion(&self, name: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn rows_csv(&self) -> Result<Vec<u8>> {
        let mut columns: Vec<&String> = Vec::new();
        for row in &self.rows {
            for k in row.keys() {
                if !columns.contains(&k) {
                    columns.push(k);
                }
            }
        }
        let mut out = Vec::new();
        let header: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        write_csv_row(&mut out, &header)?;
        for row in &self.rows {
            let fields: Vec<String> = columns.iter().map(|c| cell(row.get(*c))).collect();
            write_csv_row(&mut out, &fields)?;
        }
        Ok(out)
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("rows.csv"), self.rows_csv()?)?;
        Ok(())
    }
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::Number(n)) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.to_string(),
            (None, Some(u)) => u.to_string(),
            _ => fmt_f64(n.as_f64().unwrap_or(f64::NAN)),
        },
        Some(Value::String(s)) => s.clone(),
        Some(Value::Bool(b)) => b.to_string(),
        Some(other) => {
            let text = other.to_string();
            format!("\"{}\"", text.replace('"', "\"\""))
        }
    }
}

/// Builds a row from `(key, value)` pairs, keeping their order.
#[macro_export]
macro_rules! row {
    ($($k:expr => $v:expr),* $(,)?) => {{
        let mut r = $crate::report::Row::new();
        $( r.insert($k.to_string(), $crate::__serde_json::json!($v)); )*
        r
    }};
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_mirror_and_json() {
        let mut rep = RunReport::new("demo", &serde_json::json!({"m": 3})).unwrap();
        rep.push_row(row!("seed" => 1, "value" => 0.5));
        rep.push_row(row!("seed" => 2, "value" => 0.25, "tag" => "b"));
        rep.wall_clock = Duration::from_secs(3);
        rep.check("ok", 1.0, "<= 2".into(), true);
        rep.conclude();
        let csv = String::from_utf8(rep.rows_csv().unwrap()).unwrap();
        assert_eq!(csv, "seed,value,tag\n1,5.0000000000000000e-1,\n2,2.5000000000000000e-1,b\n");
        let json = String::from_utf8(rep.to_json().unwrap()).unwrap();
        assert!(!json.contains("wall_clock"));
        let back: RunReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows, rep.rows);
        assert_eq!(back.pass, Some(true));
    }
}
