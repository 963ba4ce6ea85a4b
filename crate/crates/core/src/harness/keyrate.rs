//! Key rate from a counts file, with no simulation involved.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::finite_key::{compute_key_rate, KeyRateReport, SecurityParams, SiftedCounts};
use crate::optics::IntensitySetting;

/// Reference results a counts file may carry for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedResults {
    pub s_z1_lower: f64,
    pub phi_z_upper: f64,
    pub key_length: f64,
    pub skr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub intensities: IntensitySetting,
    pub counts: SiftedCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub security: Option<SecurityParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<ExpectedResults>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KeyRateOverrides {
    pub eps_sec: Option<f64>,
    pub eps_cor: Option<f64>,
    pub f_ec: Option<f64>,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Number,
    Count,
}

const COUNT_FIELDS: [&str; 8] = ["n_z_mu", "n_z_nu", "n_x_mu", "n_x_nu", "m_z_mu", "m_z_nu", "m_x_mu", "m_x_nu"];

fn check_section(
    root: &serde_json::Map<String, Value>,
    name: &str,
    required: bool,
    fields: &[(&str, Kind, bool)],
    problems: &mut Vec<String>,
) {
    let Some(section) = root.get(name) else {
        if required {
            problems.push(format!("missing section `{name}`"));
        }
        return;
    };
    let Some(table) = section.as_object() else {
        problems.push(format!("`{name}` must be a table"));
        return;
    };
    for (field, kind, needed) in fields {
        match table.get(*field) {
            None if *needed => problems.push(format!("missing field `{name}.{field}`")),
            None => {}
            Some(v) => {
                let ok = match kind {
                    Kind::Number => v.as_f64().is_some_and(f64::is_finite),
                    Kind::Count => v.as_u64().is_some(),
                };
                if !ok {
                    let want = match kind {
                        Kind::Number => "a finite number",
                        Kind::Count => "a non-negative integer",
                    };
                    problems.push(format!("`{name}.{field}` must be {want}, got {v}"));
                }
            }
        }
    }
    for key in table.keys() {
        if !fields.iter().any(|(f, _, _)| f == key) {
            problems.push(format!("unknown field `{name}.{key}`"));
        }
    }
}

/// Every structural problem of a counts document.
fn schema_problems(doc: &Value) -> Vec<String> {
    let mut problems = Vec::new();
    let Some(root) = doc.as_object() else {
        return vec!["document must be a table".into()];
    };
    for key in root.keys() {
        if !["label", "intensities", "counts", "security", "expected"].contains(&key.as_str()) {
            problems.push(format!("unknown section `{key}`"));
        }
    }
    if root.get("label").is_some_and(|v| !v.is_string()) {
        problems.push("`label` must be a string".into());
    }
    use Kind::*;
    check_section(
        root,
        "intensities",
        true,
        &[("mu", Number, true), ("nu", Number, true), ("p_mu", Number, true), ("p_z", Number, true)],
        &mut problems,
    );
    let mut counts: Vec<(&str, Kind, bool)> = COUNT_FIELDS.iter().map(|f| (*f, Count, true)).collect();
    counts.push(("t", Number, true));
    check_section(root, "counts", true, &counts, &mut problems);
    check_section(
        root,
        "security",
        false,
        &[("eps_sec", Number, false), ("eps_cor", Number, false), ("f_ec", Number, false)],
        &mut problems,
    );
    check_section(
        root,
        "expected",
        false,
        &[("s_z1_lower", Number, true), ("phi_z_upper", Number, true), ("key_length", Number, true), ("skr", Number, true)],
        &mut problems,
    );
    problems
}

fn parse_document(text: &str, path: &Path) -> Result<Value, HarnessError> {
    let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
    let origin = path.display().to_string();
    if is_json {
        serde_json::from_str(text).map_err(|e| HarnessError::Config { path: origin, message: e.to_string() })
    } else {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Config { path: origin, message: e.to_string() })?;
        Ok(serde_json::to_value(table).expect("toml values convert"))
    }
}

/// Reads a TOML (or `.json`) counts file, listing every schema violation.
pub fn load_counts_file(path: &Path) -> Result<CountsFile, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let doc = parse_document(&text, path)?;
    let origin = path.display().to_string();
    let mut problems = schema_problems(&doc);
    if !problems.is_empty() {
        return Err(HarnessError::Schema { path: origin, problems });
    }
    let file: CountsFile =
        serde_json::from_value(doc).map_err(|e| HarnessError::Config { path: origin.clone(), message: e.to_string() })?;
    if let Err(e) = file.intensities.validate() {
        problems.push(format!("intensities: {e}"));
    }
    if let Err(e) = file.counts.validate() {
        problems.push(format!("counts: {e}"));
    }
    if let Some(Err(e)) = file.security.map(|s| s.validate()) {
        problems.push(format!("security: {e}"));
    }
    if problems.is_empty() {
        Ok(file)
    } else {
        Err(HarnessError::Schema { path: origin, problems })
    }
}

pub fn cmd_keyrate(path: &Path, overrides: KeyRateOverrides) -> Result<KeyRateReport, HarnessError> {
    let file = load_counts_file(path)?;
    let mut security = file.security.unwrap_or_default();
    if let Some(v) = overrides.eps_sec {
        security.eps_sec = v;
    }
    if let Some(v) = overrides.eps_cor {
        security.eps_cor = v;
    }
    if let Some(v) = overrides.f_ec {
        security.f_ec = v;
    }
    Ok(compute_key_rate(&file.counts, &file.intensities, &security)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    const ZERO: &str = r#"
[intensities]
mu = 0.5
nu = 0.1
p_mu = 0.8
p_z = 0.9

[counts]
n_z_mu = 0
n_z_nu = 0
n_x_mu = 0
n_x_nu = 0
m_z_mu = 0
m_z_nu = 0
m_x_mu = 0
m_x_nu = 0
t = 1.0
"#;

    #[test]
    fn zero_counts_give_an_empty_key() {
        let dir = tempfile::tempdir().unwrap();
        let report = cmd_keyrate(&write(&dir, "zero.toml", ZERO), KeyRateOverrides::default()).unwrap();
        assert_eq!(report.key_length, 0);
        assert_eq!(report.skr, 0.0);
    }

    #[test]
    fn schema_violations_are_listed_exhaustively() {
        let dir = tempfile::tempdir().unwrap();
        let text = ZERO
            .replace("n_x_mu = 0\n", "")
            .replace("m_z_nu = 0", "m_z_nu = -3")
            .replace("t = 1.0", "t = \"long\"\nextra = 1")
            .replace("p_z = 0.9", "");
        let err = load_counts_file(&write(&dir, "bad.toml", &(text + "\n[other]\nx = 1\n"))).unwrap_err();
        let HarnessError::Schema { problems, .. } = err else { panic!("{err}") };
        let joined = problems.join("\n");
        for needle in ["intensities.p_z", "counts.n_x_mu", "counts.m_z_nu", "counts.t", "counts.extra", "`other`"] {
            assert!(joined.contains(needle), "{needle} missing from\n{joined}");
        }
        assert_eq!(problems.len(), 6);
    }

    #[test]
    fn semantic_problems_are_collected_too() {
        let dir = tempfile::tempdir().unwrap();
        let text = ZERO.replace("m_x_nu = 0", "m_x_nu = 5").replace("nu = 0.1", "nu = 0.7");
        let HarnessError::Schema { problems, .. } = load_counts_file(&write(&dir, "b.toml", &text)).unwrap_err() else {
            panic!()
        };
        assert_eq!(problems.len(), 2, "{problems:?}");
    }

    #[test]
    fn json_counts_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{"intensities": {"mu": 0.5, "nu": 0.1, "p_mu": 0.8, "p_z": 0.9},
            "counts": {"n_z_mu": 0, "n_z_nu": 0, "n_x_mu": 0, "n_x_nu": 0,
                       "m_z_mu": 0, "m_z_nu": 0, "m_x_mu": 0, "m_x_nu": 0, "t": 2.0}}"#;
        let overrides = KeyRateOverrides { f_ec: Some(1.05), ..Default::default() };
        let report = cmd_keyrate(&write(&dir, "c.json", json), overrides).unwrap();
        assert_eq!(report.security.f_ec, 1.05);
    }
}
