//! Spec loading, comparison verdicts and run persistence.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::ModelSpec;
use crate::particles::{Event, Trajectory};
use crate::real::Real;
use crate::stats::{welch_z, Estimate};

pub const Z_THRESHOLD: f64 = 3.0;

/// Reads and validates a TOML model file. Schema violations come back as a
/// single [`Error::Validation`] listing every issue.
pub fn load_spec<T: Real>(path: impl AsRef<Path>) -> Result<ModelSpec<T>> {
    let text = std::fs::read_to_string(path)?;
    ModelSpec::from_toml(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodEstimate {
    pub method: String,
    pub value: f64,
    pub se: f64,
    pub n: u64,
}

impl MethodEstimate {
    pub fn new(method: impl Into<String>, e: Estimate) -> Self {
        MethodEstimate { method: method.into(), value: e.value, se: e.se, n: e.n }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { value: self.value, se: self.se, n: self.n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reference {
    pub value: f64,
    /// Where the value comes from, e.g. `"closed form"`.
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZScore {
    pub a: String,
    pub b: String,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonVerdict {
    pub quantity: String,
    pub estimates: Vec<MethodEstimate>,
    pub reference: Option<Reference>,
    pub z_scores: Vec<ZScore>,
    pub pass: bool,
}

/// Pairwise Welch z-scores, plus one per estimate against the reference.
/// Passes iff every `|z| ≤ 3`.
pub fn compare(
    quantity: impl Into<String>,
    estimates: Vec<MethodEstimate>,
    reference: Option<Reference>,
) -> Result<ComparisonVerdict> {
    for e in &estimates {
        if !(e.se >= 0.0) || !e.value.is_finite() {
            return Err(Error::Domain(format!("estimate {} has value {} and se {}", e.method, e.value, e.se)));
        }
    }
    let mut z_scores = Vec::new();
    for (i, a) in estimates.iter().enumerate() {
        for b in &estimates[i + 1..] {
            z_scores.push(ZScore { a: a.method.clone(), b: b.method.clone(), z: welch_z(&a.estimate(), &b.estimate()) });
        }
    }
    if let Some(r) = &reference {
        for a in &estimates {
            z_scores.push(ZScore { a: a.method.clone(), b: r.tag.clone(), z: welch_z(&a.estimate(), &Estimate::exact(r.value)) });
        }
    }
    let pass = z_scores.iter().all(|z| z.z.abs() <= Z_THRESHOLD);
    Ok(ComparisonVerdict { quantity: quantity.into(), estimates, reference, z_scores, pass })
}

/// 17 significant digits, round-trip exact.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Header plus rows of already formatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Internal(format!("row has {} cells, header has {}", row.len(), self.header.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// `method,value,se,n,runtime_ms` rows.
pub fn estimates_table(rows: &[(MethodEstimate, f64)]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["method", "value", "se", "n", "runtime_ms"]);
    for (e, ms) in rows {
        t.push(vec![e.method.clone(), format_float(e.value), format_float(e.se), e.n.to_string(), format_float(*ms)])?;
    }
    Ok(t)
}

pub fn verdict_table(verdicts: &[ComparisonVerdict]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["quantity", "method", "value", "se", "n", "reference", "max_abs_z", "pass"]);
    for v in verdicts {
        let max_z = v.z_scores.iter().map(|z| z.z.abs()).fold(0.0, f64::max);
        let reference = v.reference.as_ref().map(|r| format_float(r.value)).unwrap_or_default();
        for e in &v.estimates {
            t.push(vec![
                v.quantity.clone(),
                e.method.clone(),
                format_float(e.value),
                format_float(e.se),
                e.n.to_string(),
                reference.clone(),
                format_float(max_z),
                v.pass.to_string(),
            ])?;
        }
    }
    Ok(t)
}

/// One JSON object per line.
pub fn write_jsonl<W: Write, S: Serialize>(mut out: W, items: impl IntoIterator<Item = S>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// `path,time,count,mass,first_moment` per snapshot, where `first_moment`
/// is `⟨x, X_t⟩`.
pub fn snapshot_table<T: Real>(trajectories: &[Trajectory<T>]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["path", "time", "count", "mass", "first_moment"]);
    for (p, traj) in trajectories.iter().enumerate() {
        for (time, state) in traj.snapshot_times.iter().zip(&traj.states) {
            t.push(vec![
                p.to_string(),
                format_float(time.f64()),
                state.count().to_string(),
                format_float(state.mass().f64()),
                format_float(state.observe(|x| x).f64()),
            ])?;
        }
    }
    Ok(t)
}

/// `path,time,index,position` for every particle at every snapshot.
pub fn positions_table<T: Real>(trajectories: &[Trajectory<T>]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["path", "time", "index", "position"]);
    for (p, traj) in trajectories.iter().enumerate() {
        for (time, state) in traj.snapshot_times.iter().zip(&traj.states) {
            for (i, x) in state.positions.iter().enumerate() {
                t.push(vec![p.to_string(), format_float(time.f64()), i.to_string(), format_float(x.f64())])?;
            }
        }
    }
    Ok(t)
}

#[derive(Serialize)]
struct PathEvent<'a, T: Real> {
    path: usize,
    #[serde(flatten)]
    event: &'a Event<T>,
}

/// Event log of every trajectory as JSON lines, each tagged with its path.
pub fn write_events<W: Write, T: Real>(out: W, trajectories: &[Trajectory<T>]) -> Result<()> {
    write_jsonl(
        out,
        trajectories.iter().enumerate().flat_map(|(path, tr)| tr.events.iter().map(move |event| PathEvent { path, event })),
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec_hash: String,
    pub argv: Vec<String>,
    pub master_seed: u64,
    /// Stream label to stream id.
    pub streams: BTreeMap<String, u64>,
    pub code_version: String,
    pub wall_clock_ms: f64,
    pub outside_uniqueness_regime: bool,
    /// File name (relative to the manifest) to sha256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(spec_hash: impl Into<String>, argv: Vec<String>, master_seed: u64) -> Self {
        RunManifest {
            spec_hash: spec_hash.into(),
            argv,
            master_seed,
            streams: BTreeMap::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_ms: 0.0,
            outside_uniqueness_regime: false,
            outputs: BTreeMap::new(),
        }
    }

    /// Digest of everything that determines the outputs.
    pub fn input_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec_hash.as_bytes());
        for a in &self.argv {
            h.update((a.len() as u64).to_le_bytes());
            h.update(a.as_bytes());
        }
        h.update(self.master_seed.to_le_bytes());
        h.update(self.code_version.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.to_string(), file_digest(dir.join(name))?);
        Ok(())
    }

    /// Outputs whose current digest differs from the recorded one, or that
    /// are missing.
    pub fn stale_outputs(&self, dir: &Path) -> Vec<PathBuf> {
        self.outputs
            .iter()
            .filter(|(name, digest)| file_digest(dir.join(name)).ok().as_ref() != Some(digest))
            .map(|(name, _)| dir.join(name))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(method: &str, value: f64, se: f64) -> MethodEstimate {
        MethodEstimate { method: method.into(), value, se, n: 100 }
    }

    #[test]
    fn identical_exact_values_pass() {
        let v = compare("q", vec![est("a", 1.5, 0.0), est("b", 1.5, 0.0)], None).unwrap();
        assert!(v.pass);
        assert_eq!(v.z_scores[0].z, 0.0);
    }

    #[test]
    fn separated_estimates_fail() {
        let v = compare("q", vec![est("a", 0.0, 1.0), est("b", 10.0, 1.0)], None).unwrap();
        assert!(!v.pass);
        assert!((v.z_scores[0].z.abs() - 10.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_estimate_against_reference() {
        let r = Some(Reference { value: 2.0, tag: "exact".into() });
        assert!(compare("q", vec![est("a", 2.0, 0.1)], r.clone()).unwrap().pass);
        assert!(!compare("q", vec![est("a", 2.5, 0.1)], r).unwrap().pass);
        assert!(compare("q", vec![est("a", f64::NAN, 0.1)], None).is_err());
    }

    #[test]
    fn csv_layout_is_fixed() {
        let t = estimates_table(&[(est("m", 0.1, 0.0), 12.0)]).unwrap();
        let text = String::from_utf8(t.to_bytes().unwrap()).unwrap();
        assert_eq!(text, "method,value,se,n,runtime_ms\nm,1.0000000000000001e-1,0.0000000000000000e0,100,1.2000000000000000e1\n");
        assert_eq!(format_float(0.1).parse::<f64>().unwrap(), 0.1);
        let mut bad = CsvTable::new(&["a"]);
        assert!(bad.push(vec![]).is_err());
    }

    #[test]
    fn load_spec_reports_every_issue() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.toml");
        std::fs::write(&good, "horizon = 1.0\nc = { kind = \"constant\", value = 1.0 }\nsigma = { kind = \"constant\", value = 0.5 }\nlevy = { l = 2.0 }\n").unwrap();
        let spec: ModelSpec<f64> = load_spec(&good).unwrap();
        assert_eq!(spec.horizon(), 1.0);
        let bad = dir.path().join("bad.toml");
        std::fs::write(
            &bad,
            "horizon = 1.0\nc = { kind = \"constant\", value = 1.0 }\nsigma = { kind = \"piecewise-table\", knots = [0.0], values = [-1.0, 1.0], interp = \"step\" }\nlevy = { l = 0.5 }\n",
        )
        .unwrap();
        match load_spec::<f64>(&bad) {
            Err(Error::Validation(issues)) => assert!(issues.len() >= 2, "{issues:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("out.csv"), "a\n1\n").unwrap();
        let mut m = RunManifest::new("abc", vec!["sdsm".into(), "simulate".into()], 42);
        m.record_output(dir.path(), "out.csv").unwrap();
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.input_digest(), m.input_digest());
        assert!(back.stale_outputs(dir.path()).is_empty());
        std::fs::write(dir.path().join("out.csv"), "a\n2\n").unwrap();
        assert_eq!(back.stale_outputs(dir.path()).len(), 1);
    }

    #[test]
    fn jsonl_lines() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, [serde_json::json!({"a": 1}), serde_json::json!({"a": 2})]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"a\":1}\n{\"a\":2}\n");
    }
}
