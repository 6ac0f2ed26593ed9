//! Scenario configuration files.
//!
//! A config is a TOML document with the sections `[space]`, `[fields]`,
//! `[distribution]` (or an array `[[flags]]`), `[noise]`, `[run]` and
//! `[output]`. Validation is total: every problem is reported as a
//! [`ConfigError`] carrying the dotted key path and, when the key comes from
//! the file, its line number.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use nalgebra::DVector;
use toml::de::{DeTable, DeValue};
use toml::{Table, Value};

use crate::atlas::{BoxRegion, Grid};
use crate::decompose::{Scenario, Thresholds};
use crate::distributions::{builtin_pair, DistributionPair, FlagSequence};
use crate::fieldlang::{VectorField, VectorFieldSet};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config error at `{}` (line {l}): {}", self.path, self.message),
            None => write!(f, "config error at `{}`: {}", self.path, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// What to do with a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Pair,
    Fastpath,
    Cascade,
    Factorize,
    Verify,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Simulate,
        Mode::Pair,
        Mode::Fastpath,
        Mode::Cascade,
        Mode::Factorize,
        Mode::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Pair => "pair",
            Mode::Fastpath => "fastpath",
            Mode::Cascade => "cascade",
            Mode::Factorize => "factorize",
            Mode::Verify => "verify",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully validated configuration.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub mode: Mode,
    pub output_dir: Option<PathBuf>,
}

// Dotted key path -> 1-based line of the key in the source.
struct Locator {
    lines: HashMap<String, usize>,
}

impl Locator {
    fn new(text: &str) -> Self {
        let mut lines = HashMap::new();
        if let Ok(root) = DeTable::parse(text) {
            let starts: Vec<usize> = std::iter::once(0)
                .chain(text.match_indices('\n').map(|(i, _)| i + 1))
                .collect();
            let line_of = |offset: usize| starts.partition_point(|&s| s <= offset);
            fn walk(
                table: &DeTable<'_>,
                prefix: &str,
                line_of: &dyn Fn(usize) -> usize,
                out: &mut HashMap<String, usize>,
            ) {
                for (k, v) in table.iter() {
                    let path = if prefix.is_empty() {
                        k.get_ref().to_string()
                    } else {
                        format!("{prefix}.{}", k.get_ref())
                    };
                    out.entry(path.clone()).or_insert_with(|| line_of(k.span().start));
                    match v.get_ref() {
                        DeValue::Table(t) => walk(t, &path, line_of, out),
                        DeValue::Array(items) => {
                            for (i, item) in items.iter().enumerate() {
                                let p = format!("{path}[{i}]");
                                out.entry(p.clone()).or_insert_with(|| line_of(item.span().start));
                                if let DeValue::Table(t) = item.get_ref() {
                                    walk(t, &p, line_of, out);
                                }
                            }
                        }
                        _ => {}
                    }
                }
            }
            walk(root.get_ref(), "", &line_of, &mut lines);
        }
        Self { lines }
    }

    fn line(&self, path: &str) -> Option<usize> {
        let mut p = path.to_string();
        loop {
            if let Some(l) = self.lines.get(&p) {
                return Some(*l);
            }
            match p.rfind(['.', '[']) {
                Some(i) => p.truncate(i),
                None => return None,
            }
        }
    }

    fn err(&self, path: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            path: path.to_string(),
            line: self.line(path),
            message: message.into(),
        }
    }
}

/// Splits `KEY=VALUE` and parses the value as a TOML value; bare words are
/// taken as strings.
pub fn parse_override(arg: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| ConfigError {
        path: arg.to_string(),
        line: None,
        message: "override must look like KEY=VALUE".into(),
    })?;
    let key = key.trim().to_string();
    if key.is_empty() || key.split('.').any(|s| s.is_empty()) {
        return Err(ConfigError {
            path: key,
            line: None,
            message: "override key must be a dotted path such as noise.seed".into(),
        });
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn apply_override(root: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(ConfigError {
                    path: parts[..=i].join("."),
                    line: None,
                    message: "override descends into a non-table value".into(),
                })
            }
        };
    }
    Ok(())
}

const SECTIONS: &[&str] = &["space", "fields", "distribution", "flags", "noise", "run", "output"];
const SPACE_KEYS: &[&str] = &["n", "region", "resolution", "bounds"];
const DIST_KEYS: &[&str] = &["kind", "k", "h", "h_frame", "v_frame"];
const NOISE_KEYS: &[&str] = &["seed", "T", "h"];
const RUN_KEYS: &[&str] = &[
    "mode",
    "gap_threshold",
    "explosion_limit",
    "minor_threshold",
    "residual_threshold",
    "record_every",
    "base_point",
    "track_psi",
];
const OUTPUT_KEYS: &[&str] = &["directory"];

struct Reader<'a> {
    loc: &'a Locator,
}

impl Reader<'_> {
    fn table<'t>(&self, root: &'t Table, name: &str, required: bool) -> Result<Option<&'t Table>, ConfigError> {
        match root.get(name) {
            Some(Value::Table(t)) => Ok(Some(t)),
            Some(_) => Err(self.loc.err(name, "expected a section")),
            None if required => Err(self.loc.err(name, "missing section")),
            None => Ok(None),
        }
    }

    fn known_keys(&self, t: &Table, path: &str, allowed: &[&str]) -> Result<(), ConfigError> {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(self.loc.err(
                    &format!("{path}.{k}"),
                    format!("unknown key; expected one of: {}", allowed.join(", ")),
                ));
            }
        }
        Ok(())
    }

    fn int(&self, t: &Table, path: &str, key: &str) -> Result<Option<i64>, ConfigError> {
        let p = format!("{path}.{key}");
        match t.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) => Ok(Some(*i)),
            Some(_) => Err(self.loc.err(&p, "expected an integer")),
        }
    }

    fn usize_req(&self, t: &Table, path: &str, key: &str, min: usize) -> Result<usize, ConfigError> {
        let p = format!("{path}.{key}");
        let v = self.int(t, path, key)?.ok_or_else(|| self.loc.err(&p, "missing key"))?;
        if v < min as i64 {
            return Err(self.loc.err(&p, format!("must be at least {min}")));
        }
        usize::try_from(v).map_err(|_| self.loc.err(&p, "out of range"))
    }

    fn float(&self, t: &Table, path: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        let p = format!("{path}.{key}");
        match t.get(key) {
            None => Ok(None),
            Some(Value::Float(f)) if f.is_finite() => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(_) => Err(self.loc.err(&p, "expected a finite number")),
        }
    }

    fn positive(&self, t: &Table, path: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.float(t, path, key)? {
            Some(v) if v <= 0.0 => Err(self.loc.err(&format!("{path}.{key}"), "must be positive")),
            other => Ok(other),
        }
    }

    fn string<'t>(&self, t: &'t Table, path: &str, key: &str) -> Result<Option<&'t str>, ConfigError> {
        match t.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.loc.err(&format!("{path}.{key}"), "expected a string")),
        }
    }

    fn strings(&self, v: &Value, path: &str, n: usize) -> Result<Vec<String>, ConfigError> {
        let arr = v
            .as_array()
            .ok_or_else(|| self.loc.err(path, "expected an array of expression strings"))?;
        if arr.len() != n {
            return Err(self.loc.err(path, format!("expected {n} components, found {}", arr.len())));
        }
        arr.iter()
            .map(|e| {
                e.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| self.loc.err(path, "components must be expression strings"))
            })
            .collect()
    }

    fn field(&self, v: &Value, path: &str, n: usize) -> Result<VectorField, ConfigError> {
        let comps = self.strings(v, path, n)?;
        let refs: Vec<&str> = comps.iter().map(String::as_str).collect();
        let field = VectorField::parse(&refs).map_err(|e| self.loc.err(path, e.to_string()))?;
        if field.dim() != n {
            return Err(self.loc.err(path, format!("field has {} components, expected {n}", field.dim())));
        }
        Ok(field)
    }

    fn boxed(&self, v: &Value, path: &str, n: usize) -> Result<BoxRegion, ConfigError> {
        let arr = v
            .as_array()
            .ok_or_else(|| self.loc.err(path, "expected [[lo, hi], ...]"))?;
        if arr.len() != n {
            return Err(self.loc.err(path, format!("expected {n} intervals, found {}", arr.len())));
        }
        let mut lo = Vec::with_capacity(n);
        let mut hi = Vec::with_capacity(n);
        for (d, iv) in arr.iter().enumerate() {
            let pair = iv
                .as_array()
                .filter(|p| p.len() == 2)
                .ok_or_else(|| self.loc.err(path, format!("axis {} must be [lo, hi]", d + 1)))?;
            let num = |x: &Value| match x {
                Value::Float(f) => Some(*f),
                Value::Integer(i) => Some(*i as f64),
                _ => None,
            };
            match (num(&pair[0]), num(&pair[1])) {
                (Some(a), Some(b)) => {
                    lo.push(a);
                    hi.push(b);
                }
                _ => return Err(self.loc.err(path, format!("axis {} bounds must be numbers", d + 1))),
            }
        }
        BoxRegion::new(lo, hi).map_err(|e| self.loc.err(path, e.to_string()))
    }

    fn distribution(&self, t: &Table, path: &str, n: usize, grid: &Grid) -> Result<DistributionPair, ConfigError> {
        self.known_keys(t, path, DIST_KEYS)?;
        let kind = self
            .string(t, path, "kind")?
            .ok_or_else(|| self.loc.err(&format!("{path}.kind"), "missing key"))?;
        let fail = |e: crate::distributions::DistributionError| self.loc.err(path, e.to_string());
        if kind != "custom" && !crate::distributions::CATALOG.iter().any(|c| c.name == kind) {
            return Err(self.loc.err(&format!("{path}.kind"), format!("unknown distribution `{kind}`")));
        }
        if kind == "custom" {
            for key in ["k", "h"] {
                if t.contains_key(key) {
                    return Err(self.loc.err(&format!("{path}.{key}"), "not used by custom distributions"));
                }
            }
            let frame = |key: &str| -> Result<Vec<VectorField>, ConfigError> {
                let p = format!("{path}.{key}");
                let v = t.get(key).ok_or_else(|| self.loc.err(&p, "missing key"))?;
                let arr = v
                    .as_array()
                    .ok_or_else(|| self.loc.err(&p, "expected a list of expression vectors"))?;
                arr.iter()
                    .enumerate()
                    .map(|(i, f)| self.field(f, &format!("{p}[{i}]"), n))
                    .collect()
            };
            let (hf, vf) = (frame("h_frame")?, frame("v_frame")?);
            return DistributionPair::custom(n, hf, vf).map_err(fail);
        }
        for key in ["h_frame", "v_frame"] {
            if t.contains_key(key) {
                return Err(self.loc.err(&format!("{path}.{key}"), "only custom distributions take explicit frames"));
            }
        }
        let k = match self.int(t, path, "k")? {
            Some(v) if v < 1 => return Err(self.loc.err(&format!("{path}.k"), "must be at least 1")),
            Some(v) => Some(v as usize),
            None => None,
        };
        if k.is_some() && kind != "coordinate_flag" {
            return Err(self.loc.err(&format!("{path}.k"), format!("`{kind}` takes no k")));
        }
        let level = self.string(t, path, "h")?;
        if level.is_some() && kind != "level_set" {
            return Err(self.loc.err(&format!("{path}.h"), format!("`{kind}` takes no h")));
        }
        builtin_pair(kind, n, k, level, grid).map_err(|e| match e {
            crate::distributions::DistributionError::UnknownCatalogName(_) => {
                self.loc.err(&format!("{path}.kind"), e.to_string())
            }
            other => fail(other),
        })
    }
}

/// Parses and validates a config; `overrides` are `(dotted key, value)`
/// pairs applied before validation.
pub fn load_config(text: &str, overrides: &[(String, Value)]) -> Result<ScenarioConfig, ConfigError> {
    let loc = Locator::new(text);
    let mut root: Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        ConfigError {
            path: "<document>".into(),
            line,
            message: e.message().to_string(),
        }
    })?;
    for (k, v) in overrides {
        apply_override(&mut root, k, v.clone())?;
    }
    let r = Reader { loc: &loc };
    for k in root.keys() {
        if !SECTIONS.contains(&k.as_str()) {
            return Err(loc.err(k, format!("unknown section; expected one of: {}", SECTIONS.join(", "))));
        }
    }

    let space = r.table(&root, "space", true)?.expect("required");
    r.known_keys(space, "space", SPACE_KEYS)?;
    let n = r.usize_req(space, "space", "n", 1)?;
    if n > 4 {
        return Err(loc.err("space.n", "dimensions above 4 are not supported"));
    }
    let region = r.boxed(
        space.get("region").ok_or_else(|| loc.err("space.region", "missing key"))?,
        "space.region",
        n,
    )?;
    let resolution = r.usize_req(space, "space", "resolution", 3)?;
    if resolution > 201 {
        return Err(loc.err("space.resolution", "at most 201 points per axis"));
    }
    let bounds = match space.get("bounds") {
        Some(v) => r.boxed(v, "space.bounds", n)?,
        None => region.clone(),
    };
    let grid = Grid::new(region.clone(), resolution).map_err(|e| loc.err("space", e.to_string()))?;

    let fields_t = r.table(&root, "fields", true)?.expect("required");
    let drift = r.field(
        fields_t.get("drift").ok_or_else(|| loc.err("fields.drift", "missing key"))?,
        "fields.drift",
        n,
    )?;
    let mut m = 0;
    for k in fields_t.keys() {
        if k == "drift" {
            continue;
        }
        let idx = k
            .strip_prefix("noise_")
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|i| *i >= 1);
        match idx {
            Some(i) => m = m.max(i),
            None => {
                return Err(loc.err(
                    &format!("fields.{k}"),
                    "unknown key; expected drift or noise_1, noise_2, ...",
                ))
            }
        }
    }
    let mut all = vec![drift];
    for i in 1..=m {
        let key = format!("noise_{i}");
        let p = format!("fields.{key}");
        let v = fields_t
            .get(&key)
            .ok_or_else(|| loc.err(&p, "noise fields must be numbered 1..m without gaps"))?;
        all.push(r.field(v, &p, n)?);
    }
    let fields = VectorFieldSet::new(n, all);

    let mut scenario = Scenario::new(region, resolution, fields).with_bounds(bounds);

    let dist = r.table(&root, "distribution", false)?;
    let flags = match root.get("flags") {
        None => None,
        Some(Value::Array(items)) => Some(items),
        Some(_) => return Err(loc.err("flags", "expected an array of tables ([[flags]])")),
    };
    match (dist, flags) {
        (Some(_), Some(_)) => {
            return Err(loc.err("flags", "give either [distribution] or [[flags]], not both"))
        }
        (Some(d), None) => {
            let pair = r.distribution(d, "distribution", n, &grid)?;
            scenario = scenario.with_pair(pair);
        }
        (None, Some(items)) => {
            if items.is_empty() {
                return Err(loc.err("flags", "flag sequence is empty"));
            }
            let mut pairs = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let p = format!("flags[{i}]");
                let t = item.as_table().ok_or_else(|| loc.err(&p, "expected a table"))?;
                pairs.push(r.distribution(t, &p, n, &grid)?);
            }
            let seq = FlagSequence::new(pairs, &grid, scenario.thresholds.gap)
                .map_err(|e| loc.err("flags", e.to_string()))?;
            scenario = scenario.with_flags(seq);
        }
        (None, None) => {}
    }

    let noise = r.table(&root, "noise", true)?.expect("required");
    r.known_keys(noise, "noise", NOISE_KEYS)?;
    let seed = match r.int(noise, "noise", "seed")? {
        Some(s) if s < 0 => return Err(loc.err("noise.seed", "must be non-negative")),
        Some(s) => s as u64,
        None => return Err(loc.err("noise.seed", "missing key")),
    };
    let t_end = r.positive(noise, "noise", "T")?.ok_or_else(|| loc.err("noise.T", "missing key"))?;
    let h = r.positive(noise, "noise", "h")?.ok_or_else(|| loc.err("noise.h", "missing key"))?;
    scenario = scenario.with_noise(seed, t_end, h);
    scenario
        .check_time_grid()
        .map_err(|msg| loc.err("noise", msg))?;

    let mut mode = if scenario.geometry.is_some() { Mode::Pair } else { Mode::Simulate };
    if let Some(run) = r.table(&root, "run", false)? {
        r.known_keys(run, "run", RUN_KEYS)?;
        if let Some(s) = r.string(run, "run", "mode")? {
            mode = Mode::parse(s).ok_or_else(|| {
                loc.err(
                    "run.mode",
                    format!(
                        "unknown mode `{s}`; expected one of: {}",
                        Mode::ALL.map(Mode::name).join(", ")
                    ),
                )
            })?;
        }
        let mut th = Thresholds::default();
        if let Some(v) = r.positive(run, "run", "gap_threshold")? {
            if v >= 1.0 {
                return Err(loc.err("run.gap_threshold", "must lie in (0, 1)"));
            }
            th.gap = v;
        }
        if let Some(v) = r.positive(run, "run", "explosion_limit")? {
            th.explosion = v;
        }
        if let Some(v) = r.positive(run, "run", "minor_threshold")? {
            th.minor = v;
        }
        if let Some(v) = r.positive(run, "run", "residual_threshold")? {
            th.residual = v;
        }
        scenario.thresholds = th;
        if let Some(v) = r.int(run, "run", "record_every")? {
            if v < 0 {
                return Err(loc.err("run.record_every", "must be non-negative"));
            }
            scenario.record_every = v as usize;
        }
        if let Some(v) = run.get("base_point") {
            let arr = v
                .as_array()
                .filter(|a| a.len() == n)
                .ok_or_else(|| loc.err("run.base_point", format!("expected {n} numbers")))?;
            let pts: Option<Vec<f64>> = arr
                .iter()
                .map(|x| match x {
                    Value::Float(f) => Some(*f),
                    Value::Integer(i) => Some(*i as f64),
                    _ => None,
                })
                .collect();
            let pts = pts.ok_or_else(|| loc.err("run.base_point", "expected numbers"))?;
            scenario.base_point = Some(DVector::from_vec(pts));
        }
        if let Some(v) = run.get("track_psi") {
            scenario.track_psi = v
                .as_bool()
                .ok_or_else(|| loc.err("run.track_psi", "expected true or false"))?;
        }
    }

    let mut output_dir = None;
    if let Some(out) = r.table(&root, "output", false)? {
        r.known_keys(out, "output", OUTPUT_KEYS)?;
        output_dir = r.string(out, "output", "directory")?.map(PathBuf::from);
    }

    check_mode(&scenario, mode).map_err(|(path, msg)| loc.err(path, msg))?;
    scenario.validate().map_err(|e| {
        let path = match &e {
            crate::decompose::DecomposeError::Distribution(_) => {
                if scenario_has_flags(&scenario) {
                    "flags"
                } else {
                    "distribution"
                }
            }
            crate::decompose::DecomposeError::Noise(_) => "noise",
            _ => "run",
        };
        let path = if let crate::decompose::DecomposeError::Scenario(msg) = &e {
            if msg.starts_with("field") {
                "fields"
            } else if msg.starts_with("base point") {
                "run.base_point"
            } else if msg.starts_with("bounds") {
                "space.bounds"
            } else {
                path
            }
        } else {
            path
        };
        loc.err(path, e.to_string())
    })?;
    Ok(ScenarioConfig {
        scenario,
        mode,
        output_dir,
    })
}

fn scenario_has_flags(s: &Scenario) -> bool {
    matches!(s.geometry, Some(crate::decompose::Geometry::Flags(_)))
}

fn check_mode(s: &Scenario, mode: Mode) -> Result<(), (&'static str, String)> {
    use crate::decompose::Geometry;
    match (mode, &s.geometry) {
        (Mode::Pair | Mode::Fastpath | Mode::Verify, None) => {
            Err(("run.mode", format!("mode `{mode}` needs a [distribution] section")))
        }
        (Mode::Pair | Mode::Fastpath, Some(Geometry::Flags(f))) if f.len() > 1 => {
            Err(("run.mode", format!("mode `{mode}` needs a single [distribution], not a flag sequence")))
        }
        (Mode::Cascade, None) => Err(("run.mode", "mode `cascade` needs [[flags]] or a [distribution]".into())),
        _ => Ok(()),
    }
}

impl Scenario {
    fn check_time_grid(&self) -> Result<(), String> {
        crate::noise::generate_path(self.seed, 0, self.t_end, self.h)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[space]
n = 2
region = [[-1.0, 1.0], [-1.0, 1.0]]
resolution = 5

[fields]
drift = ["-y", "x"]

[distribution]
kind = "coordinate_flag"
k = 1

[noise]
seed = 7
T = 0.1
h = 0.01
"#;

    #[test]
    fn parses_minimal_config() {
        let c = load_config(BASE, &[]).unwrap();
        assert_eq!(c.mode, Mode::Pair);
        assert_eq!(c.scenario.seed, 7);
        assert_eq!(c.scenario.resolution, 5);
        assert_eq!(c.scenario.bounds, c.scenario.region);
    }

    #[test]
    fn unknown_key_names_path_and_line() {
        let text = BASE.replace("resolution = 5", "resolutoin = 5");
        let e = load_config(&text, &[]).unwrap_err();
        assert_eq!(e.path, "space.resolutoin");
        assert_eq!(e.line, Some(5));
        assert!(e.to_string().contains("space.resolutoin"));
    }

    #[test]
    fn overrides_apply_before_validation() {
        let (k, v) = parse_override("noise.seed=11").unwrap();
        let c = load_config(BASE, &[(k, v)]).unwrap();
        assert_eq!(c.scenario.seed, 11);
        let (k, v) = parse_override("run.mode=fastpath").unwrap();
        assert_eq!(load_config(BASE, &[(k, v)]).unwrap().mode, Mode::Fastpath);
        let (k, v) = parse_override("space.typo=1").unwrap();
        assert_eq!(load_config(BASE, &[(k, v)]).unwrap_err().path, "space.typo");
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn malformed_values_are_reported() {
        let cases = [
            ("k = 1", "k = 0", "distribution.k"),
            ("k = 1", "k = \"one\"", "distribution.k"),
            ("seed = 7", "seed = -1", "noise.seed"),
            ("h = 0.01", "h = 0.03", "noise"),
            ("drift = [\"-y\", \"x\"]", "drift = [\"-y\"]", "fields.drift"),
            ("drift = [\"-y\", \"x\"]", "drift = [\"-y\", \"x +\"]", "fields.drift"),
            ("kind = \"coordinate_flag\"", "kind = \"hyperbolic\"", "distribution.kind"),
            ("[noise]", "[noize]", "noize"),
            ("resolution = 5", "resolution = 2", "space.resolution"),
        ];
        for (from, to, path) in cases {
            let text = BASE.replace(from, to);
            let e = load_config(&text, &[]).unwrap_err();
            assert_eq!(e.path, path, "{to}: {e}");
        }
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let text = BASE.replace("n = 2", "n = = 2");
        let e = load_config(&text, &[]).unwrap_err();
        assert_eq!(e.path, "<document>");
        assert_eq!(e.line, Some(3));
    }
}
