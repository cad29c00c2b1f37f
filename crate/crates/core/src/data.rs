//! Dataset ingestion, validation and covariate featurization.
//!
//! A mediation dataset carries an outcome `Y`, a binary treatment `A`, a
//! scalar mediator `M`, baseline covariates `X`, treatment-side proxies `Z`
//! and outcome-side proxies `W`. Datasets are immutable once constructed and
//! safe to share across threads.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role a column plays in the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Outcome,
    Treatment,
    Mediator,
    Covariate,
    TreatmentProxy,
    OutcomeProxy,
}

/// Column-name to role mapping.
///
/// Exactly one outcome, treatment and mediator are required, plus at least
/// one proxy of each kind. The order of same-role columns in a loaded dataset
/// follows the CSV header, not the schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColumnSchema {
    map: BTreeMap<String, Role>,
}

impl ColumnSchema {
    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Role)>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (name, role) in entries {
            let name = name.into();
            if map.insert(name.clone(), role).is_some() {
                return Err(Error::Schema(format!("duplicate column `{name}`")));
            }
        }
        let schema = Self { map };
        schema.check_counts()?;
        Ok(schema)
    }

    /// Conventional schema for headers named `y, a, m, x*, z*, w*`.
    pub fn infer(header: &[String]) -> Result<Self> {
        let mut entries = Vec::new();
        for name in header {
            let role = match name.as_str() {
                "y" => Role::Outcome,
                "a" => Role::Treatment,
                "m" => Role::Mediator,
                n if n.starts_with('x') => Role::Covariate,
                n if n.starts_with('z') => Role::TreatmentProxy,
                n if n.starts_with('w') => Role::OutcomeProxy,
                n => {
                    return Err(Error::Schema(format!(
                        "cannot infer a role for column `{n}`; supply a schema"
                    )))
                }
            };
            entries.push((name.clone(), role));
        }
        Self::new(entries)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let schema: Self = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
        schema.check_counts()?;
        Ok(schema)
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.map.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn count(&self, role: Role) -> usize {
        self.map.values().filter(|r| **r == role).count()
    }

    fn check_counts(&self) -> Result<()> {
        for (role, want) in [
            (Role::Outcome, "exactly one outcome"),
            (Role::Treatment, "exactly one treatment"),
            (Role::Mediator, "exactly one mediator"),
        ] {
            let got = self.count(role);
            if got != 1 {
                return Err(Error::Schema(format!("{want} required, found {got}")));
            }
        }
        if self.count(Role::TreatmentProxy) == 0 {
            return Err(Error::Schema(
                "at least one treatment proxy required".into(),
            ));
        }
        if self.count(Role::OutcomeProxy) == 0 {
            return Err(Error::Schema("at least one outcome proxy required".into()));
        }
        Ok(())
    }
}

/// Column-major numeric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ColMat {
    cols: Vec<Vec<f64>>,
}

impl ColMat {
    pub fn new(cols: Vec<Vec<f64>>) -> Self {
        Self { cols }
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn nrows(&self) -> usize {
        self.cols.first().map_or(0, Vec::len)
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.cols[j]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cols[j][i]
    }

    fn take_rows(&self, idx: &[usize]) -> Self {
        Self {
            cols: self
                .cols
                .iter()
                .map(|c| idx.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }

    fn iter_all(&self) -> impl Iterator<Item = f64> + '_ {
        self.cols.iter().flat_map(|c| c.iter().copied())
    }
}

/// Covariate transform applied column-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// `x -> |x|^(1/2)`
    SqrtAbs,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::SqrtAbs => x.abs().sqrt(),
        }
    }
}

/// Per-covariate transform tags; output dimension always equals input
/// dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    transforms: Vec<Transform>,
}

impl FeatureMap {
    pub fn identity(p: usize) -> Self {
        Self {
            transforms: vec![Transform::Identity; p],
        }
    }

    pub fn sqrt_abs(p: usize) -> Self {
        Self {
            transforms: vec![Transform::SqrtAbs; p],
        }
    }

    pub fn new(transforms: Vec<Transform>) -> Self {
        Self { transforms }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.transforms.iter().all(|t| *t == Transform::Identity)
    }

    pub fn apply_row(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (t, &v) in self.transforms.iter().zip(x) {
            out.push(t.apply(v));
        }
    }

    pub fn apply_value(&self, j: usize, x: f64) -> f64 {
        self.transforms[j].apply(x)
    }
}

/// A validated sample of `(Y, A, M, X, Z, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MediationDataset {
    y: Vec<f64>,
    a: Vec<f64>,
    m: Vec<f64>,
    x: ColMat,
    z: ColMat,
    w: ColMat,
}

impl MediationDataset {
    /// Assemble a dataset from columns. Shape errors are rejected here;
    /// value-level problems (non-finite cells, degenerate arms) are reported
    /// by [`validate`].
    pub fn new(
        y: Vec<f64>,
        a: Vec<f64>,
        m: Vec<f64>,
        x: ColMat,
        z: ColMat,
        w: ColMat,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Dimension("empty dataset".into()));
        }
        if a.len() != n || m.len() != n {
            return Err(Error::Dimension("y, a, m lengths differ".into()));
        }
        for (label, mat) in [("x", &x), ("z", &z), ("w", &w)] {
            for (j, col) in mat.cols.iter().enumerate() {
                if col.len() != n {
                    return Err(Error::Dimension(format!(
                        "column {label}{} has {} rows, expected {n}",
                        j + 1,
                        col.len()
                    )));
                }
            }
        }
        if z.ncols() == 0 || w.ncols() == 0 {
            return Err(Error::Dimension(
                "at least one treatment proxy and one outcome proxy required".into(),
            ));
        }
        Ok(Self { y, a, m, x, z, w })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn p_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn p_w(&self) -> usize {
        self.w.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn x(&self) -> &ColMat {
        &self.x
    }

    pub fn z(&self) -> &ColMat {
        &self.z
    }

    pub fn w(&self) -> &ColMat {
        &self.w
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        (0..self.p_x()).map(|j| self.x.get(i, j)).collect()
    }

    pub fn z_row(&self, i: usize) -> Vec<f64> {
        (0..self.p_z()).map(|j| self.z.get(i, j)).collect()
    }

    pub fn w_row(&self, i: usize) -> Vec<f64> {
        (0..self.p_w()).map(|j| self.w.get(i, j)).collect()
    }

    pub fn n_treated(&self) -> usize {
        self.a.iter().filter(|&&a| a == 1.0).count()
    }

    pub fn n_control(&self) -> usize {
        self.a.iter().filter(|&&a| a == 0.0).count()
    }

    /// Row-resample (with repetition allowed); used by the bootstrap and by
    /// permutation-invariance tests.
    pub fn take_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.iter().any(|&i| i >= self.n()) {
            return Err(Error::Dimension("row index out of range".into()));
        }
        Ok(Self {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            m: idx.iter().map(|&i| self.m[i]).collect(),
            x: self.x.take_rows(idx),
            z: self.z.take_rows(idx),
            w: self.w.take_rows(idx),
        })
    }

    /// Total parameter count of the four bridge systems at this dataset's
    /// dimensions; the per-arm floor used by validation.
    pub fn bridge_param_dim(&self) -> usize {
        let (px, pz, pw) = (self.p_x(), self.p_z(), self.p_w());
        (2 + pw + px) + (1 + pw + px) + (1 + pz + px) + (2 + pz + px)
    }
}

/// Outcome of one validation check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Per-invariant pass/fail summary; a passing report is required by all
/// fitting operations.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn first_failure(&self) -> Option<String> {
        self.failures()
            .first()
            .map(|c| format!("{}: {}", c.name, c.detail))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "n = {}, treated = {}, control = {}",
            self.n, self.n_treated, self.n_control
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "  [{}] {} {}",
                if c.pass { "ok" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

/// Check the dataset invariants, reporting every failure rather than stopping
/// at the first.
pub fn validate(data: &MediationDataset) -> ValidationReport {
    let mut checks = Vec::new();
    let n = data.n();

    let non_finite = data
        .y
        .iter()
        .chain(&data.a)
        .chain(&data.m)
        .filter(|v| !v.is_finite())
        .count()
        + data.x.iter_all().filter(|v| !v.is_finite()).count()
        + data.z.iter_all().filter(|v| !v.is_finite()).count()
        + data.w.iter_all().filter(|v| !v.is_finite()).count();
    checks.push(Check {
        name: "finite entries",
        pass: non_finite == 0,
        detail: if non_finite == 0 {
            "no non-finite entries".into()
        } else {
            format!("non-finite entry count: {non_finite}")
        },
    });

    let bad_a = data.a.iter().filter(|&&a| a != 0.0 && a != 1.0).count();
    checks.push(Check {
        name: "treatment binary",
        pass: bad_a == 0,
        detail: if bad_a == 0 {
            "all values in {0,1}".into()
        } else {
            format!("{bad_a} values outside {{0,1}}")
        },
    });

    let floor = 10usize.max(data.bridge_param_dim());
    let n_treated = data.n_treated();
    let n_control = data.n_control();
    for (name, count, absent) in [
        ("treated arm", n_treated, "treated arm absent"),
        ("control arm", n_control, "control arm absent"),
    ] {
        let (pass, detail) = if count == 0 {
            (false, absent.to_string())
        } else if count < floor {
            (false, format!("{count} rows < required {floor}"))
        } else {
            (true, format!("{count} rows (floor {floor})"))
        };
        checks.push(Check { name, pass, detail });
    }

    ValidationReport {
        checks,
        n,
        n_treated,
        n_control,
    }
}

/// Validate and turn failures into an [`Error::Validation`].
pub fn require_valid(data: &MediationDataset) -> Result<ValidationReport> {
    let report = validate(data);
    if report.pass() {
        Ok(report)
    } else {
        Err(Error::Validation(
            report.first_failure().unwrap_or_else(|| "unknown".into()),
        ))
    }
}

/// Apply a feature map to the covariate block, leaving everything else
/// untouched.
pub fn build_features(data: &MediationDataset, map: &FeatureMap) -> Result<MediationDataset> {
    if map.len() != data.p_x() {
        return Err(Error::Dimension(format!(
            "feature map covers {} columns, dataset has {}",
            map.len(),
            data.p_x()
        )));
    }
    let cols = (0..data.p_x())
        .map(|j| {
            data.x
                .col(j)
                .iter()
                .map(|&v| map.apply_value(j, v))
                .collect()
        })
        .collect();
    MediationDataset::new(
        data.y.clone(),
        data.a.clone(),
        data.m.clone(),
        ColMat::new(cols),
        data.z.clone(),
        data.w.clone(),
    )
}

fn parse_cell(path: &Path, line: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
        path: path.display().to_string(),
        line,
        msg: format!("non-numeric cell `{}`", cell.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Csv {
            path: path.display().to_string(),
            line,
            msg: format!("non-finite value `{}`", cell.trim()),
        });
    }
    Ok(v)
}

/// Load a headered CSV under the given schema. Column order is normalized to
/// `(Y, A, M, X, Z, W)`, same-role columns keeping their header order.
pub fn load_csv(path: &Path, schema: &ColumnSchema) -> Result<MediationDataset> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_csv_str(&text, schema, path)
}

pub(crate) fn load_csv_str(
    text: &str,
    schema: &ColumnSchema,
    path: &Path,
) -> Result<MediationDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or_else(|| Error::Csv {
        path: path.display().to_string(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let header: Vec<String> = header_line
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();

    let mut roles = Vec::with_capacity(header.len());
    for name in &header {
        let role = schema
            .role(name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not in schema")))?;
        roles.push(role);
    }
    if header.len() != schema.len() {
        return Err(Error::Schema(format!(
            "header has {} columns, schema {}",
            header.len(),
            schema.len()
        )));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    let mut n = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Csv {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("expected {} cells, found {}", header.len(), cells.len()),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            let v = parse_cell(path, idx + 1, cell)?;
            if roles[j] == Role::Treatment && v != 0.0 && v != 1.0 {
                return Err(Error::Csv {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: format!("treatment not binary: `{v}`"),
                });
            }
            columns[j].push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Csv {
            path: path.display().to_string(),
            line: 1,
            msg: "no data rows".into(),
        });
    }

    let mut y = None;
    let mut a = None;
    let mut m = None;
    let mut x = Vec::new();
    let mut z = Vec::new();
    let mut w = Vec::new();
    for (role, col) in roles.into_iter().zip(columns) {
        match role {
            Role::Outcome => y = Some(col),
            Role::Treatment => a = Some(col),
            Role::Mediator => m = Some(col),
            Role::Covariate => x.push(col),
            Role::TreatmentProxy => z.push(col),
            Role::OutcomeProxy => w.push(col),
        }
    }
    MediationDataset::new(
        y.expect("schema guarantees outcome"),
        a.expect("schema guarantees treatment"),
        m.expect("schema guarantees mediator"),
        ColMat::new(x),
        ColMat::new(z),
        ColMat::new(w),
    )
}

/// Write a dataset as CSV with conventional header names
/// (`y,a,m,x1..,z1..,w1..`). Values print in shortest round-trip form, so
/// `load_csv` recovers them bit-exactly.
pub fn write_csv(data: &MediationDataset, path: &Path) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::new();
    out.push_str(&csv_header(data).join(","));
    out.push('\n');
    for i in 0..data.n() {
        let mut row = vec![
            format!("{}", data.y[i]),
            format!("{}", data.a[i]),
            format!("{}", data.m[i]),
        ];
        for j in 0..data.p_x() {
            row.push(format!("{}", data.x.get(i, j)));
        }
        for j in 0..data.p_z() {
            row.push(format!("{}", data.z.get(i, j)));
        }
        for j in 0..data.p_w() {
            row.push(format!("{}", data.w.get(i, j)));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err)
}

/// Conventional header for [`write_csv`] output.
pub fn csv_header(data: &MediationDataset) -> Vec<String> {
    let mut header = vec!["y".to_string(), "a".to_string(), "m".to_string()];
    header.extend((1..=data.p_x()).map(|j| format!("x{j}")));
    header.extend((1..=data.p_z()).map(|j| format!("z{j}")));
    header.extend((1..=data.p_w()).map(|j| format!("w{j}")));
    header
}

/// Schema matching [`write_csv`]'s conventional header.
pub fn conventional_schema(p_x: usize, p_z: usize, p_w: usize) -> ColumnSchema {
    let mut entries = vec![
        ("y".to_string(), Role::Outcome),
        ("a".to_string(), Role::Treatment),
        ("m".to_string(), Role::Mediator),
    ];
    entries.extend((1..=p_x).map(|j| (format!("x{j}"), Role::Covariate)));
    entries.extend((1..=p_z).map(|j| (format!("z{j}"), Role::TreatmentProxy)));
    entries.extend((1..=p_w).map(|j| (format!("w{j}"), Role::OutcomeProxy)));
    ColumnSchema::new(entries).expect("conventional schema is well-formed")
}
