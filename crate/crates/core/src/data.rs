//! CSV ingestion and preprocessing into model-ready subjects.
//!
//! Dates are month-resolution; both dates sit at their month midpoints, so the
//! time since the last negative test is the month difference over 12. A test in
//! the interview month is placed half a month back.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RecencyError, Result};
use crate::model::Subject;
use crate::numeric::{mean, sample_sd};

pub const MISSING_TOKEN: &str = "NA";
/// Time assigned when the last test falls in the interview month.
pub const SAME_MONTH_S: f64 = 0.5 / 12.0;

/// Covariates known by name; `logvl` is derived from the viral-load column.
pub const STANDARD_COVARIATES: [&str; 5] = ["age", "gender", "odn", "logvl", "cd4"];

/// Header names for each field. Any column may be renamed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub id: String,
    pub weight: String,
    pub s: String,
    pub z: String,
    pub test_year: String,
    pub test_month: String,
    pub interview_year: String,
    pub interview_month: String,
    pub tested_past_year: String,
    pub age: String,
    pub gender: String,
    pub odn: String,
    pub vl: String,
    pub cd4: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            weight: "weight".into(),
            s: "s".into(),
            z: "z".into(),
            test_year: "test_year".into(),
            test_month: "test_month".into(),
            interview_year: "interview_year".into(),
            interview_month: "interview_month".into(),
            tested_past_year: "tested_past_year".into(),
            age: "age".into(),
            gender: "gender".into(),
            odn: "odn".into(),
            vl: "vl".into(),
            cd4: "cd4".into(),
        }
    }
}

impl ColumnMap {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RecencyError::InvalidArgument(format!("column map: {e}")))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn mapped(&self) -> [&str; 14] {
        [
            &self.id,
            &self.weight,
            &self.s,
            &self.z,
            &self.test_year,
            &self.test_month,
            &self.interview_year,
            &self.interview_month,
            &self.tested_past_year,
            &self.age,
            &self.gender,
            &self.odn,
            &self.vl,
            &self.cd4,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawRecord {
    pub row: usize,
    pub id: String,
    pub weight: f64,
    pub test_year: Option<i32>,
    pub test_month: Option<u32>,
    pub interview_year: Option<i32>,
    pub interview_month: Option<u32>,
    pub tested_past_year: Option<bool>,
    pub z: Option<bool>,
    pub s: Option<f64>,
    pub age: Option<f64>,
    pub gender: Option<f64>,
    pub odn: Option<f64>,
    pub vl: Option<f64>,
    /// Non-numeric viral-load cell such as `<20`.
    pub vl_text: Option<String>,
    pub cd4: Option<f64>,
    /// Unmapped columns, kept as text.
    pub extras: BTreeMap<String, String>,
}

/// Which optional columns the file had.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ColumnsPresent {
    pub standard: Vec<String>,
    pub extras: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedTable {
    pub records: Vec<RawRecord>,
    pub columns: ColumnsPresent,
}

pub fn load(path: &Path, columns: &ColumnMap) -> Result<LoadedTable> {
    let file = std::fs::File::open(path)?;
    load_reader(file, columns, &path.display().to_string())
}

pub fn load_reader<R: Read>(reader: R, map: &ColumnMap, source: &str) -> Result<LoadedTable> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = csv.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing = |column: &str| RecencyError::MissingColumn {
        path: source.to_string(),
        column: column.to_string(),
    };

    let weight = find(&map.weight).ok_or_else(|| missing(&map.weight))?;
    let z = find(&map.z).ok_or_else(|| missing(&map.z))?;
    let s = find(&map.s);
    let iy = find(&map.interview_year);
    let im = find(&map.interview_month);
    if s.is_none() && (iy.is_none() || im.is_none()) {
        return Err(missing(&format!("{} (or {} and {})", map.s, map.interview_year, map.interview_month)));
    }
    let ty = find(&map.test_year);
    let tm = find(&map.test_month);
    if s.is_none() && ty.is_none() {
        return Err(missing(&map.test_year));
    }
    let id = find(&map.id);
    let tpy = find(&map.tested_past_year);
    let age = find(&map.age);
    let gender = find(&map.gender);
    let odn = find(&map.odn);
    let vl = find(&map.vl);
    let cd4 = find(&map.cd4);

    let mapped = map.mapped();
    let extra_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !mapped.contains(&h.as_str()))
        .map(|(i, h)| (i, h.clone()))
        .collect();
    let mut standard = Vec::new();
    for (name, col) in [("age", age), ("gender", gender), ("odn", odn), ("logvl", vl), ("cd4", cd4)] {
        if col.is_some() {
            standard.push(name.to_string());
        }
    }

    let mut records = Vec::new();
    for (i, row) in csv.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let cell = |c: Option<usize>| c.and_then(|c| row.get(c)).filter(|v| !is_missing(v));
        let header = |c: usize| headers[c].clone();
        let num = |c: Option<usize>| -> Result<Option<f64>> {
            match cell(c) {
                None => Ok(None),
                Some(v) => v.parse::<f64>().map(Some).map_err(|_| RecencyError::ParseCell {
                    row: line,
                    column: header(c.unwrap()),
                    value: v.to_string(),
                }),
            }
        };
        let int = |c: Option<usize>| -> Result<Option<i64>> {
            match num(c)? {
                Some(v) if v.fract() == 0.0 => Ok(Some(v as i64)),
                Some(v) => Err(RecencyError::ParseCell {
                    row: line,
                    column: header(c.unwrap()),
                    value: v.to_string(),
                }),
                None => Ok(None),
            }
        };
        let flag = |c: Option<usize>| -> Result<Option<bool>> {
            match cell(c) {
                None => Ok(None),
                Some(v) => parse_bool(v).map(Some).ok_or_else(|| RecencyError::ParseCell {
                    row: line,
                    column: header(c.unwrap()),
                    value: v.to_string(),
                }),
            }
        };
        let month = |c: Option<usize>| -> Result<Option<u32>> {
            match int(c)? {
                Some(m) if (1..=12).contains(&m) => Ok(Some(m as u32)),
                Some(m) => Err(RecencyError::ParseCell {
                    row: line,
                    column: header(c.unwrap()),
                    value: m.to_string(),
                }),
                None => Ok(None),
            }
        };

        let weight_value = num(Some(weight))?.ok_or_else(|| RecencyError::ParseCell {
            row: line,
            column: map.weight.clone(),
            value: MISSING_TOKEN.into(),
        })?;
        let (vl_value, vl_text) = match cell(vl) {
            None => (None, None),
            Some(v) => match v.parse::<f64>() {
                Ok(x) if x >= 0.0 => (Some(x), None),
                Ok(x) => {
                    return Err(RecencyError::ParseCell {
                        row: line,
                        column: map.vl.clone(),
                        value: x.to_string(),
                    })
                }
                Err(_) => (None, Some(v.to_string())),
            },
        };
        let gender_value = match cell(gender) {
            None => None,
            Some(v) => Some(parse_gender(v).ok_or_else(|| RecencyError::ParseCell {
                row: line,
                column: map.gender.clone(),
                value: v.to_string(),
            })?),
        };
        records.push(RawRecord {
            row: line,
            id: cell(id).map(str::to_string).unwrap_or_else(|| (line - 1).to_string()),
            weight: weight_value,
            test_year: int(ty)?.map(|v| v as i32),
            test_month: month(tm)?,
            interview_year: int(iy)?.map(|v| v as i32),
            interview_month: month(im)?,
            tested_past_year: flag(tpy)?,
            z: flag(Some(z))?,
            s: num(s)?,
            age: num(age)?,
            gender: gender_value,
            odn: num(odn)?,
            vl: vl_value,
            vl_text,
            cd4: num(cd4)?,
            extras: extra_cols
                .iter()
                .filter_map(|(c, h)| row.get(*c).map(|v| (h.clone(), v.to_string())))
                .collect(),
        });
    }
    Ok(LoadedTable {
        records,
        columns: ColumnsPresent {
            standard,
            extras: extra_cols.into_iter().map(|(_, h)| h).collect(),
        },
    })
}

fn is_missing(v: &str) -> bool {
    v.is_empty() || v == MISSING_TOKEN
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" | "yes" | "y" => Some(true),
        "0" | "0.0" | "false" | "no" | "n" => Some(false),
        _ => None,
    }
}

fn parse_gender(v: &str) -> Option<f64> {
    match v.to_ascii_lowercase().as_str() {
        "m" | "male" => Some(1.0),
        "f" | "female" => Some(0.0),
        other => other.parse().ok(),
    }
}

/// Mean and sd used to standardize one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMoments {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRow {
    pub row: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedMonth {
    pub id: String,
    pub month: u32,
    pub candidates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardizationReport {
    pub moments: Vec<CovariateMoments>,
    pub dropped: Vec<DroppedRow>,
    pub imputed: Vec<ImputedMonth>,
    pub n_input: usize,
    pub n_retained: usize,
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub seed: u64,
    /// Covariates to build, in order. `None` takes every standard covariate
    /// present in the file.
    pub covariates: Option<Vec<String>>,
    /// Draw missing test months; otherwise such rows are dropped.
    pub impute_months: bool,
    /// Accept categorical viral loads (`<X`, undetectable, `>10M`).
    pub categorical_vl: bool,
    /// Standardize with these moments instead of the sample's own.
    pub moments: Option<Vec<CovariateMoments>>,
    pub standardize: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            covariates: None,
            impute_months: true,
            categorical_vl: false,
            moments: None,
            standardize: true,
        }
    }
}

/// Model-ready data with named covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub covariate_names: Vec<String>,
    pub subjects: Vec<Subject>,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn from_subjects(covariate_names: Vec<String>, subjects: Vec<Subject>) -> Result<Self> {
        if let Some(bad) = subjects.iter().position(|s| s.covariates.len() != covariate_names.len()) {
            return Err(RecencyError::InvalidSubject {
                index: bad,
                reason: format!("expected {} covariates", covariate_names.len()),
            });
        }
        let ids = (1..=subjects.len()).map(|i| i.to_string()).collect();
        Ok(Self {
            covariate_names,
            subjects,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Subjects restricted to the named covariates, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Vec<Subject>> {
        let idx = names
            .iter()
            .map(|n| {
                self.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| RecencyError::UnknownCovariate(n.clone()))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(self
            .subjects
            .iter()
            .map(|s| Subject {
                covariates: idx.iter().map(|&j| s.covariates[j]).collect(),
                ..s.clone()
            })
            .collect())
    }
}

fn months_between(ty: i32, tm: u32, iy: i32, im: u32) -> i64 {
    12 * (i64::from(iy) - i64::from(ty)) + i64::from(im) - i64::from(tm)
}

/// Time since last test in years from month-resolution dates.
pub fn time_since_test(ty: i32, tm: u32, iy: i32, im: u32) -> Option<f64> {
    match months_between(ty, tm, iy, im) {
        d if d < 0 => None,
        0 => Some(SAME_MONTH_S),
        d => Some(d as f64 / 12.0),
    }
}

/// Months the missing test month could take.
fn feasible_months(ty: i32, iy: i32, im: u32, tested_past_year: Option<bool>) -> Vec<u32> {
    let base: Vec<u32> = match ty.cmp(&iy) {
        std::cmp::Ordering::Less => (1..=12).collect(),
        std::cmp::Ordering::Equal => (1..=im).collect(),
        std::cmp::Ordering::Greater => Vec::new(),
    };
    if let Some(flag) = tested_past_year {
        let narrowed: Vec<u32> = base
            .iter()
            .copied()
            .filter(|&m| (months_between(ty, m, iy, im) <= 12) == flag)
            .collect();
        if !narrowed.is_empty() {
            return narrowed;
        }
    }
    base
}

fn categorical_vl(text: &str, rng: &mut ChaCha8Rng) -> Option<f64> {
    let t = text.trim().to_ascii_lowercase();
    if t.contains("undetect") || t.contains("not detected") || t == "tnd" {
        return Some(0.0);
    }
    if let Some(rest) = t.strip_prefix('>') {
        return rest.trim().parse::<f64>().ok().or(Some(1e7));
    }
    if let Some(rest) = t.strip_prefix('<') {
        let upper: f64 = rest.trim().parse().ok()?;
        return Some(rng.random_range(0.0..=upper));
    }
    None
}

fn extra(rec: &RawRecord, name: &str) -> Result<Option<f64>> {
    match rec.extras.get(name).map(String::as_str) {
        None => Ok(None),
        Some(v) if is_missing(v) => Ok(None),
        Some(v) => v.parse::<f64>().map(Some).map_err(|_| RecencyError::ParseCell {
            row: rec.row,
            column: name.to_string(),
            value: v.to_string(),
        }),
    }
}

/// Derive `s`, drop unusable rows, transform and standardize covariates and
/// rescale weights to sum to the retained count.
pub fn preprocess(
    table: &LoadedTable,
    options: &PreprocessOptions,
) -> Result<(Dataset, StandardizationReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let names: Vec<String> = match &options.covariates {
        Some(c) => c.clone(),
        None => table.columns.standard.clone(),
    };
    for n in &names {
        let known = STANDARD_COVARIATES.contains(&n.as_str()) && table.columns.standard.contains(n);
        if !known && !table.columns.extras.contains(n) {
            return Err(RecencyError::UnknownCovariate(n.clone()));
        }
    }

    let mut report = StandardizationReport {
        n_input: table.records.len(),
        ..Default::default()
    };
    let mut kept: Vec<(String, Subject)> = Vec::new();
    for rec in &table.records {
        let mut drop = |reason: &str| {
            report.dropped.push(DroppedRow {
                row: rec.row,
                id: rec.id.clone(),
                reason: reason.to_string(),
            })
        };
        if !(rec.weight > 0.0 && rec.weight.is_finite()) {
            drop("nonpositive weight");
            continue;
        }
        let Some(z) = rec.z else {
            drop("missing test result");
            continue;
        };
        let s = match rec.s {
            Some(s) if s > 0.0 => s,
            Some(_) => {
                drop("nonpositive s");
                continue;
            }
            None => {
                let (Some(ty), Some(iy), Some(im)) = (rec.test_year, rec.interview_year, rec.interview_month) else {
                    drop("missing test year");
                    continue;
                };
                let tm = match rec.test_month {
                    Some(m) => m,
                    None if options.impute_months => {
                        let months = feasible_months(ty, iy, im, rec.tested_past_year);
                        if months.is_empty() {
                            drop("test date after interview");
                            continue;
                        }
                        let m = months[rng.random_range(0..months.len())];
                        report.imputed.push(ImputedMonth {
                            id: rec.id.clone(),
                            month: m,
                            candidates: months.len(),
                        });
                        m
                    }
                    None => {
                        drop("missing test month");
                        continue;
                    }
                };
                match time_since_test(ty, tm, iy, im) {
                    Some(s) => s,
                    None => {
                        drop("test date after interview");
                        continue;
                    }
                }
            }
        };

        let mut x = Vec::with_capacity(names.len());
        let mut missing = None;
        for n in &names {
            let derived = table.columns.standard.contains(n);
            let v = match n.as_str() {
                _ if !derived => extra(rec, n)?,
                "age" => rec.age,
                "gender" => rec.gender,
                "odn" => rec.odn,
                "cd4" => rec.cd4,
                "logvl" => {
                    let raw = match (&rec.vl, &rec.vl_text) {
                        (Some(v), _) => Some(*v),
                        (None, Some(text)) if options.categorical_vl => categorical_vl(text, &mut rng),
                        (None, Some(text)) => {
                            return Err(RecencyError::ParseCell {
                                row: rec.row,
                                column: "vl".into(),
                                value: text.clone(),
                            })
                        }
                        (None, None) => None,
                    };
                    raw.map(f64::ln_1p)
                }
                other => extra(rec, other)?,
            };
            match v {
                Some(v) => x.push(v),
                None => {
                    missing = Some(n.clone());
                    break;
                }
            }
        }
        if let Some(n) = missing {
            drop(&format!("missing {n}"));
            continue;
        }
        kept.push((rec.id.clone(), Subject::new(x, s, z, rec.weight)));
    }
    if kept.is_empty() {
        return Err(RecencyError::AllRowsDropped);
    }

    if options.standardize {
        for (j, name) in names.iter().enumerate() {
            if name == "gender" {
                continue;
            }
            let (m, sd) = match options.moments.as_ref() {
                Some(given) => {
                    let g = given
                        .iter()
                        .find(|c| &c.name == name)
                        .ok_or_else(|| RecencyError::UnknownCovariate(name.clone()))?;
                    (g.mean, g.sd)
                }
                None => {
                    let col: Vec<f64> = kept.iter().map(|(_, s)| s.covariates[j]).collect();
                    (mean(&col), sample_sd(&col))
                }
            };
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(RecencyError::ZeroVariance(name.clone()));
            }
            for (_, s) in kept.iter_mut() {
                s.covariates[j] = (s.covariates[j] - m) / sd;
            }
            report.moments.push(CovariateMoments {
                name: name.clone(),
                mean: m,
                sd,
            });
        }
    }

    let n = kept.len() as f64;
    let total: f64 = kept.iter().map(|(_, s)| s.w).sum();
    for (_, s) in kept.iter_mut() {
        s.w *= n / total;
    }
    report.n_retained = kept.len();
    info!(
        "preprocess: kept {} of {} rows, imputed {} months",
        report.n_retained,
        report.n_input,
        report.imputed.len()
    );
    let (ids, subjects) = kept.into_iter().unzip();
    Ok((
        Dataset {
            covariate_names: names,
            subjects,
            ids,
        },
        report,
    ))
}

/// Write subjects as `id,weight,s,z,<covariates...>`, readable by [`load`].
pub fn write_dataset<W: Write>(writer: W, dataset: &Dataset) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "weight".into(), "s".into(), "z".into()];
    header.extend(dataset.covariate_names.iter().cloned());
    out.write_record(&header)?;
    for (id, s) in dataset.ids.iter().zip(&dataset.subjects) {
        let mut row = vec![
            id.clone(),
            format!("{}", s.w),
            format!("{}", s.s),
            u8::from(s.z).to_string(),
        ];
        row.extend(s.covariates.iter().map(|v| format!("{v}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
