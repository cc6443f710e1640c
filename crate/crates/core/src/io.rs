//! Run configuration, cohort ingestion and the on-disk formats.
//!
//! Subject file columns: `subject_id,arm,u_level,<covariates...>,exit_time,event`.
//! Longitudinal file columns: `subject_id,t,m_obs_raw`. Draws and the truth
//! sidecar are line-delimited JSON, every record carrying `schema_version`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{Dataset, Subject};
use crate::effects::{InfeasiblePolicy, ReferenceLevels, RhoPolicy, Stratum, StratumWeights, DEFAULT_MC_DRAWS};
use crate::error::{Error, Result};
use crate::inference::{Chain, ConfounderDraws, McmcSettings, ModelStructure, PosteriorDraws, PriorSpec};
use crate::mediator::LongitudinalRecord;
use crate::model::ModelParams;
use crate::oracle::{CensoringLaw, ScmConfig, ScmTruth, VisitSchedule};
use crate::survival::FunctionalKind;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub levels: Vec<String>,
    pub reference: String,
}

impl CovariateSpec {
    /// Non-reference levels, each one dummy column.
    fn coded(&self) -> impl Iterator<Item = &String> {
        self.levels.iter().filter(move |l| **l != self.reference)
    }
}

/// Dummy coding of the categorical baseline covariates, in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateSchema {
    pub covariates: Vec<CovariateSpec>,
}

impl CovariateSchema {
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for c in &self.covariates {
            if !names.insert(&c.name) {
                return Err(Error::invalid(format!("covariate `{}` is declared twice", c.name)));
            }
            if RESERVED.contains(&c.name.as_str()) {
                return Err(Error::invalid(format!("covariate name `{}` is reserved", c.name)));
            }
            let levels: BTreeSet<_> = c.levels.iter().collect();
            if levels.len() != c.levels.len() || c.levels.is_empty() {
                return Err(Error::invalid(format!("covariate `{}` needs distinct levels", c.name)));
            }
            if !levels.contains(&c.reference) {
                return Err(Error::invalid(format!("reference level of `{}` is not among its levels", c.name)));
            }
        }
        Ok(())
    }

    pub fn w_dim(&self) -> usize {
        self.covariates.iter().map(|c| c.levels.len() - 1).sum()
    }

    /// Dummy vector for one level per covariate; `Err(k)` names the first
    /// covariate whose level is unknown.
    pub fn encode<S: AsRef<str>>(&self, values: &[S]) -> std::result::Result<Vec<f64>, usize> {
        let mut w = Vec::with_capacity(self.w_dim());
        for (k, (c, v)) in self.covariates.iter().zip(values).enumerate() {
            let v = v.as_ref();
            if !c.levels.iter().any(|l| l == v) {
                return Err(k);
            }
            w.extend(c.coded().map(|l| f64::from(u8::from(l == v))));
        }
        Ok(w)
    }

    pub fn decode(&self, w: &[f64]) -> Vec<String> {
        let mut out = Vec::new();
        let mut i = 0;
        for c in &self.covariates {
            let mut level = c.reference.clone();
            for l in c.coded() {
                if w[i] == 1.0 {
                    level = l.clone();
                }
                i += 1;
            }
            out.push(level);
        }
        out
    }

    /// Stratum label such as `age=ge55,smoking=never`.
    pub fn label(&self, w: &[f64]) -> String {
        if self.covariates.is_empty() {
            return "all".into();
        }
        self.covariates
            .iter()
            .zip(self.decode(w))
            .map(|(c, l)| format!("{}={}", c.name, l))
            .collect::<Vec<_>>()
            .join(",")
    }
}

const RESERVED: [&str; 5] = ["subject_id", "arm", "u_level", "exit_time", "event"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub center: f64,
    pub scale: f64,
}

impl Default for Standardization {
    fn default() -> Self {
        Standardization { center: 25.0, scale: 5.0 }
    }
}

impl Standardization {
    pub fn standardize(&self, raw: f64) -> f64 {
        (raw - self.center) / self.scale
    }

    /// A raw value that standardizes back to exactly `m` when one exists
    /// within a few ulps of the naive inverse.
    pub fn raw(&self, m: f64) -> f64 {
        let naive = m * self.scale + self.center;
        let mut up = naive;
        let mut down = naive;
        for _ in 0..16 {
            if self.standardize(up) == m {
                return up;
            }
            if self.standardize(down) == m {
                return down;
            }
            up = up.next_up();
            down = down.next_down();
        }
        naive
    }
}

/// One stratum of a simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationStratum {
    pub covariates: BTreeMap<String, String>,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n: usize,
    pub params: ModelParams,
    pub strata: Vec<SimulationStratum>,
    /// Position of the true joint confounder law in its monotone interval.
    pub rho: f64,
    #[serde(default)]
    pub censoring: CensoringLaw,
    pub schedule: VisitSchedule,
    #[serde(default)]
    pub noise_sd: Option<f64>,
}

fn default_subjects() -> PathBuf {
    "subjects.csv".into()
}
fn default_longitudinal() -> PathBuf {
    "longitudinal.csv".into()
}
fn default_t_max() -> f64 {
    15.0
}
fn default_cuts() -> Vec<f64> {
    vec![0.0, 3.0, 7.0]
}
fn default_kind() -> FunctionalKind {
    FunctionalKind::ThreeYearLegacy
}
fn default_rho() -> RhoPolicy {
    RhoPolicy::Global(0.5)
}
fn default_mc() -> usize {
    DEFAULT_MC_DRAWS
}
fn default_stride() -> usize {
    1
}
fn default_gate() -> f64 {
    1.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Paths are relative to the config file.
    #[serde(default = "default_subjects")]
    pub subjects_file: PathBuf,
    #[serde(default = "default_longitudinal")]
    pub longitudinal_file: PathBuf,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub standardization: Standardization,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_cuts")]
    pub cut_points: Vec<f64>,
    #[serde(default = "default_kind")]
    pub functional_kind: FunctionalKind,
    #[serde(default = "default_rho")]
    pub rho_policy: RhoPolicy,
    #[serde(default)]
    pub infeasible_policy: InfeasiblePolicy,
    #[serde(default)]
    pub references: ReferenceLevels,
    #[serde(default = "default_mc")]
    pub mc_draws: usize,
    /// Decompose every `effects_stride`-th retained draw.
    #[serde(default = "default_stride")]
    pub effects_stride: usize,
    #[serde(default)]
    pub mcmc: McmcSettings,
    /// Settings of the separate confounder-model fit; iteration counts
    /// default to those of `mcmc`.
    #[serde(default)]
    pub confounder_mcmc: Option<McmcSettings>,
    #[serde(default)]
    pub priors: PriorSpec,
    /// Largest acceptable R-hat over free parameters.
    #[serde(default = "default_gate")]
    pub rhat_gate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: RunConfig = serde_json::from_str(text)?;
        c.base_dir = base_dir.to_path_buf();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn schema(&self) -> CovariateSchema {
        CovariateSchema {
            covariates: self.covariates.clone(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn structure(&self) -> ModelStructure {
        ModelStructure {
            w_dim: self.schema().w_dim(),
            cut_points: self.cut_points.clone(),
            functional_kind: self.functional_kind,
            t_max: self.t_max,
        }
    }

    pub fn confounder_settings(&self) -> McmcSettings {
        self.confounder_mcmc.clone().unwrap_or_else(|| McmcSettings {
            frozen: BTreeMap::new(),
            ..self.mcmc.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.schema().validate()?;
        self.priors.validate()?;
        self.references.validate()?;
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::invalid("t_max must be positive"));
        }
        let c = &self.cut_points;
        if c.first() != Some(&0.0) || c.windows(2).any(|p| p[1] <= p[0]) || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cut points must start at 0 and increase"));
        }
        if !(self.standardization.scale > 0.0 && self.standardization.scale.is_finite() && self.standardization.center.is_finite()) {
            return Err(Error::invalid("standardization scale must be positive"));
        }
        if self.mc_draws == 0 || self.effects_stride == 0 {
            return Err(Error::invalid("mc_draws and effects_stride must be positive"));
        }
        if let RhoPolicy::Global(r) = self.rho_policy {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid("rho must lie in [0, 1]"));
            }
        }
        if self.mcmc.seed != 0 || self.confounder_mcmc.as_ref().is_some_and(|m| m.seed != 0) {
            return Err(Error::invalid("set the seed with the top-level `seed` key"));
        }
        if !(self.rhat_gate >= 1.0) {
            return Err(Error::invalid("rhat_gate must be at least 1"));
        }
        if let Some(sim) = &self.simulation {
            sim.params.validate()?;
            if sim.params.w_dim() != self.schema().w_dim() {
                return Err(Error::invalid("simulation parameters do not match the covariate schema"));
            }
            if sim.params.survival.t_max != self.t_max {
                return Err(Error::invalid("simulation t_max differs from the run t_max"));
            }
        }
        Ok(())
    }

    /// The simulation design as an oracle configuration.
    pub fn scm_config(&self) -> Result<ScmConfig> {
        let sim = self.simulation.as_ref().ok_or_else(|| Error::invalid("config has no `simulation` section"))?;
        let schema = self.schema();
        let strata = sim
            .strata
            .iter()
            .map(|s| {
                let values: Vec<String> = schema
                    .covariates
                    .iter()
                    .map(|c| s.covariates.get(&c.name).cloned().ok_or_else(|| Error::invalid(format!("simulation stratum lacks `{}`", c.name))))
                    .collect::<Result<_>>()?;
                if s.covariates.len() != values.len() {
                    return Err(Error::invalid("simulation stratum names an undeclared covariate"));
                }
                let w = schema
                    .encode(&values)
                    .map_err(|k| Error::invalid(format!("unknown level for `{}` in simulation stratum", schema.covariates[k].name)))?;
                Ok(Stratum {
                    label: schema.label(&w),
                    w,
                    mass: s.mass,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = ScmConfig::with_rho(
            sim.params.clone(),
            StratumWeights { strata },
            sim.rho,
            sim.n,
            sim.censoring.clone(),
            sim.schedule.clone(),
        )?;
        cfg.noise_sd = sim.noise_sd;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Result of reading the cohort files.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub data: Dataset,
    pub weights: StratumWeights,
    /// Subjects dropped for missing baseline covariates.
    pub excluded: Vec<String>,
    pub warnings: Vec<String>,
}

fn violation(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::SchemaViolation {
        row,
        column: column.into(),
        message: message.into(),
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| violation(1, name, "missing column"))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<T> {
    rec.get(idx)
        .unwrap_or("")
        .trim()
        .parse()
        .map_err(|_| violation(row, column, format!("cannot parse `{}`", rec.get(idx).unwrap_or(""))))
}

/// Reads and validates the cohort. Rows are numbered by file line.
pub fn ingest(cfg: &RunConfig) -> Result<Ingested> {
    let schema = cfg.schema();
    let mut rdr = csv::Reader::from_path(cfg.resolve(&cfg.subjects_file))?;
    let headers = rdr.headers()?.clone();
    let id_col = column_index(&headers, "subject_id")?;
    let arm_col = column_index(&headers, "arm")?;
    let u_col = column_index(&headers, "u_level")?;
    let exit_col = column_index(&headers, "exit_time")?;
    let event_col = column_index(&headers, "event")?;
    let cov_cols: Vec<usize> = schema.covariates.iter().map(|c| column_index(&headers, &c.name)).collect::<Result<_>>()?;
    let known: BTreeSet<&str> = RESERVED.iter().copied().chain(schema.covariates.iter().map(|c| c.name.as_str())).collect();
    if let Some(extra) = headers.iter().find(|h| !known.contains(h)) {
        return Err(violation(1, extra, "column is not declared in the schema"));
    }
    let mut subjects: Vec<Subject> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut excluded = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let id = rec.get(id_col).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(violation(row, "subject_id", "empty subject id"));
        }
        if index.contains_key(&id) || excluded.contains(&id) {
            return Err(violation(row, "subject_id", format!("duplicate subject `{id}`")));
        }
        let arm: u8 = parse_field(&rec, arm_col, row, "arm")?;
        if arm > 1 {
            return Err(violation(row, "arm", "arm must be 0 or 1"));
        }
        let u: u8 = parse_field(&rec, u_col, row, "u_level")?;
        if u > 2 {
            return Err(violation(row, "u_level", "confounder level must be 0, 1 or 2"));
        }
        let exit_time: f64 = parse_field(&rec, exit_col, row, "exit_time")?;
        if !(exit_time > 0.0 && exit_time.is_finite()) {
            return Err(violation(row, "exit_time", "exit time must be positive"));
        }
        let event: u8 = parse_field(&rec, event_col, row, "event")?;
        if event > 1 {
            return Err(violation(row, "event", "event must be 0 or 1"));
        }
        let values: Vec<&str> = cov_cols.iter().map(|&i| rec.get(i).unwrap_or("").trim()).collect();
        if values.iter().any(|v| v.is_empty()) {
            excluded.push(id);
            continue;
        }
        let w = schema.encode(&values).map_err(|k| {
            let c = &schema.covariates[k];
            violation(row, &c.name, format!("level `{}` is not one of {:?}", values[k], c.levels))
        })?;
        index.insert(id.clone(), subjects.len());
        subjects.push(Subject {
            id,
            arm,
            u,
            w,
            exit_time,
            event: event == 1,
            visits: Vec::new(),
        });
    }
    let excluded_set: BTreeSet<&String> = excluded.iter().collect();
    let mut rdr = csv::Reader::from_path(cfg.resolve(&cfg.longitudinal_file))?;
    let headers = rdr.headers()?.clone();
    let id_col = column_index(&headers, "subject_id")?;
    let t_col = column_index(&headers, "t")?;
    let m_col = column_index(&headers, "m_obs_raw")?;
    if let Some(extra) = headers.iter().find(|h| !["subject_id", "t", "m_obs_raw"].contains(h)) {
        return Err(violation(1, extra, "unexpected column"));
    }
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let id = rec.get(id_col).unwrap_or("").trim().to_string();
        let t: f64 = parse_field(&rec, t_col, row, "t")?;
        let raw: f64 = parse_field(&rec, m_col, row, "m_obs_raw")?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(violation(row, "t", "visit time must be nonnegative"));
        }
        if !raw.is_finite() {
            return Err(violation(row, "m_obs_raw", "value must be finite"));
        }
        match index.get(&id) {
            Some(&k) => subjects[k].visits.push(LongitudinalRecord {
                t,
                m_obs: cfg.standardization.standardize(raw),
            }),
            None if excluded_set.contains(&id) => {}
            None => return Err(Error::OrphanRecord { row, subject_id: id }),
        }
    }
    let mut warnings = Vec::new();
    for s in &mut subjects {
        if s.visits.windows(2).any(|p| p[1].t < p[0].t) {
            s.visits.sort_by(|a, b| a.t.total_cmp(&b.t));
            warnings.push(format!("visits of subject `{}` were not in time order and have been sorted", s.id));
        }
    }
    if !excluded.is_empty() {
        warnings.push(format!("{} subjects excluded for missing baseline covariates", excluded.len()));
    }
    let data = Dataset { subjects };
    let weights = if data.is_empty() {
        StratumWeights { strata: vec![] }
    } else {
        data.empirical_strata(|w| schema.label(w))
    };
    Ok(Ingested {
        data,
        weights,
        excluded,
        warnings,
    })
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// Writes both cohort files in the ingestion format.
pub fn write_cohort(cfg: &RunConfig, data: &Dataset, subjects_path: &Path, longitudinal_path: &Path) -> Result<()> {
    let schema = cfg.schema();
    let mut w = csv::Writer::from_path(subjects_path)?;
    let mut header = vec!["subject_id".to_string(), "arm".into(), "u_level".into()];
    header.extend(schema.covariates.iter().map(|c| c.name.clone()));
    header.extend(["exit_time".to_string(), "event".into()]);
    w.write_record(&header)?;
    for s in &data.subjects {
        let mut row = vec![s.id.clone(), s.arm.to_string(), s.u.to_string()];
        row.extend(schema.decode(&s.w));
        row.extend([fmt(s.exit_time), u8::from(s.event).to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(longitudinal_path)?;
    w.write_record(["subject_id", "t", "m_obs_raw"])?;
    for s in &data.subjects {
        for v in &s.visits {
            w.write_record([s.id.clone(), fmt(v.t), fmt(cfg.standardization.raw(v.m_obs))])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn put(w: &mut impl Write, v: &Value) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn jsonl_records(path: &Path) -> Result<Vec<Value>> {
    let mut out = Vec::new();
    for (k, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)?;
        if v.get("schema_version").and_then(Value::as_u64) != Some(u64::from(SCHEMA_VERSION)) {
            return Err(Error::invalid(format!("{}: line {} has an unsupported schema_version", path.display(), k + 1)));
        }
        out.push(v);
    }
    Ok(out)
}

fn field<T: serde::de::DeserializeOwned>(v: &Value, key: &str) -> Result<T> {
    Ok(serde_json::from_value(v.get(key).cloned().ok_or_else(|| Error::invalid(format!("record lacks `{key}`")))?)?)
}

/// Header record, one record per retained draw, then per-chain acceptance.
pub fn write_draws(path: &Path, d: &PosteriorDraws) -> Result<()> {
    let mut w = jsonl_writer(path)?;
    put(
        &mut w,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "header",
            "layout_version": d.layout_version,
            "names": d.names,
            "structure": d.structure,
            "free": d.free,
            "chains": d.chains.len(),
            "burn_in": d.burn_in,
            "samples": d.samples,
            "thin": d.thin,
            "seed": d.seed,
            "warnings": d.warnings,
        }),
    )?;
    for (c, ch) in d.chains.iter().enumerate() {
        for (t, theta) in ch.theta.iter().enumerate() {
            let mut rec = json!({"schema_version": SCHEMA_VERSION, "kind": "draw", "chain": c, "iteration": t, "theta": theta});
            if let Some(re) = ch.random_effects.get(t) {
                rec["random_effects"] = json!(re);
            }
            put(&mut w, &rec)?;
        }
        put(&mut w, &json!({"schema_version": SCHEMA_VERSION, "kind": "acceptance", "chain": c, "rates": ch.acceptance}))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws(path: &Path) -> Result<PosteriorDraws> {
    let recs = jsonl_records(path)?;
    let head = recs.first().filter(|r| r["kind"] == "header").ok_or_else(|| Error::invalid("draws file lacks its header"))?;
    let n_chains: usize = field(head, "chains")?;
    let layout_version: u32 = field(head, "layout_version")?;
    if layout_version != crate::inference::LAYOUT_VERSION {
        return Err(Error::invalid("draws were written with another parameter layout"));
    }
    let mut chains: Vec<Chain> = (0..n_chains)
        .map(|_| Chain {
            theta: vec![],
            random_effects: vec![],
            acceptance: BTreeMap::new(),
        })
        .collect();
    for r in &recs[1..] {
        let c: usize = field(r, "chain")?;
        let ch = chains.get_mut(c).ok_or_else(|| Error::invalid("draw references an unknown chain"))?;
        match r["kind"].as_str() {
            Some("draw") => {
                ch.theta.push(field(r, "theta")?);
                if r.get("random_effects").is_some() {
                    ch.random_effects.push(field(r, "random_effects")?);
                }
            }
            Some("acceptance") => ch.acceptance = field(r, "rates")?,
            _ => return Err(Error::invalid("unknown record kind in draws file")),
        }
    }
    let d = PosteriorDraws {
        layout_version,
        names: field(head, "names")?,
        structure: field(head, "structure")?,
        free: field(head, "free")?,
        chains,
        burn_in: field(head, "burn_in")?,
        samples: field(head, "samples")?,
        thin: field(head, "thin")?,
        seed: field(head, "seed")?,
        warnings: field(head, "warnings")?,
    };
    let len = d.names.len();
    if d.chains.iter().any(|c| c.theta.len() != d.draws_per_chain() || c.theta.iter().any(|t| t.len() != len)) {
        return Err(Error::invalid("draws file has ragged chains"));
    }
    Ok(d)
}

pub fn write_confounder_draws(path: &Path, d: &ConfounderDraws) -> Result<()> {
    let mut w = jsonl_writer(path)?;
    put(
        &mut w,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "header",
            "w_dim": d.w_dim,
            "names": d.names,
            "chains": d.chains.len(),
            "acceptance": d.acceptance,
            "seed": d.seed,
            "warnings": d.warnings,
        }),
    )?;
    for (c, ch) in d.chains.iter().enumerate() {
        for (t, theta) in ch.iter().enumerate() {
            put(&mut w, &json!({"schema_version": SCHEMA_VERSION, "kind": "draw", "chain": c, "iteration": t, "theta": theta}))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_confounder_draws(path: &Path) -> Result<ConfounderDraws> {
    let recs = jsonl_records(path)?;
    let head = recs.first().filter(|r| r["kind"] == "header").ok_or_else(|| Error::invalid("confounder draws file lacks its header"))?;
    let n: usize = field(head, "chains")?;
    let mut chains = vec![Vec::new(); n];
    for r in &recs[1..] {
        let c: usize = field(r, "chain")?;
        chains.get_mut(c).ok_or_else(|| Error::invalid("draw references an unknown chain"))?.push(field(r, "theta")?);
    }
    Ok(ConfounderDraws {
        w_dim: field(head, "w_dim")?,
        names: field(head, "names")?,
        chains,
        acceptance: field(head, "acceptance")?,
        seed: field(head, "seed")?,
        warnings: field(head, "warnings")?,
    })
}

/// Simulation design followed by one record per simulated subject.
pub fn write_truth(path: &Path, cfg: &ScmConfig, truths: &[ScmTruth]) -> Result<()> {
    let mut w = jsonl_writer(path)?;
    put(&mut w, &json!({"schema_version": SCHEMA_VERSION, "kind": "design", "config": cfg}))?;
    for t in truths {
        put(&mut w, &json!({"schema_version": SCHEMA_VERSION, "kind": "subject", "truth": t}))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<(ScmConfig, Vec<ScmTruth>)> {
    let recs = jsonl_records(path)?;
    let head = recs.first().filter(|r| r["kind"] == "design").ok_or_else(|| Error::invalid("truth file lacks its design record"))?;
    let cfg = field(head, "config")?;
    let truths = recs[1..].iter().map(|r| field(r, "truth")).collect::<Result<_>>()?;
    Ok((cfg, truths))
}

/// Rows are draws in chain order; the first two columns locate the draw.
pub fn write_pointwise(path: &Path, draws: &PosteriorDraws, data: &Dataset, ll: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "iteration".into()];
    header.extend(data.subjects.iter().map(|s| s.id.clone()));
    w.write_record(&header)?;
    let mut k = 0;
    for (c, ch) in draws.chains.iter().enumerate() {
        for t in 0..ch.theta.len() {
            let mut row = vec![c.to_string(), t.to_string()];
            row.extend(ll[k].iter().map(|v| fmt(*v)));
            w.write_record(&row)?;
            k += 1;
        }
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline and a `schema_version` key.
pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let mut v = serde_json::to_value(report)?;
    if let Value::Object(map) = &mut v {
        map.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn config(dir: &Path, extra: &str) -> RunConfig {
        let text = format!(
            r#"{{"covariates": [{{"name": "age", "levels": ["young", "old"], "reference": "young"}},
                                {{"name": "smoking", "levels": ["never", "former", "current"], "reference": "never"}}]{extra}}}"#
        );
        RunConfig::from_json(&text, dir).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    const SUBJECTS: &str = "subject_id,arm,u_level,age,smoking,exit_time,event\n\
        a,1,2,old,never,15,0\n\
        b,0,0,young,current,4.5,1\n\
        c,1,1,old,never,12.25,1\n";

    #[test]
    fn three_subject_fixture() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "subjects.csv", SUBJECTS);
        write(dir.path(), "longitudinal.csv", "subject_id,t,m_obs_raw\na,0,30\na,1,29\nb,0,25\nc,2,20\nc,0,27.5\n");
        let cfg = config(dir.path(), "");
        let got = ingest(&cfg).unwrap();
        assert_eq!(got.data.len(), 3);
        assert_eq!(got.data.subjects[0].w, vec![1.0, 0.0, 0.0]);
        assert_eq!(got.data.subjects[1].w, vec![0.0, 0.0, 1.0]);
        assert_eq!(got.data.subjects[0].visits[0].m_obs, 1.0);
        let masses: Vec<(String, f64)> = got.weights.strata.iter().map(|s| (s.label.clone(), s.mass)).collect();
        assert_eq!(masses, vec![("age=old,smoking=never".into(), 2.0 / 3.0), ("age=young,smoking=current".into(), 1.0 / 3.0)]);
        let c = &got.data.subjects[2];
        assert_eq!(c.visits.iter().map(|v| v.t).collect::<Vec<_>>(), vec![0.0, 2.0]);
        assert_eq!(got.warnings.len(), 1);
    }

    #[test]
    fn schema_violation_and_orphans() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "subjects.csv", &SUBJECTS.replace("c,1,1,old,never", "c,1,1,old,sometimes"));
        write(dir.path(), "longitudinal.csv", "subject_id,t,m_obs_raw\n");
        match ingest(&config(dir.path(), "")) {
            Err(Error::SchemaViolation { row, column, .. }) => assert_eq!((row, column.as_str()), (4, "smoking")),
            other => panic!("{other:?}"),
        }
        write(dir.path(), "subjects.csv", SUBJECTS);
        write(dir.path(), "longitudinal.csv", "subject_id,t,m_obs_raw\na,0,30\nzz,0,25\n");
        match ingest(&config(dir.path(), "")) {
            Err(Error::OrphanRecord { row, subject_id }) => assert_eq!((row, subject_id.as_str()), (3, "zz")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_covariates_exclude_subjects() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "subjects.csv", &SUBJECTS.replace("b,0,0,young,current", "b,0,0,,current"));
        write(dir.path(), "longitudinal.csv", "subject_id,t,m_obs_raw\na,0,30\nb,0,25\n");
        let got = ingest(&config(dir.path(), "")).unwrap();
        assert_eq!(got.data.len(), 2);
        assert_eq!(got.excluded, vec!["b".to_string()]);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = TempDir::new().unwrap();
        let text = r#"{"t_maxx": 15}"#;
        assert!(matches!(RunConfig::from_json(text, dir.path()), Err(Error::Json(_))));
        let c = config(dir.path(), r#", "t_max": 15, "rho_policy": "min""#);
        assert_eq!(c.rho_policy, RhoPolicy::Min);
        assert_eq!(c.structure().w_dim, 3);
    }

    #[test]
    fn reingesting_written_cohort_is_identical() {
        let dir = TempDir::new().unwrap();
        write(dir.path(), "subjects.csv", SUBJECTS);
        write(dir.path(), "longitudinal.csv", "subject_id,t,m_obs_raw\na,0,30.1\na,1,29.37\nb,0,25.000000001\nc,0,27.5\nc,2,20.3\n");
        let cfg = config(dir.path(), "");
        let first = ingest(&cfg).unwrap();
        let out = TempDir::new().unwrap();
        write_cohort(&cfg, &first.data, &out.path().join("subjects.csv"), &out.path().join("longitudinal.csv")).unwrap();
        let cfg2 = config(out.path(), "");
        let second = ingest(&cfg2).unwrap();
        assert_eq!(first.data, second.data);
        assert_eq!(first.weights, second.weights);
    }

    #[test]
    fn raw_inverse_is_exact() {
        let s = Standardization::default();
        for k in 0..2000 {
            let m = s.standardize(25.0 + (k as f64 * 0.7331).sin() * 15.0 + 1e-3 * k as f64);
            assert_eq!(s.standardize(s.raw(m)), m);
        }
    }

    #[test]
    fn draws_and_truth_round_trip() {
        use crate::inference::sampler::tests::{simulated, structure};
        use crate::inference::{run_confounder_mcmc, run_mcmc};
        use crate::oracle::{example_params, simulate_truth};
        let data = simulated(&example_params(), 12, 3);
        let s = McmcSettings {
            chains: 2,
            burn_in: 20,
            samples: 15,
            seed: 1,
            ..McmcSettings::default()
        };
        let d = run_mcmc(&data, &structure(), &PriorSpec::default(), &s).unwrap();
        let conf = run_confounder_mcmc(&data.confounder_records(), 1, &PriorSpec::default(), &s).unwrap();
        let dir = TempDir::new().unwrap();
        write_draws(&dir.path().join("d.jsonl"), &d).unwrap();
        assert_eq!(read_draws(&dir.path().join("d.jsonl")).unwrap(), d);
        write_confounder_draws(&dir.path().join("c.jsonl"), &conf).unwrap();
        assert_eq!(read_confounder_draws(&dir.path().join("c.jsonl")).unwrap(), conf);
        let weights = StratumWeights::single(vec![1.0]);
        let cfg = ScmConfig::with_rho(example_params(), weights, 0.2, 5, CensoringLaw::default(), VisitSchedule::annual(3, 0.0)).unwrap();
        let truths = simulate_truth(&cfg, 2).unwrap();
        write_truth(&dir.path().join("t.jsonl"), &cfg, &truths).unwrap();
        assert_eq!(read_truth(&dir.path().join("t.jsonl")).unwrap(), (cfg, truths));
    }
}
