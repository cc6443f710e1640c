//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mediate_core::effects::{self, McSettings, RhoPolicy};
use mediate_core::inference::{
    check_monotonicity as monotonicity_report, gelman_rubin, pointwise_loglik, posterior_bounds, posterior_effects_multi, run_confounder_mcmc,
    run_mcmc, confounder_rhat, ConfounderDraws, PosteriorEffectsSettings,
};
use mediate_core::io::{self, Ingested, RunConfig};
use mediate_core::oracle::{emit_observational, oracle_effects, simulate_truth};
use mediate_core::survival::km_restricted_auc;
use mediate_core::Error;
use serde_json::{json, Value};

use crate::manifest::Manifest;
use crate::Failure;

const GRID_POINTS: usize = 101;

fn load(config: &Path) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(config)?)
}

fn ingest_all(cfg: &RunConfig, manifest: &mut Manifest) -> Result<Ingested, Failure> {
    let ing = io::ingest(cfg)?;
    manifest.input(&cfg.resolve(&cfg.subjects_file))?;
    manifest.input(&cfg.resolve(&cfg.longitudinal_file))?;
    Ok(ing)
}

fn write_json(path: &Path, v: &Value, manifest: &mut Manifest) -> Result<(), Failure> {
    io::write_report(path, v)?;
    manifest.output(path)?;
    Ok(())
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, Failure> {
    serde_json::to_value(v).map_err(|e| Failure::Core(Error::Json(e)))
}

fn without(mut v: Value, key: &str) -> Value {
    if let Value::Object(m) = &mut v {
        m.remove(key);
    }
    v
}

pub fn simulate(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load(config)?;
    let scm = cfg.scm_config()?;
    let sim = cfg.simulation.as_ref().expect("checked by scm_config");
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::new("simulate", config, cfg.seed)?;
    let truths = simulate_truth(&scm, cfg.seed)?;
    let data = emit_observational(&scm, &truths, cfg.seed)?;
    let (subjects, longitudinal) = (out.join("subjects.csv"), out.join("longitudinal.csv"));
    io::write_cohort(&cfg, &data, &subjects, &longitudinal)?;
    manifest.output(&subjects)?;
    manifest.output(&longitudinal)?;
    let mut run_cfg = cfg.clone();
    run_cfg.subjects_file = "subjects.csv".into();
    run_cfg.longitudinal_file = "longitudinal.csv".into();
    let run_path = out.join("run_config.json");
    let mut text = serde_json::to_string_pretty(&run_cfg).map_err(Error::Json)?;
    text.push('\n');
    std::fs::write(&run_path, text)?;
    manifest.output(&run_path)?;
    let truth_path = out.join("truth.jsonl");
    io::write_truth(&truth_path, &scm, &truths)?;
    manifest.output(&truth_path)?;
    let oracle = oracle_effects(&truths)?;
    let mc = McSettings {
        draws: cfg.mc_draws,
        seed: cfg.seed,
    };
    let model = effects::decompose(&scm.params, &scm.weights, &RhoPolicy::Global(sim.rho), &cfg.references, &mc, cfg.infeasible_policy)?;
    write_json(
        &out.join("oracle_effects.json"),
        &json!({
            "subjects": data.len(),
            "rho": sim.rho,
            "references": cfg.references,
            "oracle": oracle,
            "model": model,
        }),
        &mut manifest,
    )?;
    manifest.write(out)?;
    Ok(())
}

pub fn fit(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load(config)?;
    let mut manifest = Manifest::new("fit", config, cfg.seed)?;
    let ing = ingest_all(&cfg, &mut manifest)?;
    if ing.data.is_empty() {
        return Err(Failure::Core(Error::InvalidInput("the dataset is empty".into())));
    }
    std::fs::create_dir_all(out)?;
    let structure = cfg.structure();
    let mut settings = cfg.mcmc.clone();
    settings.seed = cfg.seed;
    let draws = run_mcmc(&ing.data, &structure, &cfg.priors, &settings)?;
    let mut conf_settings = cfg.confounder_settings();
    conf_settings.seed = cfg.seed;
    let conf = run_confounder_mcmc(&ing.data.confounder_records(), structure.w_dim, &cfg.priors, &conf_settings)?;
    let draws_path = out.join("draws.jsonl");
    io::write_draws(&draws_path, &draws)?;
    manifest.output(&draws_path)?;
    let conf_path = out.join("confounder_draws.jsonl");
    io::write_confounder_draws(&conf_path, &conf)?;
    manifest.output(&conf_path)?;
    let mut warnings = ing.warnings.clone();
    warnings.extend(draws.warnings.iter().cloned());
    warnings.extend(conf.warnings.iter().cloned());
    let report = gelman_rubin(&draws);
    let conf_report = confounder_rhat(&conf);
    let max_rhat = match (&report, &conf_report) {
        (Ok(j), Ok(c)) => Some(j.max_free.max(c.max_free)),
        _ => None,
    };
    for e in [report.as_ref().err(), conf_report.as_ref().err()].into_iter().flatten() {
        warnings.push(format!("rhat unavailable: {e}"));
    }
    write_json(
        &out.join("rhat.json"),
        &json!({
            "joint": report.as_ref().ok(),
            "confounder": conf_report.as_ref().ok(),
            "gate": cfg.rhat_gate,
        }),
        &mut manifest,
    )?;
    if settings.store_random_effects {
        let ll = pointwise_loglik(&draws, &ing.data)?;
        let p = out.join("pointwise_loglik.csv");
        io::write_pointwise(&p, &draws, &ing.data, &ll)?;
        manifest.output(&p)?;
    } else {
        warnings.push("random effects were not stored; pointwise export skipped".into());
    }
    let converged = !draws.adaptation_failed() && conf.warnings.is_empty() && max_rhat.is_some_and(|r| r <= cfg.rhat_gate);
    write_json(
        &out.join("fit_report.json"),
        &json!({
            "subjects": ing.data.len(),
            "excluded": ing.excluded,
            "draws_per_chain": draws.draws_per_chain(),
            "chains": draws.chains.len(),
            "acceptance": draws.chains.iter().map(|c| &c.acceptance).collect::<Vec<_>>(),
            "confounder_acceptance": conf.acceptance,
            "max_rhat": max_rhat,
            "rhat_gate": cfg.rhat_gate,
            "adaptation_failed": draws.adaptation_failed(),
            "converged": converged,
            "warnings": warnings,
        }),
        &mut manifest,
    )?;
    manifest.write(out)?;
    if !converged {
        return Err(Failure::NotConverged(format!(
            "max R-hat {} exceeds {} or adaptation failed; outputs written to {}",
            max_rhat.map_or("unavailable".into(), |r| format!("{r:.4}")),
            cfg.rhat_gate,
            out.display()
        )));
    }
    Ok(())
}

struct Posterior {
    cfg: RunConfig,
    ing: Ingested,
    draws: mediate_core::inference::PosteriorDraws,
    conf: ConfounderDraws,
    manifest: Manifest,
    out: PathBuf,
}

fn load_posterior(command: &str, config: &Path, dir: &Path, out: Option<&Path>) -> Result<Posterior, Failure> {
    let cfg = load(config)?;
    let mut manifest = Manifest::new(command, config, cfg.seed)?;
    let ing = ingest_all(&cfg, &mut manifest)?;
    let (dp, cp) = (dir.join("draws.jsonl"), dir.join("confounder_draws.jsonl"));
    let draws = io::read_draws(&dp)?;
    let conf = io::read_confounder_draws(&cp)?;
    manifest.input(&dp)?;
    manifest.input(&cp)?;
    if draws.structure != cfg.structure() || conf.w_dim != cfg.structure().w_dim {
        return Err(Failure::Usage("draws were produced under a different model structure".into()));
    }
    if ing.weights.strata.is_empty() {
        return Err(Failure::Core(Error::InvalidInput("the dataset is empty".into())));
    }
    let out = out.unwrap_or(dir).to_path_buf();
    std::fs::create_dir_all(&out)?;
    Ok(Posterior {
        cfg,
        ing,
        draws,
        conf,
        manifest,
        out,
    })
}

fn parse_rho(arg: Option<&str>, cfg: &RunConfig) -> Result<Vec<RhoPolicy>, Failure> {
    let Some(a) = arg else {
        return Ok(vec![cfg.rho_policy.clone()]);
    };
    match a {
        "min" => Ok(vec![RhoPolicy::Min]),
        "max" => Ok(vec![RhoPolicy::Max]),
        "grid" => {
            let mut v: Vec<RhoPolicy> = (0..GRID_POINTS).map(|k| RhoPolicy::Global(k as f64 / (GRID_POINTS - 1) as f64)).collect();
            v.push(RhoPolicy::Min);
            v.push(RhoPolicy::Max);
            Ok(v)
        }
        _ => {
            if let Ok(r) = a.parse::<f64>() {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Failure::Usage("rho must lie in [0, 1]".into()));
                }
                return Ok(vec![RhoPolicy::Global(r)]);
            }
            let text = std::fs::read_to_string(a).map_err(|e| Failure::Usage(format!("`{a}` is neither a rho keyword, a number nor a readable file: {e}")))?;
            let map: BTreeMap<String, f64> = serde_json::from_str(&text).map_err(Error::Json)?;
            if map.values().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Failure::Usage("per-stratum rho values must lie in [0, 1]".into()));
            }
            Ok(vec![RhoPolicy::PerStratum(map)])
        }
    }
}

const COMPONENTS: [&str; 8] = ["de", "ie", "te", "de_r", "ie_r", "delta_de", "delta_ie", "delta"];

pub fn effects(config: &Path, dir: &Path, rho: Option<&str>, out: Option<&Path>) -> Result<(), Failure> {
    let mut p = load_posterior("effects", config, dir, out)?;
    let policies = parse_rho(rho, &p.cfg)?;
    let settings = PosteriorEffectsSettings {
        rho_policy: policies[0].clone(),
        infeasible: p.cfg.infeasible_policy,
        mc: McSettings {
            draws: p.cfg.mc_draws,
            seed: p.cfg.seed,
        },
        stride: p.cfg.effects_stride,
    };
    let results = posterior_effects_multi(&p.draws, &p.conf, &p.ing.weights, &p.cfg.references, &policies, &settings)?;
    let csv_path = p.out.join("effects.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(Error::Csv)?;
    w.write_record(["rho_policy", "component", "mean", "sd", "q025", "q975", "draws_used", "draws_skipped"])
        .map_err(Error::Csv)?;
    for r in &results {
        let s = to_value(&r.summary)?;
        for c in COMPONENTS {
            let x = &s[c];
            w.write_record([
                r.rho_policy.clone(),
                c.to_string(),
                x["mean"].to_string(),
                x["sd"].to_string(),
                x["q025"].to_string(),
                x["q975"].to_string(),
                r.draws_used.to_string(),
                r.draws_skipped.to_string(),
            ])
            .map_err(Error::Csv)?;
        }
    }
    w.flush()?;
    drop(w);
    p.manifest.output(&csv_path)?;
    let checks = results.iter().all(|r| r.checks_passed);
    let results_json: Vec<Value> = results.iter().map(|r| to_value(r).map(|v| without(v, "per_draw"))).collect::<Result<_, _>>()?;
    write_json(
        &p.out.join("effects.json"),
        &json!({
            "references": p.cfg.references,
            "rho_policies": policies,
            "infeasible_policy": p.cfg.infeasible_policy,
            "mc_draws": p.cfg.mc_draws,
            "stride": p.cfg.effects_stride,
            "strata": p.ing.weights,
            "self_checks_passed": checks,
            "results": results_json,
        }),
        &mut p.manifest,
    )?;
    p.manifest.write(&p.out)?;
    Ok(())
}

pub fn bounds(config: &Path, dir: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let mut p = load_posterior("bounds", config, dir, out)?;
    let mc = McSettings {
        draws: p.cfg.mc_draws,
        seed: p.cfg.seed,
    };
    let b = posterior_bounds(&p.draws, &p.conf, &p.ing.weights, &p.cfg.references, &mc, p.cfg.effects_stride)?;
    let mut v = without(to_value(&b)?, "per_draw");
    v["self_checks_passed"] = json!(b.nested);
    v["strata"] = to_value(&p.ing.weights)?;
    write_json(&p.out.join("bounds.json"), &v, &mut p.manifest)?;
    p.manifest.write(&p.out)?;
    Ok(())
}

pub fn check_monotonicity(config: &Path, dir: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let mut p = load_posterior("check-monotonicity", config, dir, out)?;
    let rep = monotonicity_report(&p.conf, &p.ing.weights)?;
    let csv_path = p.out.join("monotonicity.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(Error::Csv)?;
    w.write_record(["stratum", "draws", "failing", "proportion", "p_min_mean", "p_min_q025", "p_min_q975", "p_max_mean", "p_max_q025", "p_max_q975"])
        .map_err(Error::Csv)?;
    let f = |s: &Option<mediate_core::stats::Summary>| -> [String; 3] {
        s.map_or([String::new(), String::new(), String::new()], |s| [s.mean.to_string(), s.q025.to_string(), s.q975.to_string()])
    };
    for s in &rep.strata {
        let mut row = vec![s.label.clone(), s.draws.to_string(), s.failing.to_string(), s.proportion.to_string()];
        row.extend(f(&s.p_min));
        row.extend(f(&s.p_max));
        w.write_record(&row).map_err(Error::Csv)?;
    }
    w.flush()?;
    drop(w);
    p.manifest.output(&csv_path)?;
    let mut v = to_value(&rep)?;
    v["self_checks_passed"] = json!(rep.strata.iter().all(|s| s.ordered));
    write_json(&p.out.join("monotonicity.json"), &v, &mut p.manifest)?;
    p.manifest.write(&p.out)?;
    Ok(())
}

pub fn km(config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(config)?;
    let mut manifest = Manifest::new("km", config, cfg.seed)?;
    let ing = ingest_all(&cfg, &mut manifest)?;
    let treated = km_restricted_auc(&ing.data.outcomes(1), cfg.t_max)?;
    let control = km_restricted_auc(&ing.data.outcomes(0), cfg.t_max)?;
    let report = json!({
        "t_max": cfg.t_max,
        "treated": treated,
        "control": control,
        "te": treated.estimate - control.estimate,
        "te_se": (treated.se * treated.se + control.se * control.se).sqrt(),
        "excluded": ing.excluded,
    });
    println!("{}", serde_json::to_string(&report).map_err(Error::Json)?);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("km.json"), &report, &mut manifest)?;
        manifest.write(dir)?;
    }
    Ok(())
}
