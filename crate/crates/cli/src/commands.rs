use std::path::{Path, PathBuf};

use nwflow::experiments;
use nwflow::format::{default_columns, matrix_csv};
use nwflow::metrics::neff_profile;
use nwflow::ode::generate_with_meta;
use nwflow::tasks::{self, encode_binary_table, load_feature_table, FeatureTable, TaskSpec, WhitenConfig};
use nwflow::{BaseLaw, FlowTime, PathSchedule, PluginField, SupportSet};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{
    flag_integrator, load_file_config, resolve, CliConfig, CliError, CliResult, Command, FileConfig, Flags, OutFormat,
    DEFAULT_QUERIES,
};
use crate::config::{env_seed, Cli};

pub const DEFAULT_T_GRID: [f64; 13] = [0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.56, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Returns whether every checked criterion passed.
pub fn run(cli: Cli) -> CliResult<bool> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let file = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(flags) => generate(&resolve("generate", &flags, &file)?).map(|_| true),
        Command::DiagNeff(flags) => diag_neff(&resolve("diag-neff", &flags, &file)?).map(|_| true),
        Command::Whiten(flags) => whiten(&resolve("whiten", &flags, &file)?).map(|_| true),
        Command::Ingest(flags) => ingest(&resolve("ingest", &flags, &file)?).map(|_| true),
        Command::Experiment { name, flags } => experiment(&name, &flags, &file),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(nwflow::Error::from)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_table(dir: &Path, stem: &str, columns: &[String], rows: &SupportSet, fmt: OutFormat) -> CliResult<PathBuf> {
    let (path, bytes) = match fmt {
        OutFormat::Csv => (dir.join(format!("{stem}.csv")), matrix_csv(columns, rows)?),
        OutFormat::Bin => (dir.join(format!("{stem}.bin")), encode_binary_table(rows)?),
    };
    std::fs::write(&path, bytes)?;
    Ok(path)
}

fn out_dir(cfg: &CliConfig) -> CliResult<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn task_spec(cfg: &CliConfig) -> CliResult<TaskSpec> {
    match (&cfg.task, &cfg.features) {
        (Some(t), _) => Ok(t.clone()),
        (None, Some(p)) => Ok(TaskSpec::External { table_ref: p.clone() }),
        (None, None) => Err(CliError::Config(format!("{} needs --task or --features", cfg.subcommand))),
    }
}

fn features_table(cfg: &CliConfig) -> CliResult<FeatureTable> {
    let Some(p) = &cfg.features else {
        return Err(CliError::Config(format!("{} needs --features", cfg.subcommand)));
    };
    Ok(load_feature_table(Path::new(p), None)?)
}

fn generate(cfg: &CliConfig) -> CliResult<()> {
    let task = task_spec(cfg)?.instantiate()?;
    let support = tasks::draw_support(&task, cfg.m, cfg.seed)?;
    let sched = PathSchedule::new(cfg.sigma_min)?;
    let field = PluginField::new(support.clone(), sched);
    let batch = generate_with_meta(
        &field,
        cfg.n,
        cfg.seed,
        &cfg.integrator,
        &BaseLaw::Isotropic,
        Some(cfg.sigma_min),
        Some(&support),
    )?;
    let dir = out_dir(cfg)?;
    let cols = default_columns("x", support.d());
    write_table(&dir, "support", &cols, &support, cfg.format)?;
    write_table(&dir, "samples", &cols, &batch.samples, cfg.format)?;
    write_json(
        &dir.join("generate.json"),
        &json!({ "config": cfg, "meta": batch.meta, "version": nwflow::VERSION }),
    )
}

fn diag_neff(cfg: &CliConfig) -> CliResult<()> {
    let task = task_spec(cfg)?.instantiate()?;
    let support = tasks::draw_support(&task, cfg.m, cfg.seed)?;
    let sched = PathSchedule::new(cfg.sigma_min)?;
    let grid: Vec<FlowTime> = cfg
        .t_grid
        .clone()
        .unwrap_or_else(|| DEFAULT_T_GRID.to_vec())
        .into_iter()
        .map(FlowTime::new)
        .collect::<nwflow::Result<_>>()?;
    let queries = cfg.queries.unwrap_or(DEFAULT_QUERIES);
    let stats = neff_profile(&support, &sched, &grid, queries, cfg.seed)?;
    let rows: Vec<Vec<f64>> = stats.iter().map(|s| vec![s.t, s.h, s.median, s.q25, s.q75]).collect();
    let table = SupportSet::from_rows(&rows)?;
    let cols: Vec<String> = ["t", "h_t", "median_neff", "q25", "q75"].iter().map(|s| s.to_string()).collect();
    let dir = out_dir(cfg)?;
    std::fs::write(dir.join("neff.csv"), matrix_csv(&cols, &table)?)?;
    write_json(&dir.join("diag-neff.json"), &json!({ "config": cfg, "version": nwflow::VERSION }))
}

fn whiten(cfg: &CliConfig) -> CliResult<()> {
    let table = features_table(cfg)?;
    let wc = WhitenConfig::new(cfg.strength.unwrap_or(1.0), cfg.regularization.unwrap_or(0.0))?;
    let (out, record) = tasks::whiten(&table, wc)?;
    let dir = out_dir(cfg)?;
    write_table(&dir, "whitened", &out.columns, &out.rows, cfg.format)?;
    write_json(
        &dir.join("whiten.json"),
        &json!({ "config": cfg, "record": record, "version": nwflow::VERSION }),
    )
}

fn ingest(cfg: &CliConfig) -> CliResult<()> {
    let table = features_table(cfg)?;
    let dir = out_dir(cfg)?;
    write_table(&dir, "table", &table.columns, &table.rows, cfg.format)?;
    write_json(
        &dir.join("ingest.json"),
        &json!({
            "config": cfg,
            "rows": table.rows.m(),
            "dim": table.rows.d(),
            "columns": table.columns,
            "version": nwflow::VERSION,
        }),
    )
}

/// Maps generic flags (or top-level config-file fields) onto experiment keys.
fn experiment_patch(defaults: &Value, src: &Flags, file_task: Option<&TaskSpec>, integrator: Option<nwflow::IntegratorConfig>, seed: Option<u64>) -> CliResult<Map<String, Value>> {
    let has = |k: &str| defaults.get(k).is_some();
    let mut patch = Map::new();
    let mut put = |flag: &str, key: &str, v: Value| -> CliResult<()> {
        if !has(key) {
            return Err(CliError::Config(format!("{flag} does not apply to this experiment")));
        }
        patch.insert(key.to_string(), v);
        Ok(())
    };
    if let Some(s) = seed {
        if has("seed") {
            put("--seed", "seed", json!(s))?;
        } else {
            let len = defaults.get("seeds").and_then(Value::as_array).map_or(1, |a| a.len().max(1)) as u64;
            put("--seed", "seeds", json!((s..s + len).collect::<Vec<u64>>()))?;
        }
    }
    if let Some(v) = &src.seeds {
        put("--seeds", "seeds", json!(v))?;
    }
    if let Some(v) = src.m {
        put("--m", "m", json!(v))?;
    }
    if let Some(v) = src.n {
        put("--n", "n", json!(v))?;
    }
    if let Some(v) = src.d {
        put("--d", "d", json!(v))?;
    }
    if let Some(v) = src.sigma_min {
        put("--sigma-min", "sigma_min", json!(v))?;
    }
    if let Some(v) = src.configs {
        put("--configs", "n_configs", json!(v))?;
    }
    if let Some(v) = &src.family {
        put("--family", "family", json!(v))?;
    }
    if let Some(v) = src.queries {
        put("--queries", "n_queries", json!(v))?;
    }
    if let Some(v) = src.regularization {
        put("--regularization", "regularization", json!(v))?;
    }
    if let Some(name) = &src.task {
        let spec = TaskSpec::preset(name, src.d, 0)?;
        put("--task", "task", serde_json::to_value(spec).map_err(nwflow::Error::from)?)?;
    } else if let Some(spec) = file_task {
        put("task", "task", serde_json::to_value(spec).map_err(nwflow::Error::from)?)?;
    }
    if let Some(p) = &src.features {
        put("--features", "table", json!(p.display().to_string()))?;
    }
    if let Some(ic) = integrator {
        put("--euler/--rk45", "integrator", serde_json::to_value(ic).map_err(nwflow::Error::from)?)?;
    }
    if src.t_grid.is_some() || src.strength.is_some() || src.format.is_some() {
        return Err(CliError::Config("--t-grid, --strength and --format do not apply to experiments".into()));
    }
    Ok(patch)
}

fn file_as_flags(file: &FileConfig) -> Flags {
    Flags {
        features: file.features.clone(),
        m: file.m,
        n: file.n,
        d: file.d,
        seeds: file.seeds.clone(),
        sigma_min: file.sigma_min,
        t_grid: file.t_grid.clone(),
        queries: file.queries,
        strength: file.strength,
        regularization: file.regularization,
        format: file.format,
        ..Flags::default()
    }
}

fn experiment(name: &str, flags: &Flags, file: &FileConfig) -> CliResult<bool> {
    let defaults = experiments::default_config(name)?;
    // lowest to highest: environment seed, config-file fields, config-file
    // experiment block, flags
    let mut patch = Map::new();
    if flags.seed.is_none() && file.seed.is_none() && flags.seeds.is_none() && file.seeds.is_none() {
        patch.extend(experiment_patch(&defaults, &Flags::default(), None, None, env_seed()?)?);
    }
    patch.extend(experiment_patch(&defaults, &file_as_flags(file), file.task.as_ref(), file.integrator, file.seed)?);
    if let Some(block) = &file.experiment {
        let Value::Object(obj) = block else {
            return Err(CliError::Config("\"experiment\" must be a JSON object".into()));
        };
        patch.extend(obj.clone());
    }
    patch.extend(experiment_patch(&defaults, flags, None, flag_integrator(flags), flags.seed)?);
    let report = experiments::run_experiment(name, &Value::Object(patch))?;
    let dir = flags.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("nwflow-out"));
    report.write_to_dir(&dir)?;
    for c in &report.criteria {
        eprintln!("{} {} = {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.requirement);
    }
    eprintln!("wall-clock: {:.3}s", report.wall_clock.as_secs_f64());
    Ok(report.pass.unwrap_or(true))
}
