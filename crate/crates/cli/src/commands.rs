use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use netlmm::covstruct::VMode;
use netlmm::estim::{fit_em, fit_ols, read_fit, write_fit, EmOptions, FitResult};
use netlmm::infer::{
    cell_tests, edge_tests, rejection_sweep, write_cell_matrix, write_cell_tests, write_edge_tests,
    write_sweep, CellQuantity, Correction, Reference, TestOptions,
};
use netlmm::netdata::io::{load_population, read_exclusions, write_partition, write_population, LoadOptions};
use netlmm::netdata::{MeanModel, ModelData, NetworkPopulation, NodeSet};
use netlmm::refine::{
    edge_effect_field, refine_kmeans, refine_likelihood, split_community, KMeansOptions, LikelihoodOptions,
    RefineMethod, RefinementResult,
};
use netlmm::simlab::{
    estimator_study, fixture_spec, generate, generate_data, null_fixture_spec, null_split_study, read_spec,
    spec_from_fit, write_null_study, write_spec, write_study, GenerativeSpec, StudyEstimator,
};
use netlmm::{Error, Result};
use serde::Serialize;

use crate::config::{ConfigFile, FitOpts, InputOpts, StudyOpts, TestOpts};

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse<T: FromStr<Err = Error>>(value: Option<&String>, default: &str) -> Result<T> {
    value.map_or(default, String::as_str).parse()
}

fn write_toml(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Numerical(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Resolved options of one run plus what is needed to write `run.toml`.
pub struct Run {
    pub command: &'static str,
    pub config: ConfigFile,
    pub threads: usize,
    started: Instant,
}

impl Run {
    pub fn new(command: &'static str, config: ConfigFile, threads: usize) -> Self {
        Self {
            command,
            config,
            threads,
            started: Instant::now(),
        }
    }

    /// Echo the resolved configuration into `dir/run.toml`.
    pub fn finish(&self, dir: &Path, status: &str, extra: &[(&str, String)]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut run = toml::Table::new();
        run.insert("command".into(), self.command.into());
        run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        run.insert("threads".into(), (self.threads as i64).into());
        run.insert("wall_seconds".into(), self.started.elapsed().as_secs_f64().into());
        run.insert("status".into(), status.into());
        for (k, v) in extra {
            run.insert((*k).into(), v.clone().into());
        }
        let mut config = self.config.clone();
        config.run = Some(run);
        write_toml(&dir.join("run.toml"), &config)
    }
}

fn load(input: &InputOpts, manifest: Option<&Path>) -> Result<NetworkPopulation> {
    let manifest = manifest
        .or(input.manifest.as_deref())
        .ok_or_else(|| invalid("--manifest is required"))?;
    let partition = input.partition.as_ref().ok_or_else(|| invalid("--partition is required"))?;
    let opts = LoadOptions {
        exclude_nodes: match &input.exclude_nodes {
            Some(p) => read_exclusions(p)?,
            None => Vec::new(),
        },
        exclude_communities: input.exclude_communities.clone().unwrap_or_default(),
        fisher: input.fisher.unwrap_or(false),
    };
    load_population(manifest, partition, &opts)
}

fn mean_model(fit: &FitOpts) -> Result<MeanModel> {
    match fit.mean_model.as_deref().unwrap_or("edge") {
        "edge" => Ok(MeanModel::EdgeEffects),
        "cell" => Ok(MeanModel::CellEffects),
        other => Err(invalid(format!("unknown mean model '{other}' (edge or cell)"))),
    }
}

fn em_options(fit: &FitOpts) -> EmOptions {
    let d = EmOptions::default();
    EmOptions {
        tol: fit.tol.unwrap_or(d.tol),
        rel_tol: fit.rel_tol.unwrap_or(d.rel_tol),
        max_iter: fit.max_iter.unwrap_or(d.max_iter),
        block_floor: fit.block_floor.unwrap_or(d.block_floor),
        ..d
    }
}

fn run_fit(data: &ModelData, opts: &FitOpts) -> Result<FitResult> {
    match opts.estimator.as_deref().unwrap_or("gls-em") {
        "ols" => fit_ols(data),
        "gls-em" | "em" => fit_em(data, parse(opts.v_mode.as_ref(), "diag")?, &em_options(opts)),
        other => Err(invalid(format!("unknown estimator '{other}' (ols or gls-em)"))),
    }
}

fn non_convergence(fit: &FitResult) -> Error {
    let t = &fit.loglik_trace;
    let gap = if t.len() >= 2 { (t[t.len() - 1] - t[t.len() - 2]).abs() } else { f64::NAN };
    Error::NonConvergence {
        iterations: fit.iterations,
        gap,
    }
}

/// Index of a covariate given by name or position.
fn covariate_index(names: &[String], spec: Option<&String>, default: usize) -> Result<usize> {
    let Some(s) = spec else {
        return if default < names.len() {
            Ok(default)
        } else {
            Err(invalid("the data have no covariate besides the intercept"))
        };
    };
    if let Some(j) = names.iter().position(|n| n == s) {
        return Ok(j);
    }
    match s.parse::<usize>() {
        Ok(j) if j < names.len() => Ok(j),
        _ => Err(invalid(format!("unknown covariate '{s}' (have {})", names.join(", ")))),
    }
}

fn default_covariate(names: &[String]) -> usize {
    usize::from(names.len() > 1)
}

pub fn validate(input: &InputOpts) -> Result<()> {
    let pop = load(input, None)?;
    let data = ModelData::from_population(&pop, MeanModel::EdgeEffects)?;
    let part = pop.partition();
    println!("nodes        {}", pop.nodes().len());
    println!("communities  {}", part.n_communities());
    println!("cells        {}", part.n_cells());
    println!("edges        {}", part.n_edges());
    println!("subjects     {}", pop.n_subjects());
    println!("covariates   {}", pop.covariate_names().join(", "));
    // The OLS fit checks that every cell's design has full rank.
    fit_ols(&data)?;
    println!("ok");
    Ok(())
}

pub fn fit(run: &Run, out: &Path) -> Result<()> {
    let input = run.config.input.clone().unwrap_or_default();
    let opts = run.config.fit.clone().unwrap_or_default();
    let pop = load(&input, None)?;
    let data = ModelData::from_population(&pop, mean_model(&opts)?)?;
    let fit = run_fit(&data, &opts)?;
    write_fit(out, &fit, pop.nodes())?;
    let status = if fit.converged { "ok" } else { "not converged" };
    run.finish(out, status, &[])?;
    println!(
        "{} fit: {} cells, {} edges, {} subjects, {} iterations{}",
        fit.estimator,
        fit.partition.n_cells(),
        fit.partition.n_edges(),
        fit.n_subjects(),
        fit.iterations,
        fit.loglik().map_or(String::new(), |l| format!(", log-likelihood {l:.6}"))
    );
    if !fit.converged {
        return Err(non_convergence(&fit));
    }
    Ok(())
}

#[derive(Serialize)]
struct TestSummary {
    covariate: String,
    correction: String,
    level: f64,
    reference: String,
    cells: usize,
    cells_rejected: usize,
    edges: usize,
    edges_rejected: usize,
}

const SWEEP_LEVELS: [f64; 8] = [0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2];

fn write_tests(fit: &FitResult, nodes: &NodeSet, opts: &TestOpts, dir: &Path) -> Result<TestSummary> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let j = covariate_index(&fit.covariate_names, opts.covariate.as_ref(), default_covariate(&fit.covariate_names))?;
    let topts = TestOptions {
        method: parse::<Correction>(opts.correction.as_ref(), "bh")?,
        level: opts.level.unwrap_or(0.05),
        reference: parse::<Reference>(opts.reference.as_ref(), "normal")?,
    };
    let part = &fit.partition;
    let cells = cell_tests(fit, j, &topts)?;
    let edges = edge_tests(fit, j, &topts)?;
    write_cell_tests(dir.join("cell_tests.csv"), &cells, part)?;
    write_edge_tests(dir.join("edge_tests.csv"), &edges, part, nodes)?;
    write_cell_matrix(dir.join("cell_estimate.csv"), &cells, part, CellQuantity::Estimate)?;
    write_cell_matrix(dir.join("cell_p.csv"), &cells, part, CellQuantity::PRaw)?;
    write_cell_matrix(dir.join("cell_significant.csv"), &cells, part, CellQuantity::Significant)?;
    let levels = opts.sweep_levels.clone().unwrap_or_else(|| SWEEP_LEVELS.to_vec());
    let sweep = rejection_sweep(&cells.p_raw(), &Correction::ALL, &levels)?;
    write_sweep(dir.join("rejection_sweep.csv"), &sweep)?;
    let summary = TestSummary {
        covariate: cells.covariate_name.clone(),
        correction: topts.method.to_string(),
        level: topts.level,
        reference: topts.reference.to_string(),
        cells: cells.rows.len(),
        cells_rejected: cells.n_rejected(),
        edges: edges.rows.len(),
        edges_rejected: edges.n_rejected(),
    };
    write_toml(&dir.join("test_summary.toml"), &summary)?;
    Ok(summary)
}

pub fn test(run: &Run, fit_dir: &Path, out: &Path) -> Result<()> {
    let opts = run.config.test.clone().unwrap_or_default();
    let (fit, nodes) = read_fit(fit_dir)?;
    let s = write_tests(&fit, &nodes, &opts, out)?;
    run.finish(out, "ok", &[("fit", fit_dir.display().to_string())])?;
    println!(
        "{}: {}/{} cells and {}/{} edges rejected ({} at {})",
        s.covariate, s.cells_rejected, s.cells, s.edges_rejected, s.edges, s.correction, s.level
    );
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn write_trace(path: &Path, res: &RefinementResult) -> Result<()> {
    let mut text = String::from("iteration,objective\n");
    for (i, v) in res.trace.iter().enumerate() {
        text.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn refine(run: &Run, out: &Path) -> Result<()> {
    let input = run.config.input.clone().unwrap_or_default();
    let fopts = run.config.fit.clone().unwrap_or_default();
    let ropts = run.config.refine.clone().unwrap_or_default();
    let topts = run.config.test.clone().unwrap_or_default();

    let refine_on: PathBuf = ropts
        .refine_on
        .clone()
        .or_else(|| input.manifest.clone())
        .ok_or_else(|| invalid("--manifest or --refine-on is required"))?;
    if let Some(b) = &ropts.test_on {
        if same_file(&refine_on, b) && !ropts.allow_double_dip.unwrap_or(false) {
            return Err(invalid(
                "refining and testing on the same data biases the tests; \
                 pass an independent --test-on dataset or --allow-double-dip",
            ));
        }
    }

    let pop = load(&input, Some(&refine_on))?;
    let data = ModelData::from_population(&pop, MeanModel::EdgeEffects)?;
    let names = pop.covariate_names();
    let cov = covariate_index(names, ropts.refine_covariate.as_ref(), default_covariate(names))?;
    if cov == 0 {
        return Err(invalid("refinement needs a covariate besides the intercept"));
    }
    let method: RefineMethod = parse(ropts.method.as_ref(), "kmeans")?;
    let km = KMeansOptions {
        n_init: ropts.n_init.unwrap_or(100),
        seed: ropts.seed.unwrap_or(1),
        ..Default::default()
    };
    let v_mode: VMode = parse(fopts.v_mode.as_ref(), "diag")?;
    let lik = LikelihoodOptions {
        v_mode,
        em: em_options(&fopts),
        ..Default::default()
    };

    let part = pop.partition();
    let res = match (&ropts.split_community, ropts.communities) {
        (Some(_), Some(_)) => return Err(invalid("give either --split-community or --communities, not both")),
        (Some(name), None) => {
            let a = part
                .community_names()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| invalid(format!("unknown community '{name}'")))?;
            split_community(&data, a, ropts.parts.unwrap_or(2), method, cov, &km, &lik)?
        }
        (None, Some(k)) => {
            let field = edge_effect_field(&data, &[cov])?;
            let first = refine_kmeans(&field, k, &km)?;
            match method {
                RefineMethod::KMeans => first,
                RefineMethod::Likelihood => {
                    let mut res = refine_likelihood(&data, &first.labels, &first.community_names, None, None, &lik)?;
                    res.n_init = first.n_init;
                    res.best_init = first.best_init;
                    res
                }
            }
        }
        (None, None) => return Err(invalid("--split-community or --communities is required")),
    };

    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let refined = res.partition()?;
    write_partition(out.join("partition.csv"), pop.nodes(), &refined, &res.provenance())?;
    write_trace(&out.join("refine_trace.csv"), &res)?;
    println!(
        "{} refinement: {} communities, objective {:.6}, {}",
        res.method,
        refined.n_communities(),
        res.objective,
        if res.converged { "converged" } else { "stopped at the sweep cap" }
    );

    if let Some(b) = &ropts.test_on {
        let pop_b = load(&input, Some(b))?;
        if pop_b.nodes() != pop.nodes() {
            return Err(invalid("the test dataset has a different node set after exclusions"));
        }
        let pop_b = pop_b.with_partition(refined)?;
        let data_b = ModelData::from_population(&pop_b, mean_model(&fopts)?)?;
        let fit = run_fit(&data_b, &fopts)?;
        write_fit(out.join("fit"), &fit, pop_b.nodes())?;
        let s = write_tests(&fit, pop_b.nodes(), &topts, &out.join("tests"))?;
        println!(
            "tested on {}: {}/{} cells rejected ({} at {})",
            b.display(),
            s.cells_rejected,
            s.cells,
            s.correction,
            s.level
        );
        if !fit.converged {
            run.finish(out, "not converged", &[])?;
            return Err(non_convergence(&fit));
        }
    }
    run.finish(out, "ok", &[])
}

fn estimators(study: &StudyOpts) -> Result<Vec<StudyEstimator>> {
    match &study.estimators {
        Some(list) if !list.is_empty() => list.iter().map(|s| s.parse()).collect(),
        Some(_) => Err(invalid("empty estimator list")),
        None => Ok(StudyEstimator::ALL.to_vec()),
    }
}

fn study_spec(run: &Run) -> Result<GenerativeSpec> {
    let study = run.config.study.clone().unwrap_or_default();
    let seed = study.study_seed.unwrap_or(1);
    let sources = [study.spec.is_some(), study.from_fit.is_some(), study.fixture.unwrap_or(false)];
    if sources.iter().filter(|&&s| s).count() > 1 {
        return Err(invalid("give only one of --spec, --from-fit and --fixture"));
    }
    if let Some(dir) = &study.spec {
        return read_spec(dir);
    }
    if let Some(dir) = &study.from_fit {
        let input = run.config.input.clone().unwrap_or_default();
        let fopts = run.config.fit.clone().unwrap_or_default();
        let topts = run.config.test.clone().unwrap_or_default();
        let (fit, _) = read_fit(dir)?;
        let pop = load(&input, None)?;
        let pop = pop.with_partition((*fit.partition).clone())?;
        let model = if fit.coefficients.edge_covariates() == 1 { MeanModel::CellEffects } else { MeanModel::EdgeEffects };
        let data = ModelData::from_population(&pop, model)?;
        let j = covariate_index(&fit.covariate_names, topts.covariate.as_ref(), default_covariate(&fit.covariate_names))?;
        let (spec, zeroed) = spec_from_fit(
            &data,
            &fit,
            pop.nodes().clone(),
            j,
            study.p_threshold.unwrap_or(0.05),
            &em_options(&fopts),
            seed,
        )?;
        println!("derived spec: {} of {} cells set to zero", zeroed.len(), fit.partition.n_cells());
        return Ok(spec);
    }
    fixture_spec(seed)
}

pub fn simulate(run: &Run, out: &Path) -> Result<()> {
    let study = run.config.study.clone().unwrap_or_default();
    let fopts = run.config.fit.clone().unwrap_or_default();
    let spec = study_spec(run)?;
    let seed = study.study_seed.unwrap_or(1);
    write_spec(out.join("spec"), &spec)?;
    if study.population_only.unwrap_or(false) {
        let pop = generate(&spec)?;
        write_population(out, &pop)?;
        run.finish(out, "ok", &[])?;
        println!("wrote {} subjects over {} nodes to {}", pop.n_subjects(), pop.nodes().len(), out.display());
        return Ok(());
    }
    let ests = estimators(&study)?;
    let reps = study.reps.unwrap_or(100);
    let report = estimator_study(&spec, &ests, reps, seed, &em_options(&fopts))?;
    write_study(out, &report, &spec.partition, 0.95)?;
    run.finish(out, "ok", &[])?;
    for r in &report.estimators {
        println!(
            "{:<10} {} replications, {} failed, {} not converged, {:.1}s",
            r.estimator.to_string(),
            r.runs.len(),
            r.failures.len(),
            r.not_converged,
            r.seconds
        );
    }
    Ok(())
}

pub fn nullcheck(run: &Run, out: &Path) -> Result<()> {
    let study = run.config.study.clone().unwrap_or_default();
    let fopts = run.config.fit.clone().unwrap_or_default();
    let seed = study.study_seed.unwrap_or(1);
    let data = match study.null_fixture {
        Some(n) => generate_data(&null_fixture_spec(n, seed)?, seed)?,
        None => {
            let input = run.config.input.clone().unwrap_or_default();
            let mut pop = load(&input, None)?;
            if let Some(col) = &study.group_column {
                let j = pop
                    .covariate_names()
                    .iter()
                    .position(|n| n == col)
                    .ok_or_else(|| invalid(format!("no manifest column '{col}'")))?;
                let value = study.group_value.ok_or_else(|| invalid("--group-value is required with --group-column"))?;
                let keep: Vec<usize> = (0..pop.n_subjects())
                    .filter(|&m| pop.subjects()[m].covariates()[j] == value)
                    .collect();
                pop = pop.select_subjects(&keep)?;
            }
            ModelData::from_population(&pop, MeanModel::EdgeEffects)?
        }
    };
    let ests = estimators(&study)?;
    let report = null_split_study(&data, &ests, study.reps.unwrap_or(100), seed, &em_options(&fopts))?;
    write_null_study(out, &report)?;
    run.finish(out, "ok", &[])?;
    for r in &report.estimators {
        let (d, p) = r.ks();
        println!(
            "{:<10} {} pooled p-values, {:.3} below 0.05, KS D = {:.4} (p = {:.3}), {} failed",
            r.estimator.to_string(),
            r.p_values.len(),
            r.fraction_below(0.05),
            d,
            p,
            r.failures.len()
        );
    }
    Ok(())
}
