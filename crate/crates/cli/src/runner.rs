//! Subcommand implementations shared by the binary and the test suites.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use bff_core::approximator::{ApproxKind, ValueApproximator};
use bff_core::bias::{epsilon_sweep, estimate_gap, fit_power_law, SweepResult};
use bff_core::env::{simulate, ContinuousEnvSpec, Diffusion, Drift, EnvSpec};
use bff_core::residual::EstimatorKind;
use bff_core::tabular::exact_value;
use bff_core::trainer::{
    build_reference, eta_diagnostic, train, EtaDiagnostic, ReferenceSettings, ReferenceSolution, TrainConfig,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, PlannedRun};
use crate::error::CliError;
use crate::manifest::{blob_digest, describe_output, sha256_hex, RunManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    SolveExact,
    Train,
    Compare,
    BiasSweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveExact => "solve-exact",
            Command::Train => "train",
            Command::Compare => "compare",
            Command::BiasSweep => "bias-sweep",
        }
    }
}

/// A parsed config together with the bytes it was read from.
#[derive(Clone, Debug)]
pub struct Input {
    pub config: ExperimentConfig,
    pub raw: Vec<u8>,
}

impl Input {
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        Ok(Input {
            config: ExperimentConfig::parse(text)?,
            raw: text.as_bytes().to_vec(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let raw = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = String::from_utf8(raw.clone())
            .map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
        let config = ExperimentConfig::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok(Input { config, raw })
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub allow_oracle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub estimator: EstimatorKind,
    pub primal_seed: u64,
    pub dual_seed: Option<u64>,
    pub final_step: usize,
    pub final_error: f64,
    pub final_relative: f64,
    pub best_relative: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlResult {
    pub eps: f64,
    pub gap: f64,
    pub std_err: f64,
    pub default_gap: f64,
    pub default_std_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub slope: f64,
    pub intercept: f64,
    pub eps: Vec<f64>,
    pub n_outer: usize,
    pub n_inner: usize,
    pub seed: u64,
    pub theta_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlResult>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub command: Command,
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
    pub runs: Vec<RunSummary>,
    pub sweep: Option<SweepSummary>,
    pub table: Option<String>,
    pub warnings: Vec<String>,
    pub manifest: RunManifest,
}

/// Runs subcommands. Continuous references are cached per (environment,
/// settings) for the lifetime of the runner.
#[derive(Default)]
pub struct Runner {
    references: Vec<(String, ReferenceSolution)>,
}

struct Outputs<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl Outputs<'_> {
    fn write<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> bff_core::Result<()>,
    {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.names.push(name.to_string());
        Ok(())
    }
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn run(&mut self, command: Command, inputs: &[Input], opts: &RunOptions) -> Result<RunReport, CliError> {
        let Some(first) = inputs.first() else {
            return Err(CliError::Config("no config given".into()));
        };
        if command != Command::Compare && inputs.len() > 1 {
            return Err(CliError::Config(format!("{} takes a single config", command.name())));
        }
        let started = Instant::now();
        fs::create_dir_all(&opts.out_dir).map_err(|e| CliError::io(&opts.out_dir, e))?;
        let mut out = Outputs {
            dir: &opts.out_dir,
            names: Vec::new(),
        };
        let mut runs = Vec::new();
        let mut sweep = None;
        let mut table = None;
        let mut warnings = Vec::new();
        let cfg = &first.config;
        match command {
            Command::Simulate => self.simulate(cfg, &mut out)?,
            Command::SolveExact => self.solve_exact(cfg, &mut out)?,
            Command::Train => runs = self.train_all(cfg, "", opts, &mut out, &mut warnings)?,
            Command::Compare => {
                let (r, t) = self.compare(inputs, opts, &mut out, &mut warnings)?;
                runs = r;
                table = Some(t);
            }
            Command::BiasSweep => sweep = Some(self.bias_sweep(cfg, &mut out)?),
        }

        let outputs = out
            .names
            .iter()
            .map(|n| describe_output(&opts.out_dir, n))
            .collect::<Result<Vec<_>, _>>()?;
        let manifest = RunManifest {
            tool: "bff".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.name().into(),
            config_sha256: inputs.iter().map(|i| sha256_hex(i.config.to_toml().as_bytes())).collect(),
            input_digests: inputs.iter().map(|i| blob_digest(&i.raw)).collect(),
            master_seed: cfg.master_seed,
            duration_secs: started.elapsed().as_secs_f64(),
            outputs,
        };
        manifest.write_atomic(&opts.out_dir)?;
        Ok(RunReport {
            command,
            out_dir: opts.out_dir.clone(),
            outputs: out.names,
            runs,
            sweep,
            table,
            warnings,
            manifest,
        })
    }

    fn simulate(&mut self, cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<(), CliError> {
        let sim = cfg
            .simulate
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [simulate] table".into()))?;
        let env = cfg.env_spec()?;
        let traj = simulate(&env, cfg.initial_state(), sim.length, cfg.master_seed)?;
        out.write("trajectory.csv", |w| traj.write_csv(w))
    }

    fn solve_exact(&mut self, cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<(), CliError> {
        let EnvSpec::Discrete(spec) = cfg.env_spec()? else {
            return Err(CliError::Config(
                "exact solve unavailable for continuous environments".into(),
            ));
        };
        let values = exact_value(&spec)?;
        out.write("value_exact.csv", |w| {
            writeln!(w, "state,v_star")?;
            for (i, v) in values.iter().enumerate() {
                writeln!(w, "{i},{v}")?;
            }
            Ok(())
        })
    }

    fn reference(&mut self, env: &EnvSpec, settings: &ReferenceSettings) -> Result<ReferenceSolution, CliError> {
        let key = format!("{env:?}|{settings:?}");
        if let Some((_, r)) = self.references.iter().find(|(k, _)| *k == key) {
            return Ok(r.clone());
        }
        let r = build_reference(env, settings)?;
        self.references.push((key, r.clone()));
        Ok(r)
    }

    fn train_all(
        &mut self,
        cfg: &ExperimentConfig,
        prefix: &str,
        opts: &RunOptions,
        out: &mut Outputs<'_>,
        warnings: &mut Vec<String>,
    ) -> Result<Vec<RunSummary>, CliError> {
        let plan = cfg.plan()?;
        let t = cfg.trainer.as_ref().expect("plan checked the trainer block");
        if !opts.allow_oracle {
            if let Some(run) = plan.iter().find(|r| r.estimator.is_oracle()) {
                return Err(CliError::Config(format!(
                    "{} needs model access; pass --allow-oracle to run it",
                    run.estimator
                )));
            }
        }
        let env = cfg.env_spec()?;
        let approx_cfg = cfg.approximator();
        let n = match &env {
            EnvSpec::Discrete(d) => d.n(),
            EnvSpec::Continuous(_) => 0,
        };
        let reference = self.reference(&env, &t.reference)?;
        let traj = simulate(&env, cfg.initial_state(), t.trajectory_length, cfg.master_seed)?;

        let mut summaries = Vec::with_capacity(plan.len());
        for PlannedRun {
            label,
            estimator,
            primal_seed,
            dual_seed,
        } in plan
        {
            let label = format!("{prefix}{label}");
            let config = TrainConfig {
                eval_every: t.eval_every,
                beta: t.beta,
                allow_oracle: opts.allow_oracle,
                ..TrainConfig::new(estimator, t.tau, t.batch_size, t.epochs, cfg.master_seed)
            };
            if let EtaDiagnostic::Warning { message, .. } = eta_diagnostic(&config, &env) {
                if !warnings.contains(&message) {
                    warnings.push(message);
                }
            }
            let approx = ValueApproximator::init(approx_cfg.kind, n, primal_seed);
            let dual = dual_seed.map(|d| ValueApproximator::init(approx_cfg.kind, n, d));
            let outcome = match train(&env, &traj, approx, dual, &config, &reference) {
                Ok(o) => o,
                Err(bff_core::Error::Diverged {
                    step,
                    error,
                    limit,
                    trace,
                }) => {
                    out.write(&format!("trace_{label}.csv"), |w| trace.write_csv(w))?;
                    return Err(bff_core::Error::Diverged {
                        step,
                        error,
                        limit,
                        trace,
                    }
                    .into());
                }
                Err(e) => return Err(e.into()),
            };
            let trace = &outcome.trace;
            out.write(&format!("trace_{label}.csv"), |w| trace.write_csv(w))?;
            out.write(&format!("profile_{label}.csv"), |w| {
                reference.write_profile_csv(&outcome.approx, w)
            })?;
            out.write(&format!("checkpoint_{label}.bin"), |w| {
                outcome.approx.write_checkpoint(w, primal_seed)
            })?;
            let final_step = trace.final_step().unwrap_or(0);
            let best = trace.best_relative_within(final_step).unwrap_or(f64::NAN);
            summaries.push(RunSummary {
                label,
                estimator,
                primal_seed,
                dual_seed,
                final_step,
                final_error: trace.final_error().unwrap_or(f64::NAN),
                final_relative: trace.final_relative().unwrap_or(f64::NAN),
                best_relative: best,
                converged: best <= t.convergence_threshold,
            });
        }
        Ok(summaries)
    }

    fn compare(
        &mut self,
        inputs: &[Input],
        opts: &RunOptions,
        out: &mut Outputs<'_>,
        warnings: &mut Vec<String>,
    ) -> Result<(Vec<RunSummary>, String), CliError> {
        let first = &inputs[0].config;
        for other in &inputs[1..] {
            if other.config.environment != first.environment {
                return Err(CliError::Config("compared configs use different environments".into()));
            }
            if other.config.master_seed != first.master_seed {
                return Err(CliError::Config("compared configs use different seeds".into()));
            }
        }
        let mut runs = Vec::new();
        for (k, input) in inputs.iter().enumerate() {
            let prefix = if inputs.len() > 1 { format!("c{k}_") } else { String::new() };
            runs.extend(self.train_all(&input.config, &prefix, opts, out, warnings)?);
        }
        if runs.len() < 2 {
            return Err(CliError::Config("compare needs at least two runs".into()));
        }
        let matched = runs.iter().map(|r| r.final_step).min().unwrap_or(0);
        let mut rows: Vec<(RunSummary, f64)> = Vec::with_capacity(runs.len());
        for r in &runs {
            let at = relative_at_or_before(&opts.out_dir.join(format!("trace_{}.csv", r.label)), matched)?;
            rows.push((r.clone(), at));
        }
        rows.sort_by(|a, b| a.0.final_relative.total_cmp(&b.0.final_relative));

        out.write("compare.csv", |w| {
            writeln!(
                w,
                "run,estimator,primal_seed,dual_seed,final_step,final_error,final_rel_error,\
                 matched_step,rel_error_at_matched,best_rel_error,converged"
            )?;
            for (r, at) in &rows {
                let dual = r.dual_seed.map(|d| d.to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.label,
                    r.estimator,
                    r.primal_seed,
                    dual,
                    r.final_step,
                    r.final_error,
                    r.final_relative,
                    matched,
                    at,
                    r.best_relative,
                    r.converged
                )?;
            }
            Ok(())
        })?;

        let mut table = String::new();
        let _ = writeln!(
            table,
            "{:<28} {:<15} {:>12} {:>14} {:>12}  converged",
            "run",
            "estimator",
            "final_rel",
            format!("rel@{matched}"),
            "best_rel"
        );
        for (r, at) in &rows {
            let _ = writeln!(
                table,
                "{:<28} {:<15} {:>12.4e} {:>14.4e} {:>12.4e}  {}",
                r.label,
                r.estimator.label(),
                r.final_relative,
                at,
                r.best_relative,
                if r.converged { "yes" } else { "no" }
            );
        }
        let body = table.clone();
        out.write("compare.txt", move |w| Ok(w.write_all(body.as_bytes())?))?;
        Ok((rows.into_iter().map(|(r, _)| r).collect(), table))
    }

    fn bias_sweep(&mut self, cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<SweepSummary, CliError> {
        let sweep = cfg
            .bias_sweep
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [bias_sweep] table".into()))?;
        let EnvSpec::Continuous(base) = cfg.env_spec()? else {
            return Err(CliError::Config("bias-sweep needs a continuous environment".into()));
        };
        let approx_cfg = cfg.approximator();
        if approx_cfg.kind != ApproxKind::Mlp {
            return Err(CliError::Config("bias-sweep needs an mlp approximator".into()));
        }
        let theta = ValueApproximator::init(ApproxKind::Mlp, 0, approx_cfg.init_seed);
        let seed = cfg.master_seed;
        let result = epsilon_sweep(&base, &theta, &sweep.eps, sweep.n_outer, sweep.n_inner, seed)?;
        out.write("sweep.csv", |w| result.write_csv(w))?;

        let control = if sweep.control {
            let default = match result.points.iter().find(|p| p.eps == sweep.control_eps) {
                Some(p) => (p.gap, p.std_err),
                None => {
                    let env = EnvSpec::Continuous(base.with_epsilon(sweep.control_eps));
                    let e = estimate_gap(&env, &theta, sweep.n_outer, sweep.n_inner, seed)?;
                    (e.gap, e.std_err)
                }
            };
            let env = EnvSpec::Continuous(ContinuousEnvSpec {
                drift: Drift::Constant(1.0),
                diffusion: Diffusion::Constant(1.0),
                ..base.with_epsilon(sweep.control_eps)
            });
            let e = estimate_gap(&env, &theta, sweep.n_outer, sweep.n_inner, seed)?;
            Some(ControlResult {
                eps: sweep.control_eps,
                gap: e.gap,
                std_err: e.std_err,
                default_gap: default.0,
                default_std_err: default.1,
            })
        } else {
            None
        };
        let summary = summarize(&result, sweep.n_outer, sweep.n_inner, seed, approx_cfg.init_seed, control);
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        out.write("sweep_summary.json", move |w| Ok(writeln!(w, "{json}")?))?;
        Ok(summary)
    }
}

fn summarize(
    result: &SweepResult,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
    theta_seed: u64,
    control: Option<ControlResult>,
) -> SweepSummary {
    SweepSummary {
        slope: result.slope,
        intercept: result.intercept,
        eps: result.points.iter().map(|p| p.eps).collect(),
        n_outer,
        n_inner,
        seed,
        theta_seed,
        control,
    }
}

/// Fits the power law to an exact `c·ε²` series; the slope must come back
/// as 2 to within 1e-9.
pub fn synthetic_self_test(eps: &[f64]) -> Result<f64, CliError> {
    let points: Vec<(f64, f64)> = eps.iter().map(|&e| (e, 0.5 * e * e)).collect();
    let (slope, _) = fit_power_law(&points)?;
    if (slope - 2.0).abs() > 1e-9 {
        return Err(CliError::Config(format!("self-test recovered slope {slope}, expected 2")));
    }
    Ok(slope)
}

fn relative_at_or_before(path: &Path, step: usize) -> Result<f64, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut best = f64::NAN;
    for line in text.lines().skip(1) {
        let mut cols = line.split(',');
        let s: usize = cols.next().and_then(|c| c.parse().ok()).unwrap_or(usize::MAX);
        if s > step {
            break;
        }
        best = cols.nth(1).and_then(|c| c.parse().ok()).unwrap_or(f64::NAN);
    }
    Ok(best)
}

/// Output directory precedence: explicit flag, the config's `[output]`
/// table, `BFF_OUT_DIR`, then `bff-out`.
pub fn resolve_out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig, env_var: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.output.as_ref().and_then(|o| o.dir.clone()))
        .or(env_var)
        .unwrap_or_else(|| PathBuf::from("bff-out"))
}
