//! `bplink train`: fit a model and write its checkpoint, point estimates,
//! and per-sweep ELBO trace into the output directory.
//!
//! Outputs: `state.json` (resumable variational state), `params.json`
//! (point estimates for scoring), `trace.csv`, and `run.json`. The gibbs
//! model writes `samples.json` instead of a state/trace. A fit that hits
//! `--max-sweeps` before the tolerance still writes everything but the
//! process exits with code 2.

use std::path::PathBuf;

use bplink::cavi::{self, ElboTrace, FitOptions, DEFAULT_MAX_SWEEPS, DEFAULT_TOL};
use bplink::gibbs::{self, ChainOptions, DEFAULT_SAMPLES};
use bplink::graph::CovariateMatrix;
use bplink::io;
use bplink::joint;
use bplink::seasonal::{self, SeasonalHyperparameters};
use bplink::{Error, Result};
use clap::{Args, ValueEnum};
use serde_json::json;

use crate::config::pick;
use crate::inputs::{self, GraphInput};
use crate::{resolve_common, write_manifest, CommonArgs, Outcome, Resolved, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// Censored Poisson factorization with covariates.
    Epmf,
    /// Censored Poisson factorization, latent factors only.
    Pmf,
    /// Seasonal variant over a daily snapshot sequence.
    Sepmf,
    /// Two graphs sharing one user factor block.
    Jepmf,
    /// Gibbs sampler for the static model.
    Gibbs,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Epmf => "epmf",
            ModelKind::Pmf => "pmf",
            ModelKind::Sepmf => "sepmf",
            ModelKind::Jepmf => "jepmf",
            ModelKind::Gibbs => "gibbs",
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model family to fit.
    #[arg(long, value_enum, default_value = "epmf")]
    pub model: ModelKind,
    #[command(flatten)]
    pub input: GraphInput,
    /// Second training graph sharing the user universe (jepmf).
    #[arg(long)]
    pub graph_b: Option<PathBuf>,
    /// Period structure when ingesting events into daily snapshots (sepmf).
    #[arg(long)]
    pub period: Option<String>,
    /// User covariate CSV (label column + one 0/1 column per level).
    #[arg(long)]
    pub user_covs: Option<PathBuf>,
    /// Host covariate CSV.
    #[arg(long)]
    pub host_covs: Option<PathBuf>,
    /// Host covariates for the second graph (jepmf).
    #[arg(long)]
    pub host_covs_b: Option<PathBuf>,
    /// Number of latent components.
    #[arg(long)]
    pub r: Option<usize>,
    /// Relative ELBO change declaring convergence.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Sweep budget before giving up (exit code 2).
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    /// Gibbs: total draws including burn-in.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Gibbs: leading draws to discard.
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Gibbs: keep every thin-th post-burn-in draw.
    #[arg(long)]
    pub thin: Option<usize>,
}

fn finish_fit(
    rc: &Resolved,
    model: ModelKind,
    trace: &ElboTrace,
    settings: serde_json::Value,
    outputs: Vec<String>,
) -> Result<Outcome> {
    io::write_trace_csv(rc.out.join("trace.csv"), trace)?;
    write_manifest(
        &rc.out,
        &RunManifest {
            command: "train",
            seed: rc.seed,
            threads: rc.threads,
            converged: trace.converged,
            settings,
            outputs,
        },
    )?;
    let final_elbo = trace.values.last().copied().unwrap_or(f64::NAN);
    if trace.converged {
        println!(
            "{}: converged after {} sweeps; final elbo {final_elbo}",
            model.name(),
            trace.iterations
        );
        Ok(Outcome::Success)
    } else {
        println!(
            "{}: hit the sweep limit ({}) without converging; final elbo {final_elbo}",
            model.name(),
            trace.iterations
        );
        Ok(Outcome::Nonconverged)
    }
}

pub fn run(args: TrainArgs) -> Result<Outcome> {
    let rc = resolve_common(&args.common)?;
    let r = pick(args.r, rc.cfg.usize("r")?, 20);
    let tol = pick(args.tol, rc.cfg.f64("tol")?, DEFAULT_TOL);
    let max_sweeps = pick(args.max_sweeps, rc.cfg.usize("max_sweeps")?, DEFAULT_MAX_SWEEPS);
    let fit_opts = FitOptions {
        seed: rc.seed,
        tol,
        max_sweeps,
    };
    let hyper = rc.cfg.hyperparameters(r)?;
    let base_settings = |extra: serde_json::Value| {
        let mut settings = json!({
            "model": args.model.name(),
            "input": args.input.describe(),
            "user_covs": inputs::path_json(&args.user_covs),
            "host_covs": inputs::path_json(&args.host_covs),
            "r": r,
            "tol": tol,
            "max_sweeps": max_sweeps,
            "hyper": hyper,
        });
        let obj = settings.as_object_mut().expect("object");
        if let serde_json::Value::Object(extra) = extra {
            obj.extend(extra);
        }
        settings
    };

    match args.model {
        ModelKind::Epmf | ModelKind::Pmf => {
            let graph = args.input.load()?;
            let (user_covs, host_covs) = if args.model == ModelKind::Pmf {
                (
                    CovariateMatrix::empty(graph.n_users()),
                    CovariateMatrix::empty(graph.n_hosts()),
                )
            } else {
                (
                    inputs::load_covariates(args.user_covs.as_deref(), graph.user_labels())?,
                    inputs::load_covariates(args.host_covs.as_deref(), graph.host_labels())?,
                )
            };
            let (state, trace) = cavi::fit(&graph, &user_covs, &host_covs, &hyper, &fit_opts)?;
            io::save_cavi_state(rc.out.join("state.json"), &state)?;
            io::save_point_params(rc.out.join("params.json"), &state.point_estimates())?;
            finish_fit(
                &rc,
                args.model,
                &trace,
                base_settings(json!({})),
                vec![
                    "state.json".into(),
                    "params.json".into(),
                    "trace.csv".into(),
                ],
            )
        }
        ModelKind::Sepmf => {
            let seq = inputs::load_sequence(
                args.input.sequence.as_deref(),
                args.input.events.as_deref(),
                args.period.as_deref(),
                args.input.host_field.to_host_field(),
            )?;
            let first = &seq.snapshots()[0];
            let user_covs =
                inputs::load_covariates(args.user_covs.as_deref(), first.user_labels())?;
            let host_covs =
                inputs::load_covariates(args.host_covs.as_deref(), first.host_labels())?;
            let shyper = SeasonalHyperparameters {
                base: hyper.clone(),
                gamma: rc.cfg.gamma_group("gamma", Default::default())?,
                delta: rc.cfg.gamma_group("delta", Default::default())?,
            };
            shyper.validate()?;
            let (state, trace) =
                seasonal::fit_seasonal(&seq, &user_covs, &host_covs, &shyper, &fit_opts)?;
            io::save_seasonal_state(rc.out.join("state.json"), &state)?;
            let (params, adjust) = state.point_estimates();
            io::save_seasonal_params(rc.out.join("params.json"), &params, &adjust)?;
            finish_fit(
                &rc,
                args.model,
                &trace,
                base_settings(json!({
                    "period": io::format_period_map(seq.period_map()),
                    "n_days": seq.n_days(),
                    "gamma": shyper.gamma,
                    "delta": shyper.delta,
                })),
                vec![
                    "state.json".into(),
                    "params.json".into(),
                    "trace.csv".into(),
                ],
            )
        }
        ModelKind::Jepmf => {
            let graph_a = args.input.load()?;
            let graph_b = io::read_graph_text(
                args.graph_b
                    .as_deref()
                    .ok_or_else(|| Error::InvalidArgument("jepmf needs --graph-b".into()))?,
            )?;
            let user_covs =
                inputs::load_covariates(args.user_covs.as_deref(), graph_a.user_labels())?;
            let host_covs_a =
                inputs::load_covariates(args.host_covs.as_deref(), graph_a.host_labels())?;
            let host_covs_b =
                inputs::load_covariates(args.host_covs_b.as_deref(), graph_b.host_labels())?;
            let (state, trace) = joint::fit_joint(
                &graph_a,
                &graph_b,
                &user_covs,
                &host_covs_a,
                &host_covs_b,
                &hyper,
                &fit_opts,
            )?;
            io::save_joint_state(rc.out.join("state.json"), &state)?;
            let (params_a, params_b) = state.point_estimates();
            io::save_joint_params(rc.out.join("params.json"), &params_a, &params_b)?;
            finish_fit(
                &rc,
                args.model,
                &trace,
                base_settings(json!({
                    "graph_b": inputs::path_json(&args.graph_b),
                    "host_covs_b": inputs::path_json(&args.host_covs_b),
                })),
                vec![
                    "state.json".into(),
                    "params.json".into(),
                    "trace.csv".into(),
                ],
            )
        }
        ModelKind::Gibbs => {
            let graph = args.input.load()?;
            let user_covs =
                inputs::load_covariates(args.user_covs.as_deref(), graph.user_labels())?;
            let host_covs =
                inputs::load_covariates(args.host_covs.as_deref(), graph.host_labels())?;
            let defaults = ChainOptions::default();
            let chain = ChainOptions {
                seed: rc.seed,
                n_samples: pick(args.samples, rc.cfg.usize("samples")?, DEFAULT_SAMPLES),
                burn_in: pick(args.burn_in, rc.cfg.usize("burn_in")?, defaults.burn_in),
                thin: pick(args.thin, rc.cfg.usize("thin")?, defaults.thin),
            };
            let samples = gibbs::run_chain(&graph, &user_covs, &host_covs, &hyper, &chain)?;
            io::save_posterior_samples(rc.out.join("samples.json"), &samples)?;
            write_manifest(
                &rc.out,
                &RunManifest {
                    command: "train",
                    seed: rc.seed,
                    threads: rc.threads,
                    converged: true,
                    settings: base_settings(json!({
                        "samples": chain.n_samples,
                        "burn_in": chain.burn_in,
                        "thin": chain.thin,
                    })),
                    outputs: vec!["samples.json".into()],
                },
            )?;
            println!(
                "gibbs: kept {} draws (burn-in {}, thin {})",
                samples.draws.len(),
                samples.burn_in,
                samples.thin
            );
            Ok(Outcome::Success)
        }
    }
}
