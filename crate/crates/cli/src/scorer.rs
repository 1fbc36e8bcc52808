//! Scorer selection shared by `score`, `eval`, and `ablate`: loads the
//! checkpoint the chosen scorer needs, validates its dimensions against the
//! training graph and covariates, and builds a boxed scorer per category.
//!
//! Model scorers (`epmf`, `pmf`, `sepmf`, `jepmf`, `gibbs`) read a
//! checkpoint written by `train`; the graph baselines (`degree`, `tsvd`,
//! `tkatz`) need only the training graph. Cold-start categories swap the
//! factorization scorers for the mean-imputing variant automatically.

use std::path::PathBuf;

use bplink::eval::{
    baseline_tkatz, baseline_tsvd, Category, ColdStartScorer, DegreeScorer, GibbsScorer,
    MonteCarloScorer, PluginScorer, Scorer,
};
use bplink::cavi::VariationalState;
use bplink::gibbs::PosteriorSamples;
use bplink::graph::{CovariateMatrix, PeriodMap, SparseBipartiteGraph};
use bplink::io;
use bplink::model::PointParams;
use bplink::seasonal::{SeasonalAdjustments, SeasonalScorer};
use bplink::{Error, Result};
use clap::{Args, ValueEnum};
use serde_json::json;

use crate::config::{pick, FileConfig};

pub const DEFAULT_BASELINE_RANK: usize = 20;
pub const DEFAULT_KATZ_ETA: f64 = 1e-4;
pub const DEFAULT_MC_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerKind {
    /// Point-estimate link probability with covariates.
    Epmf,
    /// Point-estimate link probability, latent factors only.
    Pmf,
    /// Seasonal window scorer (needs --period and --days).
    Sepmf,
    /// One side of a joint checkpoint (pick with --side).
    Jepmf,
    /// Posterior-mean link probability over Gibbs draws.
    Gibbs,
    /// Degree-product baseline.
    Degree,
    /// Truncated-SVD inner-product baseline.
    Tsvd,
    /// Truncated Katz similarity baseline.
    Tkatz,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Epmf => "epmf",
            ScorerKind::Pmf => "pmf",
            ScorerKind::Sepmf => "sepmf",
            ScorerKind::Jepmf => "jepmf",
            ScorerKind::Gibbs => "gibbs",
            ScorerKind::Degree => "degree",
            ScorerKind::Tsvd => "tsvd",
            ScorerKind::Tkatz => "tkatz",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CategoryArg {
    All,
    New,
    ColdStartUser,
    ColdStartHost,
}

impl CategoryArg {
    pub fn to_category(self) -> Category {
        match self {
            CategoryArg::All => Category::All,
            CategoryArg::New => Category::New,
            CategoryArg::ColdStartUser => Category::ColdStartUser,
            CategoryArg::ColdStartHost => Category::ColdStartHost,
        }
    }
}

#[derive(Args)]
pub struct ScorerArgs {
    /// Scoring model or baseline.
    #[arg(long, value_enum, default_value = "epmf")]
    pub scorer: ScorerKind,
    /// Checkpoint from `train`: point/seasonal/joint parameters, posterior
    /// samples (gibbs), or a state checkpoint (--mc).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Joint-checkpoint side to score with.
    #[arg(long, value_enum, default_value = "a")]
    pub side: SideArg,
    /// 1-based day indices of the seasonal scoring window.
    #[arg(long, value_delimiter = ',')]
    pub days: Vec<usize>,
    /// Period structure for the seasonal scorer (modular:P or lanl4:A:F).
    #[arg(long)]
    pub period: Option<String>,
    /// Average exact link probabilities over variational draws instead of
    /// plugging in point estimates; --params must be a state checkpoint.
    #[arg(long)]
    pub mc: bool,
    /// Monte Carlo draws per pair when --mc is set.
    #[arg(long)]
    pub mc_draws: Option<usize>,
    /// Factorization rank for the tsvd and tkatz baselines.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Damping factor for the tkatz baseline.
    #[arg(long)]
    pub eta: Option<f64>,
}

struct SeasonalParts {
    params: PointParams,
    adjust: SeasonalAdjustments,
    period_map: PeriodMap,
    days: Vec<usize>,
}

/// Everything a scorer borrows, loaded once and reused across categories.
pub struct ScorerContext {
    kind: ScorerKind,
    params: Option<PointParams>,
    seasonal: Option<SeasonalParts>,
    samples: Option<PosteriorSamples>,
    state: Option<VariationalState>,
    user_covs: CovariateMatrix,
    host_covs: CovariateMatrix,
    mc_draws: usize,
    rank: usize,
    eta: f64,
    seed: u64,
}

impl ScorerContext {
    pub fn load(
        args: &ScorerArgs,
        cfg: &FileConfig,
        train: &SparseBipartiteGraph,
        user_covs: CovariateMatrix,
        host_covs: CovariateMatrix,
        seed: u64,
    ) -> Result<Self> {
        let mut ctx = ScorerContext {
            kind: args.scorer,
            params: None,
            seasonal: None,
            samples: None,
            state: None,
            // The pmf scorer is covariate-free by definition.
            user_covs: if args.scorer == ScorerKind::Pmf {
                CovariateMatrix::empty(train.n_users())
            } else {
                user_covs
            },
            host_covs: if args.scorer == ScorerKind::Pmf {
                CovariateMatrix::empty(train.n_hosts())
            } else {
                host_covs
            },
            mc_draws: pick(args.mc_draws, cfg.usize("mc_draws")?, DEFAULT_MC_DRAWS),
            rank: pick(args.rank, cfg.usize("rank")?, DEFAULT_BASELINE_RANK),
            eta: pick(args.eta, cfg.f64("eta")?, DEFAULT_KATZ_ETA),
            seed,
        };
        if args.mc && !matches!(args.scorer, ScorerKind::Epmf | ScorerKind::Pmf) {
            return Err(Error::InvalidArgument(
                "--mc applies to the epmf and pmf scorers only".into(),
            ));
        }
        let need_params = || {
            args.params.clone().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "the {} scorer needs --params",
                    args.scorer.name()
                ))
            })
        };
        match args.scorer {
            ScorerKind::Epmf | ScorerKind::Pmf if args.mc => {
                ctx.state = Some(io::load_cavi_state(
                    need_params()?,
                    train,
                    &ctx.user_covs,
                    &ctx.host_covs,
                )?);
            }
            ScorerKind::Epmf | ScorerKind::Pmf => {
                let params = io::load_point_params(need_params()?)?;
                ctx.check_params(&params, train)?;
                ctx.params = Some(params);
            }
            ScorerKind::Jepmf => {
                let (a, b) = io::load_joint_params(need_params()?)?;
                let params = match args.side {
                    SideArg::A => a,
                    SideArg::B => b,
                };
                ctx.check_params(&params, train)?;
                ctx.params = Some(params);
            }
            ScorerKind::Sepmf => {
                let (params, adjust) = io::load_seasonal_params(need_params()?)?;
                ctx.check_params(&params, train)?;
                let period = args.period.as_deref().ok_or_else(|| {
                    Error::InvalidArgument("the sepmf scorer needs --period".into())
                })?;
                if args.days.is_empty() {
                    return Err(Error::InvalidArgument(
                        "the sepmf scorer needs --days (the window's 1-based day indices)"
                            .into(),
                    ));
                }
                ctx.seasonal = Some(SeasonalParts {
                    params,
                    adjust,
                    period_map: io::parse_period_map(period)?,
                    days: args.days.clone(),
                });
            }
            ScorerKind::Gibbs => {
                let samples = io::load_posterior_samples(need_params()?)?;
                if let Some(first) = samples.draws.first() {
                    ctx.check_params(first, train)?;
                }
                ctx.samples = Some(samples);
            }
            ScorerKind::Degree | ScorerKind::Tsvd | ScorerKind::Tkatz => {}
        }
        Ok(ctx)
    }

    fn check_params(&self, params: &PointParams, train: &SparseBipartiteGraph) -> Result<()> {
        if params.n_users != train.n_users() || params.n_hosts != train.n_hosts() {
            return Err(Error::DimMismatch(format!(
                "checkpoint is for a {} x {} graph but the training graph is {} x {}",
                params.n_users,
                params.n_hosts,
                train.n_users(),
                train.n_hosts()
            )));
        }
        let k = self.user_covs.column_names().len();
        let h = self.host_covs.column_names().len();
        if params.k != k || params.h != h {
            return Err(Error::DimMismatch(format!(
                "checkpoint expects {} user and {} host covariate columns but \
                 {k} and {h} were provided; pass the covariate files used in training",
                params.k, params.h
            )));
        }
        Ok(())
    }

    /// Builds the scorer for one category. Factorization parameters switch
    /// to mean-imputed cold-start scoring for the cold-start categories.
    pub fn build<'a>(
        &'a self,
        train: &SparseBipartiteGraph,
        category: Category,
    ) -> Result<Box<dyn Scorer + 'a>> {
        Ok(match self.kind {
            ScorerKind::Epmf | ScorerKind::Pmf | ScorerKind::Jepmf => {
                if let Some(state) = &self.state {
                    Box::new(MonteCarloScorer {
                        state,
                        user_covs: &self.user_covs,
                        host_covs: &self.host_covs,
                        m: self.mc_draws,
                        seed: self.seed,
                    })
                } else {
                    let params = self.params.as_ref().expect("params loaded for this kind");
                    match category {
                        Category::ColdStartUser | Category::ColdStartHost => Box::new(
                            ColdStartScorer::new(params, train, &self.user_covs, &self.host_covs),
                        ),
                        _ => Box::new(PluginScorer {
                            params,
                            user_covs: &self.user_covs,
                            host_covs: &self.host_covs,
                        }),
                    }
                }
            }
            ScorerKind::Sepmf => {
                let parts = self.seasonal.as_ref().expect("seasonal parts loaded");
                Box::new(SeasonalScorer::new(
                    &parts.params,
                    &parts.adjust,
                    &self.user_covs,
                    &self.host_covs,
                    &parts.period_map,
                    &parts.days,
                )?)
            }
            ScorerKind::Gibbs => Box::new(GibbsScorer {
                samples: self.samples.as_ref().expect("samples loaded"),
                user_covs: &self.user_covs,
                host_covs: &self.host_covs,
            }),
            ScorerKind::Degree => Box::new(DegreeScorer::new(train)),
            ScorerKind::Tsvd => Box::new(baseline_tsvd(train, self.rank)?),
            ScorerKind::Tkatz => Box::new(baseline_tkatz(train, self.rank, self.eta)?),
        })
    }

    /// Resolved settings for the run manifest.
    pub fn describe(&self, args: &ScorerArgs) -> serde_json::Value {
        let mut desc = json!({
            "scorer": self.kind.name(),
            "params": crate::inputs::path_json(&args.params),
        });
        let obj = desc.as_object_mut().expect("object");
        match self.kind {
            ScorerKind::Jepmf => {
                obj.insert(
                    "side".into(),
                    json!(match args.side {
                        SideArg::A => "a",
                        SideArg::B => "b",
                    }),
                );
            }
            ScorerKind::Sepmf => {
                obj.insert("period".into(), json!(args.period));
                obj.insert("days".into(), json!(args.days));
            }
            ScorerKind::Tsvd => {
                obj.insert("rank".into(), json!(self.rank));
            }
            ScorerKind::Tkatz => {
                obj.insert("rank".into(), json!(self.rank));
                obj.insert("eta".into(), json!(self.eta));
            }
            _ => {}
        }
        if self.state.is_some() {
            obj.insert("mc_draws".into(), json!(self.mc_draws));
        }
        desc
    }
}
