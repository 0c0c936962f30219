//! The `prt` command line: one subcommand per pipeline stage plus the grid
//! and the validation sweeps. Stages talk to each other only through files in
//! the output directory.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::ExperimentConfig;
pub use report::{run_grid, run_validation, GridReport, GridRow, ValidationLine};

use crate::datasets::OfflineDataset;
use crate::envs::TaskFamily;
use crate::error::{Error, Result};
use crate::pipeline::{
    comblock_family, derived_seed, source_datasets, target_dataset, true_feature, EVAL_STREAM,
    UCB_STREAM,
};
use crate::planning::{
    evaluate_policy, lsvi_ucb_online, plan, EpsilonFn, LinearQPolicy, PenaltyMode, PlanContext,
    TransitionCounts,
};
use crate::representation::{
    build_comblock_hypothesis_class, learn_representation, FeatureMap, HypothesisClasses,
    LearnedRep,
};
use crate::uncertainty::EpsilonModel;

#[derive(Debug, Parser)]
#[command(
    name = "prt",
    version,
    about = "Offline representation transfer on low-rank MDPs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for single-seed stages; defaults to the first configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct Sizes {
    /// Source trajectories per task; defaults to the first configured N_S.
    #[arg(long = "n-source")]
    pub n_source: Option<usize>,
    /// Target trajectories; defaults to the first configured n.
    #[arg(long = "n-target")]
    pub n_target: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Prt,
    Lsvi,
    Lcb,
    Ucb,
}

impl Algo {
    pub fn mode(self) -> PenaltyMode {
        match self {
            Algo::Prt => PenaltyMode::Prt,
            Algo::Lsvi => PenaltyMode::Lsvi,
            Algo::Lcb => PenaltyMode::Lcb,
            Algo::Ucb => PenaltyMode::Ucb,
        }
    }

    pub fn name(self) -> &'static str {
        self.mode().name()
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the comblock family for one seed.
    GenTasks(Common),
    /// Collect source and target datasets at the largest configured sizes.
    Collect(Common),
    /// Fit the representation on the source datasets.
    LearnRep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sizes: Sizes,
    },
    /// Tabulate the transfer error at every target data point.
    Density {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sizes: Sizes,
    },
    /// Plan one policy.
    Plan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sizes: Sizes,
        #[arg(long, value_enum, default_value = "prt")]
        algo: Algo,
    },
    /// Evaluate a planned policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sizes: Sizes,
        #[arg(long, value_enum, default_value = "prt")]
        algo: Algo,
    },
    /// Run the full grid and write the report.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Restrict the grid to one algorithm.
        #[arg(long, value_enum)]
        algo: Option<Algo>,
    },
    /// Run the tabular coverage sweeps.
    Validate(Common),
}

/// Whether a command finished every unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Complete,
    Partial,
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_STAGE: u8 = 3;

pub fn exit_code(result: &Result<Completion>) -> u8 {
    match result {
        Ok(Completion::Complete) => EXIT_OK,
        Ok(Completion::Partial) => EXIT_STAGE,
        Err(Error::Config(_)) => EXIT_CONFIG,
        Err(_) => EXIT_STAGE,
    }
}

/// Resolved inputs of a command.
pub struct Session {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pool: rayon::ThreadPool,
}

impl Session {
    pub fn new(common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &common.out {
            config.out = out.clone();
        }
        let seed = common.seed.unwrap_or(config.seeds[0]);
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = common.workers {
            if w == 0 {
                return Err(Error::Config("--workers must be at least 1".into()));
            }
            builder = builder.num_threads(w);
        }
        let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
        std::fs::create_dir_all(&config.out)?;
        Ok(Self {
            out: config.out.clone(),
            config,
            seed,
            pool,
        })
    }

    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        self.pool.install(f)
    }

    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    fn n_source(&self, sizes: &Sizes) -> usize {
        sizes.n_source.unwrap_or(self.config.n_source[0])
    }

    fn n_target(&self, sizes: &Sizes) -> usize {
        sizes.n_target.unwrap_or(self.config.n[0])
    }

    fn family_path(&self) -> PathBuf {
        self.path(format!("family-s{}.json", self.seed))
    }

    fn source_path(&self, task: usize) -> PathBuf {
        self.path(format!("source-{task}-s{}.jsonl", self.seed))
    }

    fn target_path(&self) -> PathBuf {
        self.path(format!("target-s{}.jsonl", self.seed))
    }

    fn rep_path(&self, n_source: usize) -> PathBuf {
        self.path(format!("rep-s{}-NS{n_source}.json", self.seed))
    }

    fn epsilon_path(&self, n_source: usize) -> PathBuf {
        self.path(format!("epsilon-s{}-NS{n_source}.csv", self.seed))
    }

    fn cell_stem(&self, algo: Algo, n_source: usize, n: usize) -> String {
        match algo {
            Algo::Ucb => format!("ucb-s{}", self.seed),
            _ => format!("{}-s{}-NS{n_source}-n{n}", algo.name(), self.seed),
        }
    }

    fn policy_path(&self, algo: Algo, n_source: usize, n: usize) -> PathBuf {
        self.path(format!("policy-{}.json", self.cell_stem(algo, n_source, n)))
    }

    fn eval_path(&self, algo: Algo, n_source: usize, n: usize) -> PathBuf {
        self.path(format!("eval-{}.csv", self.cell_stem(algo, n_source, n)))
    }

    fn load_family(&self) -> Result<TaskFamily> {
        TaskFamily::from_json(&std::fs::read_to_string(self.family_path())?)
    }

    fn load_sources(&self, family: &TaskFamily, n_source: usize) -> Result<Vec<OfflineDataset>> {
        (0..family.num_sources())
            .map(|i| {
                let ds = OfflineDataset::load(&self.source_path(i))?;
                if ds.len() < n_source {
                    return Err(Error::Format(format!(
                        "source {i} holds {} trajectories, {n_source} requested",
                        ds.len()
                    )));
                }
                Ok(ds.truncated(n_source))
            })
            .collect()
    }

    fn load_target(&self, n: usize) -> Result<OfflineDataset> {
        let ds = OfflineDataset::load(&self.target_path())?;
        if ds.len() < n {
            return Err(Error::Format(format!(
                "target holds {} trajectories, {n} requested",
                ds.len()
            )));
        }
        Ok(ds.truncated(n))
    }

    fn classes(&self, family: &TaskFamily) -> HypothesisClasses {
        build_comblock_hypothesis_class(family, self.config.num_decoys, self.seed)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            Ok((name, file_sha256(p)?))
        })
        .collect()
}

/// Records which files a stage read and wrote, by content hash.
fn write_manifest(
    session: &Session,
    command: &str,
    tag: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: session.config.hash(),
        seed: session.seed,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
    };
    let path = session.path(format!("manifest-{command}-{tag}.json"));
    std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn dataset_files(path: &Path) -> [PathBuf; 2] {
    [path.to_path_buf(), OfflineDataset::header_path(path)]
}

pub fn gen_tasks(session: &Session) -> Result<PathBuf> {
    let family = comblock_family(&session.config.settings(), session.seed)?;
    let path = session.family_path();
    std::fs::write(&path, family.to_json()? + "\n")?;
    write_manifest(
        session,
        "gen-tasks",
        &format!("s{}", session.seed),
        &[],
        std::slice::from_ref(&path),
    )?;
    Ok(path)
}

pub fn collect_data(session: &Session) -> Result<Vec<PathBuf>> {
    let family = session.load_family()?;
    let settings = session.config.settings();
    let n_source = *session.config.n_source.iter().max().expect("validated");
    let n_target = *session.config.n.iter().max().expect("validated");
    let (sources, target) = session.install(|| -> Result<_> {
        Ok((
            source_datasets(&family, &settings, n_source, session.seed)?,
            target_dataset(&family, &settings, n_target, session.seed)?,
        ))
    })?;
    let mut outputs = Vec::new();
    for (i, ds) in sources.iter().enumerate() {
        let path = session.source_path(i);
        ds.save(&path)?;
        outputs.extend(dataset_files(&path));
    }
    let path = session.target_path();
    target.save(&path)?;
    outputs.extend(dataset_files(&path));
    write_manifest(
        session,
        "collect",
        &format!("s{}", session.seed),
        &[session.family_path()],
        &outputs,
    )?;
    Ok(outputs)
}

fn source_inputs(session: &Session, num_sources: usize) -> Vec<PathBuf> {
    let mut inputs = vec![session.family_path()];
    for i in 0..num_sources {
        inputs.extend(dataset_files(&session.source_path(i)));
    }
    inputs
}

pub fn learn_rep(session: &Session, sizes: &Sizes) -> Result<PathBuf> {
    let n_source = session.n_source(sizes);
    let family = session.load_family()?;
    let sources = session.load_sources(&family, n_source)?;
    let classes = session.classes(&family);
    let rep = session.install(|| learn_representation(&sources, &classes))?;
    let path = session.rep_path(n_source);
    std::fs::write(&path, rep.to_json()? + "\n")?;
    let inputs = source_inputs(session, family.num_sources());
    write_manifest(
        session,
        "learn-rep",
        &format!("s{}-NS{n_source}", session.seed),
        &inputs,
        std::slice::from_ref(&path),
    )?;
    Ok(path)
}

fn epsilon_model(
    session: &Session,
    family: &TaskFamily,
    sources: &[OfflineDataset],
    classes: &HypothesisClasses,
) -> Result<EpsilonModel> {
    EpsilonModel::new(
        sources,
        classes,
        family.alpha_max()?,
        session.config.planner.delta,
    )
}

pub fn density(session: &Session, sizes: &Sizes) -> Result<PathBuf> {
    let n_source = session.n_source(sizes);
    let family = session.load_family()?;
    let sources = session.load_sources(&family, n_source)?;
    let target = OfflineDataset::load(&session.target_path())?;
    let classes = session.classes(&family);
    let model = epsilon_model(session, &family, &sources, &classes)?;
    session.install(|| -> Result<()> {
        for h in 1..=target.horizon() {
            model.epsilon_h(&target.slice(h), h)?;
        }
        Ok(())
    })?;
    let path = session.epsilon_path(n_source);
    model.write_csv(std::fs::File::create(&path)?)?;
    let mut inputs = source_inputs(session, family.num_sources());
    inputs.extend(dataset_files(&session.target_path()));
    write_manifest(
        session,
        "density",
        &format!("s{}-NS{n_source}", session.seed),
        &inputs,
        std::slice::from_ref(&path),
    )?;
    Ok(path)
}

/// What a policy needs to act: the feature class, the chosen maps and the ε
/// model for PRT.
struct Planning {
    family: TaskFamily,
    class: Vec<FeatureMap>,
    rep: Option<LearnedRep>,
    epsilon: Option<EpsilonModel>,
    inputs: Vec<PathBuf>,
}

impl Planning {
    fn load(session: &Session, algo: Algo, n_source: usize) -> Result<Self> {
        let family = session.load_family()?;
        if algo == Algo::Ucb {
            let class = vec![true_feature(&family)];
            return Ok(Self {
                family,
                class,
                rep: None,
                epsilon: None,
                inputs: vec![session.family_path()],
            });
        }
        let rep = LearnedRep::from_json(&std::fs::read_to_string(session.rep_path(n_source))?)?;
        let classes = session.classes(&family);
        let mut inputs = vec![session.family_path(), session.rep_path(n_source)];
        let epsilon = if algo == Algo::Prt {
            let sources = session.load_sources(&family, n_source)?;
            inputs = source_inputs(session, family.num_sources());
            inputs.push(session.rep_path(n_source));
            Some(epsilon_model(session, &family, &sources, &classes)?)
        } else {
            None
        };
        Ok(Self {
            family,
            class: classes.phi,
            rep: Some(rep),
            epsilon,
            inputs,
        })
    }

    fn context(&self) -> Result<PlanContext<'_>> {
        let env = &self.family.target;
        let eps = match &self.epsilon {
            Some(m) => EpsilonFn::Model(m),
            None => EpsilonFn::Constant(0.0),
        };
        match &self.rep {
            Some(rep) => PlanContext::learned(env, &self.class, rep, eps),
            None => PlanContext::new(env, &self.class, vec![0; env.horizon()], eps),
        }
    }
}

pub fn plan_policy(session: &Session, sizes: &Sizes, algo: Algo) -> Result<PathBuf> {
    let n_source = session.n_source(sizes);
    let n = session.n_target(sizes);
    let planning = Planning::load(session, algo, n_source)?;
    let ctx = planning.context()?;
    let mut inputs = planning.inputs.clone();
    let policy = session.install(|| -> Result<LinearQPolicy> {
        if algo == Algo::Ucb {
            let seed = derived_seed(session.seed, UCB_STREAM);
            return Ok(
                lsvi_ucb_online(&ctx, &session.config.planner, &session.config.ucb, seed)?.policy,
            );
        }
        let target = session.load_target(n)?;
        let counts = TransitionCounts::from_dataset(&ctx, &target)?;
        plan(&ctx, &counts, &session.config.planner, algo.mode())
    })?;
    if algo != Algo::Ucb {
        inputs.extend(dataset_files(&session.target_path()));
    }
    let path = session.policy_path(algo, n_source, n);
    std::fs::write(&path, policy.to_json()? + "\n")?;
    write_manifest(
        session,
        "plan",
        &session.cell_stem(algo, n_source, n),
        &inputs,
        std::slice::from_ref(&path),
    )?;
    Ok(path)
}

pub fn eval_policy(session: &Session, sizes: &Sizes, algo: Algo) -> Result<PathBuf> {
    let n_source = session.n_source(sizes);
    let n = session.n_target(sizes);
    let planning = Planning::load(session, algo, n_source)?;
    let ctx = planning.context()?;
    let policy_path = session.policy_path(algo, n_source, n);
    let policy = LinearQPolicy::from_json(&std::fs::read_to_string(&policy_path)?)?;
    if policy.mode != algo.mode() {
        return Err(Error::Format(format!(
            "{} holds a {} policy",
            policy_path.display(),
            policy.mode.name()
        )));
    }
    let evaluation = session.install(|| {
        evaluate_policy(
            &planning.family.target,
            &policy,
            &ctx,
            session.config.eval_episodes,
            derived_seed(session.seed, EVAL_STREAM),
        )
    })?;
    let row = GridRow {
        n_source,
        n: if algo == Algo::Ucb {
            policy.num_trajectories
        } else {
            n
        },
        seed: session.seed,
        algo: algo.name().to_string(),
        mean_reward: evaluation.mean,
        stderr: evaluation.stderr,
        episodes_used: policy.num_trajectories,
    };
    let path = session.eval_path(algo, n_source, n);
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.serialize(&row)?;
    wtr.flush()?;
    let mut inputs = planning.inputs.clone();
    inputs.push(policy_path);
    write_manifest(
        session,
        "eval",
        &session.cell_stem(algo, n_source, n),
        &inputs,
        std::slice::from_ref(&path),
    )?;
    Ok(path)
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<Completion> {
    match &cli.command {
        Command::GenTasks(common) => {
            let session = Session::new(common)?;
            println!("{}", gen_tasks(&session)?.display());
        }
        Command::Collect(common) => {
            let session = Session::new(common)?;
            for path in collect_data(&session)? {
                println!("{}", path.display());
            }
        }
        Command::LearnRep { common, sizes } => {
            let session = Session::new(common)?;
            println!("{}", learn_rep(&session, sizes)?.display());
        }
        Command::Density { common, sizes } => {
            let session = Session::new(common)?;
            println!("{}", density(&session, sizes)?.display());
        }
        Command::Plan {
            common,
            sizes,
            algo,
        } => {
            let session = Session::new(common)?;
            println!("{}", plan_policy(&session, sizes, *algo)?.display());
        }
        Command::Eval {
            common,
            sizes,
            algo,
        } => {
            let session = Session::new(common)?;
            println!("{}", eval_policy(&session, sizes, *algo)?.display());
        }
        Command::Grid { common, algo } => {
            let session = Session::new(common)?;
            let report = run_grid(&session, *algo)?;
            print!("{}", report.table());
            if !report.failures.is_empty() {
                eprintln!(
                    "{} grid unit(s) failed; see failures.csv",
                    report.failures.len()
                );
                return Ok(Completion::Partial);
            }
        }
        Command::Validate(common) => {
            let session = Session::new(common)?;
            for line in run_validation(&session)? {
                println!("{line}");
            }
        }
    }
    Ok(Completion::Complete)
}
