//! Experiment orchestration.
//!
//! A run goes expert → DDO → SMDP → eval. Each stage writes its artifacts and a
//! manifest into the output directory as soon as it finishes, and each stage
//! draws randomness from its own seed derived from the experiment seed and the
//! outer-iteration index. Re-running any stage from the artifacts on disk
//! therefore reproduces its outputs byte for byte.

pub mod config;
pub mod persist;
pub mod render;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use rand::Rng as _;
use thiserror::Error;

use crate::ddo::{self, DdoParams, TrainConfig, TrainHistory};
use crate::expert::{self, make_handcoded_option, ExpertError, Trajectory};
use crate::gridworld::{GridMap, Gridworld, StateId, Task};
use crate::metrics::{self, DiffusionMode, MetricReport, VisitCount};
use crate::rng;
use crate::smdp::{self, OptionSet, SegmentedRollout, SmdpConfig, SmdpQTable};

pub use config::{ConfigError, DiffusionSetting, ExpertKind, ExperimentConfig};
use persist::{file_sha256, sha256_hex, write_bytes, PersistError, StageManifest};

pub const EXPERT_FILE: &str = "expert_trajectories.jsonl";
pub const PARAMS_FILE: &str = "ddo_params.json";
pub const HISTORY_FILE: &str = "ddo_history.csv";
pub const Q_FILE: &str = "smdp_q.json";
pub const ROLLOUTS_FILE: &str = "eval_rollouts.jsonl";
pub const REPORT_FILE: &str = "metrics.json";
pub const REPORT_TEXT_FILE: &str = "metrics.txt";
pub const TABLES_TEXT_FILE: &str = "tables.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

fn in_stage<E: std::error::Error + Send + Sync + 'static>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Expert,
    Ddo,
    Smdp,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Expert => "expert",
            Stage::Ddo => "ddo",
            Stage::Smdp => "smdp",
            Stage::Eval => "eval",
        }
    }

    fn manifest_file(self) -> String {
        format!("manifest_{}.json", self.name())
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub rollouts: Vec<SegmentedRollout>,
    pub usage: metrics::UsageStats,
}

#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub trajectories: Vec<Trajectory>,
    pub params: DdoParams,
    pub history: TrainHistory,
    pub options: OptionSet,
    pub table: SmdpQTable,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct IterationArtifacts {
    pub iteration: usize,
    pub buffer_size: usize,
    pub params: DdoParams,
    pub history: TrainHistory,
    pub table: SmdpQTable,
    pub evaluation: Evaluation,
    pub heldout_log_likelihood: f64,
    pub agent_trajectories: Vec<Trajectory>,
}

/// A validated configuration bound to its environment and meta-policy goal.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub env: Gridworld,
    pub goal: StateId,
    config_sha: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, PipelineError> {
        let map = config.validate()?;
        let env = Gridworld::new(map, config.mdp).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let goal = match config.eval.goal {
            Some(c) => env.map.state_at(c).expect("validated goal"),
            None => StateId(rng::derived(config.seed, "goal", 0).random_range(0..env.n_states())),
        };
        let config_sha = sha256_hex(config.identity_text().as_bytes());
        Ok(Experiment {
            config,
            env,
            goal,
            config_sha,
        })
    }

    pub fn map(&self) -> &GridMap {
        &self.env.map
    }

    fn out(&self) -> &Path {
        &self.config.out
    }

    fn write_manifest(
        &self,
        dir: &Path,
        stage: Stage,
        seed: u64,
        inputs: BTreeMap<String, String>,
        outputs: &[&str],
    ) -> Result<(), PersistError> {
        let mut hashes = BTreeMap::new();
        for name in outputs {
            hashes.insert(name.to_string(), file_sha256(&dir.join(name))?);
        }
        let m = StageManifest {
            stage: stage.name().to_string(),
            seed,
            config_sha256: self.config_sha.clone(),
            inputs,
            outputs: hashes,
        };
        persist::save(&dir.join(stage.manifest_file()), &m)
    }

    pub fn write_config(&self) -> Result<(), PipelineError> {
        let mut text = self.config.identity_text();
        text.push('\n');
        write_bytes(&self.out().join(CONFIG_FILE), text.as_bytes()).map_err(in_stage("config"))
    }

    fn trajectories_jsonl(&self, data: &[Trajectory]) -> Vec<u8> {
        let mut buf = Vec::new();
        expert::write_jsonl(self.map(), data, &mut buf).expect("writing to memory");
        buf
    }

    // ---- expert -------------------------------------------------------------

    /// Expert dataset for this configuration, without touching the disk.
    pub fn expert_dataset(&self, label: &str, n: usize) -> Result<Vec<Trajectory>, ExpertError> {
        let seed = rng::derive_seed(self.config.seed, label, 0);
        let cfg = expert::ExpertConfig {
            n_trajectories: n,
            ..self.config.expert
        };
        match self.config.expert_kind {
            ExpertKind::Flat => expert::flat_expert_dataset(&self.env, &cfg, seed),
            ExpertKind::Hierarchical => self.hierarchical_dataset(&cfg, seed),
        }
    }

    /// Hand-coded bottleneck options, one meta-policy per sampled task.
    fn hierarchical_dataset(&self, cfg: &expert::ExpertConfig, seed: u64) -> Result<Vec<Trajectory>, ExpertError> {
        let options = self
            .map()
            .bottlenecks()
            .into_iter()
            .map(|b| make_handcoded_option(self.map(), b))
            .collect::<Result<Vec<_>, _>>()?;
        let set = OptionSet::new(options).expect("one option per distinct cell");
        (0..cfg.n_trajectories as u64)
            .map(|i| {
                let traj_seed = rng::derive_seed(seed, "expert", i);
                let mut r = rng::seeded(traj_seed);
                let task = self.env.sample_task(&mut r);
                let smdp_cfg = SmdpConfig {
                    episodes: self.config.expert_smdp_episodes,
                    seed: rng::derive_seed(seed, "expert-smdp", i),
                    ..self.config.smdp.clone()
                };
                let table = smdp::smdp_q_learning(&self.env, &set, task.goal, &smdp_cfg).expect("options cover map");
                let roll = smdp::rollout_meta(&self.env, &table, &set, &task, &mut r, 0.0, smdp_cfg.option_max_steps, traj_seed)
                    .expect("table matches option set");
                Ok(roll.annotated_trajectory())
            })
            .collect()
    }

    pub fn stage_expert(&self) -> Result<Vec<Trajectory>, PipelineError> {
        let data = self
            .expert_dataset("expert-data", self.config.expert.n_trajectories)
            .map_err(in_stage("expert"))?;
        let dir = self.out();
        write_bytes(&dir.join(EXPERT_FILE), &self.trajectories_jsonl(&data)).map_err(in_stage("expert"))?;
        self.write_manifest(dir, Stage::Expert, self.config.seed, BTreeMap::new(), &[EXPERT_FILE])
            .map_err(in_stage("expert"))?;
        info!("expert: {} trajectories", data.len());
        Ok(data)
    }

    pub fn heldout_dataset(&self) -> Result<Vec<Trajectory>, ExpertError> {
        self.expert_dataset("expert-heldout", self.config.eval.heldout_trajectories.max(1))
    }

    // ---- ddo ----------------------------------------------------------------

    pub fn ddo_config(&self, iteration: usize) -> TrainConfig {
        TrainConfig {
            seed: rng::derive_seed(self.config.seed, "ddo", iteration as u64),
            ..self.config.ddo.clone()
        }
    }

    pub fn stage_ddo(
        &self,
        dir: &Path,
        data: &[Trajectory],
        warm: Option<&DdoParams>,
        iteration: usize,
    ) -> Result<(DdoParams, TrainHistory), PipelineError> {
        self.stage_ddo_with(dir, data, warm, self.ddo_config(iteration))
    }

    fn stage_ddo_with(
        &self,
        dir: &Path,
        data: &[Trajectory],
        warm: Option<&DdoParams>,
        cfg: TrainConfig,
    ) -> Result<(DdoParams, TrainHistory), PipelineError> {
        let n_states = self.env.n_states();
        let (params, history) = match warm {
            Some(p) => ddo::train_from(p.clone(), data, &cfg),
            None => ddo::train(n_states, data, &cfg),
        }
        .map_err(in_stage("ddo"))?;
        persist::save(&dir.join(PARAMS_FILE), &params).map_err(in_stage("ddo"))?;
        let mut rows = Vec::new();
        for (epoch, (ll, reg)) in history.log_likelihood.iter().zip(&history.regularizer).enumerate() {
            rows.push(vec![epoch.to_string(), ll.to_string(), reg.to_string()]);
        }
        write_csv(&dir.join(HISTORY_FILE), &["epoch", "log_likelihood", "regularizer"], &rows).map_err(in_stage("ddo"))?;
        let mut inputs = BTreeMap::new();
        inputs.insert("trajectories".to_string(), sha256_hex(&self.trajectories_jsonl(data)));
        if let Some(p) = warm {
            inputs.insert("warm_start".to_string(), sha256_hex(persist::to_json(p).as_bytes()));
        }
        self.write_manifest(dir, Stage::Ddo, cfg.seed, inputs, &[PARAMS_FILE, HISTORY_FILE])
            .map_err(in_stage("ddo"))?;
        info!(
            "ddo: log-likelihood {:.4} -> {:.4}",
            history.log_likelihood[0],
            history.log_likelihood.last().copied().unwrap_or(f64::NAN)
        );
        Ok((params, history))
    }

    // ---- smdp ---------------------------------------------------------------

    pub fn smdp_config(&self, iteration: usize) -> SmdpConfig {
        SmdpConfig {
            seed: rng::derive_seed(self.config.seed, "smdp", iteration as u64),
            ..self.config.smdp.clone()
        }
    }

    pub fn stage_smdp(&self, dir: &Path, params: &DdoParams, iteration: usize) -> Result<(OptionSet, SmdpQTable), PipelineError> {
        if params.n_states != self.env.n_states() {
            return Err(in_stage("smdp")(ddo::DdoError::ShapeMismatch));
        }
        let options = ddo::extract_options(params);
        let cfg = self.smdp_config(iteration);
        let table = smdp::smdp_q_learning(&self.env, &options, self.goal, &cfg).map_err(in_stage("smdp"))?;
        persist::save(&dir.join(Q_FILE), &table).map_err(in_stage("smdp"))?;
        let mut inputs = BTreeMap::new();
        inputs.insert("ddo_params".to_string(), sha256_hex(persist::to_json(params).as_bytes()));
        self.write_manifest(dir, Stage::Smdp, cfg.seed, inputs, &[Q_FILE]).map_err(in_stage("smdp"))?;
        Ok((options, table))
    }

    // ---- eval ---------------------------------------------------------------

    fn eval_starts(&self, label: &str, iteration: usize, n: usize) -> Vec<StateId> {
        let mut r = rng::derived(self.config.seed, label, iteration as u64);
        (0..n)
            .map(|_| loop {
                let s = StateId(r.random_range(0..self.env.n_states()));
                if s != self.goal {
                    break s;
                }
            })
            .collect()
    }

    fn task(&self, start: StateId) -> Task {
        Task {
            start,
            goal: self.goal,
            map_id: self.map().name().to_string(),
        }
    }

    /// Greedy meta-policy rollouts from seeded starts towards the fixed goal.
    pub fn meta_rollouts(
        &self,
        options: &OptionSet,
        table: &SmdpQTable,
        label: &str,
        iteration: usize,
        n: usize,
    ) -> Result<Vec<SegmentedRollout>, smdp::SmdpError> {
        self.eval_starts(label, iteration, n)
            .into_iter()
            .enumerate()
            .map(|(i, start)| {
                let seed = rng::derive_seed(self.config.seed, label, ((iteration as u64) << 32) | i as u64);
                let mut r = rng::seeded(seed);
                smdp::rollout_meta(&self.env, table, options, &self.task(start), &mut r, 0.0, self.config.smdp.option_max_steps, seed)
            })
            .collect()
    }

    pub fn evaluate(&self, params: &DdoParams, table: &SmdpQTable, iteration: usize) -> Result<Evaluation, PipelineError> {
        let stage = in_stage::<metrics::MetricError>("eval");
        let options = ddo::extract_options(params);
        let n = self.config.eval.n_eval_tasks;
        let rollouts = self
            .meta_rollouts(&options, table, "eval", iteration, n)
            .map_err(in_stage("eval"))?;

        let vt = expert::value_iteration(&self.env, self.goal, self.config.expert.vi_tol, self.config.expert.vi_max_iters)
            .map_err(in_stage("eval"))?;
        let expert_policy = vt.greedy_policy();
        let expert_runs: Vec<Trajectory> = self
            .eval_starts("eval", iteration, n)
            .into_iter()
            .map(|s| {
                let mut r = rng::seeded(0);
                expert::rollout_flat(&self.env, &self.task(s), &expert_policy, &mut r, self.env.spec.max_episode_steps, 0)
            })
            .collect();
        let rho = ddo::visitation_weights(self.env.n_states(), &expert_runs);
        let agent_trajs: Vec<Trajectory> = rollouts.iter().map(|r| r.trajectory.clone()).collect();
        let agent: Vec<_> = metrics::empirical_action_dists(self.env.n_states(), &agent_trajs, metrics::LAPLACE_SMOOTHING)
            .into_iter()
            .map(Some)
            .collect();
        let ce_error = metrics::cross_entropy_metric(&expert_policy, &agent, &rho).map_err(stage)?;
        let hinge = metrics::hinge_value_loss(&table.values(), &vt.v).map_err(in_stage("eval"))?;
        let usage = metrics::usage_stats(&rollouts).map_err(in_stage("eval"))?;
        let mode = match self.config.eval.diffusion {
            DiffusionSetting::Exact => DiffusionMode::ExactPrimitives,
            DiffusionSetting::MonteCarlo => DiffusionMode::MonteCarlo {
                samples: self.config.eval.diffusion_samples,
                cap: self.config.eval.diffusion_cap,
            },
        };
        let mut diff_rng = rng::derived(self.config.seed, "diffusion", iteration as u64);
        let diffusion = metrics::diffusion_time(&self.env, &options, mode, self.config.smdp.option_max_steps, &mut diff_rng)
            .map_err(in_stage("eval"))?;
        let visits = metrics::visitation_counts(self.env.n_states(), &agent_trajs);
        let uniform = vec![1.0 / self.env.n_states() as f64; self.env.n_states()];
        let report = MetricReport {
            ce_error,
            hinge_loss: hinge,
            per_option_termination: metrics::termination_stats(&options),
            option_time_fraction: usage.option_time_fraction,
            median_option_duration: usage.median_duration,
            mean_option_duration: usage.mean_duration,
            durations_defined: usage.durations_defined,
            success_rate: usage.success_rate,
            diffusion_time: diffusion,
            mean_option_kl: ddo::mean_pairwise_kl(params, &uniform),
            visitation: visits
                .counts
                .iter()
                .enumerate()
                .map(|(s, &count)| VisitCount {
                    state: self.map().coord(StateId(s)),
                    count,
                })
                .collect(),
        };
        Ok(Evaluation { report, rollouts, usage })
    }

    pub fn stage_eval(&self, dir: &Path, params: &DdoParams, table: &SmdpQTable, iteration: usize) -> Result<Evaluation, PipelineError> {
        let ev = self.evaluate(params, table, iteration)?;
        let err = in_stage::<PersistError>("eval");
        write_bytes(&dir.join(ROLLOUTS_FILE), persist::rollouts_to_jsonl(self.map(), &ev.rollouts).as_bytes()).map_err(err)?;
        persist::save(&dir.join(REPORT_FILE), &ev.report).map_err(in_stage("eval"))?;
        write_bytes(&dir.join(REPORT_TEXT_FILE), ev.report.to_text().as_bytes()).map_err(in_stage("eval"))?;
        let tables = self.write_tables(dir, &ev).map_err(in_stage("eval"))?;
        let mut inputs = BTreeMap::new();
        inputs.insert("ddo_params".to_string(), sha256_hex(persist::to_json(params).as_bytes()));
        inputs.insert("smdp_q".to_string(), sha256_hex(persist::to_json(table).as_bytes()));
        let mut outputs = vec![ROLLOUTS_FILE, REPORT_FILE, REPORT_TEXT_FILE, TABLES_TEXT_FILE];
        outputs.extend(tables.iter().map(String::as_str));
        self.write_manifest(dir, Stage::Eval, rng::derive_seed(self.config.seed, "eval", iteration as u64), inputs, &outputs)
            .map_err(in_stage("eval"))?;
        info!(
            "eval: success {:.3}, option time {:.3}, hinge {:.4}, ce {:.4}",
            ev.report.success_rate, ev.report.option_time_fraction, ev.report.hinge_loss, ev.report.ce_error
        );
        Ok(ev)
    }

    /// CSV files mirroring the five result tables, plus an aligned text rendering.
    fn write_tables(&self, dir: &Path, ev: &Evaluation) -> Result<Vec<String>, PersistError> {
        let r = &ev.report;
        let env_name = self.map().name().to_string();
        let tables: Vec<(&str, Vec<&str>, Vec<Vec<String>>)> = vec![
            (
                "table1_termination.csv",
                vec!["option", "mean_beta", "variance"],
                r.per_option_termination
                    .iter()
                    .enumerate()
                    .map(|(h, (m, v))| vec![(h + 1).to_string(), m.to_string(), v.to_string()])
                    .collect(),
            ),
            (
                "table2_ce.csv",
                vec!["environment", "ce_error"],
                vec![vec![env_name.clone(), r.ce_error.to_string()]],
            ),
            (
                "table3_hinge.csv",
                vec!["environment", "hinge_loss"],
                vec![vec![env_name, r.hinge_loss.to_string()]],
            ),
            (
                "table4_alpha.csv",
                vec!["alpha", "median_duration", "mean_duration", "option_time_fraction", "hinge_loss"],
                vec![vec![
                    self.config.ddo.alpha.to_string(),
                    r.median_option_duration.to_string(),
                    r.mean_option_duration.to_string(),
                    r.option_time_fraction.to_string(),
                    r.hinge_loss.to_string(),
                ]],
            ),
            (
                "table5_lambda.csv",
                vec!["lambda", "median_steps", "hinge_loss"],
                vec![vec![
                    self.config.ddo.lambda.to_string(),
                    r.median_option_duration.to_string(),
                    r.hinge_loss.to_string(),
                ]],
            ),
        ];
        let mut text = String::new();
        let mut names = Vec::new();
        for (name, header, rows) in &tables {
            write_csv(&dir.join(name), header, rows)?;
            text.push_str(&format!("{name}\n{}\n", aligned(header, rows)));
            names.push(name.to_string());
        }
        write_bytes(&dir.join(TABLES_TEXT_FILE), text.as_bytes())?;
        Ok(names)
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), PersistError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_io = |e: csv::Error| PersistError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.write_record(row).map_err(to_io)?;
    }
    let bytes = w.into_inner().map_err(|e| PersistError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    write_bytes(path, &bytes)
}

fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn read_trajectories(exp: &Experiment, path: &Path) -> Result<Vec<Trajectory>, PipelineError> {
    let file = std::fs::File::open(path).map_err(|e| in_stage("load")(persist::io_err(path)(e)))?;
    expert::read_jsonl(exp.map(), std::io::BufReader::new(file)).map_err(in_stage("load"))
}

/// Full single pass: expert → DDO → SMDP → eval.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineArtifacts, PipelineError> {
    let exp = Experiment::new(config.clone())?;
    exp.write_config()?;
    let trajectories = exp.stage_expert()?;
    let out = exp.out().to_path_buf();
    let (params, history) = exp.stage_ddo(&out, &trajectories, None, 0)?;
    let (options, table) = exp.stage_smdp(&out, &params, 0)?;
    let evaluation = exp.stage_eval(&out, &params, &table, 0)?;
    Ok(PipelineArtifacts {
        trajectories,
        params,
        history,
        options,
        table,
        evaluation,
    })
}

/// Runs one stage from the upstream artifacts already in the output directory.
pub fn run_stage(config: &ExperimentConfig, stage: Stage) -> Result<(), PipelineError> {
    let exp = Experiment::new(config.clone())?;
    let out = exp.out().to_path_buf();
    let load_err = in_stage::<PersistError>("load");
    match stage {
        Stage::Expert => {
            exp.write_config()?;
            exp.stage_expert()?;
        }
        Stage::Ddo => {
            let data = read_trajectories(&exp, &out.join(EXPERT_FILE))?;
            exp.stage_ddo(&out, &data, None, 0)?;
        }
        Stage::Smdp => {
            let params: DdoParams = persist::load(&out.join(PARAMS_FILE)).map_err(load_err)?;
            exp.stage_smdp(&out, &params, 0)?;
        }
        Stage::Eval => {
            let params: DdoParams = persist::load(&out.join(PARAMS_FILE)).map_err(load_err)?;
            let table: SmdpQTable = persist::load(&out.join(Q_FILE)).map_err(in_stage("load"))?;
            let options = ddo::extract_options(&params);
            if !table.matches(exp.env.n_states(), &options) {
                return Err(in_stage("eval")(smdp::SmdpError::ShapeMismatch));
            }
            exp.stage_eval(&out, &params, &table, 0)?;
        }
    }
    Ok(())
}

pub fn iteration_dir(out: &Path, iteration: usize) -> PathBuf {
    out.join(format!("iter_{iteration}"))
}

/// Iterated loop: refine options on a growing trajectory buffer that receives
/// agent rollouts after every outer iteration.
pub fn run_iterated(config: &ExperimentConfig) -> Result<Vec<IterationArtifacts>, PipelineError> {
    let exp = Experiment::new(config.clone())?;
    exp.write_config()?;
    let mut buffer = exp.stage_expert()?;
    let heldout = exp.heldout_dataset().map_err(in_stage("expert"))?;
    let settings = config.iterate.clone();
    // Each outer iteration refines rather than retrains: by default the single-pass
    // epoch budget is spread over the iterations, so N = 1 is the plain pipeline.
    let per_iteration_epochs = match settings.ddo_epochs {
        0 => config.ddo.epochs.div_ceil(settings.outer_iterations),
        n => n,
    };
    let mut results: Vec<IterationArtifacts> = Vec::new();
    let mut summary = Vec::new();
    for it in 0..settings.outer_iterations {
        let dir = iteration_dir(exp.out(), it);
        let batch: Vec<Trajectory> = if settings.sample_size >= buffer.len() {
            buffer.clone()
        } else {
            let mut r = rng::derived(config.seed, "iterate-sample", it as u64);
            let mut idx = sample(&mut r, buffer.len(), settings.sample_size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| buffer[i].clone()).collect()
        };
        let warm = match results.last() {
            Some(prev) if settings.warm_start => Some(&prev.params),
            _ => None,
        };
        let ddo_cfg = TrainConfig {
            epochs: per_iteration_epochs,
            ..exp.ddo_config(it)
        };
        let (params, history) = exp.stage_ddo_with(&dir, &batch, warm, ddo_cfg)?;
        let (options, table) = exp.stage_smdp(&dir, &params, it)?;
        let evaluation = exp.stage_eval(&dir, &params, &table, it)?;
        let heldout_ll = ddo::log_likelihood(&params, &heldout).map_err(in_stage("ddo"))?;
        let agent: Vec<Trajectory> = exp
            .meta_rollouts(&options, &table, "agent-rollout", it, settings.agent_rollouts)
            .map_err(in_stage("iterate"))?
            .iter()
            .map(SegmentedRollout::annotated_trajectory)
            .collect();
        if !agent.is_empty() {
            write_bytes(&dir.join("agent_trajectories.jsonl"), &exp.trajectories_jsonl(&agent)).map_err(in_stage("iterate"))?;
        }
        buffer.extend(agent.iter().cloned());
        summary.push(vec![
            it.to_string(),
            buffer.len().to_string(),
            history.log_likelihood.last().copied().unwrap_or(f64::NAN).to_string(),
            heldout_ll.to_string(),
            evaluation.report.success_rate.to_string(),
            evaluation.report.option_time_fraction.to_string(),
            evaluation.report.hinge_loss.to_string(),
            evaluation.report.ce_error.to_string(),
        ]);
        results.push(IterationArtifacts {
            iteration: it,
            buffer_size: buffer.len(),
            params,
            history,
            table,
            evaluation,
            heldout_log_likelihood: heldout_ll,
            agent_trajectories: agent,
        });
    }
    write_csv(
        &exp.out().join("iterate_summary.csv"),
        &[
            "iteration",
            "buffer_size",
            "train_log_likelihood",
            "heldout_log_likelihood",
            "success_rate",
            "option_time_fraction",
            "hinge_loss",
            "ce_error",
        ],
        &summary,
    )
    .map_err(in_stage("iterate"))?;
    Ok(results)
}
