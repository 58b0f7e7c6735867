use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use optforge::ddo::{self, DdoParams};
use optforge::expert;
use optforge::pipeline::render::{render_policy, Overlay, RenderFormat};
use optforge::pipeline::{self, persist, ConfigError, Experiment, ExperimentConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "optforge", version, about = "Option discovery from expert trajectories in gridworlds")]
struct Cli {
    /// Key-value config file; OPTFORGE_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the expert dataset.
    Expert,
    /// Fit options to the expert dataset in the output directory.
    Ddo,
    /// Learn the meta-policy over the fitted options.
    Smdp,
    /// Evaluate the meta-policy and write metrics and tables.
    Eval,
    /// Draw the expert policy, or one fitted option, as arrows.
    Render {
        /// Option index to draw (needs ddo_params.json); omit for the expert.
        #[arg(long)]
        option: Option<usize>,
        #[arg(long, value_enum, default_value = "ascii")]
        format: Format,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every stage once.
    Pipeline,
    /// Run the iterated refinement loop.
    Iterate,
    /// Print the effective configuration.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ascii,
    Svg,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn render(cfg: ExperimentConfig, option: Option<usize>, format: Format, output: Option<PathBuf>) -> Result<(), PipelineError> {
    let exp = Experiment::new(cfg)?;
    let format = match format {
        Format::Ascii => RenderFormat::Ascii,
        Format::Svg => RenderFormat::Svg,
    };
    let stage_err = |e: Box<dyn std::error::Error + Send + Sync>| PipelineError::Stage { stage: "render", source: e };
    let doc = match option {
        None => {
            let c = &exp.config.expert;
            let vt = expert::value_iteration(&exp.env, exp.goal, c.vi_tol, c.vi_max_iters).map_err(|e| stage_err(e.into()))?;
            let overlay = Overlay {
                goal: Some(exp.goal),
                termination: None,
            };
            render_policy(exp.map(), &vt.greedy_policy(), format, overlay)
        }
        Some(h) => {
            let params: DdoParams =
                persist::load(&exp.config.out.join(pipeline::PARAMS_FILE)).map_err(|e| stage_err(e.into()))?;
            if h >= params.n_options || params.n_states != exp.env.n_states() {
                return Err(stage_err(format!("option {h} not available in fitted parameters").into()));
            }
            let set = ddo::extract_options(&params);
            let opt = &set.options[h];
            let overlay = Overlay {
                goal: None,
                termination: Some(&opt.termination),
            };
            render_policy(exp.map(), &opt.policy, format, overlay)
        }
    };
    match output {
        Some(path) => persist::write_bytes(&path, doc.as_bytes()).map_err(|e| stage_err(e.into())),
        None => {
            print!("{doc}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = build_config(&cli)?;
    match cli.command {
        Command::Expert => pipeline::run_stage(&cfg, Stage::Expert),
        Command::Ddo => pipeline::run_stage(&cfg, Stage::Ddo),
        Command::Smdp => pipeline::run_stage(&cfg, Stage::Smdp),
        Command::Eval => pipeline::run_stage(&cfg, Stage::Eval),
        Command::Render { option, format, output } => render(cfg, option, format, output),
        Command::Pipeline => {
            let a = pipeline::run_pipeline(&cfg)?;
            print!("{}", a.evaluation.report.to_text());
            Ok(())
        }
        Command::Iterate => {
            for it in pipeline::run_iterated(&cfg)? {
                println!(
                    "iteration {}: buffer {}, held-out log-likelihood {:.4}, success {:.3}",
                    it.iteration, it.buffer_size, it.heldout_log_likelihood, it.evaluation.report.success_rate
                );
            }
            Ok(())
        }
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
