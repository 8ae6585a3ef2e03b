//! `odrl`: train, evaluate, detect, explain, compare and gradient-check.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odrl_core::agents::{evaluate, input_channels, AgentConfig, Algo, EvalStats, RunConfig, HISTORY};
use odrl_core::envsim::GroundTruth;
use odrl_core::harness::{run_cell, run_disagreement_analysis, run_score_comparison, sample_states, ExperimentSpec};
use odrl_core::pnm::Frame;
use odrl_core::saliency::{object_saliency, pixel_saliency, ExplainState};
use odrl_core::tensornet::{argmax, grad_check, load_checkpoint, Fault, Head, Profile, QNet, Tensor};
use odrl_core::vision::{
    detect_objects, evaluate_by_type, evaluate_detections, load_manifest, write_detections_csv, Detection,
    DetectionMetrics, Template,
};

#[derive(Parser)]
#[command(name = "odrl", version, about = "Object-sensitive deep Q-learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "K=V")]
    overrides: Vec<String>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent; writes log.csv, checkpoint.bin, eval.csv and config.txt.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with the evaluation protocol of its config.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for eval.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect objects in every .ppm file of a directory.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: PathBuf,
        /// Template manifest; defaults to the sprites of the configured game.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pixel and object saliency for the greedy action of a checkpoint.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of .ppm frames; the last four form the state.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Number of random-policy states to explain when no frames are given.
        #[arg(long, default_value_t = 1)]
        states: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several agents over several seeds and compare their scores.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated agents such as `dqn,o-dqn`.
        #[arg(long, default_value = "dqn,o-dqn", value_delimiter = ',')]
        agents: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// States sampled to compare the first two agents' decisions.
        #[arg(long, default_value_t = 0)]
        disagreements: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of a network profile's gradients.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        profile: String,
        #[arg(long, value_enum, default_value_t = HeadArg::Plain)]
        head: HeadArg,
        /// Input as C,H,W; defaults to 16 planes at 56 (tiny) or 72 (paper) pixels.
        #[arg(long, value_delimiter = ',')]
        input: Vec<usize>,
        #[arg(long, default_value_t = 21)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Plain,
    Dueling,
}

enum Fail {
    Usage(String),
    Runtime(String),
}

impl From<odrl_core::Error> for Fail {
    fn from(e: odrl_core::Error) -> Self {
        use odrl_core::Error::*;
        match e {
            Config(_) | Usage(_) | Dimension(_) | Range(_) => Fail::Usage(e.to_string()),
            _ => Fail::Runtime(e.to_string()),
        }
    }
}

/// Errors while reading user inputs are usage errors whatever their kind.
fn input<T>(r: odrl_core::Result<T>) -> Result<T, Fail> {
    r.map_err(|e| Fail::Usage(e.to_string()))
}

fn io_fail(path: &Path, e: std::io::Error) -> Fail {
    Fail::Runtime(format!("{}: {e}", path.display()))
}

/// Config precedence: `--config`, else `config.txt` beside `fallback`, else
/// defaults; then `--set` overrides, then `--seed`.
fn run_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig, Fail> {
    let beside = fallback.and_then(|p| p.parent()).map(|d| d.join("config.txt"));
    let mut cfg = match (&common.config, beside) {
        (Some(p), _) => input(RunConfig::load(p))?,
        (None, Some(p)) if p.exists() => input(RunConfig::load(&p))?,
        _ => RunConfig::default(),
    };
    for pair in &common.overrides {
        input(cfg.set_pair(pair))?;
    }
    if let Some(s) = common.seed {
        input(cfg.set("seed", &s.to_string()))?;
    }
    input(cfg.validate())?;
    Ok(cfg)
}

fn object_sensitive_of(net: &QNet, cfg: &RunConfig) -> Result<bool, Fail> {
    let k = cfg.env.env_id.num_object_types();
    let (c, h, w) = net.input_shape();
    let (fh, fw) = cfg.env.frame_dims();
    if (h, w) != (fh, fw) || net.num_actions() != cfg.env.env_id.actions().len() {
        return Err(Fail::Usage(format!(
            "checkpoint expects {h}x{w} frames and {} actions; {} gives {fh}x{fw} and {}",
            net.num_actions(),
            cfg.env.env_id,
            cfg.env.env_id.actions().len()
        )));
    }
    if c == input_channels(true, k) {
        Ok(true)
    } else if c == input_channels(false, k) {
        Ok(false)
    } else {
        Err(Fail::Usage(format!("checkpoint expects {c} input planes")))
    }
}

fn print_eval(label: &str, s: &EvalStats) {
    println!(
        "{label}: mean {} std {} se {} plays {}",
        s.mean,
        s.std,
        s.std_error(),
        s.scores.len()
    );
}

fn cmd_train(common: &Common, out: &Path) -> Result<(), Fail> {
    let cfg = run_config(common, None)?;
    let stats = run_cell(&cfg, out)?;
    print_eval("final eval", &stats);
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, out: Option<&Path>) -> Result<(), Fail> {
    let cfg = run_config(common, Some(checkpoint))?;
    let net = input(load_checkpoint(checkpoint))?;
    let os = object_sensitive_of(&net, &cfg)?;
    let a = &cfg.agent;
    let stats = evaluate(Some(&net), &cfg.env, os, a.eval_plays, a.eval_eps, a.seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
        let mut s = String::from("play,score\n");
        for (i, v) in stats.scores.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        let p = dir.join("eval.csv");
        fs::write(&p, s).map_err(|e| io_fail(&p, e))?;
    }
    print_eval("eval", &stats);
    Ok(())
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>, Fail> {
    let entries = fs::read_dir(dir).map_err(|e| Fail::Usage(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    Ok(files)
}

fn print_metrics(name: &str, m: &DetectionMetrics) {
    println!(
        "{name},{},{},{},{},{},{}",
        m.tp, m.fp, m.fn_, m.precision, m.recall, m.f1
    );
}

fn cmd_detect(common: &Common, frames: &Path, templates: Option<&Path>, out: &Path) -> Result<(), Fail> {
    let cfg = run_config(common, None)?;
    let templates = match templates {
        Some(p) => input(load_manifest(p))?,
        None => Template::for_env(cfg.env.env_id, cfg.env.cell_px),
    };
    let k = templates.iter().map(|t| t.object_type + 1).max().unwrap_or(0);
    let mut rows: Vec<(String, Detection)> = Vec::new();
    let mut per_type = vec![DetectionMetrics::default(); k];
    let mut pooled = DetectionMetrics::default();
    let mut scored = 0;
    for path in ppm_files(frames)? {
        let frame = input(Frame::read_ppm(&path))?;
        let dets = detect_objects(&frame, &templates)?;
        let truth_path = path.with_extension("truth");
        if truth_path.exists() {
            let text = fs::read_to_string(&truth_path).map_err(|e| io_fail(&truth_path, e))?;
            let truth = input(GroundTruth::parse(&text))?;
            pooled = pooled.merge(&evaluate_detections(&dets, &truth));
            for (acc, m) in per_type.iter_mut().zip(evaluate_by_type(&dets, &truth, k)) {
                *acc = acc.merge(&m);
            }
            scored += 1;
        }
        let id = path.file_stem().unwrap().to_string_lossy().into_owned();
        rows.extend(dets.into_iter().map(|d| (id.clone(), d)));
    }
    let mut buf = Vec::new();
    write_detections_csv(&mut buf, &rows).map_err(|e| io_fail(out, e))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    }
    fs::write(out, buf).map_err(|e| io_fail(out, e))?;
    println!("detections: {}", rows.len());
    if scored > 0 {
        println!("metrics over {scored} frames");
        println!("type,tp,fp,fn,precision,recall,f1");
        for (j, m) in per_type.iter().enumerate() {
            print_metrics(&j.to_string(), m);
        }
        print_metrics("all", &pooled);
    }
    Ok(())
}

fn explain_one(net: &QNet, cfg: &RunConfig, os: bool, frames: Vec<Frame>, dir: &Path) -> Result<usize, Fail> {
    let env = &cfg.env;
    let k = env.env_id.num_object_types();
    let templates = Template::for_env(env.env_id, env.cell_px);
    let dets = detect_objects(frames.last().unwrap(), &templates)?;
    let state = input(ExplainState::new(frames, dets, os, k))?;
    let tensor = state.tensor()?;
    let action = argmax(&net.predict(&tensor.to_tensor())?.data);
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    state.newest().write_ppm(dir.join("state.ppm"))?;
    pixel_saliency(net, &tensor, action)?.to_image().write_pgm(dir.join("pixel.pgm"))?;
    let map = object_saliency(net, &state, action, env.env_id.background_color())?;
    map.overlay(state.newest()).write_ppm(dir.join("object.ppm"))?;
    let p = dir.join("objects.csv");
    let mut buf = Vec::new();
    map.write_csv(&mut buf, env.env_id.object_types()).map_err(|e| io_fail(&p, e))?;
    fs::write(&p, buf).map_err(|e| io_fail(&p, e))?;
    Ok(action)
}

fn cmd_explain(common: &Common, checkpoint: &Path, frames: Option<&Path>, states: usize, out: &Path) -> Result<(), Fail> {
    let cfg = run_config(common, Some(checkpoint))?;
    let net = input(load_checkpoint(checkpoint))?;
    let os = object_sensitive_of(&net, &cfg)?;
    let actions = cfg.env.env_id.actions();
    let windows: Vec<Vec<Frame>> = match frames {
        Some(dir) => {
            let files = ppm_files(dir)?;
            if files.is_empty() {
                return Err(Fail::Usage(format!("{}: no .ppm frames", dir.display())));
            }
            let mut w = Vec::new();
            for p in &files[files.len().saturating_sub(HISTORY)..] {
                w.push(input(Frame::read_ppm(p))?);
            }
            while w.len() < HISTORY {
                w.insert(0, w[0].clone());
            }
            vec![w]
        }
        None => {
            if states == 0 {
                return Err(Fail::Usage("--states must be at least 1".into()));
            }
            sample_states(&cfg.env, states, cfg.agent.seed)?
                .into_iter()
                .map(|s| s.frames)
                .collect()
        }
    };
    let single = windows.len() == 1;
    for (i, w) in windows.into_iter().enumerate() {
        let dir = if single { out.to_path_buf() } else { out.join(i.to_string()) };
        let a = explain_one(&net, &cfg, os, w, &dir)?;
        println!("{}: action {}", dir.display(), actions[a].name());
    }
    Ok(())
}

fn parse_agent(name: &str, base: &AgentConfig) -> Result<AgentConfig, Fail> {
    let (os, algo) = match name.strip_prefix("o-") {
        Some(rest) => (true, rest),
        None => (false, name),
    };
    let algo: Algo = algo
        .parse()
        .map_err(|_| Fail::Usage(format!("unknown agent `{name}`")))?;
    Ok(AgentConfig {
        algo,
        object_sensitive: os,
        ..base.clone()
    })
}

fn cmd_compare(common: &Common, agents: &[String], seeds: &[u64], disagreements: usize, out: &Path) -> Result<(), Fail> {
    let cfg = run_config(common, None)?;
    let seeds = match (seeds.is_empty(), common.seed) {
        (false, _) => seeds.to_vec(),
        (true, Some(s)) => vec![s],
        (true, None) => vec![1, 2, 3],
    };
    let spec = ExperimentSpec {
        env: cfg.env.clone(),
        agents: agents
            .iter()
            .map(|a| parse_agent(a.trim(), &cfg.agent))
            .collect::<Result<_, _>>()?,
        total_frames: cfg.total_frames,
        eval_plays: cfg.agent.eval_plays,
        seeds: seeds.clone(),
        out_dir: out.to_path_buf(),
    };
    input(spec.validate())?;
    let report = run_score_comparison(&spec)?;
    for c in &report.cells {
        match &c.eval {
            Some(e) => print_eval(&format!("{}/{}", c.agent, c.seed), e),
            None => println!("{}/{}: failed", c.agent, c.seed),
        }
    }
    for d in &report.deltas {
        println!("delta {} - {} seed {}: {}", d.agent_b, d.agent_a, d.seed, d.delta);
    }
    for f in &report.failures {
        eprintln!("cell failed: {f}");
    }
    let names = spec.agent_names();
    if disagreements > 0 && names.len() >= 2 {
        let load = |a: &str| input(load_checkpoint(&out.join(a).join(seeds[0].to_string()).join("checkpoint.bin")));
        let r = run_disagreement_analysis(&load(&names[0])?, &load(&names[1])?, &cfg.env, disagreements, seeds[0], out)?;
        println!(
            "disagreements {} of {} ({:.4})",
            r.records.len(),
            r.n_states,
            r.rate()
        );
    }
    if report.partial {
        return Err(Fail::Runtime("some cells failed; report is partial".into()));
    }
    Ok(())
}

fn cmd_gradcheck(profile: &str, head: HeadArg, dims: &[usize], seed: u64, fault: bool) -> Result<(), Fail> {
    let profile: Profile = input(profile.parse())?;
    let input_shape = match dims {
        [] => match profile {
            Profile::Tiny => (16, 56, 56),
            Profile::Paper => (16, 72, 72),
        },
        &[c, h, w] => (c, h, w),
        _ => return Err(Fail::Usage("--input takes C,H,W".into())),
    };
    let head = match head {
        HeadArg::Plain => Head::Plain,
        HeadArg::Dueling => Head::Dueling,
    };
    let mut net = input(QNet::from_profile(profile, input_shape, 5, head, seed))?;
    if fault {
        net.inject_fault(Some(Fault::TransposedDenseBackward));
    }
    let (c, h, w) = input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = Tensor::from_vec(&[1, c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let r = grad_check(&net, &x, 1e-5)?;
    println!(
        "{} max relative error {:.5e} (checked {}, skipped {})",
        profile.name(),
        r.max_relative_error,
        r.checked,
        r.skipped
    );
    if r.passed(1e-4) {
        Ok(())
    } else {
        Err(Fail::Runtime("gradient check failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, out } => cmd_train(common, out),
        Command::Eval { common, checkpoint, out } => cmd_eval(common, checkpoint, out.as_deref()),
        Command::Detect {
            common,
            frames,
            templates,
            out,
        } => cmd_detect(common, frames, templates.as_deref(), out),
        Command::Explain {
            common,
            checkpoint,
            frames,
            states,
            out,
        } => cmd_explain(common, checkpoint, frames.as_deref(), *states, out),
        Command::Compare {
            common,
            agents,
            seeds,
            disagreements,
            out,
        } => cmd_compare(common, agents, seeds, *disagreements, out),
        Command::Gradcheck {
            profile,
            head,
            input,
            seed,
            inject_fault,
        } => cmd_gradcheck(profile, *head, input, *seed, *inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
