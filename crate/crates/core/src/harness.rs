//! End-to-end experiments: detection quality, plain versus object-sensitive
//! score comparisons, and decision disagreements explained with object
//! saliency.
//!
//! Score comparisons write one directory per (agent, seed) cell:
//! `<out>/<agent>/<seed>/{log.csv,checkpoint.bin,eval.csv}`. The report
//! (`report.csv`, `deltas.csv`, `curves.csv`) is rebuilt from those files
//! alone by [`build_report`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{
    derive_seed, evaluate, input_channels, train, AgentConfig, EvalStats, LogRow, Observer, RunConfig, HISTORY,
    LOG_HEADER,
};
use crate::envsim::{EnvConfig, EnvState};
use crate::saliency::{object_saliency, ExplainState};
use crate::tensornet::{argmax, QNet};
use crate::vision::{detect_objects, evaluate_by_type, evaluate_detections, DetectionMetrics, Template};
use crate::{Error, Result};

/// Detection metrics for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub frames: usize,
    pub per_type: Vec<DetectionMetrics>,
    pub pooled: DetectionMetrics,
}

/// Sampled environment states: four-frame windows from random-policy play.
#[derive(Debug, Clone)]
pub struct SampledState {
    pub env: EnvState,
    /// Oldest first; the newest frame renders `env`.
    pub frames: Vec<crate::pnm::Frame>,
}

/// Draws `n` states from random-policy episodes, keeping each visited state
/// with probability 1/4 so samples spread over whole episodes.
pub fn sample_states(env: &EnvConfig, n: usize, seed: u64) -> Result<Vec<SampledState>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6, 0));
    let actions = env.env_id.actions().len();
    let mut out = Vec::with_capacity(n);
    let mut episode = 0u64;
    while out.len() < n {
        let mut state = EnvState::reset(&env.with_seed(derive_seed(seed, 7, episode)))?;
        episode += 1;
        let mut frames = vec![state.render(); HISTORY];
        loop {
            if rng.gen_range(0..4) == 0 {
                out.push(SampledState {
                    env: state.clone(),
                    frames: frames.clone(),
                });
                if out.len() == n {
                    break;
                }
            }
            if state.done {
                break;
            }
            let f = state.step(rng.gen_range(0..actions))?.frame;
            frames.remove(0);
            frames.push(f);
        }
    }
    Ok(out)
}

/// Detects objects in `n_frames` sampled frames and scores them against the
/// visible ground truth: an object drawn over by another one is not counted
/// as missed.
pub fn run_detection_eval(env: &EnvConfig, templates: &[Template], n_frames: usize, seed: u64) -> Result<DetectionReport> {
    if n_frames == 0 {
        return Err(Error::Config("detection eval needs at least one frame".into()));
    }
    let k = env.env_id.num_object_types();
    let mut per_type = vec![DetectionMetrics::default(); k];
    let mut pooled = DetectionMetrics::default();
    for s in sample_states(env, n_frames, seed)? {
        let dets = detect_objects(s.frames.last().unwrap(), templates)?;
        let truth = s.env.visible_truth();
        pooled = pooled.merge(&evaluate_detections(&dets, &truth));
        for (acc, m) in per_type.iter_mut().zip(evaluate_by_type(&dets, &truth, k)) {
            *acc = acc.merge(&m);
        }
    }
    Ok(DetectionReport {
        frames: n_frames,
        per_type,
        pooled,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub env: EnvConfig,
    pub agents: Vec<AgentConfig>,
    pub total_frames: u64,
    pub eval_plays: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.agents.is_empty() {
            return Err(Error::Config("experiment needs at least one agent and one seed".into()));
        }
        self.env.validate()?;
        for a in &self.agents {
            a.validate()?;
        }
        Ok(())
    }

    /// Directory names per agent: the agent label, suffixed on repeats.
    pub fn agent_names(&self) -> Vec<String> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        self.agents
            .iter()
            .map(|a| {
                let base = a.label();
                let n = seen.entry(base.clone()).or_insert(0);
                *n += 1;
                if *n == 1 {
                    base
                } else {
                    format!("{base}-{n}")
                }
            })
            .collect()
    }

    fn run_config(&self, agent: usize, seed: u64) -> RunConfig {
        let mut a = self.agents[agent].clone();
        a.seed = seed;
        a.eval_plays = self.eval_plays;
        RunConfig {
            env: self.env.with_seed(seed),
            agent: a,
            total_frames: self.total_frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub agent: String,
    pub seed: u64,
    pub frames: u64,
    /// None when the cell failed or left no evaluation.
    pub eval: Option<EvalStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub agent_a: String,
    pub agent_b: String,
    pub seed: u64,
    /// `mean(b) - mean(a)`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub cells: Vec<CellResult>,
    pub deltas: Vec<Delta>,
    /// Some cells failed or are missing.
    pub partial: bool,
    pub failures: Vec<String>,
}

impl ComparisonReport {
    pub fn cell(&self, agent: &str, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.agent == agent && c.seed == seed)
    }
}

/// Cell worker count: `ODRL_THREADS` if set, else the available cores.
pub fn thread_budget() -> usize {
    std::env::var("ODRL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn write_eval_csv(path: &Path, stats: &EvalStats) -> Result<()> {
    let mut s = String::from("play,score\n");
    for (i, v) in stats.scores.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_eval_csv(path: &Path) -> Result<EvalStats> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut scores = Vec::new();
    for line in text.lines().skip(1) {
        let v = line
            .split(',')
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: bad row `{line}`", path.display())))?;
        scores.push(v);
    }
    if scores.is_empty() {
        return Err(Error::Format(format!("{}: no scores", path.display())));
    }
    Ok(EvalStats::from_scores(scores))
}

/// Trains one cell and writes its log, checkpoint and final per-play scores.
pub fn run_cell(cfg: &RunConfig, dir: &Path) -> Result<EvalStats> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join("log.csv");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    let ckpt = dir.join("checkpoint.bin");
    let out = train(
        cfg,
        &mut |row: &LogRow| writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e)),
        Some(&ckpt),
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let stats = match out.final_eval {
        Some(s) => s,
        None => evaluate(
            Some(&out.agent.online),
            &cfg.env,
            cfg.agent.object_sensitive,
            cfg.agent.eval_plays,
            cfg.agent.eval_eps,
            cfg.agent.seed,
        )?,
    };
    write_eval_csv(&dir.join("eval.csv"), &stats)?;
    fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(dir, e))?;
    Ok(stats)
}

/// Trains every (agent, seed) cell, then folds the written files into a
/// report. Failed cells are listed and the report is marked partial.
pub fn run_score_comparison(spec: &ExperimentSpec) -> Result<ComparisonReport> {
    spec.validate()?;
    let names = spec.agent_names();
    let cells: Vec<(usize, u64)> = (0..spec.agents.len())
        .flat_map(|a| spec.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let next = Mutex::new(0usize);
    let failures = Mutex::new(Vec::new());
    let workers = thread_budget().min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&(a, seed)) = cells.get(i) else { break };
                let dir = spec.out_dir.join(&names[a]).join(seed.to_string());
                if let Err(e) = run_cell(&spec.run_config(a, seed), &dir) {
                    failures.lock().unwrap().push(format!("{}/{seed}: {e}", names[a]));
                }
            });
        }
    });
    let mut report = build_report(&spec.out_dir, &names, &spec.seeds)?;
    let mut failures = failures.into_inner().unwrap();
    failures.sort();
    report.partial |= !failures.is_empty();
    report.failures = failures;
    Ok(report)
}

/// Reads every cell's `eval.csv` and `log.csv` under `out` and writes
/// `report.csv`, `deltas.csv` and `curves.csv`.
pub fn build_report(out: &Path, agents: &[String], seeds: &[u64]) -> Result<ComparisonReport> {
    let mut cells = Vec::new();
    let mut curves = String::from("agent,seed,frame,eval_mean,eval_std\n");
    let mut partial = false;
    for agent in agents {
        for &seed in seeds {
            let dir = out.join(agent).join(seed.to_string());
            let eval = read_eval_csv(&dir.join("eval.csv")).ok();
            let mut frames = 0;
            if let Ok(text) = fs::read_to_string(dir.join("log.csv")) {
                for line in text.lines().skip(1) {
                    let row = LogRow::parse_csv(line)?;
                    frames = frames.max(row.frame);
                    if let (Some(m), Some(s)) = (row.eval_mean, row.eval_std) {
                        curves.push_str(&format!("{agent},{seed},{},{m},{s}\n", row.frame));
                    }
                }
            }
            partial |= eval.is_none();
            cells.push(CellResult {
                agent: agent.clone(),
                seed,
                frames,
                eval,
            });
        }
    }
    let mut deltas = Vec::new();
    for (i, a) in agents.iter().enumerate() {
        for b in &agents[i + 1..] {
            for &seed in seeds {
                let find = |name: &String| cells.iter().find(|c| &c.agent == name && c.seed == seed);
                if let (Some(Some(ea)), Some(Some(eb))) = (find(a).map(|c| &c.eval), find(b).map(|c| &c.eval)) {
                    deltas.push(Delta {
                        agent_a: a.clone(),
                        agent_b: b.clone(),
                        seed,
                        delta: eb.mean - ea.mean,
                    });
                }
            }
        }
    }
    let mut rep = String::from("agent,seed,frames,eval_mean,eval_std,eval_se,plays\n");
    for c in &cells {
        match &c.eval {
            Some(e) => rep.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.agent,
                c.seed,
                c.frames,
                e.mean,
                e.std,
                e.std_error(),
                e.scores.len()
            )),
            None => rep.push_str(&format!("{},{},{},,,,0\n", c.agent, c.seed, c.frames)),
        }
    }
    let mut del = String::from("agent_a,agent_b,seed,delta\n");
    for d in &deltas {
        del.push_str(&format!("{},{},{},{}\n", d.agent_a, d.agent_b, d.seed, d.delta));
    }
    for (name, text) in [("report.csv", rep), ("deltas.csv", del), ("curves.csv", curves)] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(ComparisonReport {
        cells,
        deltas,
        partial,
        failures: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisagreementRecord {
    pub state_id: usize,
    pub action_a: usize,
    pub action_b: usize,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisagreementReport {
    pub n_states: usize,
    pub records: Vec<DisagreementRecord>,
}

impl DisagreementReport {
    pub fn rate(&self) -> f64 {
        self.records.len() as f64 / self.n_states as f64
    }
}

fn object_sensitive_for(net: &QNet, k: usize) -> Result<bool> {
    let c = net.input_shape().0;
    if c == input_channels(false, k) {
        Ok(false)
    } else if c == input_channels(true, k) {
        Ok(true)
    } else {
        Err(Error::Dimension(format!("network expects {c} input planes, not 12 or {}", 12 + k)))
    }
}

/// Compares the greedy actions of two networks on `n_states` sampled states.
/// Each disagreement gets `<out>/disagreements/<state_id>/` holding the
/// state and both object saliency overlays plus both saliency CSVs.
pub fn run_disagreement_analysis(
    net_a: &QNet,
    net_b: &QNet,
    env: &EnvConfig,
    n_states: usize,
    seed: u64,
    out: &Path,
) -> Result<DisagreementReport> {
    if n_states == 0 {
        return Err(Error::Config("disagreement analysis needs at least one state".into()));
    }
    let k = env.env_id.num_object_types();
    let (h, w) = env.frame_dims();
    for net in [net_a, net_b] {
        let (_, nh, nw) = net.input_shape();
        if (nh, nw) != (h, w) {
            return Err(Error::Dimension(format!("network input {nh}x{nw} does not match {h}x{w} frames")));
        }
    }
    let os_a = object_sensitive_for(net_a, k)?;
    let os_b = object_sensitive_for(net_b, k)?;
    let observer = Observer::new(env, true);
    let bg = env.env_id.background_color();
    let names = env.env_id.object_types();
    let mut records = Vec::new();
    for (id, s) in sample_states(env, n_states, seed)?.into_iter().enumerate() {
        let dets = observer.observe(s.frames[HISTORY - 1].clone())?.detections.clone();
        let sa = ExplainState::new(s.frames.clone(), dets.clone(), os_a, k)?;
        let sb = ExplainState::new(s.frames, dets, os_b, k)?;
        let act_a = argmax(&net_a.predict(&sa.tensor()?.to_tensor())?.data);
        let act_b = argmax(&net_b.predict(&sb.tensor()?.to_tensor())?.data);
        if act_a == act_b {
            continue;
        }
        let dir = out.join("disagreements").join(id.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        sa.newest().write_ppm(dir.join("state.ppm"))?;
        for (tag, net, st, act) in [("a", net_a, &sa, act_a), ("b", net_b, &sb, act_b)] {
            let map = object_saliency(net, st, act, bg)?;
            map.overlay(st.newest()).write_ppm(dir.join(format!("object_{tag}.ppm")))?;
            let p = dir.join(format!("objects_{tag}.csv"));
            let mut buf = Vec::new();
            map.write_csv(&mut buf, names).map_err(|e| Error::io(&p, e))?;
            fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
        }
        records.push(DisagreementRecord {
            state_id: id,
            action_a: act_a,
            action_b: act_b,
            dir,
        });
    }
    let p = out.join("disagreements.csv");
    let mut text = String::from("state_id,action_a,action_b\n");
    for r in &records {
        text.push_str(&format!("{},{},{}\n", r.state_id, r.action_a, r.action_b));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(DisagreementReport { n_states, records })
}
