//! DQN, Double-DQN and dueling agents with optional object channels.
//!
//! A state is the last four RGB frames (oldest first, scaled to [0, 1]),
//! followed, for object-sensitive agents, by one binary plane per object type
//! built from the detections in the newest frame.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envsim::{EnvConfig, EnvId, EnvState};
use crate::pnm::Frame;
use crate::tensornet::{argmax, save_checkpoint, Head, Profile, QNet, RmsProp, Tensor};
use crate::vision::{detect_objects, Detection, Template};
use crate::{Error, Result};

pub const HISTORY: usize = 4;
pub const RGB_PLANES: usize = 3 * HISTORY;

/// `raw / max_abs_reward` of the game, clamped to [-1, 1].
pub fn normalize_reward(raw: f64, env: EnvId) -> f64 {
    (raw / env.max_abs_reward()).clamp(-1.0, 1.0)
}

/// `Σ γ^i · r_i`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for r in rewards {
        total += weight * r;
        weight *= gamma;
    }
    total
}

/// Mixes a base seed with a stream tag and an index into an independent seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Network input for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// channels×H×W values in [0, 1].
    pub data: Vec<f64>,
}

impl StateTensor {
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `[1, C, H, W]` copy for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![1, self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }

    pub fn num_object_planes(&self) -> usize {
        self.channels - RGB_PLANES
    }
}

/// Number of input planes for an agent.
pub fn input_channels(object_sensitive: bool, k: usize) -> usize {
    RGB_PLANES + if object_sensitive { k } else { 0 }
}

fn write_state(dst: &mut [f64], frames: [&Frame; HISTORY], detections: Option<&[Detection]>, k: usize) {
    let (h, w) = (frames[0].height, frames[0].width);
    let n = h * w;
    for (f, frame) in frames.iter().enumerate() {
        for c in 0..3 {
            let plane = &mut dst[(3 * f + c) * n..(3 * f + c + 1) * n];
            for (v, px) in plane.iter_mut().zip(frame.pixels.chunks_exact(3)) {
                *v = px[c] as f64 / 255.0;
            }
        }
    }
    if let Some(dets) = detections {
        let obj = &mut dst[RGB_PLANES * n..(RGB_PLANES + k) * n];
        obj.fill(0.0);
        for d in dets {
            let base = d.object_type * n;
            for y in d.y..d.y + d.h {
                obj[base + y * w + d.x..base + y * w + d.x + d.w].fill(1.0);
            }
        }
    }
}

fn check_detections(h: usize, w: usize, detections: &[Detection], k: usize) -> Result<()> {
    for d in detections {
        if d.object_type >= k {
            return Err(Error::Range(format!(
                "detection type {} with only {k} object channels",
                d.object_type
            )));
        }
        if d.x + d.w > w || d.y + d.h > h {
            return Err(Error::Dimension(format!(
                "detection box ({}, {}, {}, {}) leaves the {w}x{h} frame",
                d.x, d.y, d.w, d.h
            )));
        }
    }
    Ok(())
}

/// Stacks four frames (oldest first) and, if object-sensitive, the object
/// channels of `detections` found in the newest frame.
pub fn assemble_state(
    frames: &[&Frame],
    detections: &[Detection],
    object_sensitive: bool,
    k: usize,
) -> Result<StateTensor> {
    let frames: [&Frame; HISTORY] = frames
        .try_into()
        .map_err(|_| Error::Dimension(format!("state needs {HISTORY} frames, got {}", frames.len())))?;
    let (h, w) = (frames[0].height, frames[0].width);
    if frames.iter().any(|f| f.height != h || f.width != w) {
        return Err(Error::Dimension("history frames differ in size".into()));
    }
    if object_sensitive {
        check_detections(h, w, detections, k)?;
    }
    let channels = input_channels(object_sensitive, k);
    let mut data = vec![0.0; channels * h * w];
    write_state(&mut data, frames, object_sensitive.then_some(detections), k);
    Ok(StateTensor {
        channels,
        height: h,
        width: w,
        data,
    })
}

/// One rendered frame with the detections found in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame: Frame,
    pub detections: Vec<Detection>,
}

/// Turns frames into observations, running the detector only when needed.
#[derive(Debug, Clone)]
pub struct Observer {
    pub templates: Vec<Template>,
    pub object_sensitive: bool,
    pub k: usize,
}

impl Observer {
    pub fn new(env: &EnvConfig, object_sensitive: bool) -> Self {
        Observer {
            templates: Template::for_env(env.env_id, env.cell_px),
            object_sensitive,
            k: env.env_id.num_object_types(),
        }
    }

    pub fn observe(&self, frame: Frame) -> Result<Arc<Observation>> {
        let detections = if self.object_sensitive {
            detect_objects(&frame, &self.templates)?
        } else {
            Vec::new()
        };
        Ok(Arc::new(Observation { frame, detections }))
    }

    pub fn channels(&self) -> usize {
        input_channels(self.object_sensitive, self.k)
    }

    /// State from a window of four observations, oldest first.
    pub fn state(&self, window: &[Arc<Observation>]) -> Result<StateTensor> {
        let frames: Vec<&Frame> = window.iter().map(|o| &o.frame).collect();
        assemble_state(&frames, &window[HISTORY - 1].detections, self.object_sensitive, self.k)
    }

    fn write(&self, dst: &mut [f64], window: &[Arc<Observation>]) {
        let frames = [&window[0].frame, &window[1].frame, &window[2].frame, &window[3].frame];
        let dets = self.object_sensitive.then_some(&window[3].detections[..]);
        write_state(dst, frames, dets, self.k);
    }
}

/// Experience tuple stored as five consecutive observations: the state is
/// the first four, the next state the last four.
#[derive(Debug, Clone)]
pub struct Transition {
    pub window: [Arc<Observation>; HISTORY + 1],
    pub action: usize,
    /// Normalized reward.
    pub reward: f64,
    /// No bootstrap from the next state.
    pub terminal: bool,
}

/// Fixed-capacity FIFO ring with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    /// Slot that the next push overwrites once full.
    head: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// The `i`-th oldest stored item.
    pub fn get(&self, i: usize) -> Option<&T> {
        if i >= self.items.len() {
            return None;
        }
        Some(&self.items[(self.head + i) % self.items.len()])
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        (0..self.items.len()).map(move |i| self.get(i).unwrap())
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, n: usize) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Usage("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.items.len())).collect())
    }
}

/// ε-greedy: a uniform random action with probability ε, else the greedy
/// action (lowest index on ties).
pub fn select_action<R: Rng>(net: &QNet, state: &StateTensor, eps: f64, rng: &mut R) -> Result<usize> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Range(format!("epsilon {eps} outside [0, 1]")));
    }
    let a = net.num_actions();
    if rng.gen::<f64>() < eps {
        return Ok(rng.gen_range(0..a));
    }
    let q = net.predict(&state.to_tensor())?;
    Ok(argmax(&q.data))
}

/// A training minibatch in network layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub terminals: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        if self.rewards.len() != n
            || self.terminals.len() != n
            || self.states.shape.first() != Some(&n)
            || self.next_states.shape.first() != Some(&n)
        {
            return Err(Error::Dimension("batch fields disagree in length".into()));
        }
        Ok(())
    }
}

/// `r + γ · max_a Q_target(s', a)`, or `r` at terminal transitions.
pub fn dqn_target(batch: &Batch, _online: &QNet, target: &QNet, gamma: f64) -> Result<Vec<f64>> {
    batch.check()?;
    let q = target.predict(&batch.next_states)?;
    Ok((0..batch.len())
        .map(|j| {
            let row = q.row(j);
            let best = row[argmax(row)];
            bootstrap(batch.rewards[j], batch.terminals[j], gamma, best)
        })
        .collect())
}

/// `r + γ · Q_target(s', argmax_a Q_online(s', a))`, or `r` at terminal
/// transitions.
pub fn ddqn_target(batch: &Batch, online: &QNet, target: &QNet, gamma: f64) -> Result<Vec<f64>> {
    batch.check()?;
    let qo = online.predict(&batch.next_states)?;
    let qt = target.predict(&batch.next_states)?;
    Ok((0..batch.len())
        .map(|j| {
            let a = argmax(qo.row(j));
            bootstrap(batch.rewards[j], batch.terminals[j], gamma, qt.row(j)[a])
        })
        .collect())
}

fn bootstrap(r: f64, terminal: bool, gamma: f64, next: f64) -> f64 {
    if terminal {
        r
    } else {
        r + gamma * next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    Dqn,
    Ddqn,
    /// Dueling head trained with Double-DQN targets.
    Dueling,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Dqn => "dqn",
            Algo::Ddqn => "ddqn",
            Algo::Dueling => "dueling",
        }
    }

    pub fn head(self) -> Head {
        match self {
            Algo::Dueling => Head::Dueling,
            _ => Head::Plain,
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(Algo::Dqn),
            "ddqn" => Ok(Algo::Ddqn),
            "dueling" => Ok(Algo::Dueling),
            _ => Err(Error::Config(format!("unknown algorithm `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub algo: Algo,
    pub object_sensitive: bool,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Frames over which ε decays linearly; 0 means 30% of the budget.
    pub eps_decay_frames: u64,
    pub batch_size: usize,
    /// Environment frames between target-network copies.
    pub target_sync: u64,
    pub replay_capacity: usize,
    pub learning_start: usize,
    /// Environment frames per optimizer step.
    pub train_every: u64,
    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub profile: Profile,
    pub eval_every: u64,
    pub eval_plays: usize,
    pub eval_eps: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        let opt = RmsProp::default();
        AgentConfig {
            algo: Algo::Dqn,
            object_sensitive: false,
            gamma: 0.9,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_frames: 0,
            batch_size: 32,
            target_sync: 1000,
            replay_capacity: 50_000,
            learning_start: 1000,
            train_every: 4,
            lr: opt.lr,
            rms_decay: opt.decay,
            rms_eps: opt.eps,
            profile: Profile::Tiny,
            eval_every: 10_000,
            eval_plays: 50,
            eval_eps: 0.01,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(0.0 <= self.eps_end && self.eps_end <= self.eps_start && self.eps_start <= 1.0) {
            return bad(format!(
                "need 0 <= eps_end <= eps_start <= 1, got {} and {}",
                self.eps_end, self.eps_start
            ));
        }
        if !(0.0..=1.0).contains(&self.eval_eps) {
            return bad(format!("eval_eps must be in [0, 1], got {}", self.eval_eps));
        }
        if self.batch_size == 0 || self.target_sync == 0 || self.train_every == 0 {
            return bad("batch_size, target_sync and train_every must be positive".into());
        }
        if self.eval_every == 0 || self.eval_plays == 0 {
            return bad("eval_every and eval_plays must be positive".into());
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity must hold at least one batch".into());
        }
        if self.learning_start < self.batch_size || self.learning_start > self.replay_capacity {
            return bad("learning_start must lie between batch_size and replay_capacity".into());
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.rms_decay) && self.rms_eps > 0.0) {
            return bad("optimizer needs lr > 0, 0 <= rms_decay < 1, rms_eps > 0".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp {
            lr: self.lr,
            decay: self.rms_decay,
            eps: self.rms_eps,
        }
    }

    /// Short label such as `o-ddqn` or `dqn`.
    pub fn label(&self) -> String {
        if self.object_sensitive {
            format!("o-{}", self.algo)
        } else {
            self.algo.to_string()
        }
    }

    /// ε after `frame` environment steps of a `total_frames` budget.
    pub fn epsilon(&self, frame: u64, total_frames: u64) -> f64 {
        let span = if self.eps_decay_frames == 0 {
            (total_frames as f64 * 0.3).max(1.0)
        } else {
            self.eps_decay_frames as f64
        };
        let t = (frame as f64 / span).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * t
    }
}

/// Everything `train` needs: game, agent and frame budget.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub total_frames: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::new(EnvId::MiniCross, 7, 7),
            agent: AgentConfig::default(),
            total_frames: 200_000,
        }
    }
}

pub const CONFIG_KEYS: [&str; 25] = [
    "env",
    "grid_w",
    "grid_h",
    "cell_px",
    "max_steps",
    "seed",
    "total_frames",
    "algo",
    "object_sensitive",
    "gamma",
    "eps_start",
    "eps_end",
    "eps_decay_frames",
    "batch_size",
    "target_sync",
    "replay_capacity",
    "learning_start",
    "train_every",
    "lr",
    "rms_decay",
    "rms_eps",
    "profile",
    "eval_every",
    "eval_plays",
    "eval_eps",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Parses flat `key = value` text over defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.agent;
        let e = &mut self.env;
        match key {
            "env" => e.env_id = parse_value(key, value)?,
            "grid_w" => e.grid_w = parse_value(key, value)?,
            "grid_h" => e.grid_h = parse_value(key, value)?,
            "cell_px" => e.cell_px = parse_value(key, value)?,
            "max_steps" => e.max_steps = parse_value(key, value)?,
            "seed" => {
                a.seed = parse_value(key, value)?;
                e.seed = a.seed;
            }
            "total_frames" => self.total_frames = parse_value(key, value)?,
            "algo" => a.algo = parse_value(key, value)?,
            "object_sensitive" => a.object_sensitive = parse_value(key, value)?,
            "gamma" => a.gamma = parse_value(key, value)?,
            "eps_start" => a.eps_start = parse_value(key, value)?,
            "eps_end" => a.eps_end = parse_value(key, value)?,
            "eps_decay_frames" => a.eps_decay_frames = parse_value(key, value)?,
            "batch_size" => a.batch_size = parse_value(key, value)?,
            "target_sync" => a.target_sync = parse_value(key, value)?,
            "replay_capacity" => a.replay_capacity = parse_value(key, value)?,
            "learning_start" => a.learning_start = parse_value(key, value)?,
            "train_every" => a.train_every = parse_value(key, value)?,
            "lr" => a.lr = parse_value(key, value)?,
            "rms_decay" => a.rms_decay = parse_value(key, value)?,
            "rms_eps" => a.rms_eps = parse_value(key, value)?,
            "profile" => a.profile = parse_value(key, value)?,
            "eval_every" => a.eval_every = parse_value(key, value)?,
            "eval_plays" => a.eval_plays = parse_value(key, value)?,
            "eval_eps" => a.eval_eps = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()
    }

    /// Every key in canonical order; `parse` reads it back unchanged.
    pub fn to_text(&self) -> String {
        let a = &self.agent;
        let e = &self.env;
        let values = [
            e.env_id.to_string(),
            e.grid_w.to_string(),
            e.grid_h.to_string(),
            e.cell_px.to_string(),
            e.max_steps.to_string(),
            a.seed.to_string(),
            self.total_frames.to_string(),
            a.algo.to_string(),
            a.object_sensitive.to_string(),
            a.gamma.to_string(),
            a.eps_start.to_string(),
            a.eps_end.to_string(),
            a.eps_decay_frames.to_string(),
            a.batch_size.to_string(),
            a.target_sync.to_string(),
            a.replay_capacity.to_string(),
            a.learning_start.to_string(),
            a.train_every.to_string(),
            a.lr.to_string(),
            a.rms_decay.to_string(),
            a.rms_eps.to_string(),
            a.profile.name().to_string(),
            a.eval_every.to_string(),
            a.eval_plays.to_string(),
            a.eval_eps.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// The environment for training episode `episode`.
    pub fn episode_env(&self, episode: u64) -> EnvConfig {
        self.env.with_seed(derive_seed(self.agent.seed, 3, episode))
    }
}

/// Online and target networks plus the agent's settings.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub online: QNet,
    pub target: QNet,
}

impl Agent {
    pub fn new(config: &AgentConfig, env: &EnvConfig) -> Result<Self> {
        config.validate()?;
        let (h, w) = env.frame_dims();
        let c = input_channels(config.object_sensitive, env.env_id.num_object_types());
        let actions = env.env_id.actions().len();
        let mut online = QNet::from_profile(
            config.profile,
            (c, h, w),
            actions,
            config.algo.head(),
            derive_seed(config.seed, 1, 0),
        )?;
        online.optimizer = config.optimizer();
        let target = online.clone();
        Ok(Agent {
            config: config.clone(),
            online,
            target,
        })
    }

    /// Wraps existing networks, e.g. hand-built lookup tables.
    pub fn from_nets(config: AgentConfig, online: QNet, target: QNet) -> Self {
        Agent { config, online, target }
    }

    pub fn targets(&self, batch: &Batch) -> Result<Vec<f64>> {
        match self.config.algo {
            Algo::Dqn => dqn_target(batch, &self.online, &self.target, self.config.gamma),
            Algo::Ddqn | Algo::Dueling => ddqn_target(batch, &self.online, &self.target, self.config.gamma),
        }
    }

    /// One optimizer step on the mean squared TD error of the taken actions.
    /// Returns the loss before the step.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let y = self.targets(batch)?;
        let (q, cache) = self.online.forward(&batch.states)?;
        let n = batch.len();
        let a = self.online.num_actions();
        let mut grad = Tensor::zeros(&[n, a]);
        let mut loss = 0.0;
        for j in 0..n {
            let act = batch.actions[j];
            if act >= a {
                return Err(Error::Usage(format!("action {act} outside {a} actions")));
            }
            let diff = q.data[j * a + act] - y[j];
            loss += diff * diff;
            grad.data[j * a + act] = 2.0 * diff / n as f64;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {}", self.online.step)));
        }
        let g = self.online.backward_params(&cache, &grad)?;
        self.online.apply_gradients(&g)?;
        Ok(loss)
    }

    /// Target network becomes a copy of the online network.
    pub fn sync_target(&mut self) {
        self.target
            .copy_params_from(&self.online)
            .expect("online and target share an architecture");
    }
}

/// A network plays ε-greedily, except that a network that has never been
/// updated plays uniformly at random.
fn acting_eps(net: &QNet, eps: f64) -> f64 {
    if net.step == 0 {
        1.0
    } else {
        eps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl EvalStats {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = if scores.len() > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        EvalStats { scores, mean, std }
    }

    pub fn std_error(&self) -> f64 {
        self.std / (self.scores.len() as f64).sqrt()
    }
}

/// Seed of evaluation play `play`, shared by every policy evaluated under
/// the same run seed.
pub fn eval_env(env: &EnvConfig, seed: u64, play: usize) -> EnvConfig {
    env.with_seed(derive_seed(seed, 4, play as u64))
}

/// Plays `plays` full episodes and reports raw game scores. `None` plays
/// uniformly at random.
pub fn evaluate(
    net: Option<&QNet>,
    env: &EnvConfig,
    object_sensitive: bool,
    plays: usize,
    eps: f64,
    seed: u64,
) -> Result<EvalStats> {
    if plays == 0 {
        return Err(Error::Config("evaluation needs at least one play".into()));
    }
    let observer = Observer::new(env, object_sensitive);
    let actions = env.env_id.actions().len();
    let mut scores = Vec::with_capacity(plays);
    for p in 0..plays {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5, p as u64));
        let mut state = EnvState::reset(&eval_env(env, seed, p))?;
        let mut window = vec![observer.observe(state.render())?; HISTORY];
        while !state.done {
            let action = match net {
                Some(net) => {
                    let s = observer.state(&window)?;
                    select_action(net, &s, acting_eps(net, eps), &mut rng)?
                }
                None => rng.gen_range(0..actions),
            };
            let out = state.step(action)?;
            window.remove(0);
            window.push(observer.observe(out.frame)?);
        }
        scores.push(state.score);
    }
    Ok(EvalStats::from_scores(scores))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub frame: u64,
    pub episode: u64,
    /// Mean loss of the updates made during the episode.
    pub loss: Option<f64>,
    pub eps: f64,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
}

pub const LOG_HEADER: &str = "frame,episode,loss,eps,eval_mean,eval_std";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.frame,
            self.episode,
            opt(self.loss),
            self.eps,
            opt(self.eval_mean),
            opt(self.eval_std)
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("log row needs 6 fields: `{line}`")));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Format(format!("bad number `{s}` in log row")))
            }
        };
        let int = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad integer `{s}` in log row")))
        };
        Ok(LogRow {
            frame: int(f[0])?,
            episode: int(f[1])?,
            loss: num(f[2])?,
            eps: num(f[3])?.ok_or_else(|| Error::Format("log row without eps".into()))?,
            eval_mean: num(f[4])?,
            eval_std: num(f[5])?,
        })
    }

    pub fn is_eval(&self) -> bool {
        self.eval_mean.is_some()
    }
}

pub struct TrainOutcome {
    pub agent: Agent,
    pub log: Vec<LogRow>,
    /// Evaluation at the end of the budget, if any frames were played.
    pub final_eval: Option<EvalStats>,
}

/// Runs ε-greedy collection, replay updates, target syncs and periodic
/// evaluation for `cfg.total_frames` environment steps.
///
/// Each log row is passed to `sink` as it is produced. With `checkpoint`
/// set, the online network is saved at every evaluation.
pub fn train(
    cfg: &RunConfig,
    sink: &mut dyn FnMut(&LogRow) -> Result<()>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ac = &cfg.agent;
    let env_id = cfg.env.env_id;
    let mut agent = Agent::new(ac, &cfg.env)?;
    let observer = Observer::new(&cfg.env, ac.object_sensitive);
    let n_actions = env_id.actions().len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ac.seed, 2, 0));
    let mut replay: ReplayBuffer<Transition> = ReplayBuffer::new(ac.replay_capacity)?;
    let (h, w) = cfg.env.frame_dims();
    let c = observer.channels();
    let per_state = c * h * w;
    let mut batch = Batch {
        states: Tensor::zeros(&[ac.batch_size, c, h, w]),
        actions: vec![0; ac.batch_size],
        rewards: vec![0.0; ac.batch_size],
        next_states: Tensor::zeros(&[ac.batch_size, c, h, w]),
        terminals: vec![false; ac.batch_size],
    };
    let mut act_state = StateTensor {
        channels: c,
        height: h,
        width: w,
        data: vec![0.0; per_state],
    };

    let mut log = Vec::new();
    let mut emit = |row: LogRow, log: &mut Vec<LogRow>| -> Result<()> {
        sink(&row)?;
        log.push(row);
        Ok(())
    };
    let mut frame = 0u64;
    let mut episode = 0u64;
    let mut final_eval = None;
    while frame < cfg.total_frames {
        let mut env = EnvState::reset(&cfg.episode_env(episode))?;
        let mut window: Vec<Arc<Observation>> = vec![observer.observe(env.render())?; HISTORY];
        let (mut loss_sum, mut updates) = (0.0, 0u64);
        loop {
            let eps = acting_eps(&agent.online, ac.epsilon(frame, cfg.total_frames));
            let action = if rng.gen::<f64>() < eps {
                rng.gen_range(0..n_actions)
            } else {
                observer.write(&mut act_state.data, &window);
                argmax(&agent.online.predict(&act_state.to_tensor())?.data)
            };
            let out = env.step(action)?;
            frame += 1;
            let next = observer.observe(out.frame)?;
            replay.push(Transition {
                window: [
                    window[0].clone(),
                    window[1].clone(),
                    window[2].clone(),
                    window[3].clone(),
                    next.clone(),
                ],
                action,
                reward: normalize_reward(out.reward, env_id),
                terminal: out.terminated,
            });
            window.remove(0);
            window.push(next);

            if replay.len() >= ac.learning_start {
                if frame % ac.train_every == 0 {
                    for (j, idx) in replay.sample_indices(&mut rng, ac.batch_size)?.into_iter().enumerate() {
                        let t = replay.get(idx).unwrap();
                        let dst = j * per_state..(j + 1) * per_state;
                        observer.write(&mut batch.states.data[dst.clone()], &t.window[..HISTORY]);
                        observer.write(&mut batch.next_states.data[dst], &t.window[1..]);
                        batch.actions[j] = t.action;
                        batch.rewards[j] = t.reward;
                        batch.terminals[j] = t.terminal;
                    }
                    loss_sum += agent.train_step(&batch)?;
                    updates += 1;
                }
                if frame % ac.target_sync == 0 {
                    agent.sync_target();
                }
            }

            let episode_over = out.done;
            if episode_over {
                episode += 1;
                let row = LogRow {
                    frame,
                    episode,
                    loss: (updates > 0).then(|| loss_sum / updates as f64),
                    eps: ac.epsilon(frame, cfg.total_frames),
                    eval_mean: None,
                    eval_std: None,
                };
                emit(row, &mut log)?;
            }
            if frame % ac.eval_every == 0 || frame == cfg.total_frames {
                let stats = evaluate(
                    Some(&agent.online),
                    &cfg.env,
                    ac.object_sensitive,
                    ac.eval_plays,
                    ac.eval_eps,
                    ac.seed,
                )?;
                let row = LogRow {
                    frame,
                    episode,
                    loss: None,
                    eps: ac.epsilon(frame, cfg.total_frames),
                    eval_mean: Some(stats.mean),
                    eval_std: Some(stats.std),
                };
                emit(row, &mut log)?;
                if let Some(path) = checkpoint {
                    save_checkpoint(&agent.online, path)?;
                }
                if frame == cfg.total_frames {
                    final_eval = Some(stats);
                }
            }
            if episode_over || frame >= cfg.total_frames {
                break;
            }
        }
    }
    if let Some(path) = checkpoint {
        save_checkpoint(&agent.online, path)?;
    }
    Ok(TrainOutcome {
        agent,
        log,
        final_eval,
    })
}

/// Frames of a full random-policy rollout, useful as sample states.
pub fn random_rollout(env: &EnvConfig, seed: u64) -> Result<Vec<Frame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = EnvState::reset(env)?;
    let mut frames = vec![state.render()];
    let n = env.env_id.actions().len();
    while !state.done {
        frames.push(state.step(rng.gen_range(0..n))?.frame);
    }
    Ok(frames)
}
