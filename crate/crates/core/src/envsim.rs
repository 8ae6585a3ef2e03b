//! Deterministic pixel mini-arcade games.
//!
//! Two games are built in:
//!
//! * `minipac`: a pillar maze with beans, power pellets and chasing ghosts.
//! * `minicross`: a road-crossing game where the agent walks up through
//!   lanes of wrapping cars.
//!
//! Everything, including ghost and car noise, is drawn from a ChaCha RNG
//! seeded by [`EnvConfig::seed`], so a (config, action sequence) pair fully
//! determines every frame and reward.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use crate::pnm::Frame;
use crate::{Error, Result};

pub type ActionId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvId {
    MiniPac,
    MiniCross,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::MiniPac => "minipac",
            EnvId::MiniCross => "minicross",
        }
    }

    /// Object type names, indexed by type id.
    pub fn object_types(self) -> &'static [&'static str] {
        match self {
            EnvId::MiniPac => &["pacman", "ghost", "bean", "pellet"],
            EnvId::MiniCross => &["chicken", "car"],
        }
    }

    pub fn num_object_types(self) -> usize {
        self.object_types().len()
    }

    /// Largest absolute single-step reward the game can emit.
    pub fn max_abs_reward(self) -> f64 {
        match self {
            EnvId::MiniPac => 500.0,
            EnvId::MiniCross => 100.0,
        }
    }

    pub fn background_color(self) -> [u8; 3] {
        match self {
            EnvId::MiniPac => [0, 0, 0],
            EnvId::MiniCross => [96, 96, 96],
        }
    }

    pub fn actions(self) -> &'static [Action] {
        action_set(self)
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minipac" => Ok(EnvId::MiniPac),
            "minicross" => Ok(EnvId::MiniCross),
            other => Err(Error::Config(format!("unknown env_id `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Left,
    Right,
    Down,
    Up,
    LeftUp,
    LeftDown,
    RightUp,
    RightDown,
    Nowhere,
}

impl Action {
    /// Grid displacement, with y growing downwards.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Down => (0, 1),
            Action::Up => (0, -1),
            Action::LeftUp => (-1, -1),
            Action::LeftDown => (-1, 1),
            Action::RightUp => (1, -1),
            Action::RightDown => (1, 1),
            Action::Nowhere => (0, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Left => "left",
            Action::Right => "right",
            Action::Down => "down",
            Action::Up => "up",
            Action::LeftUp => "leftup",
            Action::LeftDown => "leftdown",
            Action::RightUp => "rightup",
            Action::RightDown => "rightdown",
            Action::Nowhere => "nowhere",
        }
    }
}

const PAC_ACTIONS: [Action; 9] = [
    Action::Left,
    Action::Right,
    Action::Down,
    Action::Up,
    Action::LeftUp,
    Action::LeftDown,
    Action::RightUp,
    Action::RightDown,
    Action::Nowhere,
];
const CROSS_ACTIONS: [Action; 3] = [Action::Up, Action::Down, Action::Nowhere];

/// The ordered action set; an [`ActionId`] indexes into it.
pub fn action_set(env: EnvId) -> &'static [Action] {
    match env {
        EnvId::MiniPac => &PAC_ACTIONS,
        EnvId::MiniCross => &CROSS_ACTIONS,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvConfig {
    pub env_id: EnvId,
    pub grid_w: usize,
    pub grid_h: usize,
    pub cell_px: usize,
    pub max_steps: u32,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(env_id: EnvId, grid_w: usize, grid_h: usize) -> Self {
        EnvConfig {
            env_id,
            grid_w,
            grid_h,
            cell_px: 8,
            max_steps: 200,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        EnvConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_w < 5 || self.grid_h < 5 {
            return Err(Error::Config(format!(
                "grid must be at least 5x5, got {}x{}",
                self.grid_w, self.grid_h
            )));
        }
        if self.cell_px < 4 {
            return Err(Error::Config(format!("cell_px must be >= 4, got {}", self.cell_px)));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// (height, width) in pixels.
    pub fn frame_dims(&self) -> (usize, usize) {
        (self.grid_h * self.cell_px, self.grid_w * self.cell_px)
    }

    pub fn sprite_px(&self) -> usize {
        self.cell_px - 2
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        match self.env_id {
            EnvId::MiniPac => {
                let (x, y) = (cell.x, cell.y);
                x == 0
                    || y == 0
                    || x + 1 == self.grid_w
                    || y + 1 == self.grid_h
                    || (x % 2 == 0 && y % 2 == 0)
            }
            EnvId::MiniCross => false,
        }
    }

    fn in_grid(&self, x: i32, y: i32) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.grid_w && (y as usize) < self.grid_h
    }

    fn open(&self, x: i32, y: i32) -> bool {
        self.in_grid(x, y)
            && !self.is_wall(Cell {
                x: x as usize,
                y: y as usize,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    fn offset(self, dx: i32, dy: i32) -> (i32, i32) {
        (self.x as i32 + dx, self.y as i32 + dy)
    }
}

// object type ids
pub const PACMAN: usize = 0;
pub const GHOST: usize = 1;
pub const BEAN: usize = 2;
pub const PELLET: usize = 3;
pub const CHICKEN: usize = 0;
pub const CAR: usize = 1;

pub const REWARD_BEAN: f64 = 10.0;
pub const REWARD_PELLET: f64 = 50.0;
pub const REWARD_EAT_GHOST: f64 = 200.0;
pub const REWARD_CAUGHT: f64 = -500.0;
pub const REWARD_CROSSING: f64 = 100.0;
pub const REWARD_COLLISION: f64 = -10.0;

pub const GHOST_CHASE_PROB: f64 = 0.8;
pub const FRIGHTENED_STEPS: u32 = 10;
/// Ghosts wait off the board in their house for this many steps at the
/// start of an episode.
pub const GHOST_RELEASE_STEPS: u32 = 10;
/// An eaten ghost waits off the board in its house for this many steps.
pub const GHOST_RETURN_STEPS: u32 = 15;
/// Probability that a car skips a scheduled move.
pub const CAR_STALL_PROB: f64 = 0.1;

/// A non-agent object on the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub kind: usize,
    pub pos: Cell,
    pub alive: bool,
    /// Respawn cell for ghosts.
    pub home: Cell,
    /// Steps an eaten ghost has left in its house.
    pub away: u32,
    /// Horizontal direction for cars (+1 / -1), 0 otherwise.
    pub dir: i32,
    /// Cars move on steps divisible by `period`.
    pub period: u32,
}

impl Entity {
    fn new(kind: usize, pos: Cell) -> Self {
        Entity {
            kind,
            pos,
            alive: true,
            home: pos,
            away: 0,
            dir: 0,
            period: 1,
        }
    }
}

/// One labelled object box in pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TruthBox {
    pub object_type: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub boxes: Vec<TruthBox>,
}

impl GroundTruth {
    /// Flat text, one `type x y w h` line per box.
    pub fn to_text(&self) -> String {
        self.boxes
            .iter()
            .map(|b| format!("{} {} {} {} {}\n", b.object_type, b.x, b.y, b.w, b.h))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut boxes = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("truth line {}: not integers", n + 1)))?;
            if v.len() != 5 {
                return Err(Error::Format(format!(
                    "truth line {}: expected `type x y w h`",
                    n + 1
                )));
            }
            boxes.push(TruthBox {
                object_type: v[0],
                x: v[1],
                y: v[2],
                w: v[3],
                h: v[4],
            });
        }
        Ok(GroundTruth { boxes })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub frame: Frame,
    pub reward: f64,
    pub done: bool,
    /// The episode ended for a game reason rather than the step limit.
    pub terminated: bool,
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub config: EnvConfig,
    pub agent_pos: Cell,
    pub entities: Vec<Entity>,
    pub step_count: u32,
    /// Accumulated raw reward since reset.
    pub score: f64,
    pub done: bool,
    /// Remaining frightened steps (minipac).
    pub frightened: u32,
    rng: ChaCha8Rng,
}

impl PartialEq for EnvState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.agent_pos == other.agent_pos
            && self.entities == other.entities
            && self.step_count == other.step_count
            && self.score == other.score
            && self.done == other.done
            && self.frightened == other.frightened
            && self.rng.get_word_pos() == other.rng.get_word_pos()
    }
}

/// Reset to the seeded initial layout.
pub fn env_reset(config: &EnvConfig) -> Result<(EnvState, Frame)> {
    let state = EnvState::reset(config)?;
    let frame = state.render();
    Ok((state, frame))
}

/// Advance `state` by one tick.
pub fn env_step(state: &mut EnvState, action: ActionId) -> Result<StepOutcome> {
    state.step(action)
}

impl EnvState {
    pub fn reset(config: &EnvConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (agent_pos, entities) = match config.env_id {
            EnvId::MiniPac => pac_layout(config, &mut rng),
            EnvId::MiniCross => cross_layout(config, &mut rng),
        };
        Ok(EnvState {
            config: config.clone(),
            agent_pos,
            entities,
            step_count: 0,
            score: 0.0,
            done: false,
            frightened: 0,
            rng,
        })
    }

    /// Builds a hand-placed state. Ghosts respawn at their given cell; cars
    /// get the lane direction and speed a fresh reset would assign.
    pub fn custom(config: &EnvConfig, agent_pos: Cell, objects: &[(usize, Cell)]) -> Result<Self> {
        config.validate()?;
        let k = config.env_id.num_object_types();
        let check = |c: Cell| -> Result<()> {
            if c.x >= config.grid_w || c.y >= config.grid_h || config.is_wall(c) {
                return Err(Error::Config(format!("cell ({}, {}) is not open", c.x, c.y)));
            }
            Ok(())
        };
        check(agent_pos)?;
        let mut entities = Vec::with_capacity(objects.len());
        for &(kind, pos) in objects {
            check(pos)?;
            if kind == 0 || kind >= k {
                return Err(Error::Config(format!("object type {kind} is not a placeable object")));
            }
            let mut e = Entity::new(kind, pos);
            if config.env_id == EnvId::MiniCross {
                e.dir = lane_dir(pos.y);
                e.period = 1;
            }
            entities.push(e);
        }
        Ok(EnvState {
            config: config.clone(),
            agent_pos,
            entities,
            step_count: 0,
            score: 0.0,
            done: false,
            frightened: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn actions(&self) -> &'static [Action] {
        action_set(self.config.env_id)
    }

    pub fn step(&mut self, action: ActionId) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        let actions = self.actions();
        let Some(&act) = actions.get(action) else {
            return Err(Error::Usage(format!(
                "action {action} outside the {}-action set of {}",
                actions.len(),
                self.config.env_id
            )));
        };
        let reward = match self.config.env_id {
            EnvId::MiniPac => self.pac_step(act),
            EnvId::MiniCross => self.cross_step(act),
        };
        self.step_count += 1;
        self.score += reward;
        let terminated = self.done;
        if self.step_count >= self.config.max_steps {
            self.done = true;
        }
        Ok(StepOutcome {
            frame: self.render(),
            reward,
            done: self.done,
            terminated,
        })
    }

    fn pac_step(&mut self, act: Action) -> f64 {
        // Ghosts go first, chasing the cell the agent stands on, so an
        // adjacent chasing ghost usually catches it.
        self.move_ghosts();
        let mut reward = self.pac_ghost_contact();
        if self.done {
            return reward;
        }

        let cfg = &self.config;
        let (dx, dy) = act.delta();
        // Diagonals slide along whichever axis is open, horizontal first.
        let mut next = self.agent_pos;
        if dx != 0 && dy != 0 {
            let (hx, hy) = self.agent_pos.offset(dx, 0);
            let (vx, vy) = self.agent_pos.offset(0, dy);
            if cfg.open(hx, hy) {
                next = Cell::new(hx as usize, hy as usize);
            } else if cfg.open(vx, vy) {
                next = Cell::new(vx as usize, vy as usize);
            }
        } else if dx != 0 || dy != 0 {
            let (nx, ny) = self.agent_pos.offset(dx, dy);
            if cfg.open(nx, ny) {
                next = Cell::new(nx as usize, ny as usize);
            }
        }
        self.agent_pos = next;
        reward += self.pac_ghost_contact();
        if self.done {
            return reward;
        }

        for e in self.entities.iter_mut() {
            if e.alive && e.pos == next && (e.kind == BEAN || e.kind == PELLET) {
                e.alive = false;
                if e.kind == BEAN {
                    reward += REWARD_BEAN;
                } else {
                    reward += REWARD_PELLET;
                    self.frightened = FRIGHTENED_STEPS + 1;
                }
            }
        }
        self.frightened = self.frightened.saturating_sub(1);
        if !self
            .entities
            .iter()
            .any(|e| e.alive && (e.kind == BEAN || e.kind == PELLET))
        {
            self.done = true;
        }
        reward
    }

    fn pac_ghost_contact(&mut self) -> f64 {
        let mut reward = 0.0;
        for i in 0..self.entities.len() {
            let e = &self.entities[i];
            if e.kind != GHOST || !e.alive || e.pos != self.agent_pos {
                continue;
            }
            if self.frightened > 0 {
                reward += REWARD_EAT_GHOST;
                let e = &mut self.entities[i];
                e.pos = e.home;
                e.alive = false;
                e.away = GHOST_RETURN_STEPS;
            } else {
                reward += REWARD_CAUGHT;
                self.done = true;
                break;
            }
        }
        reward
    }

    fn move_ghosts(&mut self) {
        const DIRS: [(i32, i32); 4] = [(-1, 0), (1, 0), (0, 1), (0, -1)];
        let target = self.agent_pos;
        let fleeing = self.frightened > 0;
        for i in 0..self.entities.len() {
            if self.entities[i].kind != GHOST {
                continue;
            }
            let e = &mut self.entities[i];
            if !e.alive {
                e.away = e.away.saturating_sub(1);
                e.alive = e.away == 0;
                continue;
            }
            let pos = self.entities[i].pos;
            let moves: Vec<Cell> = DIRS
                .iter()
                .map(|&(dx, dy)| pos.offset(dx, dy))
                .filter(|&(x, y)| self.config.open(x, y))
                .map(|(x, y)| Cell::new(x as usize, y as usize))
                .collect();
            if moves.is_empty() {
                continue;
            }
            let chase = self.rng.gen::<f64>() < GHOST_CHASE_PROB;
            let next = if chase {
                let key = |c: &Cell| c.manhattan(target);
                if fleeing {
                    // first maximal in DIRS order
                    *moves.iter().rev().max_by_key(|c| key(c)).unwrap()
                } else {
                    *moves.iter().min_by_key(|c| key(c)).unwrap()
                }
            } else {
                moves[self.rng.gen_range(0..moves.len())]
            };
            self.entities[i].pos = next;
        }
    }

    fn cross_step(&mut self, act: Action) -> f64 {
        let start_row = self.config.grid_h - 1;
        let (_, dy) = act.delta();
        let y = (self.agent_pos.y as i32 + dy).clamp(0, start_row as i32) as usize;
        self.agent_pos.y = y;
        let mut reward = 0.0;
        if y == 0 {
            reward += REWARD_CROSSING;
            self.agent_pos.y = start_row;
        }
        let mut hit = self.car_at_agent();
        let tick = self.step_count;
        let w = self.config.grid_w as i32;
        for e in self.entities.iter_mut() {
            if e.kind != CAR || tick % e.period != 0 {
                continue;
            }
            if self.rng.gen::<f64>() < CAR_STALL_PROB {
                continue;
            }
            e.pos.x = (e.pos.x as i32 + e.dir).rem_euclid(w) as usize;
        }
        hit |= self.car_at_agent();
        if hit {
            reward += REWARD_COLLISION;
            self.agent_pos.y = (self.agent_pos.y + 1).min(start_row);
        }
        reward
    }

    fn car_at_agent(&self) -> bool {
        self.entities
            .iter()
            .any(|e| e.kind == CAR && e.pos == self.agent_pos)
    }

    pub fn render(&self) -> Frame {
        let cfg = &self.config;
        let (h, w) = cfg.frame_dims();
        let mut frame = Frame::filled(h, w, cfg.env_id.background_color());
        let cp = cfg.cell_px;
        if cfg.env_id == EnvId::MiniPac {
            let color = if self.frightened > 0 {
                WALL_FRIGHTENED
            } else {
                WALL
            };
            for y in 0..cfg.grid_h {
                for x in 0..cfg.grid_w {
                    if cfg.is_wall(Cell::new(x, y)) {
                        frame.fill_rect(x * cp, y * cp, cp, cp, color);
                    }
                }
            }
        }
        // Later draws cover earlier ones: items, then movers, then the agent.
        let mut order: Vec<&Entity> = self.entities.iter().filter(|e| e.alive).collect();
        order.sort_by_key(|e| draw_rank(cfg.env_id, e.kind));
        for e in order {
            blit(&mut frame, cfg, e.kind, e.pos);
        }
        blit(&mut frame, cfg, 0, self.agent_pos);
        frame
    }

    /// Pixel boxes of every live object, agent first. Objects hidden under
    /// another sprite are still listed.
    pub fn ground_truth(&self) -> GroundTruth {
        let cfg = &self.config;
        let s = cfg.sprite_px();
        let mk = |kind: usize, c: Cell| TruthBox {
            object_type: kind,
            x: c.x * cfg.cell_px + 1,
            y: c.y * cfg.cell_px + 1,
            w: s,
            h: s,
        };
        let mut boxes = vec![mk(0, self.agent_pos)];
        boxes.extend(self.entities.iter().filter(|e| e.alive).map(|e| mk(e.kind, e.pos)));
        GroundTruth { boxes }
    }

    /// Topmost sprite at each occupied cell; entities drawn underneath
    /// another sprite are excluded.
    pub fn visible_truth(&self) -> GroundTruth {
        let gt = self.ground_truth();
        let cfg = &self.config;
        let mut top: std::collections::BTreeMap<(usize, usize), (u8, TruthBox)> = Default::default();
        for (i, b) in gt.boxes.iter().enumerate() {
            let rank = if i == 0 { u8::MAX } else { draw_rank(cfg.env_id, b.object_type) };
            let slot = top.entry((b.x, b.y)).or_insert((rank, *b));
            if rank >= slot.0 {
                *slot = (rank, *b);
            }
        }
        GroundTruth {
            boxes: top.into_values().map(|(_, b)| b).collect(),
        }
    }

    /// Golden-layout text: one `type x y` line (cell coordinates) per live
    /// object, agent first.
    pub fn layout_text(&self) -> String {
        let mut s = format!("{} {} {}\n", 0, self.agent_pos.x, self.agent_pos.y);
        // ghosts still in their house count as placed
        for e in self.entities.iter().filter(|e| e.alive || e.away > 0) {
            s.push_str(&format!("{} {} {}\n", e.kind, e.pos.x, e.pos.y));
        }
        s
    }

    pub fn live_count(&self, kind: usize) -> usize {
        if kind == 0 {
            return 1;
        }
        self.entities.iter().filter(|e| e.alive && e.kind == kind).count()
    }
}

fn draw_rank(env: EnvId, kind: usize) -> u8 {
    match (env, kind) {
        (EnvId::MiniPac, BEAN) | (EnvId::MiniPac, PELLET) => 1,
        (_, 0) => 3,
        _ => 2,
    }
}

fn lane_dir(y: usize) -> i32 {
    if y % 2 == 1 {
        1
    } else {
        -1
    }
}

fn pac_layout(cfg: &EnvConfig, rng: &mut ChaCha8Rng) -> (Cell, Vec<Entity>) {
    let mut open: Vec<Cell> = (0..cfg.grid_h)
        .flat_map(|y| (0..cfg.grid_w).map(move |x| Cell::new(x, y)))
        .filter(|&c| !cfg.is_wall(c))
        .collect();
    open.shuffle(rng);
    let agent = open.remove(0);
    let big = (cfg.grid_w - 2) * (cfg.grid_h - 2) >= 49;
    let n_ghosts = if big { 2 } else { 1 };
    let n_pellets = if big { 2 } else { 1 };
    let mut entities = Vec::new();
    for _ in 0..n_ghosts {
        // keep ghosts out of immediate reach when the maze allows it
        let idx = open
            .iter()
            .position(|c| c.manhattan(agent) >= 3)
            .unwrap_or(0);
        let mut g = Entity::new(GHOST, open.remove(idx));
        g.alive = false;
        g.away = GHOST_RELEASE_STEPS;
        entities.push(g);
    }
    for _ in 0..n_pellets {
        entities.push(Entity::new(PELLET, open.remove(0)));
    }
    open.sort();
    for c in open {
        entities.push(Entity::new(BEAN, c));
    }
    (agent, entities)
}

fn cross_layout(cfg: &EnvConfig, rng: &mut ChaCha8Rng) -> (Cell, Vec<Entity>) {
    let agent = Cell::new(cfg.grid_w / 2, cfg.grid_h - 1);
    let per_lane = (cfg.grid_w / 7).max(1);
    let mut entities = Vec::new();
    for y in 1..cfg.grid_h - 1 {
        let period = rng.gen_range(1..=2u32);
        let mut xs: Vec<usize> = (0..cfg.grid_w).collect();
        xs.shuffle(rng);
        for &x in xs.iter().take(per_lane) {
            let mut e = Entity::new(CAR, Cell::new(x, y));
            e.dir = lane_dir(y);
            e.period = period;
            entities.push(e);
        }
    }
    (agent, entities)
}

const WALL: [u8; 3] = [33, 33, 222];
const WALL_FRIGHTENED: [u8; 3] = [200, 200, 200];

// 6x6 sprite patterns; '.' is the game's background color.
const SPRITES_PAC: [[&str; 6]; 4] = [
    [".YYYY.", "YYYYYY", "YYY...", "YYY...", "YYYYYY", ".YYYY."],
    [".RRRR.", "RWBRWB", "RRRRRR", "RRRRRR", "RRRRRR", "R.RR.R"],
    ["......", "......", "..PP..", "..PP..", "......", "......"],
    [".CCCC.", "CCCCCC", "CC..CC", "CC..CC", "CCCCCC", ".CCCC."],
];
const SPRITES_CROSS: [[&str; 6]; 2] = [
    ["..WW..", "..WWO.", ".WWWW.", "WWWWW.", ".WWWW.", "..O.O."],
    ["......", ".KKKK.", "KKKKKK", "KKKKKK", ".D..D.", "......"],
];

fn palette(c: u8, bg: [u8; 3]) -> [u8; 3] {
    match c {
        b'Y' => [255, 221, 0],
        b'R' => [230, 30, 40],
        b'W' => [250, 250, 250],
        b'B' => [30, 30, 200],
        b'P' => [255, 170, 160],
        b'C' => [120, 240, 255],
        b'O' => [255, 140, 0],
        b'K' => [60, 90, 230],
        b'D' => [20, 20, 20],
        _ => bg,
    }
}

/// The bitmap drawn for `object_type`: `(cell_px - 2)` pixels square, the
/// 6x6 pattern resampled by nearest neighbour when cells are not 8 px.
pub fn sprite(env: EnvId, object_type: usize, cell_px: usize) -> Frame {
    let pattern = match env {
        EnvId::MiniPac => &SPRITES_PAC[object_type],
        EnvId::MiniCross => &SPRITES_CROSS[object_type],
    };
    let s = cell_px - 2;
    let bg = env.background_color();
    let mut f = Frame::filled(s, s, bg);
    for y in 0..s {
        for x in 0..s {
            let py = y * 6 / s;
            let px = x * 6 / s;
            f.set(x, y, palette(pattern[py].as_bytes()[px], bg));
        }
    }
    f
}

fn blit(frame: &mut Frame, cfg: &EnvConfig, kind: usize, cell: Cell) {
    let spr = sprite(cfg.env_id, kind, cfg.cell_px);
    let ox = cell.x * cfg.cell_px + 1;
    let oy = cell.y * cfg.cell_px + 1;
    for y in 0..spr.height {
        let src = y * spr.width * 3;
        let dst = ((oy + y) * frame.width + ox) * 3;
        frame.pixels[dst..dst + spr.width * 3].copy_from_slice(&spr.pixels[src..src + spr.width * 3]);
    }
}

/// Writes `state.layout_text()` to `path`.
pub fn write_layout(state: &EnvState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, state.layout_text()).map_err(|e| Error::io(path, e))
}
