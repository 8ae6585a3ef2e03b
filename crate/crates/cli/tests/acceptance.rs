//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ODRL_ACCEPTANCE=1,4,9` runs a subset. Training runs (criteria 6 to 8)
//! take a few hours on one core; artifacts stay under the cargo target
//! tmpdir in `acceptance/` for inspection.

use std::collections::VecDeque;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odrl_core::agents::{
    assemble_state, ddqn_target, dqn_target, evaluate, AgentConfig, Batch, EvalStats, RunConfig,
};
use odrl_core::envsim::{Cell, EnvConfig, EnvId, EnvState, BEAN, GHOST};
use odrl_core::harness::{run_cell, run_detection_eval, run_score_comparison, sample_states, ExperimentSpec};
use odrl_core::pnm::{Frame, GrayImage, Raster};
use odrl_core::saliency::{input_gradient, object_saliency, pixel_saliency, ExplainState};
use odrl_core::tensornet::{
    argmax, grad_check, load_checkpoint, relative_error, Head, LayerSpec, Params, Profile, QNet, Tensor,
};
use odrl_core::vision::{detect_objects, match_template, MatchMethod, Template};

type Outcome = Result<String, String>;

struct Ctx {
    root: PathBuf,
}

impl Ctx {
    fn minipac_spec(&self) -> ExperimentSpec {
        let dqn = AgentConfig::default();
        ExperimentSpec {
            env: EnvConfig::new(EnvId::MiniPac, 7, 7),
            agents: vec![
                dqn.clone(),
                AgentConfig {
                    object_sensitive: true,
                    ..dqn
                },
            ],
            total_frames: 200_000,
            eval_plays: 50,
            seeds: vec![1, 2, 3],
            out_dir: self.root.join("minipac"),
        }
    }

    /// The seed-1 O-DQN of the minipac comparison, trained here if criterion
    /// 7 has not produced it in this run.
    fn minipac_odqn(&self) -> Result<QNet, String> {
        let spec = self.minipac_spec();
        let dir = spec.out_dir.join("o-dqn").join("1");
        if !dir.join("eval.csv").exists() {
            let cfg = RunConfig {
                env: spec.env.with_seed(1),
                agent: AgentConfig {
                    seed: 1,
                    eval_plays: 50,
                    ..spec.agents[1].clone()
                },
                total_frames: spec.total_frames,
            };
            run_cell(&cfg, &dir).map_err(|e| e.to_string())?;
        }
        load_checkpoint(&dir.join("checkpoint.bin")).map_err(|e| e.to_string())
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    if t.elapsed() < limit {
        Ok(())
    } else {
        Err(format!("took {:.1?}, limit {limit:?}", t.elapsed()))
    }
}

// ---------------------------------------------------------------------------
// 1. template matching against a brute-force double loop

struct Img {
    w: usize,
    h: usize,
    c: usize,
    px: Vec<u8>,
}

impl Img {
    fn at(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.px[(y * self.w + x) * self.c + ch] as f64
    }
}

fn oracle_score(src: &Img, tpl: &Img, x: usize, y: usize, method: MatchMethod, normalized: bool) -> f64 {
    let n = (tpl.w * tpl.h) as f64;
    let mut tmean = vec![0.0; tpl.c];
    let mut imean = vec![0.0; tpl.c];
    if method == MatchMethod::CCoeff {
        for yy in 0..tpl.h {
            for xx in 0..tpl.w {
                for c in 0..tpl.c {
                    tmean[c] += tpl.at(xx, yy, c);
                    imean[c] += src.at(x + xx, y + yy, c);
                }
            }
        }
        for c in 0..tpl.c {
            tmean[c] /= n;
            imean[c] /= n;
        }
    }
    let (mut num, mut tt, mut ii) = (0.0, 0.0, 0.0);
    for yy in 0..tpl.h {
        for xx in 0..tpl.w {
            for c in 0..tpl.c {
                let t = tpl.at(xx, yy, c) - tmean[c];
                let i = src.at(x + xx, y + yy, c) - imean[c];
                num += match method {
                    MatchMethod::SqDiff => (t - i) * (t - i),
                    _ => t * i,
                };
                tt += t * t;
                ii += i * i;
            }
        }
    }
    if !normalized {
        return num;
    }
    let d = (tt * ii).sqrt();
    match (d == 0.0, method) {
        (true, MatchMethod::SqDiff) => 1.0,
        (true, _) => 0.0,
        (false, _) => num / d,
    }
}

fn random_img(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize, flat: bool) -> Img {
    let v: u8 = rng.gen();
    let px = (0..w * h * c).map(|_| if flat { v } else { rng.gen() }).collect();
    Img { w, h, c, px }
}

fn check_pair(src: &Img, tpl: &Img) -> Result<(), String> {
    for method in MatchMethod::ALL {
        for normalized in [false, true] {
            let map = if src.c == 3 {
                let s = Frame::from_pixels(src.h, src.w, src.px.clone()).unwrap();
                let t = Frame::from_pixels(tpl.h, tpl.w, tpl.px.clone()).unwrap();
                match_template(&s, &t, method, normalized)
            } else {
                let s = GrayImage::from_pixels(src.h, src.w, src.px.clone()).unwrap();
                let t = GrayImage::from_pixels(tpl.h, tpl.w, tpl.px.clone()).unwrap();
                match_template(&s, &t, method, normalized)
            }
            .map_err(|e| e.to_string())?;
            if (map.width, map.height) != (src.w - tpl.w + 1, src.h - tpl.h + 1) {
                return Err(format!("{method}: wrong score map size"));
            }
            for y in 0..map.height {
                for x in 0..map.width {
                    let want = oracle_score(src, tpl, x, y, method, normalized);
                    if map.at(x, y) != want {
                        return Err(format!(
                            "{method} normalized={normalized} at ({x},{y}): {} vs {want}",
                            map.at(x, y)
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

fn criterion_1(_: &Ctx) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..200 {
        let c = if i % 2 == 0 { 3 } else { 1 };
        let (sw, sh) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let (tw, th) = (rng.gen_range(1..=sw.min(8)), rng.gen_range(1..=sh.min(8)));
        let src = random_img(&mut rng, sw, sh, c, i % 17 == 3);
        let tpl = random_img(&mut rng, tw, th, c, i % 10 == 7);
        check_pair(&src, &tpl).map_err(|e| format!("pair {i}: {e}"))?;
    }
    within(t, Duration::from_secs(10))?;
    Ok(format!("200 pairs x 6 variants bit-identical in {:.1?}", t.elapsed()))
}

// ---------------------------------------------------------------------------
// 2. detection quality

fn criterion_2(_: &Ctx) -> Outcome {
    let t = Instant::now();
    let mut notes = Vec::new();
    for env in [EnvConfig::new(EnvId::MiniPac, 7, 7), EnvConfig::new(EnvId::MiniCross, 7, 7)] {
        let templates = Template::for_env(env.env_id, env.cell_px);
        let r = run_detection_eval(&env, &templates, 100, 1).map_err(|e| e.to_string())?;
        let names = env.env_id.object_types();
        for (j, m) in r.per_type.iter().enumerate() {
            if m.tp + m.fn_ == 0 {
                continue;
            }
            if m.precision != 1.0 || m.f1 < 0.95 {
                return Err(format!(
                    "{} {}: precision {} f1 {:.4}",
                    env.env_id, names[j], m.precision, m.f1
                ));
            }
            notes.push(format!("{} {} f1 {:.3}", env.env_id, names[j], m.f1));
        }
        if r.pooled.precision != 1.0 {
            return Err(format!("{} pooled precision {}", env.env_id, r.pooled.precision));
        }
    }
    within(t, Duration::from_secs(30))?;
    Ok(format!("precision 1 everywhere; {} ({:.1?})", notes.join(", "), t.elapsed()))
}

// ---------------------------------------------------------------------------
// 3. gradient fidelity

fn criterion_3(_: &Ctx) -> Outcome {
    let t = Instant::now();
    let mut notes = Vec::new();
    for (profile, hw, head) in [
        (Profile::Tiny, 56, Head::Plain),
        (Profile::Tiny, 56, Head::Dueling),
        (Profile::Paper, 72, Head::Plain),
    ] {
        let net = QNet::from_profile(profile, (16, hw, hw), 9, head, 3).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 16 * hw * hw;
        let x = Tensor::from_vec(&[1, 16, hw, hw], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let r = grad_check(&net, &x, 1e-5).map_err(|e| e.to_string())?;
        if !r.passed(1e-4) {
            return Err(format!("{} {head:?}: {r:?}", profile.name()));
        }
        notes.push(format!("{} {head:?} {:.2e}", profile.name(), r.max_relative_error));
    }
    within(t, Duration::from_secs(120))?;
    Ok(format!("{} ({:.1?})", notes.join(", "), t.elapsed()))
}

// ---------------------------------------------------------------------------
// 4. Bellman targets

/// One-hot state in, table row out.
fn lookup_net(table: &[[f64; 2]; 3]) -> QNet {
    let mut net = QNet::new((3, 1, 1), vec![LayerSpec::Dense { units: 2 }], 0).unwrap();
    let mut w = vec![0.0; 6];
    for (s, row) in table.iter().enumerate() {
        for (a, &q) in row.iter().enumerate() {
            w[a * 3 + s] = q;
        }
    }
    net.params_mut()[0] = Some(Params {
        weight: Tensor::from_vec(&[2, 3], w).unwrap(),
        bias: Tensor::zeros(&[2]),
    });
    net
}

fn one_hot(states: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(&[states.len(), 3, 1, 1]);
    for (i, &s) in states.iter().enumerate() {
        t.data[i * 3 + s] = 1.0;
    }
    t
}

fn criterion_4(_: &Ctx) -> Outcome {
    let online = lookup_net(&[[2.0, 1.0], [-1.0, 4.0], [0.0, 5.0]]);
    let target = lookup_net(&[[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]]);
    // (s, a, r, s', terminal)
    let batch = Batch {
        states: one_hot(&[0, 1, 2, 1]),
        actions: vec![0, 1, 0, 0],
        rewards: vec![1.0, 0.0, -1.0, 0.5],
        next_states: one_hot(&[1, 2, 0, 0]),
        terminals: vec![false, false, true, false],
    };
    let gamma = 0.5;
    let dqn = dqn_target(&batch, &online, &target, gamma).map_err(|e| e.to_string())?;
    let ddqn = ddqn_target(&batch, &online, &target, gamma).map_err(|e| e.to_string())?;
    // max_a T(s') versus T(s', argmax_a O(s'))
    let want_dqn = [1.0 + 0.5 * 0.5, 0.0 + 0.5 * 3.0, -1.0, 0.5 + 0.5 * 2.0];
    let want_ddqn = [1.0 + 0.5 * -1.0, 0.0 + 0.5 * 0.0, -1.0, 0.5 + 0.5 * 1.0];
    if dqn != want_dqn || ddqn != want_ddqn {
        return Err(format!("dqn {dqn:?} ddqn {ddqn:?}"));
    }

    let layers = vec![
        LayerSpec::Conv { filters: 3, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::Dense { units: 4 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for i in 0..1000 {
        let net = QNet::new((2, 6, 6), layers.clone(), i).unwrap();
        let n = rng.gen_range(1..=8);
        let rand_t = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(&[n, 2, 6, 6], (0..n * 72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let b = Batch {
            states: rand_t(&mut rng),
            actions: (0..n).map(|_| rng.gen_range(0..4)).collect(),
            rewards: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            next_states: rand_t(&mut rng),
            terminals: (0..n).map(|_| rng.gen_bool(0.2)).collect(),
        };
        let g = rng.gen_range(0.0..1.0);
        let a = dqn_target(&b, &net, &net, g).map_err(|e| e.to_string())?;
        let d = ddqn_target(&b, &net, &net, g).map_err(|e| e.to_string())?;
        if a != d {
            return Err(format!("batch {i}: {a:?} vs {d:?}"));
        }
    }
    Ok("tabular targets exact; ddqn == dqn on 1000 identical-net batches".into())
}

// ---------------------------------------------------------------------------
// 5. saliency definitions

fn paint(frames: &[Frame], x0: usize, y0: usize, w: usize, h: usize, bg: [u8; 3]) -> Vec<Frame> {
    frames
        .iter()
        .map(|f| {
            let mut f = f.clone();
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    f.set(x, y, bg);
                }
            }
            f
        })
        .collect()
}

fn criterion_5(_: &Ctx) -> Outcome {
    let t = Instant::now();
    let env = EnvConfig::new(EnvId::MiniPac, 7, 7);
    let k = env.env_id.num_object_types();
    let bg = env.env_id.background_color();
    let templates = Template::for_env(env.env_id, env.cell_px);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let (mut checked, mut skipped, mut objects) = (0, 0, 0);
    for (si, s) in sample_states(&env, 4, 5).map_err(|e| e.to_string())?.into_iter().enumerate() {
        let os = si % 2 == 0;
        let net = QNet::from_profile(Profile::Tiny, (12 + if os { k } else { 0 }, 56, 56), 9, Head::Plain, si as u64)
            .map_err(|e| e.to_string())?;
        let dets = detect_objects(s.frames.last().unwrap(), &templates).map_err(|e| e.to_string())?;
        let state = ExplainState::new(s.frames.clone(), dets.clone(), os, k).map_err(|e| e.to_string())?;
        let st = state.tensor().map_err(|e| e.to_string())?;
        let x = st.to_tensor();
        let q = net.predict(&x).map_err(|e| e.to_string())?;
        let action = argmax(&q.data);

        // pixel saliency: input gradient against central differences
        let grad = input_gradient(&net, &st, action).map_err(|e| e.to_string())?;
        let map = pixel_saliency(&net, &st, action).map_err(|e| e.to_string())?;
        let pattern = net.forward(&x).map_err(|e| e.to_string())?.1.activation_pattern();
        let n = 56 * 56;
        let mut got = 0;
        while got < 50 {
            let (px, py) = (rng.gen_range(0..56), rng.gen_range(0..56));
            let want_map = (9..12).map(|c| grad.data[c * n + py * 56 + px].abs()).fold(0.0, f64::max);
            if map.at(px, py) != want_map {
                return Err(format!("pixel map at ({px},{py}) is not max |dQ/dx| over the newest frame"));
            }
            let c = rng.gen_range(9..12);
            let idx = c * n + py * 56 + px;
            let eps = 1e-5;
            let mut plus = x.clone();
            plus.data[idx] += eps;
            let mut minus = x.clone();
            minus.data[idx] -= eps;
            let (qp, cp) = net.forward(&plus).map_err(|e| e.to_string())?;
            let (qm, cm) = net.forward(&minus).map_err(|e| e.to_string())?;
            if cp.activation_pattern() != pattern || cm.activation_pattern() != pattern {
                skipped += 1;
                continue;
            }
            let fd = (qp.data[action] - qm.data[action]) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data[idx], fd));
            got += 1;
            checked += 1;
        }

        // object saliency: mask each object by hand and re-evaluate
        let smap = object_saliency(&net, &state, action, bg).map_err(|e| e.to_string())?;
        if smap.entries.len() != dets.len() {
            return Err("object map does not cover every detection".into());
        }
        for (i, d) in dets.iter().enumerate() {
            let frames = paint(&s.frames, d.x, d.y, d.w, d.h, bg);
            let mut rest = dets.clone();
            rest.remove(i);
            let refs: Vec<&Frame> = frames.iter().collect();
            let masked = assemble_state(&refs, &rest, os, k).map_err(|e| e.to_string())?;
            let qm = net.predict(&masked.to_tensor()).map_err(|e| e.to_string())?.data[action];
            let want = q.data[action] - qm;
            if smap.entries[i].1 != want || smap.entries[i].0 != *d {
                return Err(format!("object {i}: w {} vs oracle {want}", smap.entries[i].1));
            }
            objects += 1;
        }
    }
    if worst >= 1e-4 {
        return Err(format!("pixel saliency relative error {worst:.3e}"));
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!(
        "pixel rel err {worst:.2e} over {checked} coords ({skipped} at kinks skipped); {objects} object weights exact ({:.1?})",
        t.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 6. learning sanity on minicross

fn criterion_6(ctx: &Ctx) -> Outcome {
    let mut notes = Vec::new();
    let mut failed = false;
    for seed in [1u64, 2, 3] {
        let t = Instant::now();
        let cfg = RunConfig {
            env: EnvConfig::new(EnvId::MiniCross, 7, 7).with_seed(seed),
            agent: AgentConfig {
                seed,
                eval_plays: 50,
                ..AgentConfig::default()
            },
            total_frames: 200_000,
        };
        let dir = ctx.root.join("minicross").join("dqn").join(seed.to_string());
        let trained = run_cell(&cfg, &dir).map_err(|e| e.to_string())?;
        let random = evaluate(None, &cfg.env, false, 50, 1.0, seed).map_err(|e| e.to_string())?;
        let se = (trained.std_error().powi(2) + random.std_error().powi(2)).sqrt();
        let z = (trained.mean - random.mean) / se;
        let minutes = t.elapsed().as_secs_f64() / 60.0;
        let ok = z >= 5.0 && trained.mean - random.mean >= 5.0 * trained.std_error() && minutes < 30.0;
        failed |= !ok;
        notes.push(format!(
            "seed {seed}: {:.1} vs random {:.1}, {z:.1} SE, {minutes:.1} min",
            trained.mean, random.mean
        ));
    }
    let msg = notes.join("; ");
    if failed {
        Err(msg)
    } else {
        Ok(msg)
    }
}

// ---------------------------------------------------------------------------
// 7. object channels help on minipac

fn criterion_7(ctx: &Ctx) -> Outcome {
    let spec = ctx.minipac_spec();
    let report = run_score_comparison(&spec).map_err(|e| e.to_string())?;
    if report.partial {
        return Err(format!("partial report: {:?}", report.failures));
    }
    let mut wins = 0;
    let mut notes = Vec::new();
    for &seed in &spec.seeds {
        let mean = |a: &str| -> Result<EvalStats, String> {
            let c = report.cell(a, seed).ok_or(format!("missing {a}/{seed}"))?;
            c.eval.clone().ok_or(format!("no eval for {a}/{seed}"))
        };
        let (d, o) = (mean("dqn")?, mean("o-dqn")?);
        if d.scores.len() != 50 || o.scores.len() != 50 {
            return Err("cells must hold 50-play evaluations".into());
        }
        if o.mean >= d.mean {
            wins += 1;
        }
        notes.push(format!("seed {seed}: o-dqn {:.1} dqn {:.1} margin {:+.1}", o.mean, d.mean, o.mean - d.mean));
    }
    let msg = format!("{wins}/3 seeds; {}", notes.join("; "));
    if wins >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------
// 8. good and bad objects

fn neighbours(env: &EnvConfig, c: Cell) -> Vec<Cell> {
    let mut out = Vec::new();
    for (dx, dy) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
        let (x, y) = (c.x as i32 + dx, c.y as i32 + dy);
        if x < 0 || y < 0 || x as usize >= env.grid_w || y as usize >= env.grid_h {
            continue;
        }
        let n = Cell::new(x as usize, y as usize);
        if !env.is_wall(n) {
            out.push(n);
        }
    }
    out
}

/// Cells reachable from `from` within `max` steps without entering `blocked`.
fn reachable(env: &EnvConfig, from: Cell, blocked: Cell, max: usize) -> Vec<Cell> {
    let mut seen = vec![from];
    let mut queue = VecDeque::from([(from, 0)]);
    while let Some((c, d)) = queue.pop_front() {
        if d == max {
            continue;
        }
        for n in neighbours(env, c) {
            if n != blocked && !seen.contains(&n) {
                seen.push(n);
                queue.push_back((n, d + 1));
            }
        }
    }
    seen.remove(0);
    seen
}

/// Agent, an adjacent ghost and one bean at most three steps away by a path
/// that avoids the ghost.
fn crafted_states(env: &EnvConfig, n: usize, seed: u64) -> Vec<EnvState> {
    let open: Vec<Cell> = (0..env.grid_h)
        .flat_map(|y| (0..env.grid_w).map(move |x| Cell::new(x, y)))
        .filter(|&c| !env.is_wall(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let agent = open[rng.gen_range(0..open.len())];
        let near = neighbours(env, agent);
        let ghost = near[rng.gen_range(0..near.len())];
        let beans = reachable(env, agent, ghost, 3);
        if beans.is_empty() {
            continue;
        }
        let bean = beans[rng.gen_range(0..beans.len())];
        out.push(EnvState::custom(env, agent, &[(GHOST, ghost), (BEAN, bean)]).unwrap());
    }
    out
}

fn good_bad_rate(net: &QNet, env: &EnvConfig, states: &[EnvState]) -> Result<usize, String> {
    let k = env.env_id.num_object_types();
    let templates = Template::for_env(env.env_id, env.cell_px);
    let os = net.input_shape().0 == 12 + k;
    let mut hits = 0;
    for s in states {
        let frame = s.render();
        let dets = detect_objects(&frame, &templates).map_err(|e| e.to_string())?;
        let state = ExplainState::new(vec![frame; 4], dets, os, k).map_err(|e| e.to_string())?;
        let q = net.predict(&state.tensor().map_err(|e| e.to_string())?.to_tensor()).map_err(|e| e.to_string())?;
        let map = object_saliency(net, &state, argmax(&q.data), env.env_id.background_color())
            .map_err(|e| e.to_string())?;
        let w_of = |kind: usize| map.entries.iter().find(|(d, _)| d.object_type == kind).map(|e| e.1);
        if let (Some(wb), Some(wg)) = (w_of(BEAN), w_of(GHOST)) {
            if wb > 0.0 && wg < 0.0 {
                hits += 1;
            }
        }
    }
    Ok(hits)
}

fn criterion_8(ctx: &Ctx) -> Outcome {
    let env = EnvConfig::new(EnvId::MiniPac, 7, 7);
    let states = crafted_states(&env, 50, 8);
    let net = ctx.minipac_odqn()?;
    let hits = good_bad_rate(&net, &env, &states)?;
    let msg = format!("{hits}/50 states with w(bean) > 0 and w(ghost) < 0 (seed-1 O-DQN)");
    if hits >= 40 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------
// 9. reproducibility

fn odrl(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_odrl"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("odrl {args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn train_args(out: &Path) -> Vec<String> {
    let mut v: Vec<String> = ["train", "--seed", "9", "--out"].map(String::from).to_vec();
    v.push(out.to_str().unwrap().to_string());
    for kv in [
        "env=minipac",
        "object_sensitive=true",
        "total_frames=6000",
        "learning_start=1000",
        "eval_every=3000",
        "eval_plays=5",
    ] {
        v.push("--set".into());
        v.push(kv.into());
    }
    v
}

fn criterion_9(ctx: &Ctx) -> Outcome {
    let dirs = [ctx.root.join("repro").join("a"), ctx.root.join("repro").join("b")];
    for d in &dirs {
        let args = train_args(d);
        odrl(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
    }
    for f in ["log.csv", "checkpoint.bin", "eval.csv", "config.txt"] {
        let a = fs::read(dirs[0].join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(dirs[1].join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    let net = load_checkpoint(&dirs[0].join("checkpoint.bin")).map_err(|e| e.to_string())?;
    if net.step == 0 {
        return Err("the run made no updates".into());
    }
    Ok(format!("log, checkpoint, eval and config byte-identical after {} updates", net.step))
}

// ---------------------------------------------------------------------------
// 10. image formats

/// Strict binary PNM header: magic, width, height, 255, one whitespace byte.
fn strict_header(bytes: &[u8], magic: &[u8; 2], w: usize, h: usize, ch: usize) -> Result<(), String> {
    if &bytes[..2] != magic {
        return Err("bad magic".into());
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    for _ in 0..3 {
        if !bytes[pos].is_ascii_whitespace() {
            return Err("missing separator".into());
        }
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let s = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields.push(s.parse::<usize>().map_err(|_| "bad header number".to_string())?);
    }
    if fields != [w, h, 255] {
        return Err(format!("header {fields:?}, expected [{w}, {h}, 255]"));
    }
    if !bytes[pos].is_ascii_whitespace() {
        return Err("no whitespace after maxval".into());
    }
    if bytes.len() - pos - 1 != w * h * ch {
        return Err(format!("payload {} bytes, expected {}", bytes.len() - pos - 1, w * h * ch));
    }
    Ok(())
}

fn criterion_10(ctx: &Ctx) -> Outcome {
    let dir = ctx.root.join("formats");
    let ckpt = ctx.root.join("formats-net");
    odrl(&[
        "train",
        "--set",
        "env=minipac",
        "--set",
        "total_frames=0",
        "--set",
        "eval_plays=1",
        "--out",
        ckpt.to_str().unwrap(),
    ])?;
    odrl(&[
        "explain",
        "--checkpoint",
        ckpt.join("checkpoint.bin").to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ])?;
    let mut checked = 0;
    for name in ["state.ppm", "object.ppm"] {
        let bytes = fs::read(dir.join(name)).map_err(|e| e.to_string())?;
        let f = Frame::read_ppm(dir.join(name)).map_err(|e| e.to_string())?;
        strict_header(&bytes, b"P6", f.width, f.height, 3).map_err(|e| format!("{name}: {e}"))?;
        if (f.width, f.height) != (56, 56) || f.to_ppm() != bytes {
            return Err(format!("{name} does not round-trip"));
        }
        checked += 1;
    }
    let bytes = fs::read(dir.join("pixel.pgm")).map_err(|e| e.to_string())?;
    let g = GrayImage::read_pgm(dir.join("pixel.pgm")).map_err(|e| e.to_string())?;
    strict_header(&bytes, b"P5", g.width, g.height, 1).map_err(|e| format!("pixel.pgm: {e}"))?;
    if (g.width, g.height) != (56, 56) || g.to_pgm() != bytes {
        return Err("pixel.pgm does not round-trip".into());
    }
    checked += 1;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let f = Frame::from_pixels(h, w, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        let bytes = f.to_ppm();
        strict_header(&bytes, b"P6", w, h, 3)?;
        if Frame::from_ppm(&bytes).map_err(|e| e.to_string())? != f {
            return Err("random PPM does not round-trip".into());
        }
        let g = GrayImage::from_pixels(h, w, (0..w * h).map(|_| rng.gen()).collect()).unwrap();
        let bytes = g.to_pgm();
        strict_header(&bytes, b"P5", w, h, 1)?;
        if GrayImage::from_pgm(&bytes).map_err(|e| e.to_string())? != g {
            return Err("random PGM does not round-trip".into());
        }
        checked += 2;
    }
    debug_assert!(g.channels() == 1);
    Ok(format!("{checked} images pass the strict header check and round-trip"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ODRL_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    // partial runs keep earlier training artifacts around
    if only.is_none() {
        let _ = fs::remove_dir_all(&root);
    }
    fs::create_dir_all(&root).unwrap();
    let ctx = Ctx { root };
    let criteria: [(&str, fn(&Ctx) -> Outcome); 10] = [
        ("template matching oracle", criterion_1),
        ("detection quality", criterion_2),
        ("gradient fidelity", criterion_3),
        ("Bellman targets", criterion_4),
        ("saliency definitions", criterion_5),
        ("learning sanity (minicross)", criterion_6),
        ("object-sensitivity direction (minipac)", criterion_7),
        ("good/bad object signs", criterion_8),
        ("reproducibility", criterion_9),
        ("artifact formats", criterion_10),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&ctx)))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        match outcome {
            Ok(msg) => println!("criterion {n:>2} PASS  {name}: {msg}"),
            Err(msg) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {msg}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
