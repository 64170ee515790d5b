//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fail.

#![allow(clippy::needless_range_loop)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refbox::environment::{reset, step, EnvParams, GroundingTask};
use refbox::evaluator::{accuracy, evaluate, random_rollout};
use refbox::geometry::{apply_action, Action, ActionParams, BoundingBox, ImageSize};
use refbox::network::{encode_checkpoint, segment_loss, LossConfig, LstmState, NetworkDims, NetworkParams, Segment, TrainingTuple};
use refbox::observation::{ContextMode, MemoryProvider, StepInputs};
use refbox::refertoy::{generate, scene_provider, tasks, Difficulty, ToySpec};
use refbox::reward::{progress_reward, shaping_term, terminal_value, RewardParams};
use refbox::trainer::{n_step_returns, train, TrainConfig};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, want {want}"))
    }
}

fn bx(c: [f64; 4]) -> BoundingBox {
    BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

// ---------------------------------------------------------------------------

fn formula_suite() -> Check {
    let params = ActionParams::default();
    let img = ImageSize::new(600, 600).unwrap();
    let mut n = 0;
    let mut action = |from: [f64; 4], a: Action, want: [f64; 4]| -> Result<(), String> {
        let got = apply_action(&bx(from), a, img, &params).map_err(|e| e.to_string())?.to_array();
        for k in 0..4 {
            close(&format!("{a} from {from:?}"), got[k], want[k], 1e-9)?;
        }
        n += 1;
        Ok(())
    };
    // the paper's UP example
    action([0.0, 100.0, 200.0, 300.0], Action::MoveUp, [0.0, 60.0, 200.0, 260.0])?;
    let b = [100.0, 100.0, 200.0, 200.0];
    action(b, Action::MoveLeft, [80.0, 100.0, 180.0, 200.0])?;
    action(b, Action::MoveRight, [120.0, 100.0, 220.0, 200.0])?;
    action(b, Action::MoveUp, [100.0, 80.0, 200.0, 180.0])?;
    action(b, Action::MoveDown, [100.0, 120.0, 200.0, 220.0])?;
    action(b, Action::Wider, [95.0, 100.0, 205.0, 200.0])?;
    action(b, Action::Narrower, [105.0, 100.0, 195.0, 200.0])?;
    action(b, Action::Taller, [100.0, 95.0, 200.0, 205.0])?;
    action(b, Action::Shorter, [100.0, 105.0, 200.0, 195.0])?;
    // non-square box: moves scale with the matching side
    let r = [50.0, 200.0, 350.0, 250.0];
    action(r, Action::MoveRight, [110.0, 200.0, 410.0, 250.0])?;
    action(r, Action::MoveDown, [50.0, 210.0, 350.0, 260.0])?;
    action(r, Action::Wider, [35.0, 200.0, 365.0, 250.0])?;
    action(r, Action::Shorter, [50.0, 202.5, 350.0, 247.5])?;
    // clipping at the border
    action([0.0, 0.0, 100.0, 100.0], Action::MoveLeft, [0.0, 0.0, 80.0, 100.0])?;

    let rp = RewardParams::default();
    let step_r = |prev: f64, next: f64, best: f64| progress_reward(next, best, &rp) + shaping_term(prev, next, rp.gamma);
    close("0.40 -> 0.50", step_r(0.4, 0.5, 0.4), 0.595, 1e-9)?;
    close("0.40 -> 0.30", step_r(0.4, 0.3, 0.4), -0.153, 1e-9)?;
    close("0.0 -> 0.0", step_r(0.0, 0.0, 0.0), -0.05, 1e-9)?;
    close("trigger 0.6", terminal_value(0.6, &rp), 1.0, 0.0)?;
    close("trigger 0.3", terminal_value(0.3, &rp), -1.0, 0.0)?;
    close("trigger 0.5", terminal_value(0.5, &rp), -1.0, 0.0)?;

    // the same examples through the environment
    let env = EnvParams::default();
    let task = |gt: [f64; 4]| {
        Arc::new(GroundingTask {
            task_id: "f".into(),
            image_size: img,
            ground_truth: bx(gt),
            query_tokens: vec!["red".into()],
            feature_key: "f".into(),
        })
    };
    let s0 = reset(task([0.0, 0.0, 300.0, 600.0]));
    close("initial best", s0.best_iou_so_far(), 0.5, 1e-12)?;
    let (tr, _) = step(&s0, Action::Trigger, &env).map_err(|e| e.to_string())?;
    close("env trigger at 0.5", tr.reward, -1.0, 0.0)?;
    // full box vs gt of area 0.6 * image
    let (tr, _) = step(&reset(task([0.0, 0.0, 360.0, 600.0])), Action::Trigger, &env).map_err(|e| e.to_string())?;
    close("env trigger at 0.6", tr.reward, 1.0, 0.0)?;
    // MoveUp from full image: [0,0,600,480]; gt chosen so IoU goes 0.4 -> 0.5
    // gt height h, width w: IoU0 = w h / 360000 = 0.4 and IoU1 = w h / (288000) = 0.5
    let s = reset(task([0.0, 0.0, 400.0, 360.0]));
    close("IoU before", s.iou(), 0.4, 1e-12)?;
    let (tr, next) = step(&s, Action::MoveUp, &env).map_err(|e| e.to_string())?;
    close("IoU after", next.iou(), 0.5, 1e-12)?;
    close("env MoveUp 0.40 -> 0.50", tr.reward, 0.595, 1e-9)?;
    Ok(format!("{n} action updates and the reward examples match within 1e-9"))
}

fn shaping_telescopes() -> Check {
    let env = EnvParams::default();
    let gamma = env.reward.gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for ep in 0..1000 {
        let w = rng.gen_range(40..800);
        let h = rng.gen_range(40..800);
        let x0 = rng.gen_range(0.0..w as f64 - 20.0);
        let y0 = rng.gen_range(0.0..h as f64 - 20.0);
        let gt = [x0, y0, rng.gen_range(x0 + 10.0..w as f64), rng.gen_range(y0 + 10.0..h as f64)];
        let task = Arc::new(GroundingTask {
            task_id: format!("tele-{ep}"),
            image_size: ImageSize::new(w, h).unwrap(),
            ground_truth: bx(gt),
            query_tokens: vec!["x".into()],
            feature_key: "x".into(),
        });
        let len = rng.gen_range(1..=env.t_max);
        let mut state = reset(task);
        let phi0 = oracle_iou(state.bbox().to_array(), gt);
        let mut best = phi0;
        let mut prev_phi = phi0;
        let mut sum = 0.0;
        for t in 0..len {
            let a = Action::ALL[rng.gen_range(0..8)];
            let (tr, next) = step(&state, a, &env).map_err(|e| e.to_string())?;
            let phi = oracle_iou(next.bbox().to_array(), gt);
            let r_prime = if phi > best { phi } else { -env.reward.p };
            best = best.max(phi);
            let f = tr.reward - r_prime;
            close("shaping term", f, -prev_phi + gamma * phi, 1e-12)?;
            sum += gamma.powi(t as i32) * f;
            prev_phi = phi;
            state = next;
        }
        let want = gamma.powi(len as i32) * prev_phi - phi0;
        worst = worst.max((sum - want).abs());
        close(&format!("episode {ep}"), sum, want, 1e-9)?;
    }
    Ok(format!("1000 episodes, max deviation {worst:.2e}"))
}

fn random_params(dims: NetworkDims, mode: ContextMode, seed: u64) -> NetworkParams {
    let mut p = NetworkParams::init(dims, mode, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for v in p.as_mut_slice() {
        *v += rng.gen_range(-0.2..0.2);
    }
    p
}

fn random_segment(dims: NetworkDims, len: usize, rng: &mut ChaCha8Rng) -> Segment {
    let query: Arc<[f64]> = (0..dims.query_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tuples = (0..len)
        .map(|_| TrainingTuple {
            inputs: StepInputs {
                query: Arc::clone(&query),
                visual: (0..dims.visual_dim).map(|_| rng.gen_range(0.05..1.0)).collect(),
                extra: (0..dims.extra_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            },
            action: Action::ALL[rng.gen_range(0..9)],
            target: rng.gen_range(-1.5..1.5),
        })
        .collect();
    Segment {
        initial: LstmState {
            h: (0..dims.lstm).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            c: (0..dims.lstm).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        },
        tuples,
    }
}

fn gradient_gate() -> Check {
    let h = 1e-5;
    let loss = LossConfig::new(1e-2);
    let modes = [ContextMode::Full, ContextMode::NoSpatial, ContextMode::NoContext];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let networks = 20;
    for k in 0..networks {
        let dims = NetworkDims {
            query_dim: rng.gen_range(2..6),
            visual_dim: 2 * rng.gen_range(2..5),
            extra_dim: rng.gen_range(3..8),
            fc1: rng.gen_range(3..9),
            fc2: rng.gen_range(3..9),
            lstm: rng.gen_range(2..6),
        };
        let params = random_params(dims, modes[k % 3], 100 + k as u64);
        let seg = random_segment(dims, rng.gen_range(1..=5), &mut rng);
        let weight = 1.0 / seg.tuples.len() as f64;
        let (grads, _) = params.compute_update(std::slice::from_ref(&seg), &loss);
        let values = params.segment_values(&seg);
        let adv: Vec<f64> = seg.tuples.iter().zip(&values).map(|(t, v)| t.target - v).collect();
        let mut p = params.clone();
        for i in 0..params.len() {
            let orig = p.as_slice()[i];
            p.as_mut_slice()[i] = orig + h;
            let up = segment_loss(&p, &seg, &loss, &adv, weight);
            p.as_mut_slice()[i] = orig - h;
            let down = segment_loss(&p, &seg, &loss, &adv, weight);
            p.as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.as_slice()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    if worst < 1e-4 {
        Ok(format!("{networks} networks, max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e}"))
    }
}

fn return_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut plain = 0;
    for ep in 0..1000 {
        let len = rng.gen_range(1..120);
        let n = rng.gen_range(1..9);
        let gamma = if ep % 10 == 0 { 1.0 } else { rng.gen_range(0.5..1.0) };
        let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.2..3.0)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let got = n_step_returns(&rewards, &values, gamma, n);
        let last = len - 1;
        for t in 0..len {
            let t_m = n * (t / n + 1);
            let mut want = 0.0;
            for k in t..t_m.min(len) {
                want += gamma.powi((k - t) as i32) * rewards[k];
            }
            if t_m <= last {
                want += gamma.powi((t_m - t) as i32) * values[t_m];
            } else {
                // no bootstrap: plain discounted sum to termination
                let mc: f64 = (t..len).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
                close(&format!("episode {ep} step {t} discounted sum"), got[t], mc, 1e-12 * mc.abs().max(1.0))?;
                plain += 1;
            }
            close(&format!("episode {ep} step {t}"), got[t], want, 1e-12 * want.abs().max(1.0))?;
        }
    }
    Ok(format!("1000 episodes, {plain} unbootstrapped steps checked against the plain sum"))
}

// ---------------------------------------------------------------------------

struct Split {
    train: Vec<Arc<GroundingTask>>,
    test: Vec<Arc<GroundingTask>>,
    provider: MemoryProvider,
}

fn split(difficulty: Difficulty, seed: u64) -> Split {
    let train_scenes = generate(&ToySpec::new(difficulty, 1000 + seed, 2000)).unwrap();
    let test_scenes = generate(&ToySpec::new(difficulty, 9000 + seed, 500)).unwrap();
    let mut all = train_scenes.clone();
    all.extend(test_scenes.iter().cloned());
    Split {
        train: tasks(&train_scenes),
        test: tasks(&test_scenes),
        provider: scene_provider(&all).unwrap(),
    }
}

fn random_baseline(tasks: &[Arc<GroundingTask>], env: &EnvParams) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let results: Vec<_> = tasks.iter().map(|t| random_rollout(t, env, &mut rng).unwrap()).collect();
    accuracy(&results).unwrap()
}

fn trained_accuracy(data: &Split, config: &TrainConfig) -> f64 {
    let out = train(config, &data.provider, &data.train).unwrap();
    let results = evaluate(&out.params, &data.test, &data.provider, &config.env, 1).unwrap();
    accuracy(&results).unwrap()
}

fn gate_config(steps: usize, seed: u64, mode: ContextMode) -> TrainConfig {
    TrainConfig {
        actor_count: 1,
        total_steps: steps,
        seed,
        context_mode: mode,
        ..TrainConfig::default()
    }
}

fn determinism() -> Check {
    let data = split(Difficulty::Easy, 3);
    let config = gate_config(20_000, 11, ContextMode::Full);
    let a = train(&config, &data.provider, &data.train).map_err(|e| e.to_string())?;
    let b = train(&config, &data.provider, &data.train).map_err(|e| e.to_string())?;
    let (ca, cb) = (encode_checkpoint(&a.params), encode_checkpoint(&b.params));
    if ca == cb {
        Ok(format!("two {}-step runs, {} checkpoint bytes identical", a.env_steps, ca.len()))
    } else {
        Err("checkpoints differ".into())
    }
}

fn learning_gate_easy() -> Check {
    let data = split(Difficulty::Easy, 1);
    let env = EnvParams::default();
    let baseline = random_baseline(&data.test, &env);
    let acc = trained_accuracy(&data, &gate_config(200_000, 1, ContextMode::Full));
    let msg = format!("accuracy {:.1}% after 200k steps (need >= 85%), random baseline {:.1}%", 100.0 * acc, 100.0 * baseline);
    if acc >= 0.85 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const HARD_STEPS: usize = 1_000_000;

/// Held-out accuracy on hard scenes, memoized so the gate and the ablation
/// share the full-context run.
fn hard_accuracy(seed: u64, mode: ContextMode) -> f64 {
    static CACHE: Mutex<Vec<(u64, ContextMode, f64)>> = Mutex::new(Vec::new());
    if let Some(hit) = CACHE.lock().unwrap().iter().find(|c| c.0 == seed && c.1 == mode) {
        return hit.2;
    }
    let acc = trained_accuracy(&split(Difficulty::Hard, seed), &gate_config(HARD_STEPS, seed, mode));
    CACHE.lock().unwrap().push((seed, mode, acc));
    acc
}

fn learning_gate_hard() -> Check {
    let data = split(Difficulty::Hard, 1);
    let baseline = random_baseline(&data.test, &EnvParams::default());
    let acc = hard_accuracy(1, ContextMode::Full);
    let msg = format!(
        "accuracy {:.1}% after 1M steps, random baseline {:.1}% (need +30 points)",
        100.0 * acc,
        100.0 * baseline
    );
    if acc >= baseline + 0.30 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ablation_order() -> Check {
    let modes = [ContextMode::Full, ContextMode::NoSpatial, ContextMode::NoContext];
    let mut means = [0.0; 3];
    for seed in 1..=3 {
        for (i, mode) in modes.iter().enumerate() {
            means[i] += hard_accuracy(seed, *mode) / 3.0;
        }
    }
    let msg = format!(
        "hard, 3 seeds x 1M steps: full {:.1}%, no-spatial {:.1}%, no-context {:.1}%",
        100.0 * means[0],
        100.0 * means[1],
        100.0 * means[2]
    );
    if means[0] >= means[1] && means[1] >= means[2] {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("formula suite", formula_suite),
        ("shaping telescoping", shaping_telescopes),
        ("gradient gate", gradient_gate),
        ("return oracle", return_oracle),
        ("determinism", determinism),
        ("learning gate (easy)", learning_gate_easy),
        ("learning gate (hard)", learning_gate_hard),
        ("ablation ordering", ablation_order),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
